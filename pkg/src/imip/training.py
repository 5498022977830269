"""Self-supervised training of the detector from image pairs with known correspondences.

Per pair, each image gives two patch batches: patches at its own interest
points and patches at the true correspondences of the other image's points.
The network maps both to n x n response matrices (row = patch, column =
channel), on which three losses act:

* inlier reinforcement on the diagonal of the interest-point matrix,
* redundancy suppression on the off-diagonal of inlier rows,
* correspondence reinforcement on the diagonal of the correspondence matrix
  for outlier channels.

Everything is applied symmetrically to both images and summed.
"""
import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .correspondence import MatchLabel, label_matches
from .extraction import default_margin, extract_points, match_by_channel
from .network import NetworkParams, backward_patches, forward_full, forward_patches
from .numerics import AdamState, adam_step

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "L_inl", "L_red", "L_cor", "inlier_count", "val_inlier_mean"]


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 100_000
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    val_every: int = 1000
    threshold_px: float = 3.0
    margin: int = None  # defaults to half the receptive field
    log_clamp: float = 1e-6
    w_inl: float = 1.0
    w_red: float = 1.0
    w_cor: float = 1.0
    seed: int = 0


@dataclass
class ResponseMatrix:
    """``p[i, j]``: response of channel j to patch i. Rows with ``valid[i]`` False carry no patch."""
    p: np.ndarray
    valid: np.ndarray


@dataclass
class LossReport:
    L_inl: float = 0.0
    L_red: float = 0.0
    L_cor: float = 0.0
    n_inlier: int = 0
    n_outlier: int = 0
    n_unassigned: int = 0
    skipped: bool = False

    @property
    def total(self):
        return self.L_inl + self.L_red + self.L_cor


def gather_patch(image, center, r):
    """r x r crop centred on an (x, y) pixel, or None if it does not fit."""
    if r % 2 == 0:
        raise ValueError("patch size must be odd")
    c = np.asarray(center, dtype=np.float64)
    if not np.all(np.isfinite(c)):
        return None
    x, y = (int(v) for v in np.rint(c))
    h = r // 2
    H, W = image.shape
    if x - h < 0 or y - h < 0 or x + h >= W or y + h >= H:
        return None
    return image[y - h:y + h + 1, x - h:x + h + 1]


def gather_batch(image, centers, r, rows=None):
    """Stack patches for the selected rows; returns ``(tensor [m, r, r, 1], row_indices)``."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    rows = range(len(centers)) if rows is None else rows
    patches, kept = [], []
    for i in rows:
        p = gather_patch(image, centers[i], r)
        if p is not None:
            patches.append(p)
            kept.append(i)
    if not patches:
        return np.zeros((0, r, r, 1), dtype=image.dtype), np.zeros(0, dtype=np.int64)
    return np.stack(patches)[..., None], np.asarray(kept, dtype=np.int64)


def _clamped_log(x, eps):
    xc = np.clip(x, eps, 1.0 - eps)
    inside = (x >= eps) & (x <= 1.0 - eps)
    return np.log(xc), inside / xc


def loss_inlier(p, labels, valid=None, eps=1e-6):
    """Cross-entropy on the diagonal: push inlier maxima up and outlier maxima down."""
    p = np.asarray(p)
    n = p.shape[0]
    valid = np.ones(n, dtype=bool) if valid is None else np.asarray(valid)
    grad = np.zeros_like(p)
    d = np.diagonal(p).copy()
    inl = valid & (labels == MatchLabel.INLIER)
    out = valid & (labels == MatchLabel.OUTLIER)
    loss = 0.0
    if inl.any():
        lg, dlg = _clamped_log(d[inl], eps)
        loss -= lg.sum()
        grad[inl, inl] = -dlg
    if out.any():
        lg, dlg = _clamped_log(1.0 - d[out], eps)
        loss -= lg.sum()
        grad[out, out] = dlg
    return float(loss), grad


def loss_redundancy(p, labels, valid=None, eps=1e-6):
    """Suppress every other channel on an inlier's patch."""
    p = np.asarray(p)
    n = p.shape[0]
    valid = np.ones(n, dtype=bool) if valid is None else np.asarray(valid)
    grad = np.zeros_like(p)
    rows = valid & (labels == MatchLabel.INLIER)
    if not rows.any():
        return 0.0, grad
    mask = np.zeros(p.shape, dtype=bool)
    mask[rows] = True
    mask[np.arange(n), np.arange(n)] = False
    lg, dlg = _clamped_log(1.0 - p[mask], eps)
    grad[mask] = dlg
    return float(-lg.sum()), grad


def loss_correspondence(p_prime, labels, valid=None, eps=1e-6):
    """Promote each outlier channel at the true correspondence of the other image's point."""
    p_prime = np.asarray(p_prime)
    n = p_prime.shape[0]
    valid = np.ones(n, dtype=bool) if valid is None else np.asarray(valid)
    grad = np.zeros_like(p_prime)
    rows = valid & (labels == MatchLabel.OUTLIER)
    if not rows.any():
        return 0.0, grad
    lg, dlg = _clamped_log(np.diagonal(p_prime)[rows], eps)
    grad[rows, rows] = -dlg
    return float(-lg.sum()), grad


def _side_batches(image, own_points, corr_points, labels, r):
    """Interest-point rows (inlier/outlier only) and correspondence rows (outliers only)."""
    n = len(labels)
    active = np.flatnonzero(labels != MatchLabel.UNASSIGNED)
    ip, ip_rows = gather_batch(image, own_points, r, active)
    outl = np.flatnonzero(labels == MatchLabel.OUTLIER)
    cp, cp_rows = gather_batch(image, corr_points, r, outl)
    return n, ip, ip_rows, cp, cp_rows


def pair_loss(params: NetworkParams, img_a, img_b, labeled, config: TrainConfig, with_grad=True):
    """Total loss over both images for fixed matches and labels.

    Returns ``(LossReport, grads)``, with grads as a flat list matching
    ``params.arrays()`` (None when ``with_grad`` is False).
    """
    r = params.receptive_field
    n = params.config.n_channels
    labels = np.asarray(labeled.labels)
    eps = config.log_clamp
    sides = [
        (img_a, labeled.matches.a.xy, labeled.corr_in_a),
        (img_b, labeled.matches.b.xy, labeled.corr_in_b),
    ]
    report = LossReport(
        n_inlier=labeled.n_inliers, n_outlier=labeled.n_outliers, n_unassigned=labeled.n_unassigned,
    )
    grads = [np.zeros_like(a) for a in params.arrays()] if with_grad else None
    gathered = 0
    for image, own, corr in sides:
        image = np.asarray(image, dtype=params.dtype)
        _, ip, ip_rows, cp, cp_rows = _side_batches(image, own, corr, labels, r)
        m_ip = len(ip_rows)
        if m_ip + len(cp_rows) == 0:
            continue
        gathered += m_ip + len(cp_rows)
        batch = np.concatenate([ip, cp])
        if with_grad:
            out, cache = forward_patches(batch, params, keep_cache=True)
        else:
            out = forward_patches(batch, params)
        resp = out[:, 0, 0, :]

        P = np.full((n, n), 0.5, dtype=resp.dtype)
        valid = np.zeros(n, dtype=bool)
        P[ip_rows] = resp[:m_ip]
        valid[ip_rows] = True
        Pc = np.full((n, n), 0.5, dtype=resp.dtype)
        valid_c = np.zeros(n, dtype=bool)
        Pc[cp_rows] = resp[m_ip:]
        valid_c[cp_rows] = True

        li, gi = loss_inlier(P, labels, valid, eps)
        lr_, gr = loss_redundancy(P, labels, valid, eps)
        lc, gc = loss_correspondence(Pc, labels, valid_c, eps)
        report.L_inl += config.w_inl * li
        report.L_red += config.w_red * lr_
        report.L_cor += config.w_cor * lc
        if with_grad:
            g_out = np.zeros_like(resp)
            g_out[:m_ip] = (config.w_inl * gi + config.w_red * gr)[ip_rows]
            g_out[m_ip:] = (config.w_cor * gc)[cp_rows]
            side_grads = backward_patches(cache, params, g_out[:, None, None, :])
            for k, g in enumerate(side_grads):
                grads[k] += g
    if gathered == 0:
        report.skipped = True
    return report, grads


def detect_and_label(params: NetworkParams, img_a, img_b, psi, config: TrainConfig):
    margin = config.margin if config.margin is not None else default_margin(params.receptive_field)
    pa = extract_points(forward_full(img_a, params), margin)
    pb = extract_points(forward_full(img_b, params), margin)
    return label_matches(match_by_channel(pa, pb), psi, config.threshold_px)


def new_adam_state(params: NetworkParams, config: TrainConfig):
    return AdamState.zeros_like(params.arrays(), lr=config.lr, beta1=config.beta1,
                                beta2=config.beta2, epsilon=config.epsilon)


def train_step(img_a, img_b, psi, params: NetworkParams, adam_state: AdamState, config: TrainConfig):
    """Detect, label, build the four patch batches, and take one Adam step.

    Returns ``(params, adam_state, LossReport, LabeledMatches)``. If no
    patch can be gathered in either image the parameters are returned
    unchanged and the report is flagged as skipped.
    """
    r = params.receptive_field
    for im in (img_a, img_b):
        if min(np.shape(im)) < r:
            raise ValueError(f"image {np.shape(im)} smaller than the receptive field {r}")
    labeled = detect_and_label(params, img_a, img_b, psi, config)
    report, grads = pair_loss(params, img_a, img_b, labeled, config)
    if not math.isfinite(report.total):
        raise TrainingDiverged(f"non-finite loss {report}")
    if report.skipped:
        log.warning("no gatherable patches in this pair; step skipped")
        return params, adam_state, report, labeled
    new_arrays, adam_state = adam_step(params.arrays(), grads, adam_state, params.array_names())
    return params.with_arrays(new_arrays), adam_state, report, labeled


@dataclass
class ValidationSummary:
    inlier_counts: np.ndarray
    matching_scores: np.ndarray

    @property
    def mean_inliers(self):
        return float(np.mean(self.inlier_counts))

    @property
    def median_inliers(self):
        return float(np.median(self.inlier_counts))


def validate(params: NetworkParams, pairs, config: TrainConfig = None):
    """Inlier statistics on held-out ``(img_a, img_b, psi)`` pairs; parameters are untouched."""
    if not pairs:
        raise ValueError("validation needs at least one pair")
    config = config or TrainConfig()
    n = params.config.n_channels
    counts = []
    for img_a, img_b, psi in pairs:
        counts.append(detect_and_label(params, img_a, img_b, psi, config).n_inliers)
    counts = np.asarray(counts)
    return ValidationSummary(counts, counts / n)


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for row in self.rows:
                w.writerow(["" if row.get(c) is None else _fmt(row.get(c)) for c in LOG_COLUMNS])


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6f}"


def _sample_at(pair_source, step):
    if callable(pair_source):
        return pair_source(step)
    return pair_source[step % len(pair_source)]


def train(pair_source, params: NetworkParams, config: TrainConfig, val_pairs=None, callback=None):
    """Run ``config.iterations`` training steps.

    ``pair_source`` is either a sequence of ``(img_a, img_b, psi)`` samples,
    cycled in order, or a callable mapping the step index to a sample.
    Returns the parameters with the best mean validation inlier count (the
    final parameters when no validation pairs are given) and the log.
    """
    state = new_adam_state(params, config)
    tlog = TrainingLog()
    best_params, best_score = params, -np.inf
    if val_pairs:
        best_score = validate(params, val_pairs, config).mean_inliers
    for step in range(config.iterations):
        img_a, img_b, psi = _sample_at(pair_source, step)
        params, state, report, labeled = train_step(img_a, img_b, psi, params, state, config)
        val_mean = None
        if val_pairs and (step + 1) % config.val_every == 0:
            val_mean = validate(params, val_pairs, config).mean_inliers
            if val_mean > best_score:
                best_score, best_params = val_mean, params
        tlog.append(step=step, L_inl=report.L_inl, L_red=report.L_red, L_cor=report.L_cor,
                    inlier_count=labeled.n_inliers, val_inlier_mean=val_mean)
        if callback is not None:
            callback(step, params, report, labeled)
    if not val_pairs:
        best_params = params
    return best_params, tlog


def config_with(config: TrainConfig, **changes):
    return replace(config, **changes)
