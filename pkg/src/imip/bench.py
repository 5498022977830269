"""Evaluation harness: datasets, pair sampling, pose evaluation, summaries and reports."""
import csv
import glob
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .compression import representation_size_bytes
from .correspondence import HomographyCorrespondence, LabeledMatches, MatchLabel, label_matches, load_homography, load_poses
from .extraction import default_margin, extract_points, match_by_channel
from .geometry import (
    EUROC_THRESHOLDS,
    KITTI_THRESHOLDS,
    CameraIntrinsics,
    PnPResult,
    ransac_p3p,
    rotation_geodesic_deg,
    stereo_match_by_channel,
    translation_error_m,
)
from .klt import EVAL_OVERLAP, KltConfig, cached_track_sequence, qualifying_frames
from .network import NetworkParams, forward_full

log = logging.getLogger(__name__)

CSV_HEADER = ["name", "dR", "dt", "matching score", "eR", "et"]
ACCURACY_PRESETS = {"kitti": KITTI_THRESHOLDS, "euroc": EUROC_THRESHOLDS}


class DatasetError(ValueError):
    pass


# -- records -----------------------------------------------------------------

@dataclass
class EvalRecord:
    name: str
    dR_deg: float
    dt_m: float
    matching_score: float
    eR_deg: float
    et_m: float
    inlier_count: int
    responses: np.ndarray = None      # per channel, in the first image
    inlier_flags: np.ndarray = None   # per channel

    @property
    def failed(self):
        return not (math.isfinite(self.eR_deg) and math.isfinite(self.et_m))

    def csv_row(self):
        return [self.name] + [_fmt(v) for v in (self.dR_deg, self.dt_m, self.matching_score, self.eR_deg, self.et_m)]


def _fmt(v):
    v = float(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if math.isnan(v):
        return "nan"
    return f"{v:.6f}"


def records_to_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow(r.csv_row())
    return buf.getvalue()


def write_results_csv(path, records):
    Path(path).write_text(records_to_csv(records))


def read_results_csv(path):
    """Records from a results CSV (inlier counts are not part of the format and come back as -1)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != CSV_HEADER:
        raise DatasetError(f"{path}: header is not {','.join(CSV_HEADER)}")
    out = []
    for row in rows[1:]:
        if len(row) != len(CSV_HEADER):
            raise DatasetError(f"{path}: row with {len(row)} fields")
        name, dR, dt, ms, eR, et = row
        out.append(EvalRecord(name, float(dR), float(dt), float(ms), float(eR), float(et), -1))
    return out


def matching_score(result, n):
    """Fraction of the n channel matches that are inliers.

    ``result`` is an inlier count, a LabeledMatches (ground-truth labels) or a PnPResult
    (RANSAC inliers, as used on pose datasets).
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if isinstance(result, LabeledMatches):
        count = result.n_inliers
    elif isinstance(result, PnPResult):
        count = result.inlier_count
    else:
        count = int(result)
    return count / n


# -- datasets ------------------------------------------------------------------

def load_image(path):
    """Grayscale image scaled to [0, 1]. ``.npy`` files are taken as already scaled."""
    path = Path(path)
    if path.suffix == ".npy":
        return np.asarray(np.load(path), dtype=np.float64)
    from PIL import Image
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            a = np.asarray(im, dtype=np.float64)
            return a / (65535.0 if a.max() > 255 or im.mode.startswith("I;16") else 255.0)
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def save_image(path, image):
    """``.npy`` keeps floats; anything else is written as a 16-bit grayscale PNG."""
    path = Path(path)
    img = np.asarray(image, dtype=np.float64)
    if path.suffix == ".npy":
        np.save(path, img)
        return
    from PIL import Image
    Image.fromarray(np.rint(np.clip(img, 0, 1) * 65535).astype(np.uint16)).save(path)


def _resolve_list(spec, root):
    if isinstance(spec, str):
        files = sorted(glob.glob(str(root / spec)))
        if not files:
            raise DatasetError(f"pattern {spec!r} matched no files under {root}")
        return [Path(f) for f in files]
    return [root / s for s in spec]


@dataclass
class SequenceStereo:
    name: str
    left: list
    right: list
    poses: list            # world-from-left-camera, one per frame
    K: CameraIntrinsics
    baseline: float
    pairs: list = None     # optional fixed (a, b) list
    _cache: dict = field(default_factory=dict, repr=False)

    kind = "sequence_stereo"

    @property
    def n_frames(self):
        return len(self.left)

    def image(self, i, side="left"):
        key = (i, side)
        if key not in self._cache:
            self._cache[key] = load_image((self.left if side == "left" else self.right)[i])
        return self._cache[key]

    def frames(self):
        return [self.image(i) for i in range(self.n_frames)]


@dataclass
class HomographyPairs:
    name: str
    pairs: list  # (path_a, path_b, H)

    kind = "homography_pairs"


def read_pairs_file(path):
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            a, b = line.split()[:2]
            out.append((int(a), int(b)))
    return out


def write_pairs_file(path, pairs):
    Path(path).write_text("".join(f"{a} {b}\n" for a, b in pairs))


def open_dataset(path):
    """Load a dataset description (TOML); relative paths resolve against its directory.

    sequence_stereo keys: name, left, right (glob or list), poses, calibration, optional pairs.
    homography_pairs keys: name, and a [[pair]] table list with a, b, H.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file {path} does not exist")
    with open(path, "rb") as fh:
        cfg = tomllib.load(fh)
    root = path.parent
    kind = cfg.get("kind")
    name = cfg.get("name", path.stem)
    if kind == "sequence_stereo":
        for key in ("left", "right", "poses", "calibration"):
            if key not in cfg:
                raise DatasetError(f"{path}: missing key {key!r}")
        left = _resolve_list(cfg["left"], root)
        right = _resolve_list(cfg["right"], root)
        if len(left) != len(right):
            raise DatasetError(f"{path}: {len(left)} left images but {len(right)} right images")
        calib = root / cfg["calibration"]
        if not calib.exists():
            raise FileNotFoundError(f"calibration file {calib} does not exist")
        from .geometry import load_calibration
        K, baseline = load_calibration(calib)
        pose_map = load_poses(root / cfg["poses"])
        ids = sorted(pose_map)
        if len(ids) != len(left):
            raise DatasetError(f"{path}: {len(ids)} poses for {len(left)} frames")
        for f in left + right:
            if not f.exists():
                raise FileNotFoundError(f"image {f} does not exist")
        pairs = read_pairs_file(root / cfg["pairs"]) if "pairs" in cfg else None
        return SequenceStereo(name, left, right, [pose_map[i] for i in ids], K, baseline, pairs)
    if kind == "homography_pairs":
        pairs = []
        for entry in cfg.get("pair", []):
            trip = [root / entry[k] for k in ("a", "b", "H")]
            for f in trip:
                if not f.exists():
                    raise FileNotFoundError(f"{f} does not exist")
            pairs.append((trip[0], trip[1], load_homography(trip[2])))
        if not pairs:
            raise DatasetError(f"{path}: no [[pair]] entries")
        return HomographyPairs(name, pairs)
    raise DatasetError(f"{path}: unknown dataset kind {kind!r}")


def sample_sequence_pairs(frames, count, overlap_o=EVAL_OVERLAP, seed=0, klt_config=KltConfig(),
                          cache_dir=None, max_attempts=None):
    """Random (base, partner) frame pairs whose KLT overlap is at least ``overlap_o``.

    Base frames are drawn uniformly; each base is tracked forward once (until the
    overlap drops below ``overlap_o``) and a partner is drawn among qualifying frames.
    Duplicates are skipped. May return fewer than ``count`` pairs.
    """
    rng = np.random.default_rng(seed)
    n = len(frames)
    if n < 2:
        raise ValueError("need at least two frames")
    tables = {}
    picks, seen = [], set()
    attempts = 0
    max_attempts = max_attempts or 20 * count
    while len(picks) < count and attempts < max_attempts:
        attempts += 1
        base = int(rng.integers(0, n - 1))
        if base not in tables:
            table = cached_track_sequence(frames[base:], klt_config, cache_dir, min_fraction=overlap_o)
            tables[base] = [base + j for j in qualifying_frames(table, 0, overlap_o)]
        cands = tables[base]
        if not cands:
            continue
        pair = (base, int(cands[rng.integers(0, len(cands))]))
        if pair in seen:
            continue
        seen.add(pair)
        picks.append(pair)
    return picks


# -- evaluation ----------------------------------------------------------------

@dataclass
class EvalConfig:
    margin: int = None           # default: half the receptive field for a network, 0 otherwise
    threshold_px: float = 3.0    # RANSAC and label threshold
    ransac_iters: int = 1000
    ransac_seed: int = 0
    confidence: float = 0.99
    d_max: int = 128
    response_floor: float = 0.2
    d_min: float = 0.5
    overlap_o: float = EVAL_OVERLAP
    count: int = 100
    pair_seed: int = 0
    workers: int = 1


def _detector(params):
    if isinstance(params, NetworkParams):
        return lambda img: forward_full(img, params), default_margin(params.receptive_field)
    if callable(params):
        return params, 0
    raise TypeError("params must be NetworkParams or a callable image -> response stack")


def ground_truth_motion(pose_a, pose_b):
    """Left-b-from-left-a transform given world-from-camera poses."""
    return pose_b.inverse().compose(pose_a)


def evaluate_stereo_pair(dataset: SequenceStereo, a, b, detect, margin, config: EvalConfig):
    stack_la = detect(dataset.image(a, "left"))
    stack_ra = detect(dataset.image(a, "right"))
    stack_lb = detect(dataset.image(b, "left"))
    pts_a = extract_points(stack_la, margin)
    pts_b = extract_points(stack_lb, margin)
    m = match_by_channel(pts_a, pts_b)
    n = pts_a.n
    X = stereo_match_by_channel(pts_a, stack_ra, dataset.K, dataset.baseline,
                                config.d_max, config.response_floor, config.d_min)
    gt = ground_truth_motion(dataset.poses[a], dataset.poses[b])
    dR = rotation_geodesic_deg(gt.R, np.eye(3))
    dt = translation_error_m(gt.t, np.zeros(3))
    lifted = np.flatnonzero(~np.isnan(X).any(axis=1))
    flags = np.zeros(n, dtype=bool)
    eR = et = math.inf
    count = 0
    if lifted.size >= 4:
        res = ransac_p3p(X[lifted], m.b.xy[lifted].astype(np.float64), dataset.K, config.threshold_px,
                         config.ransac_iters, config.ransac_seed, config.confidence)
        flags[lifted] = res.inlier_mask
        count = res.inlier_count
        if res.success:
            eR = rotation_geodesic_deg(res.pose.R, gt.R)
            et = translation_error_m(res.pose.t, gt.t)
    name = f"{dataset.name}_{a}_{b}"
    return EvalRecord(name, dR, dt, matching_score(count, n), eR, et, count,
                      np.asarray(pts_a.response, dtype=np.float64), flags)


def evaluate_homography_pair(name, img_a, img_b, H, detect, margin, config: EvalConfig):
    pts_a = extract_points(detect(img_a), margin)
    pts_b = extract_points(detect(img_b), margin)
    psi = HomographyCorrespondence(H, np.shape(img_a), np.shape(img_b))
    lab = label_matches(match_by_channel(pts_a, pts_b), psi, config.threshold_px)
    flags = lab.labels == MatchLabel.INLIER
    nan = math.nan
    return EvalRecord(name, nan, nan, matching_score(lab, pts_a.n), nan, nan, lab.n_inliers,
                      np.asarray(pts_a.response, dtype=np.float64), flags)


def evaluate_pairs(dataset, params, config: EvalConfig = None, pairs=None, out_csv=None, cache_dir=None):
    """Run the detector over dataset pairs and score them; rows come back in pair order.

    ``params`` is a NetworkParams or any callable mapping an image to an (H, W, n)
    response stack. Sequence pairs default to the dataset's pair list, else a seeded
    KLT-overlap sample. Failed pose estimates keep their inlier count and report
    infinite errors.
    """
    config = config or EvalConfig()
    detect, default = _detector(params)
    margin = default if config.margin is None else config.margin
    if isinstance(dataset, SequenceStereo):
        if dataset.K is None or dataset.baseline is None:
            raise DatasetError("pose evaluation needs calibration")
        if pairs is None:
            pairs = dataset.pairs
        if pairs is None:
            pairs = sample_sequence_pairs(dataset.frames(), config.count, config.overlap_o,
                                          config.pair_seed, cache_dir=cache_dir)
        for a, b in pairs:
            if not (0 <= a < dataset.n_frames and 0 <= b < dataset.n_frames):
                raise IndexError(f"pair ({a}, {b}) outside the {dataset.n_frames}-frame sequence")
        jobs = [lambda a=a, b=b: evaluate_stereo_pair(dataset, a, b, detect, margin, config) for a, b in pairs]
    elif isinstance(dataset, HomographyPairs):
        jobs = []
        for i, (pa, pb, H) in enumerate(dataset.pairs):
            jobs.append(lambda i=i, pa=pa, pb=pb, H=H: evaluate_homography_pair(
                f"{dataset.name}_{i}", load_image(pa), load_image(pb), H, detect, margin, config))
    else:
        raise TypeError(f"unsupported dataset {type(dataset).__name__}")
    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            records = list(pool.map(lambda job: job(), jobs))
    else:
        records = [job() for job in jobs]
    if out_csv is not None:
        write_results_csv(out_csv, records)
    return records


# -- summaries -----------------------------------------------------------------

@dataclass
class HistogramBin:
    lo: float
    hi: float
    frequency: float  # None for an empty bin
    count: int


def inlierness_histogram(records, bins=10):
    """Empirical inlier frequency per uniform response bin over [0, 1]."""
    if bins < 2:
        raise ValueError("need at least two bins")
    resp = [np.asarray(r.responses, dtype=np.float64) for r in records if r.responses is not None]
    flags = [np.asarray(r.inlier_flags, dtype=bool) for r in records if r.responses is not None]
    resp = np.concatenate(resp) if resp else np.zeros(0)
    flags = np.concatenate(flags) if flags else np.zeros(0, dtype=bool)
    idx = np.minimum((resp * bins).astype(int), bins - 1)
    counts = np.bincount(idx, minlength=bins)
    hits = np.bincount(idx, weights=flags.astype(float), minlength=bins)
    out = []
    for k in range(bins):
        freq = float(hits[k] / counts[k]) if counts[k] else None
        out.append(HistogramBin(k / bins, (k + 1) / bins, freq, int(counts[k])))
    return out


def write_histogram_csv(path, hist):
    lines = ["lo,hi,frequency,count"]
    for b in hist:
        lines.append(f"{b.lo:.6f},{b.hi:.6f},{'' if b.frequency is None else f'{b.frequency:.6f}'},{b.count}")
    Path(path).write_text("\n".join(lines) + "\n")


def accuracy(records, rot_thresh_deg=None, trans_thresh_m=None, preset=None):
    """Fraction of records with eR below the rotation and et below the translation threshold."""
    if preset is not None:
        try:
            rot_thresh_deg, trans_thresh_m = ACCURACY_PRESETS[preset.lower()]
        except KeyError:
            raise ValueError(f"unknown preset {preset!r}; known: {sorted(ACCURACY_PRESETS)}") from None
    if rot_thresh_deg is None or trans_thresh_m is None:
        raise ValueError("give both thresholds or a preset")
    if not (rot_thresh_deg > 0 and trans_thresh_m > 0):
        raise ValueError("thresholds must be positive")
    records = list(records)
    if not records:
        raise ValueError("no records")
    good = sum(1 for r in records if r.eR_deg < rot_thresh_deg and r.et_m < trans_thresh_m)
    return good / len(records)


@dataclass
class MethodGroup:
    """Evaluation records of one method together with what its size depends on."""
    label: str
    method: str          # ours | raw | pca | pq
    size_args: dict
    records: list


@dataclass
class ReportRow:
    label: str
    method: str
    bytes: int
    accuracy: float


def size_accuracy_report(groups, rot_thresh_deg=None, trans_thresh_m=None, preset="kitti"):
    rows = []
    for g in groups:
        if not g.records:
            log.warning("method group %s has no records; omitted", g.label)
            continue
        rows.append(ReportRow(g.label, g.method, representation_size_bytes(g.method, **g.size_args),
                              accuracy(g.records, rot_thresh_deg, trans_thresh_m,
                                       preset if rot_thresh_deg is None else None)))
    return rows


def report_csv(rows):
    lines = ["method,label,bytes,accuracy"]
    lines += [f"{r.method},{r.label},{r.bytes},{r.accuracy:.6f}" for r in rows]
    return "\n".join(lines) + "\n"


def report_svg(rows, width=520, height=340, title="accuracy vs bytes per frame"):
    """Scatter of accuracy against representation size, bytes on a log10 axis."""
    left, right, top, bottom = 60, 20, 30, 45
    pw, ph = width - left - right, height - top - bottom
    if rows:
        lo = math.floor(math.log10(min(r.bytes for r in rows)))
        hi = math.ceil(math.log10(max(r.bytes for r in rows)))
    else:
        lo, hi = 2, 5
    if hi == lo:
        hi = lo + 1

    def sx(b):
        return left + (math.log10(b) - lo) / (hi - lo) * pw

    def sy(a):
        return top + (1.0 - a) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{_esc(title)}</text>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for e in range(lo, hi + 1):
        x = sx(10 ** e)
        out.append(f'<line x1="{x:.1f}" y1="{top}" x2="{x:.1f}" y2="{top + ph}" stroke="#ddd"/>')
        out.append(f'<text x="{x:.1f}" y="{top + ph + 15}" text-anchor="middle">1e{e}</text>')
    for a in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = sy(a)
        out.append(f'<line x1="{left}" y1="{y:.1f}" x2="{left + pw}" y2="{y:.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end">{a:.2f}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">bytes per frame (log scale)</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" transform="rotate(-90 14 {top + ph / 2:.1f})">accuracy</text>')
    colors = {"ours": "#c0392b", "raw": "#2c3e50", "pca": "#2980b9", "pq": "#27ae60"}
    for r in rows:
        x, y = sx(r.bytes), sy(r.accuracy)
        c = colors.get(r.method, "#7f8c8d")
        out.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="4" fill="{c}"/>')
        out.append(f'<text x="{x + 6:.1f}" y="{y - 6:.1f}">{_esc(r.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s):
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


# -- synthetic datasets on disk --------------------------------------------------

def write_synthetic_stereo_dataset(root, n_frames=8, shape=(120, 160), seed=0, step=0.25,
                                   pairs=None, name="synth", image_ext=".png", supersample=2):
    """Render a stereo sequence and lay it out as a sequence_stereo dataset; returns the TOML path."""
    from .correspondence import save_poses
    from .geometry import save_calibration
    from .synthetic import stereo_sequence
    root = Path(root)
    (root / "left").mkdir(parents=True, exist_ok=True)
    (root / "right").mkdir(parents=True, exist_ok=True)
    seq = stereo_sequence(n_frames, shape, seed=seed, step=step, supersample=supersample)
    for i in range(n_frames):
        save_image(root / "left" / f"{i:06d}{image_ext}", seq["left"][i])
        save_image(root / "right" / f"{i:06d}{image_ext}", seq["right"][i])
    save_poses(root / "poses.txt", dict(enumerate(seq["poses"])))
    save_calibration(root / "calib.txt", seq["K"], seq["baseline"])
    lines = [
        'kind = "sequence_stereo"',
        f'name = "{name}"',
        f'left = "left/*{image_ext}"',
        f'right = "right/*{image_ext}"',
        'poses = "poses.txt"',
        'calibration = "calib.txt"',
    ]
    if pairs is not None:
        write_pairs_file(root / "pairs.txt", pairs)
        lines.append('pairs = "pairs.txt"')
    path = root / "dataset.toml"
    path.write_text("\n".join(lines) + "\n")
    return path
