"""Pyramidal Lucas-Kanade tracking and overlap-based pair selection.

All points of a frame pair are tracked together; the Gauss-Newton loop runs
vectorized over points and freezes each point once it converges or is lost.
"""
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass(frozen=True)
class KltConfig:
    window: int = 21
    levels: int = 3
    max_iters: int = 30
    eps: float = 0.01
    # minimum structure-tensor eigenvalue per window pixel, intensities in [0, 1]
    min_eig: float = 1e-6
    grid_step: int = 12

    def __post_init__(self):
        if self.window < 5 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 5")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")


@dataclass(frozen=True)
class PairSelectionConfig:
    overlap_o: float = 0.3
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.overlap_o <= 1.0:
            raise ValueError("overlap_o must lie in (0, 1]")


TRAIN_OVERLAP = 0.3
EVAL_OVERLAP = 0.5


def build_pyramid(image, levels):
    """Level 0 is the input; each further level is blurred with a 5-tap binomial and halved."""
    img = np.asarray(image, dtype=np.float64)
    pyr = [img]
    for _ in range(1, levels):
        prev = pyr[-1]
        if min(prev.shape) < 2:
            break
        blur = ndimage.convolve1d(prev, _BINOMIAL5, axis=0, mode="reflect")
        blur = ndimage.convolve1d(blur, _BINOMIAL5, axis=1, mode="reflect")
        pyr.append(blur[::2, ::2])
    return pyr


def _gradients(img):
    gy, gx = np.gradient(img)
    return gx, gy


def _sample(img, xy):
    """Bilinear lookup at (..., 2) positions given as (x, y)."""
    shape = xy.shape[:-1]
    coords = np.stack([xy[..., 1].ravel(), xy[..., 0].ravel()])
    return ndimage.map_coordinates(img, coords, order=1, mode="nearest").reshape(shape)


def _window_offsets(window):
    h = window // 2
    r = np.arange(-h, h + 1, dtype=np.float64)
    oy, ox = np.meshgrid(r, r, indexing="ij")
    return np.stack([ox.ravel(), oy.ravel()], axis=1)


def track_points(img_a, img_b, points, config=KltConfig()):
    """Track (N, 2) sub-pixel (x, y) positions from ``img_a`` into ``img_b``.

    Returns ``(positions, ok)``; positions of lost points are NaN.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    pyr_a = build_pyramid(img_a, config.levels)
    pyr_b = build_pyramid(img_b, config.levels)
    levels = len(pyr_a)
    half = config.window // 2
    offs = _window_offsets(config.window)
    npix = len(offs)

    h0, w0 = pyr_a[0].shape
    ok = (
        np.isfinite(pts).all(axis=1)
        & (pts[:, 0] >= half) & (pts[:, 0] <= w0 - 1 - half)
        & (pts[:, 1] >= half) & (pts[:, 1] <= h0 - 1 - half)
    )
    guess = np.zeros((n, 2))
    for lvl in range(levels - 1, -1, -1):
        a, b = pyr_a[lvl], pyr_b[lvl]
        hl, wl = a.shape
        scale = 2.0 ** lvl
        idx = np.flatnonzero(ok)
        if idx.size == 0:
            break
        win = pts[idx, None, :] / scale + offs[None]  # (k, npix, 2)
        gx, gy = _gradients(a)
        tmpl = _sample(a, win)
        ix = _sample(gx, win)
        iy = _sample(gy, win)
        gxx = (ix * ix).sum(1)
        gxy = (ix * iy).sum(1)
        gyy = (iy * iy).sum(1)
        tr = gxx + gyy
        det = gxx * gyy - gxy * gxy
        min_eig = 0.5 * (tr - np.sqrt(np.maximum(tr * tr - 4.0 * det, 0.0)))
        textured = min_eig / npix >= config.min_eig

        g = guess[idx]
        v = np.zeros_like(g)
        inv_det = np.where(textured, 1.0 / np.where(textured, det, 1.0), 0.0)
        active = textured.copy()
        for _ in range(config.max_iters):
            ai = np.flatnonzero(active)
            if ai.size == 0:
                break
            warped = _sample(b, win[ai] + (g[ai] + v[ai])[:, None, :])
            e = tmpl[ai] - warped
            bx = (e * ix[ai]).sum(1)
            by = (e * iy[ai]).sum(1)
            # eta = G^-1 b
            ex = inv_det[ai] * (gyy[ai] * bx - gxy[ai] * by)
            ey = inv_det[ai] * (gxx[ai] * by - gxy[ai] * bx)
            v[ai, 0] += ex
            v[ai, 1] += ey
            done = np.hypot(ex, ey) < config.eps
            active[ai[done]] = False
            c = pts[ai] / scale + g[ai] + v[ai]
            outside = (c[:, 0] < 0) | (c[:, 0] > wl - 1) | (c[:, 1] < 0) | (c[:, 1] > hl - 1)
            if outside.any():
                active[ai[outside]] = False
                textured[ai[outside]] = False
        if lvl > 0:
            # too flat or diverged at a coarse level: skip refinement here and hand the guess down
            v[~textured] = 0.0
        else:
            # the track must explain img_b better than assuming no motion
            res_still = ((tmpl - _sample(b, win)) ** 2).mean(1)
            res_track = ((tmpl - _sample(b, win + (g + v)[:, None, :])) ** 2).mean(1)
            textured &= res_track <= res_still * (1.0 + 1e-6) + 1e-12
            ok[idx[~textured]] = False
        d = g + v
        guess[idx] = 2.0 * d if lvl > 0 else d

    out = pts + guess
    c = out
    inside = (c[:, 0] >= 0) & (c[:, 0] <= w0 - 1) & (c[:, 1] >= 0) & (c[:, 1] <= h0 - 1)
    ok &= inside
    out[~ok] = np.nan
    return out, ok


def track_point(img_a, img_b, p, config=KltConfig()):
    """Single-point convenience wrapper; returns an (x, y) array or None when lost."""
    out, ok = track_points(img_a, img_b, np.asarray(p, dtype=np.float64)[None], config)
    return out[0] if ok[0] else None


@dataclass
class TrackTable:
    positions: np.ndarray  # (frames, tracks, 2), NaN once lost
    alive: np.ndarray  # (frames, tracks) bool
    seed_grid_step: int

    @property
    def n_frames(self):
        return self.alive.shape[0]

    @property
    def n_tracks(self):
        return self.alive.shape[1]

    def surviving_fraction(self, frame, base_frame=0):
        base = self.alive[base_frame]
        if not base.any():
            return 0.0
        return float((self.alive[frame] & base).sum()) / float(base.sum())


def seed_grid(shape, step, margin):
    h, w = shape
    ys = np.arange(margin, h - margin, step, dtype=np.float64)
    xs = np.arange(margin, w - margin, step, dtype=np.float64)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def track_sequence(images, config=KltConfig(), min_fraction=None):
    """Seed a grid in the first frame and carry every track forward until it is lost.

    With ``min_fraction`` tracking stops once fewer than that fraction of
    seeds survive; later frames are then recorded as all lost.
    """
    if len(images) < 2:
        raise ValueError("need at least two frames")
    shape = np.shape(images[0])
    for i, im in enumerate(images):
        if np.shape(im) != shape:
            raise ValueError(f"frame {i} has shape {np.shape(im)}, frame 0 has {shape}")
    seeds = seed_grid(shape, config.grid_step, config.window // 2)
    nf, nt = len(images), len(seeds)
    positions = np.full((nf, nt, 2), np.nan)
    alive = np.zeros((nf, nt), dtype=bool)
    positions[0] = seeds
    alive[0] = True
    for f in range(1, nf):
        prev = np.flatnonzero(alive[f - 1])
        if prev.size == 0:
            break
        if min_fraction is not None and prev.size < min_fraction * nt:
            break
        new, ok = track_points(images[f - 1], images[f], positions[f - 1, prev], config)
        keep = prev[ok]
        positions[f, keep] = new[ok]
        alive[f, keep] = True
    return TrackTable(positions, alive, config.grid_step)


def qualifying_frames(table: TrackTable, base_frame, overlap_o):
    return [
        j for j in range(base_frame + 1, table.n_frames)
        if table.surviving_fraction(j, base_frame) >= overlap_o
    ]


def select_pairs(table: TrackTable, base_frame, config=PairSelectionConfig(), count=1):
    """Draw ``count`` partner frames uniformly among frames still overlapping by ``o``.

    Returns an empty list when no subsequent frame qualifies.
    """
    if not 0 <= base_frame < table.n_frames:
        raise IndexError(f"base frame {base_frame} outside [0, {table.n_frames})")
    cands = qualifying_frames(table, base_frame, config.overlap_o)
    if not cands:
        return []
    rng = np.random.default_rng(config.rng_seed)
    picks = rng.integers(0, len(cands), size=count)
    return [(base_frame, cands[i]) for i in picks]


def sequence_key(images, config: KltConfig):
    h = hashlib.sha256()
    for im in images:
        a = np.ascontiguousarray(im, dtype=np.float64)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    h.update(repr(config).encode())
    return h.hexdigest()[:32]


def save_track_table(table: TrackTable, cache_dir, key):
    path = Path(cache_dir) / f"tracks_{key}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, positions=table.positions, alive=table.alive, step=table.seed_grid_step)
    return path


def load_track_table(cache_dir, key):
    path = Path(cache_dir) / f"tracks_{key}.npz"
    if not path.exists():
        return None
    with np.load(path) as z:
        return TrackTable(z["positions"], z["alive"], int(z["step"]))


def cached_track_sequence(images, config=KltConfig(), cache_dir=None, min_fraction=None):
    if cache_dir is None:
        return track_sequence(images, config, min_fraction)
    key = sequence_key(images, config) + ("" if min_fraction is None else f"_{min_fraction:g}")
    table = load_track_table(cache_dir, key)
    if table is None:
        table = track_sequence(images, config, min_fraction)
        save_track_table(table, cache_dir, key)
    return table
