"""Per-channel argmax interest points, channel-wise matching and 3-byte packing."""
from dataclasses import dataclass

import numpy as np

COORD_LIMIT = 4096


@dataclass
class InterestPoints:
    """One point per channel; row ``i`` belongs to channel ``i``.

    ``xy`` holds integer pixel coordinates (column, row).
    """
    xy: np.ndarray  # (n, 2) int
    response: np.ndarray  # (n,)

    def __len__(self):
        return len(self.xy)

    @property
    def n(self):
        return len(self.xy)


@dataclass
class Matches:
    a: InterestPoints
    b: InterestPoints

    def __len__(self):
        return len(self.a)

    def pairs(self):
        return [(tuple(pa), tuple(pb)) for pa, pb in zip(self.a.xy, self.b.xy)]


def default_margin(receptive_field):
    return (receptive_field - 1) // 2


def extract_points(stack, margin=14) -> InterestPoints:
    """Global argmax of every channel of an (H, W, n) stack, ignoring a border band.

    Ties resolve to the smallest row, then the smallest column.
    """
    stack = np.asarray(stack)
    if stack.ndim != 3:
        raise ValueError(f"expected an (H, W, n) stack, got shape {stack.shape}")
    if margin < 0:
        raise ValueError("margin must be non-negative")
    h, w, n = stack.shape
    if 2 * margin >= min(h, w):
        raise ValueError(f"margin {margin} leaves no valid region in a {h}x{w} stack")
    inner = stack[margin:h - margin, margin:w - margin, :]
    iw = inner.shape[1]
    # np.argmax returns the first hit in row-major order
    flat = inner.reshape(-1, n)
    idx = np.argmax(flat, axis=0)
    ys = idx // iw + margin
    xs = idx % iw + margin
    resp = flat[idx, np.arange(n)]
    return InterestPoints(np.stack([xs, ys], axis=1).astype(np.int64), resp)


def match_by_channel(a: InterestPoints, b: InterestPoints) -> Matches:
    if a.n != b.n:
        raise ValueError(f"channel count mismatch: {a.n} vs {b.n}")
    return Matches(a, b)


def pack_coordinates(points) -> bytes:
    """12-bit x then 12-bit y per point, big-endian, concatenated in channel order."""
    xy = np.asarray(points.xy if isinstance(points, InterestPoints) else points, dtype=np.int64)
    if xy.size and (xy.min() < 0 or xy.max() >= COORD_LIMIT):
        raise ValueError(f"coordinates must lie in [0, {COORD_LIMIT})")
    word = (xy[:, 0] << 12) | xy[:, 1]
    out = np.empty((len(xy), 3), dtype=np.uint8)
    out[:, 0] = (word >> 16) & 0xFF
    out[:, 1] = (word >> 8) & 0xFF
    out[:, 2] = word & 0xFF
    return out.tobytes()


def unpack_coordinates(data: bytes) -> np.ndarray:
    """Inverse of :func:`pack_coordinates`; returns an (n, 2) array of (x, y)."""
    if len(data) % 3:
        raise ValueError(f"packed length {len(data)} is not a multiple of 3")
    b = np.frombuffer(data, dtype=np.uint8).reshape(-1, 3).astype(np.int64)
    word = (b[:, 0] << 16) | (b[:, 1] << 8) | b[:, 2]
    return np.stack([word >> 12, word & 0xFFF], axis=1)
