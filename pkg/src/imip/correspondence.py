"""Ground-truth correspondences between two images and inlier labelling of channel matches.

A provider maps pixels of image I into image I' (``forward``) and back
(``inverse``). Positions that cannot be mapped come back as NaN rows.
"""
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from . import klt
from .extraction import Matches, match_by_channel
from .geometry import RigidPose


class DegeneratePointError(ValueError):
    pass


class MatchLabel(IntEnum):
    UNASSIGNED = 0
    INLIER = 1
    OUTLIER = 2


def homography_map(H, p):
    """Apply a 3x3 homography to one (x, y) point or an (N, 2) array."""
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = p.reshape(-1, 2)
    hom = np.column_stack([pts, np.ones(len(pts))]) @ np.asarray(H, dtype=np.float64).T
    w = hom[:, 2]
    if np.any(np.abs(w) < 1e-12):
        raise DegeneratePointError("point maps to the line at infinity")
    out = hom[:, :2] / w[:, None]
    return out[0] if single else out


def depth_pose_map(p, depth, pose_a: RigidPose, pose_b: RigidPose, K):
    """Reproject pixel(s) seen at ``depth`` by camera a into camera b.

    Poses are world-from-camera. Returns NaN where the point lands behind
    camera b; results outside the image are returned as is.
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = p.reshape(-1, 2)
    z = np.broadcast_to(np.asarray(depth, dtype=np.float64), (len(pts),))
    if np.any(~(z > 0)):
        raise ValueError("depth must be positive")
    K = np.asarray(K, dtype=np.float64)
    rays = np.column_stack([pts, np.ones(len(pts))]) @ np.linalg.inv(K).T
    Xa = rays * z[:, None]
    Xb = pose_b.inverse().compose(pose_a).apply(Xa)
    out = np.full((len(pts), 2), np.nan)
    front = Xb[:, 2] > 0
    proj = Xb[front] @ K.T
    out[front] = proj[:, :2] / proj[:, 2:3]
    return out[0] if single else out


class Correspondence:
    """Base provider; subclasses fill in the two directions."""

    shape_a = None  # (H, W) of image I
    shape_b = None

    def forward(self, pts):
        raise NotImplementedError

    def inverse(self, pts):
        raise NotImplementedError


class HomographyCorrespondence(Correspondence):
    kind = "homography"

    def __init__(self, H, shape_a, shape_b=None):
        self.H = np.asarray(H, dtype=np.float64)
        if abs(np.linalg.det(self.H)) < 1e-15:
            raise ValueError("homography is singular")
        self.H_inv = np.linalg.inv(self.H)
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b if shape_b is not None else shape_a)

    def _map(self, H, pts):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        hom = np.column_stack([pts, np.ones(len(pts))]) @ H.T
        out = np.full((len(pts), 2), np.nan)
        good = np.abs(hom[:, 2]) >= 1e-12
        out[good] = hom[good, :2] / hom[good, 2:3]
        return out

    def forward(self, pts):
        return self._map(self.H, pts)

    def inverse(self, pts):
        return self._map(self.H_inv, pts)


class IdentityCorrespondence(HomographyCorrespondence):
    def __init__(self, shape):
        super().__init__(np.eye(3), shape, shape)


class DepthPoseCorrespondence(Correspondence):
    """Ψ from per-image depth maps, world-from-camera poses and shared intrinsics."""
    kind = "depth_pose"

    def __init__(self, depth_a, depth_b, pose_a: RigidPose, pose_b: RigidPose, K):
        self.depth_a = np.asarray(depth_a, dtype=np.float64)
        self.depth_b = np.asarray(depth_b, dtype=np.float64)
        self.pose_a, self.pose_b = pose_a, pose_b
        self.K = np.asarray(K, dtype=np.float64)
        self.shape_a = self.depth_a.shape
        self.shape_b = self.depth_b.shape

    @staticmethod
    def _lookup(depth, pts):
        ij = np.rint(pts[:, ::-1]).astype(np.int64)
        h, w = depth.shape
        z = np.full(len(pts), np.nan)
        inside = (ij[:, 0] >= 0) & (ij[:, 0] < h) & (ij[:, 1] >= 0) & (ij[:, 1] < w)
        z[inside] = depth[ij[inside, 0], ij[inside, 1]]
        return z

    def _map(self, depth, src, dst, pts):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        z = self._lookup(depth, pts)
        out = np.full((len(pts), 2), np.nan)
        good = np.isfinite(z) & (z > 0)
        if good.any():
            out[good] = depth_pose_map(pts[good], z[good], src, dst, self.K)
        return out

    def forward(self, pts):
        return self._map(self.depth_a, self.pose_a, self.pose_b, pts)

    def inverse(self, pts):
        return self._map(self.depth_b, self.pose_b, self.pose_a, pts)


class InverseCorrespondence(Correspondence):
    """Ψ⁻¹ of another provider, i.e. the same ground truth with the images swapped."""

    def __init__(self, psi: Correspondence):
        self.psi = psi
        self.kind = getattr(psi, "kind", None)
        self.shape_a, self.shape_b = psi.shape_b, psi.shape_a

    def forward(self, pts):
        return self.psi.inverse(pts)

    def inverse(self, pts):
        return self.psi.forward(pts)


def klt_chain_map(frames, frame_a, frame_b, p, config=klt.KltConfig()):
    """Carry points frame by frame from ``frame_a`` to ``frame_b`` (either direction).

    Any intermediate loss makes the point untrackable (NaN).
    """
    if not (0 <= frame_a < len(frames) and 0 <= frame_b < len(frames)):
        raise IndexError("frame index outside the sequence")
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    cur = pts.reshape(-1, 2).copy()
    step = 1 if frame_b >= frame_a else -1
    for f in range(frame_a, frame_b, step):
        alive = np.isfinite(cur).all(axis=1)
        if not alive.any():
            break
        new, ok = klt.track_points(frames[f], frames[f + step], cur[alive], config)
        new[~ok] = np.nan
        cur[alive] = new
    return cur[0] if single else cur


class KltChainCorrespondence(Correspondence):
    kind = "klt_chain"

    def __init__(self, frames, frame_a, frame_b, config=klt.KltConfig()):
        self.frames = frames
        self.frame_a, self.frame_b = frame_a, frame_b
        self.config = config
        self.shape_a = np.shape(frames[frame_a])
        self.shape_b = np.shape(frames[frame_b])

    def forward(self, pts):
        return klt_chain_map(self.frames, self.frame_a, self.frame_b, np.reshape(pts, (-1, 2)), self.config)

    def inverse(self, pts):
        return klt_chain_map(self.frames, self.frame_b, self.frame_a, np.reshape(pts, (-1, 2)), self.config)


@dataclass
class LabeledMatches:
    """Channel matches with their true correspondences and labels.

    ``corr_in_b[i]`` is Ψ(P_i), a location in image I'; ``corr_in_a[i]`` is
    Ψ⁻¹(P'_i), a location in image I. Unknown locations are NaN.
    """
    matches: Matches
    corr_in_b: np.ndarray
    corr_in_a: np.ndarray
    labels: np.ndarray  # MatchLabel values

    @property
    def n_inliers(self):
        return int((self.labels == MatchLabel.INLIER).sum())

    @property
    def n_outliers(self):
        return int((self.labels == MatchLabel.OUTLIER).sum())

    @property
    def n_unassigned(self):
        return int((self.labels == MatchLabel.UNASSIGNED).sum())

    def swapped(self):
        """The same labelling seen from image I'."""
        return LabeledMatches(match_by_channel(self.matches.b, self.matches.a),
                              self.corr_in_a, self.corr_in_b, self.labels.copy())


def _in_frame(pts, shape):
    h, w = shape
    return (np.isfinite(pts).all(axis=1)
            & (pts[:, 0] >= 0) & (pts[:, 0] <= w - 1)
            & (pts[:, 1] >= 0) & (pts[:, 1] <= h - 1))


def label_matches(matches: Matches, psi: Correspondence, threshold_px=3.0) -> LabeledMatches:
    """Inlier iff both Ψ(P_i) lies within ``threshold_px`` of P'_i and Ψ⁻¹(P'_i) within it of P_i.

    A channel is unassigned when either correspondence is untrackable or
    leaves its image frame; otherwise it is an outlier.
    """
    if threshold_px <= 0:
        raise ValueError("threshold_px must be positive")
    pa = matches.a.xy.astype(np.float64)
    pb = matches.b.xy.astype(np.float64)
    fwd = np.asarray(psi.forward(pa), dtype=np.float64).reshape(-1, 2)
    bwd = np.asarray(psi.inverse(pb), dtype=np.float64).reshape(-1, 2)
    known = _in_frame(fwd, psi.shape_b) & _in_frame(bwd, psi.shape_a)
    with np.errstate(invalid="ignore"):
        close = (np.linalg.norm(fwd - pb, axis=1) <= threshold_px) & (np.linalg.norm(bwd - pa, axis=1) <= threshold_px)
    labels = np.full(len(pa), MatchLabel.UNASSIGNED, dtype=np.int64)
    labels[known & close] = MatchLabel.INLIER
    labels[known & ~close] = MatchLabel.OUTLIER
    return LabeledMatches(matches, fwd, bwd, labels)


def load_homography(path):
    vals = np.array(Path(path).read_text().split(), dtype=np.float64)
    if vals.size != 9:
        raise ValueError(f"{path}: expected 9 numbers, found {vals.size}")
    return vals.reshape(3, 3)


def quat_to_rotation(qw, qx, qy, qz):
    q = np.array([qw, qx, qy, qz], dtype=np.float64)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rotation_to_quat(R):
    from scipy.spatial.transform import Rotation
    x, y, z, w = Rotation.from_matrix(R).as_quat()
    return w, x, y, z


def load_poses(path):
    """Parse ``frame_id qw qx qy qz tx ty tz`` lines into {frame_id: RigidPose}."""
    poses = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        fid = int(parts[0])
        qw, qx, qy, qz, tx, ty, tz = map(float, parts[1:])
        poses[fid] = RigidPose(quat_to_rotation(qw, qx, qy, qz), [tx, ty, tz])
    return poses


def save_poses(path, poses):
    lines = []
    for fid in sorted(poses):
        p = poses[fid]
        q = rotation_to_quat(p.R)
        lines.append(" ".join([str(fid)] + [repr(float(v)) for v in (*q, *p.t)]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_depth(path):
    """Single-channel float depth map in meters (.npy or a float TIFF)."""
    path = Path(path)
    if path.suffix == ".npy":
        d = np.load(path)
    else:
        from PIL import Image
        d = np.asarray(Image.open(path), dtype=np.float64)
    if d.ndim != 2:
        raise ValueError(f"{path}: depth map must be single channel")
    return d.astype(np.float64)
