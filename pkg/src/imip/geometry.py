"""Stereo lifting, P3P, RANSAC pose estimation and pose error metrics."""
from dataclasses import dataclass
from pathlib import Path

import numpy as np

KITTI_THRESHOLDS = (1.0, 0.30)
EUROC_THRESHOLDS = (3.0, 0.10)


@dataclass
class RigidPose:
    """Rigid transform ``x -> R x + t``."""
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, X):
        return np.asarray(X, dtype=np.float64) @ self.R.T + self.t

    def inverse(self):
        return RigidPose(self.R.T, -self.R.T @ self.t)

    def compose(self, other):
        """``self * other``: ``other`` is applied first."""
        return RigidPose(self.R @ other.R, self.R @ other.t + self.t)

    def is_orthonormal(self, tol=1e-9):
        return np.linalg.norm(self.R.T @ self.R - np.eye(3)) < tol and np.linalg.det(self.R) > 0


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 0
    height: int = 0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, X):
        X = np.asarray(X, dtype=np.float64)
        return np.stack([self.fx * X[..., 0] / X[..., 2] + self.cx,
                         self.fy * X[..., 1] / X[..., 2] + self.cy], axis=-1)

    def bearings(self, px):
        px = np.asarray(px, dtype=np.float64)
        rays = np.stack([(px[..., 0] - self.cx) / self.fx,
                         (px[..., 1] - self.cy) / self.fy,
                         np.ones(px.shape[:-1])], axis=-1)
        return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


def load_calibration(path):
    """``fx fy cx cy width height baseline`` -> (CameraIntrinsics, baseline)."""
    vals = Path(path).read_text().split()
    if len(vals) != 7:
        raise ValueError(f"{path}: expected 7 calibration values, found {len(vals)}")
    fx, fy, cx, cy = map(float, vals[:4])
    w, h = int(float(vals[4])), int(float(vals[5]))
    return CameraIntrinsics(fx, fy, cx, cy, w, h), float(vals[6])


def save_calibration(path, K: CameraIntrinsics, baseline):
    vals = [repr(float(v)) for v in (K.fx, K.fy, K.cx, K.cy)] + [str(int(K.width)), str(int(K.height))]
    Path(path).write_text(" ".join(vals + [repr(float(baseline))]) + "\n")


class StereoRejected(ValueError):
    pass


def triangulate_rectified(xL, xR, y, K: CameraIntrinsics, baseline, d_min=0.5):
    """3-D point in the left camera frame from a rectified correspondence."""
    d = xL - xR
    if not d > d_min:
        raise StereoRejected(f"disparity {d} is not above {d_min}")
    z = K.fx * baseline / d
    return np.array([(xL - K.cx) * z / K.fx, (y - K.cy) * z / K.fy, z])


def stereo_match_by_channel(left_points, right_stack, K: CameraIntrinsics, baseline,
                            d_max=128, response_floor=0.2, d_min=0.5):
    """Lift each left interest point by searching its own channel along the same row of the right stack.

    Returns an (n, 3) array with NaN rows for channels that could not be lifted.
    """
    n = left_points.n
    out = np.full((n, 3), np.nan)
    if d_max <= 0:
        return out
    for i, (x, y) in enumerate(left_points.xy):
        lo = max(0, int(x) - int(d_max))
        if lo >= x:
            continue
        row = right_stack[int(y), lo:int(x), i]
        c = int(np.argmax(row))
        if row[c] < response_floor:
            continue
        try:
            out[i] = triangulate_rectified(float(x), float(lo + c), float(y), K, baseline, d_min)
        except StereoRejected:
            pass
    return out


class DegenerateConfigurationError(ValueError):
    pass


def _absolute_orientation(world, cam):
    """R, t with cam ≈ R world + t (Kabsch/Umeyama without scale)."""
    mw, mc = world.mean(0), cam.mean(0)
    H = (world - mw).T @ (cam - mc)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, mc - R @ mw


def _refine_distances(s, cosines, sides, iters=25):
    """Newton polish of the three law-of-cosines equations in the ray distances."""
    ca, cb, cg = cosines
    a2, b2, c2 = sides
    s = s.copy()
    for _ in range(iters):
        s1, s2, s3 = s
        f = np.array([
            s2 * s2 + s3 * s3 - 2 * s2 * s3 * ca - a2,
            s1 * s1 + s3 * s3 - 2 * s1 * s3 * cb - b2,
            s1 * s1 + s2 * s2 - 2 * s1 * s2 * cg - c2,
        ])
        J = np.array([
            [0.0, 2 * s2 - 2 * s3 * ca, 2 * s3 - 2 * s2 * ca],
            [2 * s1 - 2 * s3 * cb, 0.0, 2 * s3 - 2 * s1 * cb],
            [2 * s1 - 2 * s2 * cg, 2 * s2 - 2 * s1 * cg, 0.0],
        ])
        try:
            step = np.linalg.solve(J, f)
        except np.linalg.LinAlgError:
            break
        s = s - step
        if np.abs(step).max() < 1e-15 * max(1.0, np.abs(s).max()):
            break
    return s


def p3p_solve(world_points, bearings, check_tol=1e-6):
    """All camera-from-world poses consistent with three world points and their unit bearings.

    Solves the classical quartic in the ratio of ray distances, recovers
    the distances, polishes them, and aligns the resulting camera-frame
    points with the world points. Candidates whose bearing error exceeds
    ``check_tol`` radians are discarded.
    """
    P = np.asarray(world_points, dtype=np.float64).reshape(3, 3)
    f = np.asarray(bearings, dtype=np.float64).reshape(3, 3)
    if np.linalg.norm(np.cross(P[1] - P[0], P[2] - P[0])) < 1e-10 * max(1.0, np.abs(P).max()) ** 2:
        raise DegenerateConfigurationError("world points are collinear")
    f = f / np.linalg.norm(f, axis=1, keepdims=True)

    scale = max(1.0, np.abs(P).max())
    a2 = np.sum((P[1] - P[2]) ** 2)
    b2 = np.sum((P[0] - P[2]) ** 2)
    c2 = np.sum((P[0] - P[1]) ** 2)
    ca = f[1] @ f[2]
    cb = f[0] @ f[2]
    cg = f[0] @ f[1]
    if max(ca, cb, cg) > 1.0 - 1e-12:
        return []  # two rays coincide: no finite distance ratio

    # s2 = u s1, s3 = v s1; eliminate u to get a quartic in v
    amc = (a2 - c2) / b2
    apc = (a2 + c2) / b2
    A4 = (amc - 1) ** 2 - 4 * c2 / b2 * ca * ca
    A3 = 4 * (amc * (1 - amc) * cb - (1 - apc) * ca * cg + 2 * c2 / b2 * ca * ca * cb)
    A2 = 2 * (amc * amc - 1 + 2 * amc * amc * cb * cb + 2 * (b2 - c2) / b2 * ca * ca
              - 4 * apc * ca * cb * cg + 2 * (b2 - a2) / b2 * cg * cg)
    A1 = 4 * (-amc * (1 + amc) * cb + 2 * a2 / b2 * cg * cg * cb - (1 - apc) * ca * cg)
    A0 = (1 + amc) ** 2 - 4 * a2 / b2 * cg * cg
    coeffs = np.array([A4, A3, A2, A1, A0])
    lead = np.flatnonzero(np.abs(coeffs) > 1e-14 * np.abs(coeffs).max())
    if lead.size == 0:
        return []
    roots = np.roots(coeffs[lead[0]:])

    poses = []
    for v in roots:
        if abs(v.imag) > 1e-6 * max(1.0, abs(v.real)):
            continue
        v = v.real
        if v <= 0:
            continue
        q = 1 + v * v - 2 * v * cb
        if not q > 1e-15:
            continue
        s1sq = b2 / q
        us = []
        den = 2 * (cg - v * ca)
        if abs(den) > 1e-12:
            us.append(((-1 + amc) * v * v - 2 * amc * cb * v + 1 + amc) / den)
        # near-symmetric layouts make the linear relation 0/0, so also try u from the c-side equation;
        # the polish and bearing check below weed out whichever candidates are spurious
        disc = cg * cg - 1 + c2 / s1sq
        if disc >= 0:
            us += [cg + np.sqrt(disc), cg - np.sqrt(disc)]
        s1 = np.sqrt(s1sq)
        for u in us:
            if u <= 0:
                continue
            s = _refine_distances(np.array([s1, u * s1, v * s1]), (ca, cb, cg), (a2, b2, c2))
            if not np.all(np.isfinite(s)) or np.any(s <= 0):
                continue
            R, t = _absolute_orientation(P, s[:, None] * f)
            pose = RigidPose(R, t)
            Xc = pose.apply(P)
            cosang = np.sum(Xc * f, axis=1) / np.linalg.norm(Xc, axis=1)
            err = np.arccos(np.clip(cosang, -1.0, 1.0))
            if np.all(err <= check_tol):
                if not any(np.allclose(pose.R, q.R, atol=1e-7) and np.allclose(pose.t, q.t, atol=1e-7 * scale) for q in poses):
                    poses.append(pose)
    return poses


@dataclass
class PnPResult:
    pose: RigidPose
    inlier_mask: np.ndarray
    inlier_count: int
    iterations_run: int

    @property
    def success(self):
        return self.pose is not None


def reprojection_errors(pose: RigidPose, points3d, pixels, K: CameraIntrinsics):
    Xc = pose.apply(points3d)
    err = np.full(len(Xc), np.inf)
    front = Xc[:, 2] > 1e-9
    err[front] = np.linalg.norm(K.project(Xc[front]) - pixels[front], axis=1)
    return err


def ransac_p3p(points3d, pixels, K: CameraIntrinsics, threshold_px=3.0, max_iters=1000,
               seed=0, confidence=0.99, min_inliers=4):
    """Best minimal P3P model (camera-from-world) under a reprojection-error consensus.

    Each iteration draws its sample from a generator keyed by ``(seed,
    iteration)``, so the sample sequence does not depend on execution order.
    No refit is done on the final inlier set. ``confidence >= 1`` turns the
    adaptive exit off.
    """
    X = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    x = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    n = len(X)
    if n != len(x):
        raise ValueError(f"{n} points but {len(x)} pixels")
    if n < 4:
        raise ValueError(f"need at least 4 correspondences, got {n}")
    f = K.bearings(x)

    best = None  # (count, -mean_err, pose, mask)
    needed = max_iters
    it = 0
    while it < min(max_iters, needed):
        rng = np.random.Generator(np.random.Philox(key=seed, counter=it))
        it += 1
        idx = rng.choice(n, 3, replace=False)
        try:
            cands = p3p_solve(X[idx], f[idx])
        except DegenerateConfigurationError:
            continue
        for pose in cands:
            err = reprojection_errors(pose, X, x, K)
            mask = err <= threshold_px
            count = int(mask.sum())
            if count == 0:
                continue
            score = (count, -float(err[mask].mean()))
            if best is None or score > best[0]:
                best = (score, pose, mask)
                w = count / n
                if confidence >= 1.0:
                    pass  # no early exit: always spend max_iters
                elif w >= 1.0:
                    needed = it
                else:
                    denom = np.log(1.0 - w ** 3)
                    if denom < 0:
                        needed = min(max_iters, int(np.ceil(np.log(1.0 - confidence) / denom)))
    if best is None or best[0][0] < min_inliers:
        return PnPResult(None, np.zeros(n, dtype=bool), 0, it)
    _, pose, mask = best
    return PnPResult(pose, mask, int(mask.sum()), it)


def rotation_geodesic_deg(Ra, Rb, tol=1e-6):
    Ra = np.asarray(Ra, dtype=np.float64)
    Rb = np.asarray(Rb, dtype=np.float64)
    for R in (Ra, Rb):
        if np.linalg.norm(R.T @ R - np.eye(3)) > tol:
            raise ValueError("rotation matrix is not orthonormal")
    D = Ra.T @ Rb
    # atan2 of the skew and trace parts stays accurate near 0 and 180 degrees, where arccos does not
    s = 0.5 * np.linalg.norm([D[2, 1] - D[1, 2], D[0, 2] - D[2, 0], D[1, 0] - D[0, 1]])
    c = (np.trace(D) - 1.0) / 2.0
    return float(np.degrees(np.arctan2(s, c)))


def translation_error_m(ta, tb):
    return float(np.linalg.norm(np.asarray(ta, dtype=np.float64) - np.asarray(tb, dtype=np.float64)))


def axis_angle_rotation(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    Kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * Kx + (1 - np.cos(angle)) * Kx @ Kx
