"""Procedural test data: analytic textures that can be sampled at any sub-pixel location."""
import hashlib

import numpy as np

from .correspondence import HomographyCorrespondence


class TextureField:
    """Sum of random plane waves, rescaled to [0, 1]; smooth and exactly shiftable."""

    def __init__(self, seed=0, n_waves=40, min_period=8.0, max_period=50.0):
        rng = np.random.default_rng(seed)
        freq = 1.0 / rng.uniform(min_period, max_period, n_waves)
        theta = rng.uniform(0, 2 * np.pi, n_waves)
        self.kx = 2 * np.pi * freq * np.cos(theta)
        self.ky = 2 * np.pi * freq * np.sin(theta)
        self.phase = rng.uniform(0, 2 * np.pi, n_waves)
        self.amp = rng.uniform(0.5, 1.0, n_waves)
        self.norm = self.amp.sum()

    def __call__(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        arg = x[..., None] * self.kx + y[..., None] * self.ky + self.phase
        v = (self.amp * np.sin(arg)).sum(-1) / self.norm
        return 0.5 + 0.5 * v

    def render(self, shape, shift=(0.0, 0.0)):
        """Image whose content is moved by ``shift`` = (dx, dy) pixels."""
        h, w = shape
        y, x = np.mgrid[0:h, 0:w].astype(np.float64)
        return self(x - shift[0], y - shift[1])

    def render_homography(self, shape, H):
        """Image I' with I'(H p) = I(p), where I is :meth:`render` without shift."""
        h, w = shape
        y, x = np.mgrid[0:h, 0:w].astype(np.float64)
        hom = np.stack([x, y, np.ones_like(x)], -1) @ np.linalg.inv(H).T
        return self(hom[..., 0] / hom[..., 2], hom[..., 1] / hom[..., 2])


def blob_texture(shape, seed=0, n_blobs=60, sigma_range=(1.5, 4.0)):
    """Random Gaussian blobs of either polarity on a mid-gray background, as a callable field."""
    rng = np.random.default_rng(seed)
    h, w = shape
    cx = rng.uniform(-10, w + 10, n_blobs)
    cy = rng.uniform(-10, h + 10, n_blobs)
    sig = rng.uniform(*sigma_range, n_blobs)
    amp = rng.uniform(0.2, 0.5, n_blobs) * rng.choice([-1.0, 1.0], n_blobs)

    def field(x, y):
        x = np.asarray(x, dtype=np.float64)[..., None]
        y = np.asarray(y, dtype=np.float64)[..., None]
        v = (amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sig ** 2))).sum(-1)
        return np.clip(0.5 + v, 0.0, 1.0)

    return field


def render_field(field, shape, H=None):
    h, w = shape
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    if H is None:
        return field(x, y)
    hom = np.stack([x, y, np.ones_like(x)], -1) @ np.linalg.inv(H).T
    return field(hom[..., 0] / hom[..., 2], hom[..., 1] / hom[..., 2])


def similarity_homography(angle_deg=0.0, scale=1.0, shift=(0.0, 0.0), center=(0.0, 0.0), persp=(0.0, 0.0)):
    """Rotation/scale about ``center`` followed by a shift, plus optional perspective terms."""
    a = np.radians(angle_deg)
    c, s = scale * np.cos(a), scale * np.sin(a)
    cx, cy = center
    T1 = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
    Rs = np.array([[c, -s, 0], [s, c, 0], [persp[0], persp[1], 1.0]])
    T2 = np.array([[1, 0, cx + shift[0]], [0, 1, cy + shift[1]], [0, 0, 1.0]])
    return T2 @ Rs @ T1


def homography_pair(shape, seed=0, angle_deg=5.0, scale=1.02, shift=(3.0, -2.0), texture="blobs"):
    """Image pair related by a known homography, plus its correspondence provider."""
    h, w = shape
    field = blob_texture(shape, seed) if texture == "blobs" else TextureField(seed)
    H = similarity_homography(angle_deg, scale, shift, center=(w / 2, h / 2))
    img_a = render_field(field, shape)
    img_b = render_field(field, shape, H)
    return img_a, img_b, HomographyCorrespondence(H, shape, shape)


# -- rendered stereo sequences -------------------------------------------------

class TexturedPlane:
    """Plane ``normal . X = offset`` in world coordinates, painted with a texture field.

    Texture coordinates are the in-plane coordinates times ``px_per_m``.
    """

    def __init__(self, normal, offset, texture, px_per_m=12.0):
        n = np.asarray(normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)
        self.offset = float(offset)
        helper = np.array([1.0, 0, 0]) if abs(self.normal[0]) < 0.9 else np.array([0, 1.0, 0])
        self.u = np.cross(self.normal, helper)
        self.u /= np.linalg.norm(self.u)
        self.v = np.cross(self.normal, self.u)
        self.texture = texture
        self.px_per_m = px_per_m

    def shade(self, X):
        s = self.px_per_m
        return self.texture(X @ self.u * s, X @ self.v * s)


def corridor_planes(seed=0, half_width=3.0, floor=1.5, ceiling=-2.5, back=30.0):
    """Floor, ceiling, two side walls and an end wall; camera looks down +z with y pointing down."""
    tex = [TextureField(seed * 10 + i, n_waves=30, min_period=6.0, max_period=30.0) for i in range(5)]
    return [
        TexturedPlane([0, 1, 0], floor, tex[0]),
        TexturedPlane([0, 1, 0], ceiling, tex[1]),
        TexturedPlane([1, 0, 0], -half_width, tex[2]),
        TexturedPlane([1, 0, 0], half_width, tex[3]),
        TexturedPlane([0, 0, 1], back, tex[4]),
    ]


def render_view(planes, K, pose_wc, shape, supersample=2):
    """Ray-cast the nearest plane for each pixel. Returns (image in [0, 1], depth along the optical axis).

    Intensities average ``supersample``² sub-pixel rays to keep distant texture from aliasing;
    depth is taken from the ray through the pixel centre.
    """
    h, w = shape
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    image = np.zeros(shape)
    ss = max(1, int(supersample))
    for j in range(ss):
        for i in range(ss):
            dx, dy = (i + 0.5) / ss - 0.5, (j + 0.5) / ss - 0.5
            image += _cast(planes, K, pose_wc, x + dx, y + dy)[0]
    return image / ss ** 2, _cast(planes, K, pose_wc, x, y)[1]


def _cast(planes, K, pose_wc, x, y):
    shape = x.shape
    rays = np.stack([(x - K.cx) / K.fx, (y - K.cy) / K.fy, np.ones_like(x)], -1)  # z = 1 in camera frame
    dirs = rays @ pose_wc.R.T
    origin = pose_wc.t
    depth = np.full(shape, np.inf)
    image = np.zeros(shape)
    for pl in planes:
        denom = dirs @ pl.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (pl.offset - origin @ pl.normal) / denom
        hit = (t > 1e-6) & (t < depth) & np.isfinite(t)
        if not hit.any():
            continue
        depth[hit] = t[hit]
        image[hit] = pl.shade(origin + dirs[hit] * t[hit][:, None])
    return image, depth


def forward_trajectory(n_frames, step=0.25, yaw_deg=0.6, seed=0):
    """World-from-camera poses drifting forward with a gentle random wobble."""
    from .geometry import RigidPose, axis_angle_rotation
    rng = np.random.default_rng(seed)
    poses, yaw, pos = [], 0.0, np.zeros(3)
    for _ in range(n_frames):
        R = axis_angle_rotation([0, 1, 0], np.radians(yaw)) @ axis_angle_rotation(
            [1, 0, 0], np.radians(rng.uniform(-0.3, 0.3)))
        poses.append(RigidPose(R, pos.copy()))
        pos = pos + R @ np.array([rng.uniform(-0.02, 0.02), 0.0, step])
        yaw += rng.uniform(-yaw_deg, yaw_deg)
    return poses


def stereo_sequence(n_frames, shape=(120, 160), K=None, baseline=0.5, seed=0, step=0.25, supersample=2):
    """Rendered rectified stereo sequence. Poses are world-from-left-camera.

    Returns a dict with ``left``, ``right``, ``depth`` (left), ``poses``, ``K`` and ``baseline``.
    """
    from .geometry import CameraIntrinsics, RigidPose
    h, w = shape
    if K is None:
        K = CameraIntrinsics(0.9 * w, 0.9 * w, (w - 1) / 2, (h - 1) / 2, w, h)
    planes = corridor_planes(seed)
    poses = forward_trajectory(n_frames, step, seed=seed)
    to_right = RigidPose(np.eye(3), [baseline, 0.0, 0.0])
    left, right, depth = [], [], []
    for p in poses:
        im, d = render_view(planes, K, p, shape, supersample)
        left.append(im)
        depth.append(d)
        right.append(render_view(planes, K, p.compose(to_right), shape, supersample)[0])
    return dict(left=left, right=right, depth=depth, poses=poses, K=K, baseline=baseline)


class LandmarkOracle:
    """Stand-in detector that knows the scene: channel i peaks where landmark i projects.

    Images are recognised by content, so they must be registered with the
    world-from-camera pose they were rendered from. Channels whose landmark
    is behind the camera or off-image stay flat.
    """

    def __init__(self, landmarks, K, peak=0.95, floor=0.05):
        self.landmarks = np.asarray(landmarks, dtype=np.float64)
        self.K = K
        self.peak, self.floor = peak, floor
        self._views = {}

    @staticmethod
    def _key(image):
        a = np.ascontiguousarray(image, dtype=np.float32)
        return hashlib.sha1(a.tobytes() + str(a.shape).encode()).hexdigest()

    def register(self, image, pose_wc):
        self._views[self._key(image)] = pose_wc

    def __call__(self, image):
        pose = self._views.get(self._key(image))
        if pose is None:
            raise KeyError("image was not registered with the oracle")
        h, w = np.shape(image)
        n = len(self.landmarks)
        stack = np.full((h, w, n), self.floor, dtype=np.float32)
        Xc = pose.inverse().apply(self.landmarks)
        front = Xc[:, 2] > 1e-6
        px = np.full((n, 2), -1.0)
        px[front] = self.K.project(Xc[front])
        xi, yi = np.rint(px[:, 0]).astype(int), np.rint(px[:, 1]).astype(int)
        ok = front & (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        stack[yi[ok], xi[ok], np.flatnonzero(ok)] = self.peak
        return stack
