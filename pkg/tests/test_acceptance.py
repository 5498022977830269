"""Acceptance criteria A1-A8. Each test records one PASS/FAIL line, shown in the terminal summary."""
import math
import time
from pathlib import Path

import numpy as np

from conftest import record_acceptance
from imip.bench import (
    ACCURACY_PRESETS,
    CSV_HEADER,
    EvalConfig,
    EvalRecord,
    accuracy,
    evaluate_pairs,
    matching_score,
    open_dataset,
    write_synthetic_stereo_dataset,
)
from imip.compression import payload_bytes, representation_size_bytes
from imip.correspondence import HomographyCorrespondence, MatchLabel, label_matches
from imip.extraction import InterestPoints, match_by_channel, pack_coordinates, unpack_coordinates
from imip.geometry import (
    CameraIntrinsics,
    RigidPose,
    axis_angle_rotation,
    ransac_p3p,
    rotation_geodesic_deg,
    translation_error_m,
    triangulate_rectified,
)
from imip.klt import KltConfig, track_points
from imip.network import NetworkConfig, forward_full, forward_patches, init_weights
from imip.numerics import finite_difference_check
from imip.synthetic import LandmarkOracle, TextureField, homography_pair
from imip.training import TrainConfig, gather_patch, new_adam_state, pair_loss, train_step

GOLDEN = Path(__file__).parent / "golden"


def test_a1_full_loss_gradient():
    t0 = time.perf_counter()
    params = init_weights(NetworkConfig(n_channels=4, depth=2, intermediate_channels=(4, 4), seed=7,
                                        dtype="float64"))
    rng = np.random.default_rng(11)
    img_a, img_b = rng.uniform(size=(40, 40)), rng.uniform(size=(40, 40))
    # translation by (2, 1): channels 0 and 3 are inliers, 1 an outlier, 2 unassigned (leaves frame)
    psi = HomographyCorrespondence(np.array([[1, 0, 2.0], [0, 1, 1.0], [0, 0, 1]]), (40, 40))
    a = InterestPoints(np.array([[12, 12], [20, 25], [8, 30], [25, 10]]), np.ones(4))
    b = InterestPoints(np.array([[14, 13], [27, 15], [1, 31], [27, 11]]), np.ones(4))
    lab = label_matches(match_by_channel(a, b), psi)
    I, O, U = MatchLabel.INLIER, MatchLabel.OUTLIER, MatchLabel.UNASSIGNED
    assert list(lab.labels) == [I, O, U, I]
    cfg = TrainConfig()
    report, grads = pair_loss(params, img_a, img_b, lab, cfg)
    assert report.L_inl > 0 and report.L_red > 0 and report.L_cor > 0
    shapes = [x.shape for x in params.arrays()]

    def f(v):
        parts, pos = [], 0
        for s in shapes:
            size = int(np.prod(s))
            parts.append(v[pos:pos + size].reshape(s))
            pos += size
        return pair_loss(params.with_arrays(parts), img_a, img_b, lab, cfg, with_grad=False)[0].total

    flat = np.concatenate([x.ravel() for x in params.arrays()])
    err = finite_difference_check(f, flat, np.concatenate([g.ravel() for g in grads]))
    dt = time.perf_counter() - t0
    ok = err < 1e-3 and dt < 60
    record_acceptance("A1", ok, f"max rel err {err:.2e} over {flat.size} params, {dt:.1f}s")
    assert ok


def test_a2_patch_full_equivalence():
    t0 = time.perf_counter()
    params = init_weights(NetworkConfig(seed=3))  # default 14-layer float32 network
    r = params.receptive_field
    half = r // 2
    rng = np.random.default_rng(5)
    agree = total = 0
    for _ in range(20):
        img = rng.uniform(size=(48, 48)).astype(np.float32)
        full = forward_full(img, params)
        ys = rng.integers(half, 48 - half, 25)
        xs = rng.integers(half, 48 - half, 25)
        batch = np.stack([gather_patch(img, (x, y), r) for x, y in zip(xs, ys)])[..., None]
        out = forward_patches(batch.astype(np.float32), params)[:, 0, 0, :]
        close = np.all(np.abs(out - full[ys, xs]) <= 1e-5, axis=1)
        agree += int(close.sum())
        total += len(close)
    dt = time.perf_counter() - t0
    ok = agree >= 0.999 * total and dt < 120
    record_acceptance("A2", ok, f"{agree}/{total} sampled interior pixels within 1e-5, {dt:.1f}s")
    assert ok


def test_a3_desk_scale_convergence():
    t0 = time.perf_counter()
    size = 64
    img_a, img_b, psi = homography_pair((size, size), seed=1, texture="blobs", angle_deg=15.0, shift=(6.0, -4.0))
    img_a, img_b = img_a.astype(np.float32), img_b.astype(np.float32)
    params = init_weights(NetworkConfig(n_channels=8, depth=6, intermediate_channels=(16, 32), seed=0))
    # the 1e-5 default stalls near 4/8 inliers at this scale; see the README note on learning rate
    cfg = TrainConfig(iterations=2000, lr=1e-3)
    state = new_adam_state(params, cfg)
    best = (0, 0.0, -1)
    for step in range(cfg.iterations + 1):
        # labels come from the parameters before this update, so this measures the net after `step` updates
        new_params, new_state, _, lab = train_step(img_a, img_b, psi, params, state, cfg)
        distinct = min(len({tuple(p) for p in lab.matches.a.xy}), len({tuple(p) for p in lab.matches.b.xy})) / 8
        if (lab.n_inliers, distinct) > best[:2]:
            best = (lab.n_inliers, distinct, step)
        if step == 0:
            start = (lab.n_inliers, distinct)
        if lab.n_inliers >= 6 and distinct >= 0.9:
            break
        if step < cfg.iterations:
            params, state = new_params, new_state
    dt = time.perf_counter() - t0
    ok = lab.n_inliers >= 6 and distinct >= 0.9 and dt < 600
    record_acceptance("A3", ok, f"{lab.n_inliers}/8 inliers, {distinct:.0%} distinct after {step} steps "
                                f"(untrained {start[0]}/8, {start[1]:.0%}; best {best[0]}/8 at step {best[2]}), {dt:.1f}s")
    assert ok


CAM = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


def _pnp_scene(seed, n_in=70, n_out=30, noise=0.5):
    rng = np.random.default_rng(seed)
    pose = RigidPose(axis_angle_rotation(rng.normal(size=3), rng.uniform(0, np.pi)), rng.uniform(-3, 3, 3))
    n = n_in + n_out
    px = rng.uniform([0, 0], [CAM.width, CAM.height], (n, 2))
    z = rng.uniform(4.0, 12.0, n)
    Xc = np.column_stack([(px[:, 0] - CAM.cx) / CAM.fx * z, (px[:, 1] - CAM.cy) / CAM.fy * z, z])
    obs = px.copy()
    obs[:n_in] += rng.normal(0, noise, (n_in, 2))
    obs[n_in:] = rng.uniform([0, 0], [CAM.width, CAM.height], (n_out, 2))
    return pose.inverse().apply(Xc), obs, pose, np.linalg.norm(Xc[:n_in], axis=1).mean()


def test_a4_p3p_ransac_oracle():
    t0 = time.perf_counter()
    good = 0
    low_count = []
    for seed in range(100):
        Xw, px, pose, scale = _pnp_scene(seed)
        res = ransac_p3p(Xw, px, CAM, seed=seed)
        if not res.success:
            continue
        if res.inlier_count < 10:
            low_count.append(seed)
        if (rotation_geodesic_deg(res.pose.R, pose.R) < 0.5
                and translation_error_m(res.pose.t, pose.t) < 0.01 * scale):
            good += 1
    dt = time.perf_counter() - t0
    ok = good >= 95 and not low_count and dt < 60
    record_acceptance("A4", ok, f"{good}/100 runs within 0.5 deg and 1% scale, "
                                f"{len(low_count)} successes under 10 inliers, {dt:.1f}s")
    assert ok


def test_a5_klt_translation_accuracy():
    t0 = time.perf_counter()
    rng = np.random.default_rng(21)
    cfg = KltConfig(levels=3)
    grid = np.array([[x, y] for y in (44.0, 64.0, 84.0) for x in (44.0, 64.0, 84.0)])
    worst, lost = 0.0, 0
    for seed in range(50):
        tex = TextureField(seed=100 + seed)
        theta = rng.uniform(0, 2 * np.pi)
        mag = 8.0 if seed < 5 else rng.uniform(0, 8.0)
        shift = np.array([mag * np.cos(theta), mag * np.sin(theta)])
        a = tex.render((128, 128))
        b = tex.render((128, 128), tuple(shift))
        q, ok = track_points(a, b, grid, cfg)
        lost += int((~ok).sum())
        if ok.any():
            worst = max(worst, float(np.abs(q[ok] - (grid[ok] + shift)).max()))
    dt = time.perf_counter() - t0
    ok = lost == 0 and worst <= 0.2 and dt < 60
    record_acceptance("A5", ok, f"worst error {worst:.4f}px over {50 * len(grid)} tracks, {lost} lost, {dt:.1f}s")
    assert ok


def test_a6_size_accounting():
    ours = representation_size_bytes("ours", n=128)
    pq16 = payload_bytes("pq", m=2, k=16)
    pq256 = payload_bytes("pq", m=2, k=256)
    corners = np.array([[0, 0], [4095, 0], [0, 4095], [4095, 4095]])
    pts = np.vstack([corners, np.random.default_rng(0).integers(0, 4096, (10_000, 2))])
    blob = pack_coordinates(pts)
    roundtrip = len(blob) == 3 * len(pts) and np.array_equal(unpack_coordinates(blob), pts)
    ok = ours == 384 and pq16 == 1 and pq256 == 2 and roundtrip
    record_acceptance("A6", ok, f"ours={ours}B pq(2,16)={pq16}B pq(2,256)={pq256}B, "
                                f"pack roundtrip over {len(pts)} points {'exact' if roundtrip else 'BROKEN'}")
    assert ok


def test_a7_metrics_arithmetic():
    ms = matching_score(10, 128)
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(1000):
        base = axis_angle_rotation(rng.normal(size=3), rng.uniform(0, np.pi))
        angle = rng.uniform(0, np.pi)
        R = base @ axis_angle_rotation(rng.normal(size=3), angle)
        worst = max(worst, abs(rotation_geodesic_deg(base, R) - math.degrees(angle)))
    presets = ACCURACY_PRESETS["kitti"] == (1.0, 0.30) and ACCURACY_PRESETS["euroc"] == (3.0, 0.10)
    rec = lambda eR, et: EvalRecord("s_0_1", 0.0, 0.0, 0.0, eR, et, 0)
    recs = [rec(0.9, 0.29), rec(1.1, 0.05), rec(2.9, 0.09), rec(0.5, 0.31)]
    rules = (accuracy(recs, preset="kitti") == 0.25 and accuracy(recs, preset="euroc") == 0.5)
    ok = ms == 0.078125 and worst <= 1e-9 and presets and rules
    record_acceptance("A7", ok, f"matching_score(10,128)={ms}, geodesic worst dev {worst:.1e} deg, "
                                f"presets {'ok' if presets and rules else 'WRONG'}")
    assert ok


def _a8_csv(root):
    path = write_synthetic_stereo_dataset(root, n_frames=4, shape=(96, 128), seed=3,
                                          pairs=[(0, 1), (0, 2), (1, 3)])
    ds = open_dataset(path)
    rng = np.random.default_rng(0)
    n = 48
    xs, ys, disp = rng.integers(16, 112, n), rng.integers(12, 84, n), rng.integers(8, 30, n)
    Xa = np.array([triangulate_rectified(float(x), float(x - d), float(y), ds.K, ds.baseline)
                   for x, y, d in zip(xs, ys, disp)])
    det = LandmarkOracle(ds.poses[0].apply(Xa), ds.K)
    right = RigidPose(np.eye(3), [ds.baseline, 0, 0])
    for i in range(ds.n_frames):
        det.register(ds.image(i, "left"), ds.poses[i])
        det.register(ds.image(i, "right"), ds.poses[i].compose(right))
    out = root / "results.csv"
    evaluate_pairs(ds, det, EvalConfig(), out_csv=out)
    return out.read_bytes()


def test_a8_csv_golden(tmp_path):
    first = _a8_csv(tmp_path / "one")
    second = _a8_csv(tmp_path / "two")
    golden = (GOLDEN / "a8_results.csv").read_bytes()
    lines = first.decode().splitlines()
    ok = (first == second == golden and lines[0] == ",".join(CSV_HEADER) == "name,dR,dt,matching score,eR,et"
          and len(lines) == 4)
    record_acceptance("A8", ok, f"{len(lines) - 1} rows, stable across runs: {first == second}, "
                                f"matches golden: {first == golden}")
    assert ok
