import math

import numpy as np
import pytest

from imip.correspondence import HomographyCorrespondence, IdentityCorrespondence, MatchLabel, label_matches
from imip.extraction import InterestPoints, match_by_channel
from imip.network import NetworkConfig, forward_full, forward_patches, init_weights
from imip.numerics import finite_difference_check
from imip.synthetic import homography_pair
from imip.training import (
    TrainConfig,
    gather_patch,
    loss_correspondence,
    loss_inlier,
    loss_redundancy,
    new_adam_state,
    pair_loss,
    train,
    train_step,
    validate,
)

I, O, U = MatchLabel.INLIER, MatchLabel.OUTLIER, MatchLabel.UNASSIGNED
LN2 = math.log(2.0)


def test_gather_patch():
    img = np.arange(60 * 60, dtype=float).reshape(60, 60)
    p = gather_patch(img, (30, 30), 29)
    np.testing.assert_array_equal(p, img[16:45, 16:45])
    assert gather_patch(img, (0, 0), 29) is None
    assert gather_patch(img, (np.nan, 3), 29) is None
    with pytest.raises(ValueError):
        gather_patch(img, (30, 30), 28)


def test_gathered_patch_matches_full_forward():
    params = init_weights(NetworkConfig(n_channels=4, depth=3, intermediate_channels=(4, 4), dtype="float64"))
    img = np.random.default_rng(0).uniform(size=(30, 30))
    patch = gather_patch(img, (12, 17), params.receptive_field)
    resp = forward_patches(patch[None, ..., None], params)[0, 0, 0]
    np.testing.assert_allclose(resp, forward_full(img, params)[17, 12], atol=1e-5)


def test_loss_inlier_values():
    p = np.full((3, 3), 0.5)
    l, g = loss_inlier(p, np.array([I, U, U]))
    assert l == pytest.approx(LN2, abs=1e-6)
    l, _ = loss_inlier(p, np.array([U, O, U]))
    assert l == pytest.approx(LN2, abs=1e-6)
    l, g = loss_inlier(p, np.array([U, U, U]))
    assert l == 0.0 and not g.any()


def test_loss_redundancy_values():
    p = np.full((3, 3), 0.5)
    l, g = loss_redundancy(p, np.array([I, U, U]))
    assert l == pytest.approx(2 * LN2, abs=1e-6)
    assert g[0, 0] == 0 and g[0, 1] > 0 and g[0, 2] > 0 and not g[1:].any()
    assert loss_redundancy(p, np.array([O, U, O]))[0] == 0.0


def test_loss_correspondence_values():
    p = np.full((3, 3), 0.5)
    l, _ = loss_correspondence(p, np.array([U, O, U]))
    assert l == pytest.approx(LN2, abs=1e-6)
    assert loss_correspondence(p, np.array([I, U, I]))[0] == 0.0


def test_losses_clamped_and_non_negative():
    rng = np.random.default_rng(1)
    p = rng.uniform(size=(5, 5))
    p[0, 0] = 0.0
    p[1, 1] = 1.0
    labels = np.array([I, O, U, I, O])
    for fn in (loss_inlier, loss_redundancy, loss_correspondence):
        l, g = fn(p, labels)
        assert np.isfinite(l) and l >= 0 and np.all(np.isfinite(g))
    assert loss_inlier(p, labels)[0] >= -math.log(1e-6) - 1e-9


def test_loss_gradients_fd():
    rng = np.random.default_rng(2)
    p = rng.uniform(0.05, 0.95, size=(4, 4))
    labels = np.array([I, O, U, I])
    for fn in (loss_inlier, loss_redundancy, loss_correspondence):
        _, g = fn(p, labels)
        err = finite_difference_check(lambda v: fn(v.reshape(4, 4), labels)[0], p, g, h=1e-7)
        assert err < 1e-6


def test_table1_arrow_pattern():
    """n=3 toy: chn 0 inlier, chn 1 outlier, chn 2 unassigned."""
    labels = np.array([I, O, U])
    p = np.full((3, 3), 0.5)
    pc = np.full((3, 3), 0.5)
    g = loss_inlier(p, labels)[1] + loss_redundancy(p, labels)[1]
    gc = loss_correspondence(pc, labels)[1]
    # gradient descent moves against the gradient: negative = promoted, positive = suppressed
    assert g[0, 0] < 0  # chn 0 on P(P0) up
    assert g[1, 1] > 0  # chn 1 on P(P1) down
    assert g[0, 1] > 0 and g[0, 2] > 0  # chn 1 and 2 suppressed on P(P0)
    assert gc[1, 1] < 0  # chn 1 promoted on P(Q'1)
    expected = np.zeros((3, 3), dtype=bool)
    expected[0, 0] = expected[1, 1] = expected[0, 1] = expected[0, 2] = True
    np.testing.assert_array_equal(g != 0, expected)
    expected_c = np.zeros((3, 3), dtype=bool)
    expected_c[1, 1] = True
    np.testing.assert_array_equal(gc != 0, expected_c)
    # the unassigned channel contributes nothing on its own row
    assert not g[2].any() and not gc[2].any()


def _pts(xy):
    xy = np.asarray(xy)
    return InterestPoints(xy, np.zeros(len(xy)))


def labeled_toy(shape=(40, 40)):
    """Three channels: inlier, outlier with an in-frame correspondence, and unassigned."""
    H = np.array([[1, 0, 2.0], [0, 1, 1.0], [0, 0, 1]])
    psi = HomographyCorrespondence(H, shape)
    a = _pts([[12, 12], [20, 25], [8, 30]])
    b = _pts([[14, 13], [27, 15], [1, 31]])
    return label_matches(match_by_channel(a, b), psi)


def test_toy_labels():
    lab = labeled_toy()
    assert list(lab.labels) == [I, O, U]


def flat(params):
    return np.concatenate([a.ravel() for a in params.arrays()])


def unflat(params, v):
    out, pos = [], 0
    for a in params.arrays():
        out.append(v[pos:pos + a.size].reshape(a.shape))
        pos += a.size
    return params.with_arrays(out)


def test_pair_loss_gradient_fd():
    params = init_weights(NetworkConfig(n_channels=3, depth=2, intermediate_channels=(3, 3), seed=1, dtype="float64"))
    rng = np.random.default_rng(3)
    img_a, img_b = rng.uniform(size=(40, 40)), rng.uniform(size=(40, 40))
    lab = labeled_toy()
    cfg = TrainConfig()
    report, grads = pair_loss(params, img_a, img_b, lab, cfg)
    assert report.L_inl > 0 and report.L_red > 0 and report.L_cor > 0
    g = np.concatenate([x.ravel() for x in grads])

    def f(v):
        return pair_loss(unflat(params, v), img_a, img_b, lab, cfg, with_grad=False)[0].total

    assert finite_difference_check(f, flat(params), g) < 1e-3


def test_unassigned_channel_zero_gradient():
    params = init_weights(NetworkConfig(n_channels=3, depth=2, intermediate_channels=(3, 3), dtype="float64"))
    rng = np.random.default_rng(4)
    img_a, img_b = rng.uniform(size=(40, 40)), rng.uniform(size=(40, 40))
    lab = labeled_toy()
    lab.labels[:] = U
    report, grads = pair_loss(params, img_a, img_b, lab, TrainConfig())
    assert report.total == 0.0 and report.skipped
    assert all(not g.any() for g in grads)


def small_net(n=4, seed=0):
    return init_weights(NetworkConfig(n_channels=n, depth=3, intermediate_channels=(6, 8), seed=seed))


def _overfit_identical(seed, cfg, steps=10):
    img = homography_pair((40, 40), seed=2)[0].astype(np.float32)
    params = small_net(seed=seed)
    state = new_adam_state(params, cfg)
    psi = IdentityCorrespondence(img.shape)
    reports = []
    for _ in range(steps):
        params, state, report, lab = train_step(img, img, psi, params, state, cfg)
        assert lab.n_inliers == params.config.n_channels
        assert report.L_cor == 0.0
        reports.append(report)
    assert state.step_count == steps
    return reports


@pytest.mark.parametrize("seed", range(4))
def test_identical_images_objective_strictly_decreases(seed):
    # losses are measured before each update, so the descended objective must fall every step
    totals = [r.total for r in _overfit_identical(seed, TrainConfig())]
    assert all(b < a for a, b in zip(totals, totals[1:]))


@pytest.mark.parametrize("seed", range(4))
def test_identical_images_inlier_loss_strictly_decreases_alone(seed):
    # with redundancy suppression switched off the inlier term is the whole objective
    reports = _overfit_identical(seed, TrainConfig(w_red=0.0))
    l_inl = [r.L_inl for r in reports]
    assert all(b < a for a, b in zip(l_inl, l_inl[1:]))


def test_train_step_too_small_image():
    params = small_net()
    with pytest.raises(ValueError):
        train_step(np.zeros((5, 40)), np.zeros((40, 40)), IdentityCorrespondence((40, 40)), params,
                   new_adam_state(params, TrainConfig()), TrainConfig())


def test_train_zero_iterations_returns_initial():
    params = small_net()
    img_a, img_b, psi = homography_pair((40, 40), seed=3)
    out, log = train([(img_a, img_b, psi)], params, TrainConfig(iterations=0))
    assert out is params and log.rows == []


def test_train_deterministic_log(tmp_path):
    img_a, img_b, psi = homography_pair((40, 40), seed=3)
    cfg = TrainConfig(iterations=6, lr=1e-3, val_every=3)
    val = [(img_a, img_b, psi)]
    runs = []
    for k in range(2):
        _, log = train([(img_a, img_b, psi)], small_net(seed=4), cfg, val_pairs=val)
        log.write_csv(tmp_path / f"log{k}.csv")
        runs.append((tmp_path / f"log{k}.csv").read_text())
    assert runs[0] == runs[1]
    lines = runs[0].splitlines()
    assert lines[0] == "step,L_inl,L_red,L_cor,inlier_count,val_inlier_mean"
    assert len(lines) == 7
    assert lines[1].endswith(",") and not lines[3].endswith(",")


def test_train_returns_best_validation_snapshot():
    img_a, img_b, psi = homography_pair((40, 40), seed=5)
    cfg = TrainConfig(iterations=4, lr=1e-3, val_every=2)
    snapshots = []
    best, _ = train([(img_a, img_b, psi)], small_net(seed=1), cfg, val_pairs=[(img_a, img_b, psi)],
                    callback=lambda step, p, r, l: snapshots.append(p))
    candidates = [small_net(seed=1), snapshots[1], snapshots[3]]
    scores = [validate(p, [(img_a, img_b, psi)], cfg).mean_inliers for p in candidates]
    assert validate(best, [(img_a, img_b, psi)], cfg).mean_inliers == max(scores)


def test_validate_scores():
    img = homography_pair((40, 40), seed=6)[0]
    params = small_net(n=4)
    s = validate(params, [(img, img, IdentityCorrespondence(img.shape))])
    assert s.mean_inliers == 4 and s.matching_scores[0] == 1.0
    with pytest.raises(ValueError):
        validate(params, [])


def test_validate_does_not_mutate():
    params = small_net()
    before = [a.copy() for a in params.arrays()]
    img_a, img_b, psi = homography_pair((40, 40), seed=7)
    validate(params, [(img_a, img_b, psi)])
    for x, y in zip(before, params.arrays()):
        np.testing.assert_array_equal(x, y)
