import math

import numpy as np
import pytest

import _mtscene as m


def test_awu_hand_case():
    w = m.awu_step([0.5, 0.5], [0.0, math.log(2.0)], eta=1.0)
    assert w[0] == pytest.approx(2.0 / 3.0, abs=1e-9)
    assert w[1] == pytest.approx(1.0 / 3.0, abs=1e-9)
    assert sum(w) == pytest.approx(1.0, abs=1e-12)


def test_optimal_weights_orthogonal_equal_norm():
    g = np.eye(3) * 2.0
    w = m.optimal_weights(g, lambda_reg=1e-3)
    for wi in w:
        assert wi == pytest.approx(1.0 / 3.0, abs=1e-9)


def test_seg_loss_perfect_prediction_is_small():
    rng = np.random.default_rng(0)
    target = (rng.random((8, 8)) > 0.5).astype(float)
    logits = np.stack([(1 - target) * 50.0, target * 50.0])
    assert m.seg_loss(logits, target) < 1e-6


def test_depth_loss_identity_is_near_zero():
    # the smooth |x| surrogate floors at sqrt(eps) = 1e-6 per pixel
    rng = np.random.default_rng(1)
    d = rng.random((8, 8))
    assert m.depth_loss(d, d) == pytest.approx(0.0, abs=1e-5)
    assert m.depth_loss(d, 1.0 - d) > 0.1


def test_dice_and_ap():
    a = np.zeros((4, 4))
    a[1:3, 1:3] = 1
    assert m.dice(a, a) == 1.0
    gt = [(0.0, 0.0, 10.0, 10.0, 1)]
    dets = [(0.0, 0.0, 10.0, 10.0, 1, 0.9)]
    assert m.average_precision(dets, gt, 0.5) == 1.0


def test_generate_scene_deterministic():
    a = m.generate_scene(3, image_size=32)
    b = m.generate_scene(3, image_size=32)
    assert np.array_equal(a["image"], b["image"])
    assert np.array_equal(a["depth"], b["depth"])
    assert a["boxes"] == b["boxes"]
    assert len(a["boxes"]) >= 1
    assert a["image"].shape == (3, 32, 32)


def test_backproject_shape_and_scale():
    s = m.generate_scene(5, image_size=32)
    pts = m.backproject(s["depth"], s["image"], s["intrinsics"], s["depth_scale_mm"])
    assert pts.shape == (32 * 32, 3)
    z = pts[:, 2]
    assert z.max() <= s["depth_scale_mm"] + 1e-3
    assert z.min() > 0


def test_gradcheck_small():
    r = m.gradcheck(seed=7)
    assert r["seg"] < 1e-4
    assert r["depth"] < 1e-4
    assert r["detection"] < 1e-4
    assert r["end_to_end"] < 1e-3
