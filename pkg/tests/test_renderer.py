import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mapo_lab.core import GaussianParams
from mapo_lab.renderer import (ALPHA_MIN, OrthoCamera, Splat2D, read_ppm, render, render_backward,
                               render_gaussians, render_gaussians_backward, to_ppm_bytes, write_ppm)
from oracles import composite_literal, random_params, random_splats, relative_error

CAM8 = OrthoCamera(np.eye(3), [0, 0, 5], 4.0, 8, 8)


def _one(mean, cov=((1.0, 0.0), (0.0, 1.0)), depth=0.0, alpha=0.5, rgb=(1, 0, 0), key=0):
    return Splat2D(np.array([mean], float), np.array([cov], float), np.array([depth], float),
                   np.array([alpha], float), np.array([rgb], float), np.array([key]))


def test_matches_literal_composite_small_batch():
    rng = np.random.default_rng(10)
    for _ in range(25):
        n, w, h = int(rng.integers(1, 9)), int(rng.integers(1, 17)), int(rng.integers(1, 17))
        s = random_splats(rng, n, w, h)
        bg = rng.uniform(size=3)
        cam = OrthoCamera(np.eye(3), np.zeros(3), 1.0, w, h)
        assert np.abs(render(s, cam, bg, cutoffs=False) - composite_literal(s, w, h, bg)).max() < 1e-6


def test_empty_scene_is_background():
    empty = Splat2D(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0), np.zeros(0), np.zeros((0, 3)),
                    np.zeros(0, dtype=int))
    img = render(empty, CAM8, [0.1, 0.2, 0.3])
    assert np.array_equal(img, np.broadcast_to([0.1, 0.2, 0.3], (8, 8, 3)))
    g = render_backward(empty, CAM8, [0.1, 0.2, 0.3], np.ones((8, 8, 3)))
    assert g.alpha.shape == (0,)


def test_single_splat_center_value():
    img = render(_one((3.0, 5.0), alpha=0.5, rgb=(1, 0, 0)), CAM8, [0, 0, 1], cutoffs=False)
    assert np.allclose(img[5, 3], [0.5, 0, 0.5])  # row = y, column = x


def test_alpha_clamped_below_one():
    img = render(_one((3.0, 3.0), alpha=1.0, rgb=(1, 1, 1)), CAM8, [0, 0, 0], cutoffs=False)
    assert np.isclose(img[3, 3, 0], 0.999)


def test_cutoffs_skip_faint_and_far():
    faint = render(_one((3.0, 3.0), alpha=0.5 * ALPHA_MIN), CAM8, [0, 0, 0])
    assert np.all(faint == 0)
    img = render(_one((0.0, 0.0)), CAM8, [0, 0, 0])
    assert img[0, 0, 0] > 0 and img[0, 4, 0] == 0  # 4 px away: Mahalanobis^2 = 16 > 9


def test_depth_tie_breaks_on_key():
    red = _one((3.0, 3.0), alpha=0.6, rgb=(1, 0, 0), key=1)
    blue = _one((3.0, 3.0), alpha=0.6, rgb=(0, 0, 1), key=0)
    both = Splat2D(*(np.concatenate([getattr(red, f), getattr(blue, f)])
                     for f in ("mean2d", "cov2d", "depth", "alpha", "rgb", "key")))
    px = render(both, CAM8, [0, 0, 0])[3, 3]
    assert px[2] > px[0]  # key 0 (blue) is in front


def test_near_splat_occludes():
    front = _one((3.0, 3.0), depth=-1.0, alpha=0.99, rgb=(0, 1, 0), key=5)
    back = _one((3.0, 3.0), depth=1.0, alpha=0.99, rgb=(1, 0, 0), key=0)
    both = Splat2D(*(np.concatenate([getattr(back, f), getattr(front, f)])
                     for f in ("mean2d", "cov2d", "depth", "alpha", "rgb", "key")))
    px = render(both, CAM8, [0, 0, 0])[3, 3]
    assert px[1] > 0.98 and px[0] < 0.02


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_output_in_unit_range(seed):
    rng = np.random.default_rng(seed)
    s = random_splats(rng, int(rng.integers(1, 9)), 10, 7)
    cam = OrthoCamera(np.eye(3), np.zeros(3), 1.0, 10, 7)
    img = render(s, cam, rng.uniform(size=3))
    assert img.shape == (7, 10, 3)
    assert img.min() >= 0.0 and img.max() <= 1.0 + 1e-12


def test_backward_rejects_bad_shape():
    p = random_params(np.random.default_rng(0), 3)
    res = render_gaussians(p, CAM8, [0, 0, 0])
    with pytest.raises(ValueError):
        render_gaussians_backward(res, p, CAM8, np.zeros((8, 8)))


@pytest.mark.parametrize("cutoffs", [False, True])
def test_param_gradients_match_finite_differences(cutoffs):
    rng = np.random.default_rng(3)
    p = random_params(rng, 4)
    cam = OrthoCamera.looking_from(20, 10, pixels_per_unit=5, width=8, height=8)
    bg = np.array([0.1, 0.2, 0.3])
    tgt = rng.uniform(size=(8, 8, 3))
    W = rng.normal(size=(8, 8, 3))   # smooth linear loss, no kinks

    def loss(q):
        return float((render_gaussians(q, cam, bg, cutoffs=cutoffs).image * W).sum())

    res = render_gaussians(p, cam, bg, cutoffs=cutoffs)
    g = render_gaussians_backward(res, p, cam, W)
    h = 1e-5
    for f in ("mu", "rot", "log_scale", "opacity_logit", "color"):
        arr = getattr(p, f)
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            q = p.copy(); getattr(q, f)[idx] += h; lp = loss(q)
            q = p.copy(); getattr(q, f)[idx] -= h; lm = loss(q)
            fd[idx] = (lp - lm) / (2 * h)
        assert relative_error(getattr(g, f), fd).max() < 1e-4, f


def test_camera_rejects_non_orthonormal():
    with pytest.raises(ValueError):
        OrthoCamera(np.diag([1.0, 2.0, 1.0]), np.zeros(3), 1.0, 4, 4)
    with pytest.raises(ValueError):
        OrthoCamera(np.eye(3), np.zeros(3), 0.0, 4, 4)
    cam = OrthoCamera.looking_from(25, -10, pixels_per_unit=3, width=5, height=6)
    assert np.allclose(OrthoCamera.from_dict(cam.to_dict()).view_rot, cam.view_rot)


def test_ppm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.uniform(-0.1, 1.1, (5, 7, 3))
    write_ppm(tmp_path / "a.ppm", img)
    back = read_ppm(tmp_path / "a.ppm")
    assert back.shape == (5, 7, 3)
    assert np.array_equal(np.round(back * 255), np.floor(np.clip(img, 0, 1) * 255 + 0.5))
    assert to_ppm_bytes(np.full((1, 1, 3), 0.5)).endswith(bytes([128, 128, 128]))
