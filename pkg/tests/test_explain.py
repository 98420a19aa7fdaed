import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from macsswin import tensor as T
from macsswin.exceptions import ContractError, ValidationError
from macsswin.explain import (
    CamMap,
    cam_from_features,
    grad_cam,
    localization_score,
    overlay,
    upsample_cam,
    upsample_overlay,
    write_localization_report,
)
from macsswin.models import MacsSwin, VidMacsSwin


@pytest.fixture(scope="module")
def tiny():
    return MacsSwin("tiny", seed=0).eval()


def _frame(seed=0):
    return np.random.default_rng(seed).normal(size=(3, 64, 64)).astype(np.float32)


def test_single_channel_peak():
    f = np.zeros((7, 7, 1))
    f[2, 5, 0] = 3.0
    cam = cam_from_features(f, lambda t: T.mean(t))
    assert cam.peak == (2, 5)
    assert cam.grid.max() == 1.0
    assert np.count_nonzero(cam.grid) == 1


def test_zero_features_give_flagged_zero_map():
    cam = cam_from_features(np.zeros((7, 7, 4)), lambda t: T.mean(t) * 2.0)
    assert cam.is_zero
    score = localization_score(cam, [0, 0, 10, 10], 64, 64)
    assert score.zero_map and not score.peak_inside and score.mass_fraction == 0.0


def test_cam_is_relu_of_weighted_channels():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(4, 4, 3))
    w = np.array([0.5, -1.0, 2.0])
    # score = sum over tokens of f . w, so every token's gradient is w
    cam = cam_from_features(f, lambda t: T.sum_(t * T.Tensor(w)))
    ref = np.maximum(f @ w, 0)
    np.testing.assert_allclose(cam.grid, ref / ref.max(), atol=1e-12)


def test_grad_cam_on_model(tiny):
    cam = grad_cam(tiny, _frame())
    assert cam.grid.shape == (4, 4)
    assert cam.grid.min() >= 0 and cam.grid.max() == pytest.approx(1.0)
    other = grad_cam(tiny, _frame(), class_index=0)
    assert other.grid.shape == cam.grid.shape
    assert all(p.grad is None or not np.any(p.grad) for p in tiny.parameters())
    with pytest.raises(ValidationError):
        grad_cam(tiny, _frame(), class_index=2)
    with pytest.raises(ContractError):
        grad_cam(object(), _frame())


def test_grad_cam_on_default_grid():
    model = MacsSwin("swin_t").eval()
    cam = grad_cam(model, np.zeros((3, 224, 224), np.float32) + 0.1)
    assert cam.grid.shape == (7, 7)


def test_grad_cam_rejects_video_grid():
    with pytest.raises(ContractError):
        grad_cam(VidMacsSwin("tiny"), np.zeros((1, 3, 8, 64, 64), np.float32))


@settings(max_examples=12, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 50))
def test_cam_invariant_to_positive_score_scaling(scale, seed):
    model = MacsSwin("tiny", seed=seed % 3).eval()
    x = _frame(seed)
    a = grad_cam(model, x)
    b = grad_cam(model, x, score_scale=scale)
    np.testing.assert_allclose(a.grid, b.grid, atol=1e-6)
    assert a.peak == b.peak


def test_uniform_map_mass_matches_area():
    cam = CamMap(np.ones((7, 7)), 1)
    score = localization_score(cam, [0, 0, 112, 112], 224, 224)
    assert score.mass_fraction == pytest.approx(0.25, abs=0.02)


def test_peak_inside_and_outside():
    grid = np.zeros((7, 7))
    grid[1, 5] = 1.0
    cam = CamMap(grid, 1)
    up = upsample_cam(cam, 224, 224)
    r, c = np.unravel_index(np.argmax(up), up.shape)
    assert abs(r - (1 * 32 + 16)) <= 32 and abs(c - (5 * 32 + 16)) <= 32
    assert localization_score(cam, [160, 32, 192, 64], 224, 224).peak_inside
    assert not localization_score(cam, [0, 150, 60, 224], 224, 224).peak_inside
    for bad in ([10, 10, 10, 20], [0, 0, 5], None):
        with pytest.raises(ValidationError):
            localization_score(cam, bad, 224, 224)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(2, 8), st.data())
def test_upsampling_preserves_one_hot_peak(h, w, data):
    r, c = data.draw(st.integers(0, h - 1)), data.draw(st.integers(0, w - 1))
    grid = np.zeros((h, w))
    grid[r, c] = 1.0
    up = upsample_cam(grid, h * 8, w * 8)
    ur, uc = np.unravel_index(np.argmax(up), up.shape)
    assert ur // 8 == r and uc // 8 == c


def test_overlay_contracts(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (64, 64, 3), dtype=np.uint8)
    zero = CamMap(np.zeros((2, 2)), 1)
    np.testing.assert_array_equal(overlay(zero, img), img)
    grid = np.zeros((4, 4))
    grid[3, 0] = 1.0
    out_a = upsample_overlay(CamMap(grid, 1), img, tmp_path / "a.png")
    upsample_overlay(CamMap(grid, 1), img, tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    np.testing.assert_array_equal(np.asarray(Image.open(tmp_path / "a.png")), out_a)
    diff = np.abs(out_a.astype(int) - img.astype(int)).sum(-1)
    r, c = np.unravel_index(np.argmax(diff), diff.shape)
    assert r >= 48 and c < 16
    with pytest.raises(ValidationError):
        overlay(zero, img[..., 0])


def test_localization_report(tmp_path):
    rows = [{"frame": "a/1.png", "peak_inside": True, "mass_fraction": 0.4}]
    write_localization_report(rows, tmp_path / "loc" / "r.jsonl")
    assert [json.loads(line) for line in (tmp_path / "loc" / "r.jsonl").read_text().splitlines()] == rows
