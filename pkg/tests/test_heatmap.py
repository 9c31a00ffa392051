import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcloss import heatmap as hm
from mcloss.errors import ValidationError
from mcloss.loss import uniform_assignment
from mcloss.model import TinyCnnConfig, build_tiny_cnn


def test_cam_zero_gradient_is_zero():
    acts = np.random.default_rng(0).random((1, 4, 4))
    np.testing.assert_array_equal(hm._cam(acts, np.zeros_like(acts)), 0.0)


def test_cam_one_hot_activation():
    acts = np.zeros((1, 4, 4))
    acts[0, 1, 2] = 3.0
    out = hm._cam(acts, np.full_like(acts, 0.7))
    np.testing.assert_array_equal(out[0], np.eye(4)[1][:, None] * np.eye(4)[2][None, :])


def test_cam_negative_alpha_is_zero():
    acts = np.random.default_rng(1).random((1, 3, 3)) + 0.1
    np.testing.assert_array_equal(hm._cam(acts, -np.ones_like(acts)), 0.0)


def test_overlap_examples():
    a = np.array([0.5, 0.5, 0, 0])
    b = np.array([0, 0.5, 0.5, 0])
    assert hm.overlap_score([a, a]) == 1.0
    assert hm.overlap_score([a, np.array([0, 0, 0.5, 0.5])]) == 0.0
    assert hm.overlap_score([a, b]) == 0.5


def test_overlap_rejects():
    with pytest.raises(ValidationError):
        hm.overlap_score([np.array([0.5, 0.5])])
    with pytest.raises(ValidationError):
        hm.overlap_score([np.array([0.5, 0.6]), np.array([0.5, 0.5])])


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 4), st.integers(2, 12), st.integers(0, 2**31 - 1))
def test_overlap_properties(k, n, seed):
    rng = np.random.default_rng(seed)
    maps = [m / m.sum() for m in rng.random((k, n)) + 1e-3]
    s = hm.overlap_score(maps)
    assert 0.0 <= s <= 1.0 + 1e-12
    assert s == pytest.approx(hm.overlap_score(maps[::-1]), abs=1e-15)
    assert hm.overlap_score([maps[0]] * k) == pytest.approx(1.0, abs=1e-12)
    if not all(np.allclose(m, maps[0]) for m in maps):
        assert s < 1.0


def _model():
    return build_tiny_cnn(TinyCnnConfig(n_channels=6, n_classes=2), 3)


def test_channel_heatmap_range_and_shape():
    model = _model()
    img = np.random.default_rng(0).random((1, 32, 32))
    m = hm.channel_heatmap(model, img, 2, class_index=1)
    assert m.shape == (8, 8)
    assert m.min() >= 0 and m.max() <= 1
    with pytest.raises(ValidationError):
        hm.channel_heatmap(model, img, 6)


def test_heatmap_alpha_matches_head_weights():
    # the head is affine in flattened F, so alpha is the spatial mean of the head column
    model = _model()
    img = np.random.default_rng(1).random((1, 32, 32))
    feats, _ = model.forward(img[None])
    wcol = model.params["head.weight"].data[:, 1].reshape(6, 8, 8)
    alpha = wcol[4].mean()
    raw = np.maximum(alpha * feats.data[0, 4], 0)
    expect = (raw - raw.min()) / (raw.max() - raw.min()) if raw.max() > raw.min() else raw * 0
    np.testing.assert_allclose(hm.channel_heatmap(model, img, 4, class_index=1), expect, atol=1e-12)


def test_group_overlap_in_unit_interval():
    model = _model()
    rng = np.random.default_rng(2)
    imgs = rng.random((6, 1, 32, 32))
    labels = np.arange(6) % 2
    s = hm.group_overlap(model, imgs, labels, uniform_assignment(2, 3))
    assert 0 <= s <= 1


def test_pgm_roundtrip(tmp_path):
    m = np.linspace(0, 1, 12).reshape(3, 4)
    hm.write_pgm(tmp_path / "m.pgm", m)
    raw = (tmp_path / "m.pgm").read_bytes()
    assert raw.startswith(b"P5\n4 3\n255\n")
    np.testing.assert_allclose(hm.read_pgm(tmp_path / "m.pgm"), m, atol=0.5 / 255)


def test_export_group_heatmaps(tmp_path):
    model = _model()
    imgs = np.random.default_rng(3).random((2, 1, 32, 32))
    paths = hm.export_group_heatmaps(model, imgs, [0, 1], uniform_assignment(2, 3), tmp_path)
    assert len(paths) == 2 * (1 + 3)
    assert hm.read_pgm(paths[1]).shape == (32, 32)
