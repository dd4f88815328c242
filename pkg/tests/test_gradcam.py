import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from matplotlib import colormaps

from tiger_triage import gradcam as G
from tiger_triage.model import PREDICTED, LayerActivations, forward_with_capture
from tiger_triage.preprocess import ImageTensor, Space

from oracles import gradcam_loops


def acts(A, dA, layer="l", c=1):
    return LayerActivations(layer, np.asarray(A, float), np.asarray(dA, float), c)


def test_alpha_examples():
    a = acts(np.zeros((2, 3, 3)), np.stack([np.full((3, 3), 0.25), np.full((3, 3), -2.0)]))
    assert np.allclose(G.alpha_weights(a), [0.25, -2.0])
    a = acts(np.zeros((2, 2, 2)), [np.ones((2, 2)), -np.ones((2, 2))])
    assert np.array_equal(G.alpha_weights(a), [1.0, -1.0])


def test_alpha_matches_loops():
    rng = np.random.default_rng(0)
    A, dA = rng.random((3, 4, 4)), rng.normal(size=(3, 4, 4))
    alphas, cam = gradcam_loops(A, dA)
    assert np.allclose(G.alpha_weights(acts(A, dA)), alphas, atol=1e-12, rtol=0)
    assert np.allclose(G.heatmap(acts(A, dA)).values, cam, atol=1e-12, rtol=0)


def test_heatmap_hand_example():
    A = [[[1, 0], [0, 1]], [[0, 2], [2, 0]]]
    dA = [np.full((2, 2), 0.5), np.full((2, 2), -1.0)]
    hm = G.heatmap(acts(A, dA))
    assert np.array_equal(hm.values, [[0.5, 0.0], [0.0, 0.5]])
    assert not hm.upsampled and hm.class_index == 1


def test_negative_alphas_give_zero_map():
    A = np.random.default_rng(1).random((4, 5, 5))
    assert np.all(G.heatmap(acts(A, -np.ones_like(A))).values == 0)


def test_single_channel_identity():
    A = np.random.default_rng(2).normal(size=(1, 3, 3))
    assert np.array_equal(G.heatmap(acts(A, np.ones_like(A))).values, np.maximum(A[0], 0))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), s=st.floats(0.01, 100.0))
def test_positive_scaling_keeps_mask(seed, s):
    rng = np.random.default_rng(seed)
    A, dA = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))
    base = G.heatmap(acts(A, dA)).values
    scaled = G.heatmap(acts(A, s * dA)).values
    assert np.allclose(G.alpha_weights(acts(A, s * dA)), s * G.alpha_weights(acts(A, dA)))
    assert np.allclose(scaled, s * base, rtol=1e-9, atol=1e-12)
    assert np.array_equal(scaled == 0, base == 0)
    assert (scaled >= 0).all()


def raw(value=0.0, size=224):
    return ImageTensor(np.full((3, size, size), value, dtype=np.float32), Space.RAW)


def test_constant_heatmap_is_uniform_tint():
    out = G.upsample_overlay(G.Heatmap(np.full((7, 7), 3.0), "l", 1), raw(0.25))
    assert out.shape == (224, 224, 3) and out.dtype == np.uint8
    assert (out == out[0, 0]).all()
    expected = np.round(255 * (0.6 * 0.25 + 0.4 * np.array(colormaps["jet"](1.0)[:3])))
    assert np.array_equal(out[0, 0], expected.astype(np.uint8))


def test_zero_heatmap_is_colormap_floor():
    img = ImageTensor(np.random.default_rng(3).random((3, 224, 224)).astype(np.float32))
    out = G.upsample_overlay(G.Heatmap(np.zeros((7, 7)), "l", 1), img)
    floor = np.array(colormaps["jet"](0.0)[:3])
    expected = np.round(255 * (0.6 * img.data.transpose(1, 2, 0) + 0.4 * floor))
    assert np.array_equal(out, expected.astype(np.uint8))


@pytest.mark.parametrize("i,j", [(0, 0), (3, 5), (6, 6), (2, 0)])
def test_single_hot_lands_in_patch(i, j):
    values = np.zeros((7, 7))
    values[i, j] = 1.0
    up = G.upsample(G.Heatmap(values, "l", 1))
    assert up.upsampled and up.values.shape == (224, 224)
    r, c = np.unravel_index(np.argmax(up.values), up.values.shape)
    assert 32 * i <= r < 32 * (i + 1) and 32 * j <= c < 32 * (j + 1)
    out = G.upsample_overlay(G.Heatmap(values, "l", 1), raw(0.0))
    peak = np.round(255 * 0.4 * np.array(colormaps["jet"](1.0)[:3])).astype(np.uint8)
    hits = np.argwhere((out == peak).all(axis=2))
    assert len(hits) and all(32 * i <= a < 32 * (i + 1) and 32 * j <= b < 32 * (j + 1) for a, b in hits)


def test_overlay_rejects_normalized_images():
    with pytest.raises(ValueError):
        G.upsample_overlay(G.Heatmap(np.zeros((2, 2)), "l", 0),
                           ImageTensor(np.zeros((3, 4, 4)), Space.NORMALIZED))


def test_heatmap_rejects_negative_values():
    with pytest.raises(ValueError):
        G.Heatmap(np.array([[-1.0]]), "l", 0)


def test_multi_layer_cams(tiny_net, rand_image):
    cams = G.multi_layer_cams(tiny_net, rand_image)
    assert [h.layer for h in cams] == ["conv1", "conv2", "conv3"]
    dims = [h.values.shape[0] * h.values.shape[1] for h in cams]
    assert dims == sorted(dims, reverse=True)
    assert len({h.class_index for h in cams}) == 1
    again = G.multi_layer_cams(tiny_net, rand_image)
    assert all(np.array_equal(a.values, b.values) for a, b in zip(cams, again))
    explicit = G.multi_layer_cams(tiny_net, rand_image, class_index=cams[0].class_index)
    assert all(np.array_equal(a.values, b.values) for a, b in zip(cams, explicit))
    assert all((h.values >= 0).all() for h in cams)


def test_gradcam_equals_capture_then_heatmap(tiny_net, rand_image):
    a = forward_with_capture(tiny_net, rand_image, "deep", PREDICTED)
    assert np.array_equal(G.gradcam(tiny_net, rand_image).values, G.heatmap(a).values)


def test_export(tmp_path):
    hm = G.Heatmap(np.arange(49, dtype=float).reshape(7, 7), "conv5_3", 1)
    info = G.export(hm, raw(0.2), tmp_path, "m1", config_hash="h")
    assert info["png"].endswith("m1_conv5_3_tiger.png")
    assert np.array_equal(np.load(tmp_path / "m1_conv5_3_tiger.npy"), hm.values)
    meta = json.loads((tmp_path / "m1_conv5_3_tiger.json").read_text())
    assert meta["layer"] == "conv5_3" and meta["class_index"] == 1 and meta["shape"] == [7, 7]
    assert meta["config_hash"] == "h"
