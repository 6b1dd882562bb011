import numpy as np
import pytest

from conftest import micro_model
from trustcnn.nn import autodiff as ad
from trustcnn.nn.autodiff import Tape, Tensor, backward
from trustcnn.nn.gradcheck import grad_check, numeric_grad, relative_error
from trustcnn.nn.layers import LayerKind, ShapeError, build_model, conv, dense, simple
from trustcnn.pgm import read_pgm
from trustcnn.saliency import (
    MapState, Method, SaliencyMap, batch_maps, compute_map, export_pgm, grad_cam, grad_cam_alpha, grad_cam_map,
    grad_cam_weights, guided_backprop, guided_backprop_map, guided_grad_cam_map, map_filename, minmax_normalize,
    normalize_map, saliency_pass, upsample_nearest,
)


def raw(values, method=Method.GRAD_CAM):
    return SaliencyMap(np.asarray(values, dtype=np.float64), 0, "x", MapState.RAW, method)


# ---------------------------------------------------------------------------
# Grad-CAM weights and maps


def test_weights_of_constant_gradients():
    np.testing.assert_array_equal(grad_cam_weights(np.ones((2, 3, 3)), np.full((2, 3, 3), 0.7)), [0.7, 0.7])


def test_weights_worked_example():
    grads = np.stack([np.full((2, 2), 0.5), np.full((2, 2), -1.0)])
    np.testing.assert_array_equal(grad_cam_weights(np.ones((2, 2, 2)), grads), [0.5, -1.0])


def test_zero_gradients_give_zero_weights():
    np.testing.assert_array_equal(grad_cam_weights(np.ones((3, 2, 2)), np.zeros((3, 2, 2))), [0, 0, 0])


def test_weight_shape_mismatch():
    with pytest.raises(ShapeError):
        grad_cam_weights(np.ones((2, 2, 2)), np.ones((2, 3, 2)))


def test_map_worked_example():
    acts = np.stack([[[1.0, 0.0], [0.0, 1.0]], [[0.0, 2.0], [2.0, 0.0]]])
    smap = grad_cam_map(acts, np.array([0.5, -1.0]))
    np.testing.assert_array_equal(smap.values, [[0.5, 0.0], [0.0, 0.5]])
    assert smap.state is MapState.RAW


def test_all_negative_weights_give_zero_map(rng):
    acts = rng.uniform(0, 1, (3, 4, 4))
    assert not grad_cam_map(acts, -rng.uniform(0.1, 1, 3)).values.any()


def test_single_map_identity_weight(rng):
    a = rng.normal(size=(1, 3, 3))
    np.testing.assert_array_equal(grad_cam_map(a, np.array([1.0])).values, np.maximum(a[0], 0))


def test_map_weight_count_mismatch():
    with pytest.raises(ShapeError):
        grad_cam_map(np.ones((2, 2, 2)), np.ones(3))


def test_alpha_matches_closed_form_on_gap_dense_head():
    # with a gap -> dense head, d y_c / d A_k(i, j) = W[c, k] / (H W)
    m = micro_model(seed=4)
    x = np.random.default_rng(0).uniform(0, 1, (3, 1, 4, 4)).astype(np.float32)
    acts = m.forward(Tensor(x)).activations.data
    alpha = grad_cam_alpha(m, acts, [0, 1, 1])
    w = m.layer("dense").weight.data
    np.testing.assert_allclose(alpha, w[[0, 1, 1]] / 16, rtol=1e-6)


def test_finite_difference_dy_dA_on_small_model():
    m = micro_model(seed=7)
    assert sum(p.data.size for l in m.param_layers for p in l.params) <= 200
    x = np.random.default_rng(1).uniform(0, 1, (1, 1, 4, 4)).astype(np.float32)
    acts = m.forward(Tensor(x)).activations.data
    for c in range(2):
        fn = lambda a: ad.tsum(ad.pick(m.forward_from_activations(a), [c]))
        num = numeric_grad(fn, acts.astype(np.float64), 1e-4)
        alpha = grad_cam_alpha(m, acts, [c])
        assert relative_error(alpha, num.mean(axis=(2, 3))) <= 1e-2
        assert grad_check(fn, acts, oracle_dtype=np.float64) <= 1e-2


# ---------------------------------------------------------------------------
# guided backprop


def _no_relu_model(seed=0):
    specs = [conv("conv", 2, 3, padding=1), simple(LayerKind.GLOBAL_AVG_POOL, "gap"), dense("dense", 2),
             simple(LayerKind.SOFTMAX, "softmax")]
    return build_model(specs, (1, 4, 4), "conv", seed)


def test_guided_equals_plain_gradient_without_relu():
    m = _no_relu_model()
    x = np.random.default_rng(2).normal(size=(1, 1, 4, 4)).astype(np.float32)
    t = Tensor(x, requires_grad=True)
    with Tape() as tape:
        y = ad.tsum(ad.pick(m.forward(t).logits, [1]))
    (g,) = backward(tape, y, [t], accumulate=False)
    np.testing.assert_allclose(guided_backprop(m, x, [1]), np.abs(g.data).max(axis=1), rtol=1e-6)


def test_closed_gate_gives_zero_map():
    m = micro_model(seed=0)
    m.layer("conv").bias.data[:] = -100.0
    x = np.random.default_rng(3).uniform(0, 1, (1, 4, 4)).astype(np.float32)
    assert not guided_backprop_map(m, x, 0).values.any()


def test_guided_matches_hand_chain_rule():
    m = micro_model(seed=11, channels=1)
    x = np.random.default_rng(5).uniform(-1, 1, (1, 4, 4)).astype(np.float64)
    w = m.layer("conv").weight.data.astype(np.float64)[0, 0]
    bias = float(m.layer("conv").bias.data[0])
    wd = float(m.layer("dense").weight.data[1, 0])
    pad = np.pad(x[0], 1)
    z = np.array([[np.sum(pad[i:i + 3, j:j + 3] * w) + bias for j in range(4)] for i in range(4)])
    upstream = wd / 16.0
    gate = (z > 0) & (upstream > 0)
    gz = np.where(gate, upstream, 0.0)
    gx = np.zeros((6, 6))
    for i in range(4):
        for j in range(4):
            gx[i:i + 3, j:j + 3] += gz[i, j] * w
    expected = np.abs(gx[1:5, 1:5])
    got = guided_backprop_map(m, x.astype(np.float32), 1)
    np.testing.assert_allclose(got.values, expected, rtol=1e-5, atol=1e-7)


def test_guided_class_out_of_range():
    with pytest.raises(ValueError):
        guided_backprop_map(micro_model(), np.zeros((1, 4, 4), np.float32), 2)


# ---------------------------------------------------------------------------
# guided grad-cam, normalization, upsampling


def test_ggc_zero_gradcam_annihilates():
    out = guided_grad_cam_map(raw(np.zeros((2, 2))), raw([[2.0, 3.0], [4.0, 5.0]], Method.GUIDED_BACKPROP))
    assert not out.values.any()


def test_ggc_all_ones_is_identity():
    g = raw([[2.0, 3.0], [4.0, 5.0]], Method.GUIDED_BACKPROP)
    np.testing.assert_array_equal(guided_grad_cam_map(raw(np.ones((1, 1))), g).values, g.values)


def test_ggc_hand_example():
    out = guided_grad_cam_map(raw([[1.0, 0.0], [0.0, 1.0]]), raw([[2.0, 3.0], [4.0, 5.0]], Method.GUIDED_BACKPROP))
    np.testing.assert_array_equal(out.values, [[2.0, 0.0], [0.0, 5.0]])
    assert out.method is Method.GUIDED_GRAD_CAM


def test_ggc_rejects_normalized_inputs():
    n = normalize_map(raw([[0.0, 1.0]]))
    with pytest.raises(ValueError):
        guided_grad_cam_map(n, raw([[1.0, 1.0]]))


def test_minmax_examples():
    np.testing.assert_array_equal(normalize_map(raw([[0, 2], [4, 8]])).values, [[0, 0.25], [0.5, 1.0]])
    assert not normalize_map(raw(np.full((3, 3), 4.2))).values.any()
    fixed = np.array([[0.0, 0.3], [1.0, 0.5]])
    np.testing.assert_array_equal(normalize_map(raw(fixed)).values, fixed)


@pytest.mark.parametrize("seed", range(5))
def test_minmax_gradient(seed):
    rng = np.random.default_rng(seed)
    x = (rng.permutation(2 * 9) * 0.1 + 0.05).reshape(2, 3, 3)
    r = rng.normal(size=x.shape)
    fn = lambda t: ad.tsum(ad.mul(minmax_normalize(t), Tensor(r)))
    assert grad_check(fn, x, eps=1e-6) <= 1e-5


def test_upsample_blocks_and_gradient(rng):
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    up = upsample_nearest(Tensor(x), (4, 4)).data
    np.testing.assert_array_equal(up[0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
    r = rng.normal(size=(1, 4, 4))
    assert grad_check(lambda t: ad.tsum(ad.mul(upsample_nearest(t, (4, 4)), Tensor(r))), x, eps=1e-6) <= 1e-6


# ---------------------------------------------------------------------------
# batch pass and API


def test_method_parse_lists_valid_methods():
    assert Method.parse("GradCAM") is Method.GRAD_CAM
    with pytest.raises(ValueError, match="gradcam, guided-backprop, guided-gradcam"):
        Method.parse("lrp")


def test_saliency_pass_rejects_guided_backprop_and_bad_class():
    m = micro_model()
    x = Tensor(np.zeros((1, 1, 4, 4), np.float32))
    with pytest.raises(ValueError):
        saliency_pass(m, x, [0], Method.GUIDED_BACKPROP)
    with pytest.raises(ValueError):
        saliency_pass(m, x, [5], Method.GRAD_CAM)


def test_batch_pass_agrees_with_per_sample_maps(rng):
    m = micro_model(seed=2)
    x = rng.uniform(0, 1, (3, 1, 4, 4)).astype(np.float32)
    classes = [0, 1, 0]
    sp = saliency_pass(m, Tensor(x), classes, Method.GUIDED_GRAD_CAM)
    for i, c in enumerate(classes):
        single = normalize_map(compute_map(m, x[i], c, Method.GUIDED_GRAD_CAM))
        np.testing.assert_allclose(sp.normalized.data[i], single.values, rtol=1e-5, atol=1e-6)
    assert np.all(sp.raw.data >= 0)
    assert np.all((sp.normalized.data >= 0) & (sp.normalized.data <= 1))
    np.testing.assert_allclose(sp.s_hat.data, sp.normalized.data.mean(axis=(1, 2)), rtol=1e-6)


def test_gradcam_map_via_model_is_raw_and_nonnegative(rng):
    m = micro_model(seed=9)
    smap = grad_cam(m, rng.uniform(0, 1, (1, 4, 4)).astype(np.float32), 1)
    assert smap.state is MapState.RAW and smap.layer == "conv"
    assert np.all(smap.values >= 0)


def test_batch_maps_upsampled_to_input(rng):
    from trustcnn.nn.layers import default_model
    m = default_model(2, seed=0)
    x = rng.uniform(0, 1, (2, 1, 32, 32)).astype(np.float32)
    assert batch_maps(m, x, [0, 1], "gradcam").shape == (2, 32, 32)
    assert batch_maps(m, x, [0, 1], "gradcam", input_size=False).shape == (2, 16, 16)
    assert batch_maps(m, x, [0, 1], "guided-backprop").shape == (2, 32, 32)


def test_export_filename_and_contents(tmp_path):
    assert map_filename(7, "gradcam", 2) == "7_gradcam_2.pgm"
    path = export_pgm(raw([[0.0, 2.0], [4.0, 8.0]]), tmp_path, 7)
    assert path.name == "7_gradcam_0.pgm"
    np.testing.assert_allclose(read_pgm(path), [[0, 64 / 255], [128 / 255, 1]], atol=1e-7)
