import numpy as np
import pytest
from PIL import Image

from usforce import interpretability as I
from usforce import model as M
from usforce import tensor as T

TOY = M.ArchitectureConfig(64, 64, (2, 2, 2, 2, 2), 4)
WIDE = M.ArchitectureConfig(64, 64, (8, 8, 8, 8, 8), 16)


def toy_force_model(seed=0, dtype=np.float64):
    p = M.build_model(TOY, "force", seed).astype(dtype)
    rng = np.random.default_rng(seed)
    for i in range(1, 6):
        pre = f"conv{i}."
        p.tensors[pre + "running_mean"] = rng.uniform(0, 0.5, 2).astype(dtype)
        p.tensors[pre + "running_var"] = rng.uniform(0.5, 2, 2).astype(dtype)
    return p


def tail_from(params, layer, a):
    """Independent re-run of the network from conv layer ``layer``'s ReLU output."""
    h = a[None]
    for i in range(layer, 6):
        pre = f"conv{i}."
        if i > layer:
            h = T.relu(T.conv2d(h, params[pre + "kernel"], params[pre + "bias"]))
        h, *_ = T.batchnorm(h, params[pre + "gamma"], params[pre + "beta"],
                            params[pre + "running_mean"], params[pre + "running_var"], "infer")
        h = T.maxpool2_infer(h)
    d = T.relu(T.dense(h.reshape(1, -1), params["dense.W"], params["dense.b"]))
    return float(T.dense(d, params["head.W"], params["head.b"])[0, 0])


@pytest.mark.parametrize("seed", range(3))
def test_alpha_matches_perturbation_oracle(seed):
    p = toy_force_model(seed)
    # A positive conv5 bias keeps every A^k_ij > 0, so no pooling ties at the probe point.
    p.tensors["conv5.bias"][:] = 3.0
    img = np.random.default_rng(seed).random((64, 64, 1))
    hm = I.gradcam(p, img, "conv5")
    a = I.layer_maps(p, img)[4][0]
    assert a.shape == (4, 4, 2) and np.all(a > 0)
    eps = 1e-6
    grad = np.zeros_like(a)
    for idx in np.ndindex(a.shape):
        up, dn = a.copy(), a.copy()
        up[idx] += eps
        dn[idx] -= eps
        grad[idx] = (tail_from(p, 5, up) - tail_from(p, 5, dn)) / (2 * eps)
    alpha_fd = grad.mean(axis=(0, 1))
    rel = np.abs(hm.alpha - alpha_fd) / np.maximum(np.abs(alpha_fd), 1e-8)
    assert np.all(rel < 1e-3)


def test_constant_map_closed_form():
    a = np.full((4, 4, 1), 0.7)
    g = np.full((4, 4, 1), 0.3)
    alpha, coarse = I._cam(a, g)
    assert alpha[0] == pytest.approx(0.3) and np.allclose(coarse, 0.21)


def test_nonpositive_gradients_give_zero_map():
    rng = np.random.default_rng(0)
    alpha, coarse = I._cam(rng.random((5, 5, 3)), -rng.random((5, 5, 3)))
    assert np.all(alpha <= 0) and not coarse.any()


def test_heatmap_nonnegative_every_layer():
    p = toy_force_model(1, np.float32)
    rng = np.random.default_rng(1)
    for _ in range(10):
        img = rng.random((64, 64, 1), dtype=np.float32)
        for layer in I.LAYER_NAMES:
            hm = I.gradcam(p, img, layer)
            assert hm.values.shape == (64, 64) and hm.values.min() >= 0


def test_unknown_layer():
    p = toy_force_model()
    for bad in ("conv6", 0, "dense", True):
        with pytest.raises(ValueError, match="unknown layer"):
            I.gradcam(p, np.zeros((64, 64, 1)), bad)


def test_positive_homogeneity_in_head_weights():
    p = toy_force_model(2)
    img = np.random.default_rng(2).random((64, 64, 1))
    base = I.gradcam(p, img, 3)
    q = p.copy()
    q.tensors["head.W"] = q["head.W"] * 2.5
    scaled = I.gradcam(q, img, 3)
    np.testing.assert_allclose(scaled.coarse, 2.5 * base.coarse, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(I.gradcam(q, img, 3, normalize=True).values,
                               I.gradcam(p, img, 3, normalize=True).values, atol=1e-12)


def test_skill_model_target_class():
    p = M.build_model(TOY, "skill", 3)
    img = np.random.default_rng(3).random((64, 64, 1), dtype=np.float32)
    maps = [I.gradcam(p, img, 4, target=c).alpha for c in range(5)]
    assert not np.allclose(maps[0], maps[1])
    with pytest.raises(ValueError):
        I.gradcam(p, img, 4, target=7)


def test_bilinear_resize_properties():
    x = np.arange(16.0).reshape(4, 4)
    up = I.bilinear_resize(x, 8, 8)
    assert up.shape == (8, 8)
    assert up.min() >= x.min() and up.max() <= x.max()
    np.testing.assert_allclose(I.bilinear_resize(np.full((3, 5), 2.0), 7, 9), 2.0)
    np.testing.assert_allclose(I.bilinear_resize(x, 4, 4), x)
    # Half-pixel centres: output (1, 1) of a 2x upsample sits at source (0.25, 0.25).
    assert up[1, 1] == pytest.approx(0.75 * 0.75 * 0 + 0.25 * 0.75 * 1 + 0.75 * 0.25 * 4 + 0.25 * 0.25 * 5)


# --- weighted Grad-CAM -----------------------------------------------------

def test_weighted_normalized_and_nonnegative():
    p = toy_force_model(4, np.float32)
    rng = np.random.default_rng(4)
    for _ in range(5):
        hm = I.weighted_multilayer_gradcam(p, rng.random((64, 64, 1), dtype=np.float32))
        assert hm.values.min() >= 0 and hm.normalized
        assert hm.values.max() == pytest.approx(1.0) or not hm.values.any()


def test_equal_weights_proportional_to_sum():
    p = toy_force_model(5)
    img = np.random.default_rng(5).random((64, 64, 1))
    per_layer = [I.max_normalize(I.gradcam(p, img, l).values) for l in I.LAYER_NAMES]
    summed = I.max_normalize(sum(per_layer))
    for w in (1.0, 0.35):
        hm = I.weighted_multilayer_gradcam(p, img, I.LayerWeightProfile((w,) * 5))
        np.testing.assert_allclose(hm.values, summed, atol=1e-12)


def test_layer_one_emphasis_correlates_with_layer_one():
    p = positive_model()   # every layer carries a live map
    rng = np.random.default_rng(6)
    for _ in range(3):
        img = rng.random((64, 64, 1))
        hm = I.weighted_multilayer_gradcam(p, img, I.LayerWeightProfile((1.0, 0.15, 0.15, 0.15, 0.15)))
        corr = [np.corrcoef(hm.values.ravel(), I.gradcam(p, img, l).values.ravel())[0, 1]
                for l in I.LAYER_NAMES]
        assert int(np.argmax(corr)) == 0


def test_zero_weight_drops_layer():
    p = toy_force_model(7)
    img = np.random.default_rng(7).random((64, 64, 1))
    only5 = I.weighted_multilayer_gradcam(p, img, I.LayerWeightProfile((0, 0, 0, 0, 1.0)))
    np.testing.assert_allclose(only5.values, I.gradcam(p, img, 5, normalize=True).values, atol=1e-12)


def test_profile_validation_and_per_class():
    with pytest.raises(ValueError, match="one weight per conv layer"):
        I.LayerWeightProfile((1.0, 1.0))
    with pytest.raises(ValueError, match="missing layer weight"):
        I.LayerWeightProfile.from_mapping({"conv1": 1.0, "conv2": 1.0})
    prof = I.LayerWeightProfile(per_class={2: (1.0, 1.0, 0.15, 0.15, 0.15)})
    assert prof.weights_for(2) == (1.0, 1.0, 0.15, 0.15, 0.15)
    assert prof.weights_for(0) == I.DEFAULT_LAYER_WEIGHTS == (0.15, 0.35, 0.75, 1.0, 1.0)
    m = I.LayerWeightProfile.from_mapping({f"conv{i}": 0.75 for i in range(1, 6)})
    assert m.weights == (0.75,) * 5


def test_per_class_profile_changes_result():
    p = toy_force_model(8)
    img = np.random.default_rng(8).random((64, 64, 1))
    prof = I.LayerWeightProfile(per_class={3: (1.0, 0.15, 0.15, 0.15, 0.15)})
    a = I.weighted_multilayer_gradcam(p, img, prof, skill=0)
    b = I.weighted_multilayer_gradcam(p, img, prof, skill=3)
    assert not np.allclose(a.values, b.values)


# --- guided backprop -------------------------------------------------------

def test_guided_gate_hand_trace():
    """y = w2 . relu(W1 x), traced by hand."""
    x = np.array([[1.0, 2.0]])
    W1 = np.array([[1.0, -1.0, 0.5], [0.5, -0.5, -1.0]])   # pre = [2, -2, -1.5]
    w2 = np.array([[2.0], [3.0], [-1.0]])
    pre = x @ W1
    h = np.maximum(pre, 0)
    g_h, _, _ = T.dense_backward(h, w2, np.ones((1, 1)))    # [2, 3, -1]
    plain = M._relu_gate("plain", pre, g_h) @ W1.T
    guided = M._relu_gate("guided", pre, g_h) @ W1.T
    literal = M._relu_gate("guided-literal", pre, g_h) @ W1.T
    # Only unit 0 is open (pre > 0) and has positive upstream gradient 2.
    np.testing.assert_allclose(plain, [[2.0, 1.0]])
    np.testing.assert_allclose(guided, [[2.0, 1.0]])
    np.testing.assert_allclose(literal, [[2.0 * 2.0, 2.0 * 2.0 * 0.5]])
    # A positive-input unit with negative gradient is blocked by the guided gate only.
    pre2 = np.array([[1.0, 1.0]])
    g2 = np.array([[-3.0, 4.0]])
    assert np.array_equal(M._relu_gate("plain", pre2, g2), [[-3.0, 4.0]])
    assert np.array_equal(M._relu_gate("guided", pre2, g2), [[0.0, 4.0]])


def positive_model():
    p = M.build_model(TOY, "force", 9).astype(np.float64)
    for k, v in p.tensors.items():
        if k.endswith(("kernel", "W")):
            p.tensors[k] = np.abs(v)
        elif k.endswith(("bias", "beta", ".b")):
            p.tensors[k] = np.full_like(v, 0.1)
    return p


def test_guided_equals_plain_when_gates_open():
    p = positive_model()
    img = np.random.default_rng(9).random((64, 64, 1))
    _, cache = M.forward_batch(p, img[None], "infer", keep_cache=True)
    _, plain = M.backward(p, cache, np.ones(1), mode="infer", need_input_grad=True)
    assert np.all(plain["input"] > 0)
    np.testing.assert_array_equal(I.guided_backprop(p, img), plain["input"][0])


def test_guided_zero_input_gives_zero():
    p = M.build_model(TOY, "force", 10)   # zero conv biases: every first-layer ReLU is closed
    assert not I.guided_backprop(p, np.zeros((64, 64, 1))).any()


def test_guided_blocks_negative_flow():
    p = M.build_model(WIDE, "force", 0).astype(np.float64)
    img = np.random.default_rng(0).random((64, 64, 1))
    _, cache = M.forward_batch(p, img[None], "infer", keep_cache=True)
    _, ex = M.backward(p, cache, np.ones(1), mode="infer", need_input_grad=True)
    g = I.guided_backprop(p, img)
    assert g.shape == (64, 64, 1)
    assert g.any() and not np.allclose(g, ex["input"][0])
    lit = I.guided_backprop(p, img, mode="literal")
    assert lit.shape == (64, 64, 1) and not np.allclose(lit, g)
    with pytest.raises(ValueError):
        I.guided_backprop(p, img, mode="other")


# --- export ----------------------------------------------------------------

def test_zero_heatmap_overlay_is_colormap_floor(tmp_path):
    img = np.random.default_rng(0).random((20, 30, 1))
    frame = I.overlay_frame(img, np.zeros((20, 30)))
    gray = I.to_uint8(img).astype(float)[..., None]
    floor = I.colormap(np.zeros(1))[0].astype(float)
    expected = np.round(0.6 * gray + 0.4 * floor).astype(np.uint8)
    assert np.array_equal(frame[:, 30:], expected)


def test_raw_pane_roundtrip_and_peak_colour(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.random((24, 24, 1))
    hm = np.zeros((24, 24))
    hm[5, 7] = 3.0
    path = I.export_overlay(img, hm, tmp_path / "f.png")
    back = np.asarray(Image.open(path))
    assert back.shape == (24, 48, 3)
    assert np.all(np.abs(back[:, :24, 0] / 255.0 - img[..., 0]) <= 1 / 255 + 1e-12)
    top = I.colormap(np.ones(1))[0].astype(float)
    expected = np.round(0.6 * I.to_uint8(img)[5, 7] + 0.4 * top).astype(np.uint8)
    assert np.array_equal(back[5, 24 + 7], expected)


def test_ppm_and_sequence_export(tmp_path):
    img = np.zeros((8, 8, 1))
    p = I.export_overlay(img, np.ones((8, 8)), tmp_path / "a.ppm")
    assert p.read_bytes()[:2] == b"P6"
    paths = I.export_sequence([img] * 3, [np.ones((8, 8))] * 3, tmp_path / "seq")
    assert [q.name for q in paths] == ["frame_00000.png", "frame_00001.png", "frame_00002.png"]
    with pytest.raises(ValueError):
        I.export_overlay(img, np.ones((8, 8)), tmp_path / "a.jpg")
    with pytest.raises(ValueError, match="shape"):
        I.overlay_frame(img, np.ones((4, 4)))


def test_heatmap_npy_export(tmp_path):
    hm = I.Heatmap(np.random.default_rng(0).random((6, 6)), ("conv5",))
    I.save_heatmap(tmp_path / "h.npy", hm)
    assert np.array_equal(np.load(tmp_path / "h.npy"), hm.values)


def test_heatmap_rejects_negative():
    with pytest.raises(ValueError):
        I.Heatmap(np.array([[-1.0]]), ("conv1",))
