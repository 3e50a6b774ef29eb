import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import fd_check, randomize_bn, small_conv_config, small_dense_config
from odil.errors import ConfigError, NumericError, ShapeError
from odil.nn import (
    LayerSpec,
    LRSchedule,
    Model,
    ModelConfig,
    OptimizerState,
    cosine_lr,
    reference_config,
    sgd_update,
    softmax_cross_entropy,
)


@pytest.mark.parametrize("seed", range(10))
def test_conv_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    model = randomize_bn(Model(small_conv_config(), seed=seed), rng)
    x = rng.normal(size=(4, 6, 6, 2))
    assert fd_check(model, x, seed) < 1e-3


@pytest.mark.parametrize("seed", range(10))
def test_dense_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    model = randomize_bn(Model(small_dense_config(), seed=seed), rng)
    x = rng.normal(size=(6, 5))
    assert fd_check(model, x, seed) < 1e-3


def test_backward_leaves_running_stats_alone(conv_model, rng):
    x = rng.normal(size=(4, 6, 6, 2))
    conv_model.forward(x, "train")
    before = [(s.running_mean.copy(), s.running_var.copy()) for s in conv_model.bn_states()]
    grads = conv_model.backward(rng.normal(size=(4, 3)))
    assert any(k.endswith("gamma") for k in grads) and any(k.endswith("beta") for k in grads)
    for (m, v), s in zip(before, conv_model.bn_states()):
        assert m.tobytes() == s.running_mean.tobytes() and v.tobytes() == s.running_var.tobytes()


def test_zero_upstream_gradient(conv_model, rng):
    conv_model.forward(rng.normal(size=(3, 6, 6, 2)), "train")
    grads = conv_model.backward(np.zeros((3, 3)))
    assert all(not g.any() for g in grads.values())


def test_dense_scalar_gradient_is_input():
    cfg = ModelConfig((1,), (LayerSpec("classifier", 1),), 1)
    m = Model(cfg)
    m.forward(np.array([[2.5]]), "train")
    g = m.backward(np.array([[1.0]]))
    assert g["0:classifier.weight"][0, 0] == 2.5
    assert g["0:classifier.bias"][0] == 1.0


def test_backward_without_forward_raises(conv_model):
    with pytest.raises(RuntimeError):
        conv_model.backward(np.zeros((2, 3)))
    conv_model.forward(np.zeros((2, 6, 6, 2)) + np.arange(72).reshape(1, 6, 6, 2), "eval")
    with pytest.raises(RuntimeError):
        conv_model.backward(np.zeros((2, 3)))


# -- forward ----------------------------------------------------------------


def test_zero_weight_classifier_gives_zero_logits(conv_model, rng):
    conv_model.set_parameter("7:classifier.weight", np.zeros((4, 3)))
    assert not conv_model.forward(rng.normal(size=(5, 6, 6, 2))).any()


def _bn_and_plain(eps):
    cfg = small_dense_config()
    with_bn = Model(ModelConfig(cfg.input_shape, cfg.layers, 3, bn_eps=eps), seed=3)
    plain = Model(ModelConfig((5,), tuple(s for s in cfg.layers if s.kind != "batchnorm"), 3), seed=3)
    p = with_bn.parameters()
    for name in plain.parameters():
        idx, rest = name.split(":", 1)
        src = f"{int(idx) + (int(idx) >= 2)}:{rest}"
        plain.set_parameter(name, p[src].copy())
    return with_bn, plain


def test_identity_bn_matches_plain_dense_net(rng):
    # the identity is exact up to the 1/sqrt(1 + eps) factor
    x = rng.normal(size=(7, 5))
    with_bn, plain = _bn_and_plain(eps=1e-9)
    np.testing.assert_allclose(with_bn.forward(x), plain.forward(x), atol=1e-6, rtol=0)
    with_bn, plain = _bn_and_plain(eps=1e-5)
    np.testing.assert_allclose(with_bn.forward(x), plain.forward(x), rtol=1e-5 / 2 + 1e-12, atol=1e-12)


def scalar_forward(model, img):
    """Loop-based re-implementation of the reference conv stack, one sample."""
    h = [[list(map(float, img[i, j])) for j in range(img.shape[1])] for i in range(img.shape[0])]
    for layer in model.layers:
        if layer.kind == "conv2d":
            w, b = layer.params["weight"], layer.params["bias"]
            k, _, cin, cout = w.shape
            ho, wo = len(h) - k + 1, len(h[0]) - k + 1
            out = [[[0.0] * cout for _ in range(wo)] for _ in range(ho)]
            for i in range(ho):
                for j in range(wo):
                    for o in range(cout):
                        acc = float(b[o])
                        for di in range(k):
                            for dj in range(k):
                                for c in range(cin):
                                    acc += h[i + di][j + dj][c] * float(w[di, dj, c, o])
                        out[i][j][o] = acc
            h = out
        elif layer.kind == "batchnorm":
            s = layer.state
            h = [[[float(s.gamma[c]) * (v - float(s.running_mean[c])) / math.sqrt(float(s.running_var[c]) + s.eps)
                   + float(s.beta[c]) for c, v in enumerate(px)] for px in row] for row in h]
        elif layer.kind == "relu":
            h = [[[max(v, 0.0) for v in px] for px in row] for row in h]
        elif layer.kind == "gap":
            n = len(h) * len(h[0])
            h = [sum(px[c] for row in h for px in row) / n for c in range(len(h[0][0]))]
        elif layer.kind == "classifier":
            w, b = layer.params["weight"], layer.params["bias"]
            h = [float(b[o]) + sum(h[i] * float(w[i, o]) for i in range(len(h))) for o in range(w.shape[1])]
    return np.array(h)


def test_forward_matches_scalar_oracle():
    rng = np.random.default_rng(7)
    model = randomize_bn(Model(reference_config(widths=(4, 6)), seed=7), rng)
    x = rng.normal(size=(2, 16, 16, 1))
    logits = model.forward(x)
    for n in range(2):
        np.testing.assert_allclose(logits[n], scalar_forward(model, x[n]), atol=1e-5)


def test_eval_forward_is_pure_and_deterministic(conv_model, rng):
    randomize_bn(conv_model, rng)
    x = rng.normal(size=(3, 6, 6, 2))
    snap = {k: v.copy() for k, v in conv_model.parameters().items()}
    stats = [(s.running_mean.copy(), s.running_var.copy()) for s in conv_model.bn_states()]
    a, b = conv_model.forward(x), conv_model.forward(x)
    assert a.tobytes() == b.tobytes()
    for k, v in conv_model.parameters().items():
        assert v.tobytes() == snap[k].tobytes()
    for (m, v), s in zip(stats, conv_model.bn_states()):
        assert m.tobytes() == s.running_mean.tobytes() and v.tobytes() == s.running_var.tobytes()


def test_train_forward_only_touches_running_stats(conv_model, rng):
    snap = {k: v.copy() for k, v in conv_model.parameters().items()}
    conv_model.forward(rng.normal(size=(3, 6, 6, 2)), "train")
    for k, v in conv_model.parameters().items():
        assert v.tobytes() == snap[k].tobytes()
    assert any(s.running_mean.any() for s in conv_model.bn_states())


def test_same_seed_same_init():
    a, b = Model(reference_config(), seed=5), Model(reference_config(), seed=5)
    for (k, v), w in zip(a.parameters().items(), b.parameters().values()):
        assert v.tobytes() == w.tobytes(), k


def test_shape_errors_name_the_layer(conv_model):
    with pytest.raises(ShapeError, match="input"):
        conv_model.forward(np.zeros((2, 5, 6, 2)))
    with pytest.raises(ShapeError, match="input"):
        conv_model.forward(np.zeros((0, 6, 6, 2)))
    with pytest.raises(ShapeError) as err:
        ModelConfig((6, 6, 2), (LayerSpec("conv2d", 3), LayerSpec("batchnorm", 5), LayerSpec("gap"),
                                LayerSpec("classifier", 3)), 3)
    assert err.value.layer == "1:batchnorm"


def test_config_round_trip():
    cfg = reference_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_config_needs_single_terminal_classifier():
    with pytest.raises(ConfigError):
        ModelConfig((4,), (LayerSpec("dense", 3),), 3)


# -- loss -------------------------------------------------------------------


def test_uniform_logits_loss_is_log_c():
    loss, _ = softmax_cross_entropy(np.zeros((3, 10)), [0, 4, 9])
    assert loss == pytest.approx(math.log(10), abs=1e-12)
    assert loss == pytest.approx(2.302585, abs=1e-6)


def test_saturated_loss():
    logits = np.zeros((1, 5))
    logits[0, 2] = 30.0
    loss, _ = softmax_cross_entropy(logits, [2])
    assert loss < 1e-9


def test_loss_gradient_finite_differences():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(4, 3))
    y = np.array([0, 2, 1, 2])
    _, g = softmax_cross_entropy(z, y)
    h = 1e-6
    num = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += h
        zm[idx] -= h
        num[idx] = (softmax_cross_entropy(zp, y)[0] - softmax_cross_entropy(zm, y)[0]) / (2 * h)
    assert (np.abs(g - num) / np.maximum(np.abs(num), 1e-8)).max() < 1e-4


@given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)), st.lists(st.integers(0, 3), min_size=3, max_size=3))
def test_loss_gradient_rows_sum_to_zero(z, y):
    loss, g = softmax_cross_entropy(z, y)
    assert np.isfinite(loss) and loss >= 0
    np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-12)


def test_out_of_range_label():
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((1, 3)), [3])


# -- optimizer and schedule -------------------------------------------------


def test_sgd_plain_step():
    out = sgd_update({"p": np.array([1.0])}, {"p": np.array([1.0])}, OptimizerState(lr=0.1, momentum=0.0))
    assert out["p"][0] == pytest.approx(0.9)


def test_sgd_momentum_unrolled():
    opt = OptimizerState(lr=1.0, momentum=0.9)
    p = {"p": np.array([0.0])}
    p = sgd_update(p, {"p": np.array([1.0])}, opt)
    p = sgd_update(p, {"p": np.array([1.0])}, opt)
    assert opt.velocity["p"][0] == pytest.approx(1.9)
    assert p["p"][0] == pytest.approx(-2.9)


def test_sgd_zero_gradient_keeps_params():
    p = {"p": np.array([0.3, -1.2])}
    out = sgd_update(p, {"p": np.zeros(2)}, OptimizerState(lr=0.5, momentum=0.9))
    assert out["p"].tobytes() == p["p"].tobytes()


def test_sgd_rejects_non_finite():
    opt = OptimizerState(lr=0.1)
    with pytest.raises(NumericError):
        sgd_update({"p": np.zeros(2)}, {"p": np.array([1.0, np.nan])}, opt)
    assert not opt.velocity


def test_cosine_schedule():
    s = LRSchedule(lr_max=1e-4, lr_min=0.0, total_epochs=120)
    assert cosine_lr(0, s) == 1e-4
    assert cosine_lr(120, s) == pytest.approx(0.0, abs=1e-20)
    assert cosine_lr(60, s) == pytest.approx(0.00005, rel=1e-12)
    s2 = LRSchedule(lr_max=0.5, lr_min=0.1, total_epochs=10)
    assert cosine_lr(10, s2) == pytest.approx(0.1)


def test_cosine_zero_epochs():
    with pytest.raises(ConfigError):
        cosine_lr(0, LRSchedule(total_epochs=0))
