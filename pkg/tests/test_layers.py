import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from datr import numerics as nx
from datr.layers import (BatchNormState, Conv2dSpec, activation, batch_norm, conv2d, conv_output_size,
                         layer_norm, linear, resize_bilinear, resize_matrix, upsample_bilinear)
from datr.numerics import ContractError, DimensionError, Tensor, grad_check

F64 = np.float64


def conv_loops(x, w, b, stride=1, padding=0, dilation=1, groups=1):
    """Direct cross-correlation, one output element at a time."""
    B, H, W, C = x.shape
    kh, kw, cg, O = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    Ho = (H + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    Wo = (W + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    og = O // groups
    out = np.zeros((B, Ho, Wo, O))
    for n in range(B):
        for i in range(Ho):
            for j in range(Wo):
                for o in range(O):
                    g = o // og
                    acc = 0.0 if b is None else b[o]
                    for u in range(kh):
                        for v in range(kw):
                            for c in range(cg):
                                acc += xp[n, i * stride + u * dilation, j * stride + v * dilation,
                                          g * cg + c] * w[u, v, c, o]
                    out[n, i, j, o] = acc
    return out


CONV_CASES = [
    Conv2dSpec(3, 4, (3, 3), padding=1),
    Conv2dSpec(3, 4, (3, 3), stride=2, padding=1),
    Conv2dSpec(3, 4, (3, 3), padding=2, dilation=2),
    Conv2dSpec(4, 4, (3, 3), padding=1, groups=4),
    Conv2dSpec(4, 6, (3, 3), padding=1, groups=2),
    Conv2dSpec(3, 5, (1, 1)),
    Conv2dSpec(2, 2, (3, 3), padding=4, dilation=4, groups=2),
]


@pytest.mark.parametrize("spec", CONV_CASES, ids=str)
def test_conv2d_matches_loop_oracle(rng, spec):
    x = rng.normal(size=(2, 7, 6, spec.in_channels))
    w = rng.normal(size=spec.weight_shape)
    b = rng.normal(size=spec.out_channels)
    got = conv2d(Tensor(x, dtype=F64), spec, Tensor(w, dtype=F64), Tensor(b, dtype=F64)).data
    want = conv_loops(x, w, b, spec.stride, spec.padding, spec.dilation, spec.groups)
    np.testing.assert_allclose(got, want, atol=1e-12)


@pytest.mark.parametrize("spec", CONV_CASES, ids=str)
def test_conv2d_gradients(rng, spec):
    x = Tensor(rng.normal(size=(2, 5, 5, spec.in_channels)), requires_grad=True, dtype=F64)
    w = Tensor(rng.normal(size=spec.weight_shape), requires_grad=True, dtype=F64)
    b = Tensor(rng.normal(size=spec.out_channels), requires_grad=True, dtype=F64)
    shape = conv2d(x, spec, w, b).shape
    R = Tensor(rng.normal(size=shape), dtype=F64)
    assert grad_check(lambda: nx.sum(nx.mul(conv2d(x, spec, w, b), R)), [x, w, b]) < 1e-4


def test_conv_spec_properties():
    dw = Conv2dSpec(8, 8, (3, 3), padding=1, groups=8)
    assert dw.is_channelwise and not dw.is_pointwise
    assert dw.weight_shape == (3, 3, 1, 8) and dw.num_weights == 72
    pw = Conv2dSpec(8, 16, (1, 1))
    assert pw.is_pointwise and pw.num_weights == 128
    assert Conv2dSpec(1, 1, (3, 3), dilation=16).receptive_span() == (33, 33)


def test_conv_spec_errors(rng):
    with pytest.raises(ContractError):
        Conv2dSpec(3, 4, (3, 3), groups=2)
    with pytest.raises(ContractError):
        Conv2dSpec(3, 4, (3, 3), stride=0)
    spec = Conv2dSpec(3, 4, (3, 3))
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((1, 5, 5, 2))), spec, Tensor(np.zeros(spec.weight_shape)))
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((1, 5, 5, 3))), spec, Tensor(np.zeros((3, 3, 3, 5))))


@given(st.integers(1, 40), st.integers(1, 5), st.integers(1, 3), st.integers(0, 4), st.integers(1, 4))
def test_conv_output_size_matches_oracle(n, k, stride, padding, dilation):
    span = dilation * (k - 1) + 1
    if n + 2 * padding < span:
        return
    # count valid window start positions directly
    starts = [s for s in range(0, n + 2 * padding) if s % stride == 0 and s + span <= n + 2 * padding]
    assert conv_output_size(n, k, stride, padding, dilation) == len(starts)


# ---------------------------------------------------------------- norms

def test_layer_norm_oracle(rng):
    x = rng.normal(size=(2, 3, 5)) * 3 + 1
    g, b = rng.normal(size=5), rng.normal(size=5)
    got = layer_norm(Tensor(x, dtype=F64), Tensor(g, dtype=F64), Tensor(b, dtype=F64)).data
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    np.testing.assert_allclose(got, (x - mu) / np.sqrt(var + 1e-5) * g + b, atol=1e-12)


def test_layer_norm_gradients(rng):
    x = Tensor(rng.normal(size=(2, 3, 6)), requires_grad=True, dtype=F64)
    g = Tensor(rng.normal(size=6), requires_grad=True, dtype=F64)
    b = Tensor(rng.normal(size=6), requires_grad=True, dtype=F64)
    R = Tensor(rng.normal(size=x.shape), dtype=F64)
    assert grad_check(lambda: nx.sum(nx.mul(layer_norm(x, g, b), R)), [x, g, b]) < 1e-4


def test_batch_norm_train_oracle_and_running_stats(rng):
    x = rng.normal(size=(4, 3, 3, 2)) * 2 + 5
    st_ = BatchNormState(2, dtype=F64)
    ones, zeros = Tensor(np.ones(2), dtype=F64), Tensor(np.zeros(2), dtype=F64)
    got = batch_norm(Tensor(x, dtype=F64), ones, zeros, st_, "train").data
    mu = x.mean(axis=(0, 1, 2))
    var = x.var(axis=(0, 1, 2))
    np.testing.assert_allclose(got, (x - mu) / np.sqrt(var + 1e-5), atol=1e-12)
    np.testing.assert_allclose(st_.running_mean, 0.1 * mu, atol=1e-12)
    np.testing.assert_allclose(st_.running_var, 0.9 + 0.1 * var, atol=1e-12)


def test_batch_norm_eval_converges_to_train_on_repeated_batch(rng):
    x = Tensor(rng.normal(size=(4, 3, 3, 2)) * 2 + 5, dtype=F64)
    st_ = BatchNormState(2, dtype=F64)
    g, b = Tensor(rng.normal(size=2), dtype=F64), Tensor(rng.normal(size=2), dtype=F64)
    for _ in range(400):
        train_out = batch_norm(x, g, b, st_, "train").data
    np.testing.assert_allclose(batch_norm(x, g, b, st_, "eval").data, train_out, atol=1e-9)


def test_batch_norm_errors(rng):
    st_ = BatchNormState(2)
    one = Tensor(np.ones(2))
    with pytest.raises(ContractError):
        batch_norm(Tensor(np.zeros((1, 2, 2, 2))), one, one, st_, "train")
    with pytest.raises(ValueError):
        batch_norm(Tensor(np.zeros((2, 2, 2, 2))), one, one, st_, "bogus")


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batch_norm_gradients(rng, mode):
    x = Tensor(rng.normal(size=(3, 2, 2, 3)), requires_grad=True, dtype=F64)
    g = Tensor(rng.normal(size=3), requires_grad=True, dtype=F64)
    b = Tensor(rng.normal(size=3), requires_grad=True, dtype=F64)
    st_ = BatchNormState(3, dtype=F64)
    st_.running_mean = rng.normal(size=3)
    st_.running_var = rng.uniform(0.5, 2, size=3)
    R = Tensor(rng.normal(size=x.shape), dtype=F64)
    saved = (st_.running_mean.copy(), st_.running_var.copy())

    def f():
        st_.running_mean, st_.running_var = saved[0].copy(), saved[1].copy()
        return nx.sum(nx.mul(batch_norm(x, g, b, st_, mode), R))

    assert grad_check(f, [x, g, b]) < 1e-4


# ---------------------------------------------------------------- misc layers

@pytest.mark.parametrize("kind", ["relu", "gelu", "sigmoid"])
def test_activation_dispatch(rng, kind):
    x = Tensor(rng.normal(size=5), dtype=F64)
    np.testing.assert_array_equal(activation(x, kind).data, getattr(nx, kind)(x).data)


def test_activation_unknown():
    with pytest.raises(ValueError, match="unknown activation"):
        activation(Tensor([1.0]), "swish")


def test_linear_oracle_and_gradient(rng):
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True, dtype=F64)
    w = Tensor(rng.normal(size=(4, 5)), requires_grad=True, dtype=F64)
    b = Tensor(rng.normal(size=5), requires_grad=True, dtype=F64)
    np.testing.assert_allclose(linear(x, w, b).data, x.data @ w.data + b.data, atol=1e-12)
    R = Tensor(rng.normal(size=(2, 3, 5)), dtype=F64)
    assert grad_check(lambda: nx.sum(nx.mul(linear(x, w, b), R)), [x, w, b]) < 1e-4
    with pytest.raises(DimensionError):
        linear(x, Tensor(np.zeros((3, 5))))


def test_resize_matrix_half_pixel_values():
    # 2 -> 4 with half-pixel centres: samples at -0.25 (clamped), 0.25, 0.75, 1.25
    np.testing.assert_allclose(resize_matrix(2, 4), [[1, 0], [0.75, 0.25], [0.25, 0.75], [0, 1]])
    # 4 -> 2 averages neighbouring pairs
    np.testing.assert_allclose(resize_matrix(4, 2), [[0.5, 0.5, 0, 0], [0, 0, 0.5, 0.5]])


@given(st.integers(1, 20), st.integers(1, 40))
def test_resize_matrix_rows_are_stochastic(n_in, n_out):
    m = resize_matrix(n_in, n_out)
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)
    assert (m >= 0).all()


def test_upsample_preserves_constants_and_grad(rng):
    x = Tensor(np.full((1, 3, 3, 2), 2.5), dtype=F64)
    np.testing.assert_allclose(upsample_bilinear(x, 4).data, 2.5)
    y = Tensor(rng.normal(size=(1, 3, 4, 2)), requires_grad=True, dtype=F64)
    R = Tensor(rng.normal(size=(1, 6, 8, 2)), dtype=F64)
    assert grad_check(lambda: nx.sum(nx.mul(upsample_bilinear(y, 2), R)), [y]) < 1e-4
    R2 = Tensor(rng.normal(size=(1, 2, 2, 2)), dtype=F64)
    assert grad_check(lambda: nx.sum(nx.mul(resize_bilinear(y, 2, 2), R2)), [y]) < 1e-4
    with pytest.raises(ContractError):
        upsample_bilinear(y, 0)
