import numpy as np
import pytest

from datr import numerics as nx
from datr.encoder import Encoder, EncoderConfig, encode, patch_embed, patch_merge
from datr.numerics import ContractError, DimensionError, Tensor, grad_check, no_grad, precision
from datr.params import ParamStore

F64 = np.float64


def ln(t, g, b):
    return (t - t.mean(-1, keepdims=True)) / np.sqrt(t.var(-1, keepdims=True) + 1e-5) * g + b


def test_patch_embed_oracle(rng):
    img = rng.uniform(size=(2, 8, 12, 1))
    w, b = rng.normal(size=(16, 5)), rng.normal(size=5)
    g, beta = rng.normal(size=5), rng.normal(size=5)
    got = patch_embed(Tensor(img, dtype=F64), Tensor(w, dtype=F64), Tensor(b, dtype=F64),
                      Tensor(g, dtype=F64), Tensor(beta, dtype=F64), 4).data
    assert got.shape == (2, 2, 3, 5)
    for n in range(2):
        for i in range(2):
            for j in range(3):
                tile = img[n, 4 * i:4 * i + 4, 4 * j:4 * j + 4, 0].reshape(-1)  # row-major in-patch order
                np.testing.assert_allclose(got[n, i, j], ln(tile @ w + b, g, beta), atol=1e-12)


def test_patch_merge_neighbourhood_order(rng):
    x = rng.normal(size=(1, 4, 4, 3))
    w = rng.normal(size=(12, 6))
    g, b = np.ones(12), np.zeros(12)
    got = patch_merge(Tensor(x, dtype=F64), Tensor(g, dtype=F64), Tensor(b, dtype=F64), Tensor(w, dtype=F64)).data
    assert got.shape == (1, 2, 2, 6)
    for i in range(2):
        for j in range(2):
            r, c = 2 * i, 2 * j
            cat = np.concatenate([x[0, r, c], x[0, r + 1, c], x[0, r, c + 1], x[0, r + 1, c + 1]])
            np.testing.assert_allclose(got[0, i, j], ln(cat, g, b) @ w, atol=1e-12)


def test_patch_ops_reject_bad_extents():
    z = lambda *s: Tensor(np.zeros(s))
    with pytest.raises(ContractError):
        patch_embed(z(1, 6, 8, 1), z(16, 4), z(4), z(4), z(4), 4)
    with pytest.raises(ContractError):
        patch_merge(z(1, 3, 4, 2), z(8), z(8), z(8, 4))


def test_patch_ops_gradients(rng):
    x = Tensor(rng.normal(size=(1, 4, 4, 2)), requires_grad=True, dtype=F64)
    g = Tensor(rng.normal(size=8), requires_grad=True, dtype=F64)
    b = Tensor(rng.normal(size=8), requires_grad=True, dtype=F64)
    w = Tensor(rng.normal(size=(8, 4)), requires_grad=True, dtype=F64)
    R = Tensor(rng.normal(size=(1, 2, 2, 4)), dtype=F64)
    assert grad_check(lambda: nx.sum(nx.mul(patch_merge(x, g, b, w), R)), [x, g, b, w]) < 1e-4
    img = Tensor(rng.uniform(size=(1, 8, 8, 1)), requires_grad=True, dtype=F64)
    we = Tensor(rng.normal(size=(16, 4)), requires_grad=True, dtype=F64)
    be, ge, bb = (Tensor(rng.normal(size=4), requires_grad=True, dtype=F64) for _ in range(3))
    R2 = Tensor(rng.normal(size=(1, 2, 2, 4)), dtype=F64)
    assert grad_check(lambda: nx.sum(nx.mul(patch_embed(img, we, be, ge, bb), R2)), [img, we, be, ge, bb]) < 1e-4


def test_config_laws():
    cfg = EncoderConfig()
    assert [cfg.stage_channels(s) for s in range(4)] == [32, 64, 128, 256]
    assert [cfg.stage_stride(s) for s in range(4)] == [4, 8, 16, 32]
    assert cfg.size_divisor == 32
    with pytest.raises(ContractError):
        EncoderConfig(depths=(2, 2, 2))
    with pytest.raises(ContractError):
        EncoderConfig(heads=(3, 2, 4, 8))


def build(cfg, domains=("a",)):
    store = ParamStore()
    enc = Encoder(store, cfg)
    enc.init_shared(np.random.default_rng(0))
    for d in domains:
        enc.init_domain(d, np.random.default_rng(1))
    return store, enc


def test_toy_pyramid_shapes():
    _, enc = build(EncoderConfig())
    with no_grad():
        out = encode(enc, Tensor(np.zeros((2, 64, 64, 1))), "a")
    assert [o.shape for o in out] == [(2, 16, 16, 32), (2, 8, 8, 64), (2, 4, 4, 128), (2, 2, 2, 256)]


def test_shift_alternates_within_stages():
    _, enc = build(EncoderConfig(depths=(2, 2, 3, 2)))
    assert [b.shift for b in enc.stages[2]] == [0, 2, 0]


def test_encoder_input_checks():
    _, enc = build(EncoderConfig())
    with pytest.raises(ContractError):
        enc(Tensor(np.zeros((1, 48, 64, 1))), "a")
    with pytest.raises(DimensionError):
        enc(Tensor(np.zeros((1, 64, 64, 3))), "a")


def test_encoder_domain_parameters_are_queries_and_diagonals():
    cfg = EncoderConfig()
    store, enc = build(cfg)
    shapes = enc.domain_param_shapes()
    per_block = {"attn/q.weight", "attn/q.bias", "d1", "d2"}
    assert {k.split("/", 3)[3] for k in shapes} == per_block
    assert len(shapes) == 4 * sum(cfg.depths)
    assert sum(int(np.prod(s)) for s in shapes.values()) == store.count("domain/a")


def test_basic_encoder_has_no_domain_parameters():
    cfg = EncoderConfig(domain_query=False, domain_diagonal=False)
    store, enc = build(cfg, domains=())
    assert enc.domain_param_shapes() == {}
    with precision(F64), no_grad():
        assert len(enc(Tensor(np.zeros((1, 32, 32, 1))), None)) == 4
