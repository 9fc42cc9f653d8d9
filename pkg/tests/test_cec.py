import numpy as np
import pytest

from convitac import tensor as T
from convitac.cec import AttentionHead, CrossModalAttention, align, cross_modal_head
from convitac.contrastive import ContrastiveEncoder, freeze
from convitac.errors import DimensionError, ValidationError
from convitac.fusion import FusionBlock
from convitac.tensor import Tensor, grad_check
from convitac.vit import EncoderConfig


def _attention(dim=64, heads=4, seed=0, residual=False):
    return CrossModalAttention(dim, heads, np.random.default_rng(seed), residual)


def _rows(seed, *shape):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


def test_constant_keys_average_values():
    head = AttentionHead(8, 4, np.random.default_rng(0), 0.3)
    f = _rows(1, 5, 8)
    head.wk.values[:] = 0.0
    out = cross_modal_head(_rows(2, 3, 8), f, head).values
    mean_v = (f.values @ head.wv.values).mean(axis=0)
    np.testing.assert_allclose(out, np.tile(mean_v, (3, 1)), atol=1e-6)


def test_single_key_returns_its_value():
    head = AttentionHead(8, 4, np.random.default_rng(0), 0.3)
    f = _rows(3, 1, 8)
    out = cross_modal_head(_rows(4, 6, 8), f, head).values
    np.testing.assert_allclose(out, np.tile(f.values @ head.wv.values, (6, 1)), atol=1e-6)


def test_joint_key_value_permutation_invariance():
    attn = _attention()
    e, f = _rows(5, 32, 64), _rows(6, 16, 64)
    base = attn(e, f).values
    perm = np.random.default_rng(7).permutation(16)
    np.testing.assert_allclose(attn(e, Tensor(f.values[perm])).values, base, atol=1e-6)


def test_attention_rows_sum_to_one():
    attn = _attention()
    attn(_rows(8, 2, 32, 64), _rows(9, 2, 16, 64))
    for a in attn.attention_maps():
        assert a.shape == (2, 32, 16)
        np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-6)


def test_output_rows_follow_queries_for_every_fusion():
    rng = np.random.default_rng(10)
    attn = _attention()
    e_p = _rows(11, 32, 64)
    for kind, keys in (("add", 16), ("sws", 16), ("concat", 32)):
        block = FusionBlock(64, kind, rng)
        f_f = block(_rows(12, 16, 64), _rows(13, 16, 64))
        assert f_f.shape == (keys, 64)
        assert align(e_p, f_f, attn).shape == (32, 64)


def test_single_head_degenerate_case():
    attn = _attention(dim=8, heads=1)
    e, f = _rows(14, 4, 8), _rows(15, 3, 8)
    head = attn.heads[0]
    expected = cross_modal_head(e, f, head).values @ attn.w0.values
    np.testing.assert_allclose(attn(e, f).values, expected, atol=1e-6)


def test_residual_adds_queries():
    plain = _attention(dim=8, heads=2, seed=3)
    res = _attention(dim=8, heads=2, seed=3, residual=True)
    e, f = _rows(16, 4, 8), _rows(17, 3, 8)
    np.testing.assert_allclose(res(e, f).values, plain(e, f).values + e.values, atol=1e-6)


def test_shape_errors():
    attn = _attention(dim=8, heads=2)
    with pytest.raises(DimensionError):
        attn(_rows(0, 4, 8), _rows(1, 3, 6))
    with pytest.raises(DimensionError):
        attn(_rows(0, 2, 4, 8), _rows(1, 3, 3, 8))
    with pytest.raises(ValidationError):
        _attention(dim=10, heads=4)


def test_no_gradient_reaches_frozen_encoder():
    cfg = EncoderConfig(image_size=8, channels=1, patch_size=4, dim=16, depth=1, heads=2)
    enc = freeze(ContrastiveEncoder(cfg))
    attn = _attention(dim=16, heads=2)
    imgs = np.random.default_rng(18).uniform(0, 1, (2, 8, 8, 1)).astype(np.float32)
    f = Tensor(np.random.default_rng(19).normal(size=(3, 16)), requires_grad=True)
    with T.Tape() as tape:
        e = T.reshape(enc.vit.encode(imgs), (8, 16))
        loss = T.sum(attn(e, f))
    tape.backward(loss)
    assert all(p.grad is None for p in enc.parameters())
    assert f.grad is not None and all(p.grad is not None for p in attn.parameters())


def test_gradient():
    attn = _attention(dim=8, heads=2, seed=4)
    rng = np.random.default_rng(20)
    for p in attn.parameters():
        p.values = rng.uniform(-1, 1, p.shape)
    e, f = Tensor(rng.uniform(-1, 1, (4, 8))), Tensor(rng.uniform(-1, 1, (3, 8)))
    w = Tensor(rng.uniform(-1, 1, (4, 8)))
    assert grad_check(lambda: T.sum(T.mul(attn(e, f), w)), [e, f] + attn.parameters()) < 1e-4


def test_save_writes_per_head_files_and_loads(tmp_path):
    attn = _attention(dim=8, heads=2, seed=5)
    attn.save(tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == sorted([f"head{i}_{w}.cvt" for i in range(2) for w in ("wq", "wk", "wv")]
                           + ["w0.cvt"])
    other = _attention(dim=8, heads=2, seed=6)
    other.load(tmp_path)
    for a, b in zip(attn.parameters(), other.parameters()):
        assert a.values.tobytes() == b.values.tobytes()
    with pytest.raises(DimensionError):
        _attention(dim=16, heads=2).load(tmp_path)
