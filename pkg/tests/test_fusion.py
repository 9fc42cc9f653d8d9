import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convitac import tensor as T
from convitac.errors import DimensionError, ValidationError
from convitac.fusion import (FusionBlock, FusionKind, fuse, fused_rows, modality_project,
                             stack_frames, sws_weights)
from convitac.layers import Linear
from convitac.tensor import Tensor, grad_check


def _rows(seed, *shape):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


def test_stack_frames_keeps_frame_order():
    a, b = _rows(0, 16, 8), _rows(1, 16, 8)
    out = stack_frames([a, b]).values
    assert out.shape == (32, 8)
    np.testing.assert_array_equal(out[:16], a.values)
    np.testing.assert_array_equal(out[16:], b.values)


def test_stack_frames_rejects_mismatch():
    with pytest.raises(DimensionError):
        stack_frames([_rows(0, 16, 8), _rows(1, 15, 8)])
    with pytest.raises(ValidationError):
        stack_frames([])


def test_identity_and_zero_projection():
    x = _rows(2, 5, 4)
    lin = Linear(4, 4, np.random.default_rng(0))
    lin.weight.values = np.eye(4, dtype=np.float32)
    np.testing.assert_allclose(modality_project(x, lin).values, x.values, atol=1e-6)
    lin.weight.values = np.zeros((4, 4), np.float32)
    assert not modality_project(x, lin).values.any()
    with pytest.raises(DimensionError):
        modality_project(_rows(3, 5, 3), lin)


def test_add_with_zero_tactile_is_visual():
    pv = _rows(4, 16, 64)
    out = fuse(pv, Tensor(np.zeros((16, 64))), "add")
    assert out.values.tobytes() == pv.values.tobytes()


def test_concat_shape_and_exact_split():
    pv, pt = _rows(5, 16, 64), _rows(6, 16, 64)
    out = fuse(pv, pt, "concat").values
    assert out.shape == (32, 64)
    assert out[:16].tobytes() == pv.values.tobytes()
    assert out[16:].tobytes() == pt.values.tobytes()
    assert fused_rows(FusionKind.CONCAT, 16) == 32
    assert fused_rows("add", 16) == fused_rows("sws", 16) == 16


def test_sws_equal_gates_give_mean():
    pv, pt = _rows(7, 4, 8), _rows(8, 4, 8)
    out = fuse(pv, pt, "sws", Tensor(np.zeros(2))).values
    np.testing.assert_allclose(out, 0.5 * (pv.values + pt.values), atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.floats(-30, 30), st.floats(-30, 30))
def test_sws_weights_are_convex(a, b):
    w = sws_weights(Tensor(np.array([a, b]), dtype=np.float64)).values
    assert np.all(w >= 0)
    assert abs(w.sum() - 1.0) < 1e-12


def test_fusion_is_row_permutation_equivariant():
    pv, pt = _rows(9, 6, 8), _rows(10, 6, 8)
    perm = np.random.default_rng(0).permutation(6)
    gates = Tensor(np.array([0.3, -0.2]))
    for kind in ("add", "sws"):
        base = fuse(pv, pt, kind, gates).values
        permuted = fuse(Tensor(pv.values[perm]), Tensor(pt.values[perm]), kind, gates).values
        np.testing.assert_allclose(permuted, base[perm], atol=1e-6)


def test_unknown_kind_and_missing_gates():
    with pytest.raises(ValidationError, match="unknown fusion"):
        fuse(_rows(0, 2, 2), _rows(1, 2, 2), "max")
    with pytest.raises(ValidationError):
        fuse(_rows(0, 2, 2), _rows(1, 2, 2), "sws")
    with pytest.raises(DimensionError):
        fuse(_rows(0, 2, 2), _rows(1, 3, 2), "add")


def test_block_parameters_depend_on_kind():
    rng = np.random.default_rng(0)
    assert len(FusionBlock(8, "concat", rng).parameters()) == 4
    sws = FusionBlock(8, "sws", rng)
    assert len(sws.parameters()) == 5
    assert sws.gates.shape == (2,)


def test_block_gradient_for_each_kind():
    rng = np.random.default_rng(11)
    for kind in ("add", "concat", "sws"):
        block = FusionBlock(6, kind, rng)
        for p in block.parameters():
            p.values = rng.uniform(-1, 1, p.shape)
        fv, ft = Tensor(rng.uniform(-1, 1, (3, 6))), Tensor(rng.uniform(-1, 1, (3, 6)))
        w = Tensor(rng.uniform(-1, 1, (6 if kind == "concat" else 3, 6)))
        err = grad_check(lambda: T.sum(T.mul(block(fv, ft), w)), [fv, ft] + block.parameters())
        assert err < 1e-6, kind
