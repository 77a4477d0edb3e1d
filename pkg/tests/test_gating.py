import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from accvit import functional as F
from accvit.errors import BranchCountMismatch, ShapeMismatch
from accvit.gating import GateUnit, gate_weights, gated_fuse
from accvit.gradcheck import gradcheck
from accvit.nn import Init
from accvit.tensor import Tensor

from conftest import leaf


def gelu64(v):
    return 0.5 * v * (1 + np.tanh(np.sqrt(2 / np.pi) * (v + 0.044715 * v ** 3)))


def randomized(unit, rng, scale=1.0):
    for p in unit.parameters():
        p.data = (scale * rng.standard_normal(p.shape)).astype(p.dtype)
    return unit


class TestGateWeights:
    def test_single_branch_is_one(self, rng):
        unit = randomized(GateUnit(4, 1), rng, 5.0)
        g = gate_weights(unit, Tensor(rng.standard_normal((2, 4, 3, 3)).astype(np.float32)))
        assert g.shape == (1, 2, 4, 3, 3)
        assert np.all(g.data == 1.0)

    @pytest.mark.parametrize("k", [2, 3, 4])
    def test_zero_parameters_give_uniform(self, rng, k):
        unit = GateUnit(3, k)
        for p in unit.parameters():
            p.data = np.zeros_like(p.data)
        g = unit.weights(Tensor(rng.standard_normal((1, 3, 2, 2)).astype(np.float32))).data
        np.testing.assert_allclose(g, 1.0 / k, rtol=1e-6)

    def test_matches_direct_formula(self, rng):
        unit = randomized(GateUnit(4, 3), rng)
        x = rng.standard_normal((1, 4, 2, 2)).astype(np.float32)
        W = unit.proj.weight.data[:, :, 0, 0].astype(np.float64)
        b = unit.proj.bias.data.astype(np.float64)
        logits = gelu64(np.einsum("oc,nchw->nohw", W, x.astype(np.float64)) + b[None, :, None, None])
        logits = logits.reshape(1, 3, 4, 2, 2)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        ref = (e / e.sum(axis=1, keepdims=True)).transpose(1, 0, 2, 3, 4)
        assert np.abs(unit.weights(Tensor(x)).data - ref).max() < 1e-6

    def test_shift_invariance(self, rng):
        # positive inputs, weights and biases keep relu in its linear regime, so
        # raising every bias by c0 shifts all k logits at each location by c0
        unit = GateUnit(2, 3, activation="relu")
        unit.proj.weight.data = np.abs(rng.standard_normal(unit.proj.weight.shape)).astype(np.float32)
        unit.proj.bias.data = np.abs(rng.standard_normal(6)).astype(np.float32)
        x = Tensor(np.abs(rng.standard_normal((1, 2, 2, 2))).astype(np.float32))
        before = unit.weights(x).data
        unit.proj.bias.data = unit.proj.bias.data + np.float32(3.0)
        assert np.abs(unit.weights(x).data - before).max() < 1e-6

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            GateUnit(4, 2).weights(Tensor(np.zeros((1, 3, 2, 2))))


class TestGatedFuse:
    def test_identical_branches_pass_through(self, rng):
        unit = randomized(GateUnit(3, 3), rng)
        t = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        x = Tensor(rng.standard_normal((2, 3, 4, 4)).astype(np.float32))
        out = gated_fuse(unit, x, [Tensor(t)] * 3)
        np.testing.assert_array_equal(out.data, t)

    def test_zero_one_branches_give_second_gate(self, rng):
        unit = randomized(GateUnit(2, 2), rng)
        x = Tensor(rng.standard_normal((1, 2, 3, 3)).astype(np.float32))
        out = unit.fuse(x, [Tensor(np.zeros((1, 2, 3, 3), np.float32)), Tensor(np.ones((1, 2, 3, 3), np.float32))])
        g = unit.weights(x).data
        assert np.all(out.data > 0) and np.all(out.data < 1)
        np.testing.assert_allclose(out.data, g[1], atol=1e-6)

    def test_matches_f64_recomputation(self, rng):
        unit = randomized(GateUnit(4, 3), rng)
        x = Tensor(rng.standard_normal((2, 4, 3, 3)).astype(np.float32))
        ys = rng.standard_normal((3, 2, 4, 3, 3)).astype(np.float32)
        g = unit.weights(x).data.astype(np.float64)
        ref = (g * ys.astype(np.float64)).sum(axis=0)
        out = unit.fuse(x, [Tensor(y) for y in ys]).data
        assert np.abs(out - ref).max() < 1e-5

    def test_wide_branches_share_gate_channels(self, rng):
        unit = randomized(GateUnit(2, 3, out_channels=2), rng)
        x = Tensor(rng.standard_normal((1, 2, 3, 3)).astype(np.float32))
        ys = rng.standard_normal((3, 1, 8, 3, 3)).astype(np.float32)
        out = unit.fuse(x, [Tensor(y) for y in ys]).data
        g = np.repeat(unit.weights(x).data.astype(np.float64), 4, axis=2)
        np.testing.assert_allclose(out, (g * ys).sum(axis=0), atol=1e-5)

    def test_branch_count_mismatch(self):
        x = Tensor(np.zeros((1, 2, 2, 2)))
        with pytest.raises(BranchCountMismatch):
            GateUnit(2, 3).fuse(x, [x, x])

    def test_branch_shape_mismatch(self):
        x = Tensor(np.zeros((1, 2, 2, 2)))
        with pytest.raises(ShapeMismatch):
            GateUnit(2, 2).fuse(x, [x, Tensor(np.zeros((1, 2, 3, 3)))])

    def test_gradcheck(self, rng):
        unit = randomized(GateUnit(3, 2, init=Init(dtype=np.float64)), rng)
        x = leaf(rng, 1, 3, 2, 2)
        ys = [leaf(rng, 1, 3, 2, 2) for _ in range(2)]
        r = gradcheck(lambda: unit.fuse(x, ys), [x] + ys + unit.parameters())
        assert r.max_rel_error < 1e-4


@settings(max_examples=200, deadline=None)
@given(
    k=st.integers(1, 4), c=st.integers(1, 4), hw=st.integers(1, 3),
    scale=st.floats(0.01, 10.0), seed=st.integers(0, 2**31),
)
def test_normalization_and_envelope(k, c, hw, scale, seed):
    rng = np.random.default_rng(seed)
    unit = randomized(GateUnit(c, k), rng, scale)
    x = Tensor((scale * rng.standard_normal((2, c, hw, hw))).astype(np.float32))
    g = unit.weights(x).data
    assert np.abs(g.astype(np.float64).sum(axis=0) - 1).max() <= 1e-6
    assert np.all(g >= 0) and np.all(g <= 1)
    ys = (scale * rng.standard_normal((k, 2, c, hw, hw))).astype(np.float32)
    out = unit.fuse(x, [Tensor(y) for y in ys]).data
    assert np.all(out >= ys.min(axis=0)) and np.all(out <= ys.max(axis=0))


def test_convex_combine_rejects_bad_broadcast():
    with pytest.raises(ShapeMismatch):
        F.convex_combine(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))
