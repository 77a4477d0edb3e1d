import numpy as np
import pytest

from accvit.attention import (
    AtrousAttentionLayer, WindowedMHSA, effective_window, relative_position_index, wmhsa_forward,
)
from accvit.errors import IndivisibleDims, InvalidConfig, ShapeMismatch
from accvit.gradcheck import gradcheck
from accvit.nn import Init
from accvit.partition import window_split
from accvit.tensor import Tensor, no_grad
from accvit.verify import reference_window_layer


def randomize(module, rng, scale=0.5, dtype=np.float32):
    for p in module.parameters():
        p.data = (scale * rng.standard_normal(p.shape)).astype(dtype)
    return module


def zero(module):
    for p in module.parameters():
        p.data = np.zeros_like(p.data)
    return module


def attention_oracle(m: WindowedMHSA, x: np.ndarray, P: int) -> np.ndarray:
    """softmax(q·kᵀ/√d + b)·v evaluated token by token in float64."""
    n, T, c = x.shape
    H, hd = m.num_heads, m.head_dim
    W = {k: v.data.astype(np.float64) for k, v in m.named_parameters()}
    qkv = x @ W["qkv.weight"].T + W["qkv.bias"]
    out = np.zeros((n, T, c))
    for w in range(n):
        for h in range(H):
            q = qkv[w, :, h * hd:(h + 1) * hd]
            k = qkv[w, :, c + h * hd:c + (h + 1) * hd]
            v = qkv[w, :, 2 * c + h * hd:2 * c + (h + 1) * hd]
            for i in range(T):
                logits = np.empty(T)
                for j in range(T):
                    di = i // P - j // P
                    dj = i % P - j % P
                    idx = (di + P - 1) * (2 * P - 1) + (dj + P - 1)
                    logits[j] = q[i] @ k[j] / np.sqrt(hd) + W["rel_pos_bias"][idx, h]
                a = np.exp(logits - logits.max())
                a /= a.sum()
                out[w, i, h * hd:(h + 1) * hd] = a @ v
    return out @ W["proj.weight"].T + W["proj.bias"]


class TestRelativeIndex:
    @pytest.mark.parametrize("P", [1, 2, 3, 7])
    def test_formula_and_range(self, P):
        idx = relative_position_index(P)
        assert idx.shape == (P * P, P * P)
        assert idx.min() >= 0 and idx.max() < (2 * P - 1) ** 2
        q, k = P * P - 1, 0  # bottom-right query vs top-left key
        assert idx[q, k] == (2 * P - 2) * (2 * P - 1) + (2 * P - 2)
        assert np.all(np.diag(idx) == (P - 1) * (2 * P - 1) + (P - 1))

    def test_smaller_window_uses_centre_of_table(self):
        sub = relative_position_index(2, 7)
        assert np.all(np.diag(sub) == 6 * 13 + 6)


class TestWindowedMHSA:
    def test_constant_window_gives_constant_output(self, rng):
        m = randomize(WindowedMHSA(8, 4, 3), rng)
        m.rel_pos_bias.data[:] = 0
        x = Tensor(np.tile(rng.standard_normal(8).astype(np.float32), (2, 9, 1)))
        out = m(x).data
        assert np.abs(out - out[:, :1]).max() < 1e-6

    def test_single_token_window(self, rng):
        m = randomize(WindowedMHSA(8, 4, 1), rng)
        x = rng.standard_normal((5, 1, 8)).astype(np.float32)
        out, attn = m.attention(Tensor(x), 1)
        assert np.all(attn.data == 1.0)
        v = (x @ m.qkv.weight.data.T + m.qkv.bias.data)[..., 16:]
        np.testing.assert_allclose(out.data, v @ m.proj.weight.data.T + m.proj.bias.data, rtol=1e-5, atol=1e-6)

    def test_matches_loop_oracle(self, rng):
        m = randomize(WindowedMHSA(4, 4, 2), rng)
        x = rng.standard_normal((3, 4, 4)).astype(np.float32)
        assert np.abs(m(Tensor(x)).data - attention_oracle(m, x.astype(np.float64), 2)).max() < 1e-5

    def test_matches_loop_oracle_multi_head(self, rng):
        m = randomize(WindowedMHSA(8, 4, 3), rng)
        x = rng.standard_normal((2, 9, 8))
        m.to(np.float64)
        assert np.abs(m(Tensor(x)).data - attention_oracle(m, x, 3)).max() < 1e-10

    def test_rows_are_stochastic(self, rng):
        m = randomize(WindowedMHSA(8, 4, 3), rng, 2.0)
        _, attn = m.attention(Tensor(rng.standard_normal((4, 9, 8)).astype(np.float32)), 3)
        assert np.abs(attn.data.sum(axis=-1) - 1).max() <= 1e-6

    def test_permutation_equivariance_without_bias(self, rng):
        m = randomize(WindowedMHSA(8, 4, 3), rng)
        m.rel_pos_bias.data[:] = 0
        x = rng.standard_normal((2, 9, 8)).astype(np.float32)
        perm = rng.permutation(9)
        out = m(Tensor(x)).data
        out_perm = m(Tensor(x[:, perm])).data
        np.testing.assert_allclose(out_perm, out[:, perm], atol=1e-5)

    def test_window_grid_in_grid_out(self, rng):
        m = WindowedMHSA(8, 4, 2)
        grid = window_split(Tensor(rng.standard_normal((1, 8, 4, 4)).astype(np.float32)), 2)
        out = wmhsa_forward(m, grid)
        assert out.windows.shape == (4, 4, 8) and out.grid == grid.grid

    def test_wrong_token_count(self):
        with pytest.raises(ShapeMismatch):
            WindowedMHSA(8, 4, 2).attention(Tensor(np.zeros((1, 5, 8))), 2)

    def test_head_dim_must_divide(self):
        with pytest.raises(InvalidConfig):
            WindowedMHSA(48, 32)

    def test_scale(self):
        assert WindowedMHSA(64, 32).scale == pytest.approx(32 ** -0.5)


class TestEffectiveWindow:
    @pytest.mark.parametrize("h,w,P,expected", [(56, 56, 7, 7), (7, 7, 7, 7), (16, 16, 7, 4), (2, 2, 7, 2), (6, 4, 7, 2)])
    def test_values(self, h, w, P, expected):
        assert effective_window(h, w, P) == expected


class TestAtrousAttentionLayer:
    def test_branch_count(self):
        layer = AtrousAttentionLayer(16, (2, 4, 8), head_dim=8)
        assert len(layer.branches) == 4 and layer.gate.branches == 4
        assert layer.dilations == (1, 2, 4, 8)

    def test_shape_preserved_at_stage_one(self, rng):
        layer = AtrousAttentionLayer(64, (2, 4, 8), head_dim=32, window_size=7)
        with no_grad():
            out = layer(Tensor(rng.standard_normal((2, 64, 56, 56)).astype(np.float32)))
        assert out.shape == (2, 64, 56, 56)

    def test_zero_weights_give_identity(self, rng):
        layer = zero(AtrousAttentionLayer(16, (2, 4), head_dim=8, window_size=2))
        layer.gate.proj.weight.data = rng.standard_normal(layer.gate.proj.weight.shape).astype(np.float32)
        x = rng.standard_normal((1, 16, 8, 8)).astype(np.float32)
        assert np.abs(layer(Tensor(x)).data - x).max() < 1e-6

    def test_single_branch_equals_window_transformer(self, rng):
        layer = randomize(AtrousAttentionLayer(16, (), head_dim=8, window_size=7), rng, 0.3)
        x = Tensor(rng.standard_normal((2, 16, 7, 7)).astype(np.float32))
        diff = np.abs(layer(x).data - reference_window_layer(layer, x).data).max()
        assert diff <= 1e-6

    def test_single_branch_gate_gradient_is_zero(self, rng):
        layer = randomize(AtrousAttentionLayer(8, (), head_dim=4, window_size=2), rng)
        x = Tensor(rng.standard_normal((1, 8, 4, 4)).astype(np.float32), requires_grad=True)
        layer(x).sum().backward()
        assert np.all(layer.gate.proj.weight.grad.data == 0)

    def test_rejects_indivisible_input(self):
        layer = AtrousAttentionLayer(8, (4,), head_dim=4)
        with pytest.raises(IndivisibleDims):
            layer(Tensor(np.zeros((1, 8, 6, 6), np.float32)))

    def test_gradcheck(self, rng):
        layer = randomize(AtrousAttentionLayer(8, (2,), head_dim=4, window_size=2, init=Init(dtype=np.float64)),
                          rng, 0.3, np.float64)
        x = Tensor(rng.standard_normal((1, 8, 8, 8)), requires_grad=True)
        assert gradcheck(lambda: layer(x), [x] + layer.parameters(), max_checks=60).max_rel_error < 1e-3
