import numpy as np
import pytest

from accvit import attention as A
from accvit import functional as F
from accvit import tensor as T
from accvit.audit import PARAM_TOLERANCE, AuditReport, Row, _Counter, count_params, estimate_flops
from accvit.errors import IndivisibleDims
from accvit.model import PUBLISHED_VARIANTS, build, get_config
from accvit.nn import Conv2d, Linear
from accvit.tensor import Tensor, no_grad


@pytest.fixture(scope="module")
def tiny_report():
    return estimate_flops(build("tiny", materialize=False))


def traced_macs(monkeypatch, model, size):
    """Run a real forward pass and count multiply-accumulates from operand shapes."""
    total = [0]
    conv, linear, matmul = F.conv2d, F.linear, T.matmul

    def conv_spy(x, w, b=None, stride=1, padding=0, dilation=1, groups=1):
        out = conv(x, w, b, stride, padding, dilation, groups)
        total[0] += out.size * w.shape[1] * w.shape[2] * w.shape[3]
        return out

    def linear_spy(x, w, b=None):
        out = linear(x, w, b)
        total[0] += out.size * w.shape[1]
        return out

    def matmul_spy(a, b):
        out = matmul(a, b)
        total[0] += out.size * a.shape[-1]
        return out

    monkeypatch.setattr(F, "conv2d", conv_spy)
    monkeypatch.setattr(F, "linear", linear_spy)
    monkeypatch.setattr(T, "matmul", matmul_spy)
    monkeypatch.setattr(A, "matmul", matmul_spy)
    with no_grad():
        model(Tensor(np.zeros((1, 3, size, size), np.float32)))
    return total[0]


class TestLeafCounts:
    def test_linear_params(self):
        assert count_params(Linear(8, 4)) == 36

    def test_linear_flops(self):
        m = Linear(8, 4)
        c = _Counter(m)
        c.linear(m, 1)
        assert c.order[0].macs == 32 and c.order[0].flops == 2 * 32 + 4

    def test_pointwise_conv(self):
        m = Conv2d(2, 3, 1)
        c = _Counter(m)
        assert c.conv(m, 1, 4, 4) == (4, 4)
        assert c.order[0].flops == 192 + 48
        assert c.order[0].params == 9

    def test_depthwise_strided_conv(self):
        m = Conv2d(8, 8, 3, stride=2, padding=1, groups=8)
        c = _Counter(m)
        assert c.conv(m, 1, 8, 8) == (4, 4)
        assert c.order[0].macs == 8 * 16 * 9


class TestReport:
    def test_rows_sum_to_totals(self, tiny_report):
        assert sum(r.params for r in tiny_report.rows) == tiny_report.params
        assert sum(r.flops for r in tiny_report.rows) == tiny_report.flops

    def test_params_match_model(self):
        model = build("femto", materialize=False)
        assert estimate_flops(model).params == model.num_parameters()

    @pytest.mark.parametrize("name", PUBLISHED_VARIANTS)
    def test_params_within_tolerance(self, name):
        report = estimate_flops(build(name, materialize=False))
        assert abs(report.params_delta) <= PARAM_TOLERANCE

    def test_flops_are_twice_macs_plus_elementwise(self, tiny_report):
        assert tiny_report.flops > 2 * tiny_report.macs

    def test_macs_match_traced_forward(self, monkeypatch):
        model = build(get_config("femto", num_classes=10))
        assert estimate_flops(model, 64).macs == traced_macs(monkeypatch, model, 64)

    def test_matmul_rows_scale_with_area(self, tiny_report):
        big = estimate_flops(build("tiny", materialize=False), 448)
        for small, large in zip(tiny_report.rows, big.rows):
            if small.kind in ("Conv2d", "WindowedMHSA"):
                assert large.flops == 4 * small.flops, small.name

    def test_invariant_to_seed(self, tiny_report):
        other = estimate_flops(build("tiny", seed=7, materialize=False))
        assert other.to_tsv() == tiny_report.to_tsv()

    def test_published_only_at_reference_setting(self):
        model = build("tiny", materialize=False)
        assert estimate_flops(model, 448).published_flops is None
        assert estimate_flops(model, 448).published_params is not None
        assert estimate_flops(build(get_config("tiny", num_classes=10), materialize=False)).published_params is None

    def test_tsv_format(self, tiny_report):
        lines = tiny_report.to_tsv().splitlines()
        assert lines[0].split("\t")[0] == "model"
        assert lines[-1] == f"total\t{tiny_report.params}\t{tiny_report.flops}"
        assert all(len(line.split("\t")) == 3 for line in lines)
        assert "stages.0.0.attn.branches.1.attn" in {line.split("\t")[0] for line in lines}

    def test_row_lookup(self, tiny_report):
        assert tiny_report.row("stem.conv1").params == 64 * 3 * 9 + 64
        with pytest.raises(KeyError):
            tiny_report.row("nope")

    def test_rejects_indivisible_resolution(self):
        with pytest.raises(IndivisibleDims):
            estimate_flops(build("femto", materialize=False), 100)

    def test_delta_without_reference(self):
        r = AuditReport("x", (64, 64), [Row("", "M", 10, 20)])
        assert r.params_delta is None and r.params_ok() and r.flops_ok()
