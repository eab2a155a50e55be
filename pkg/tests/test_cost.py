"""Parameter counts, analytic FLOPs and the truncation sweep."""

import csv
import io

import numpy as np
import pytest

from truncpose import tensor as T
from truncpose.cost import CSV_HEADER, cost_report, count_params, estimate_flops, sweep
from truncpose.layers import Conv2d, Linear, Module, Parameter
from truncpose.metrics import EvalReport
from truncpose.models import build_model
from truncpose.tensor import Tensor
from truncpose.truncation import VIT_BASELINES, all_hierarchical_names


def _walk_params(obj, seen=None):
    """Independent walker: every Parameter reachable through attributes, lists and dicts."""
    seen = set() if seen is None else seen
    if id(obj) in seen:
        return 0
    seen.add(id(obj))
    if isinstance(obj, Parameter):
        return int(np.prod(obj.shape))
    if isinstance(obj, (list, tuple)):
        return sum(_walk_params(v, seen) for v in obj)
    if isinstance(obj, dict):
        return sum(_walk_params(v, seen) for v in obj.values())
    if isinstance(obj, Module):
        return sum(_walk_params(v, seen) for k, v in vars(obj).items() if not k.startswith("_"))
    return 0


class TestLayerCounts:
    def test_linear(self):
        assert Linear(5, 7).num_params() == 42

    def test_conv(self):
        assert Conv2d(3, 8, 3).num_params() == 224

    def test_pointwise_conv_flops(self):
        conv = Conv2d(2, 3, 1, bias=False)
        macs, shape = conv.macs((1, 2, 4, 4))
        brute = sum(1 for _ in range(4 * 4) for _ in range(3) for _ in range(2))
        assert 2 * macs == 2 * brute == 192 and shape == (1, 3, 4, 4)

    def test_traced_conv_matches(self):
        conv = Conv2d(2, 3, 1, bias=False).init_weights(np.random.default_rng(0))
        with T.count_macs() as c:
            conv(Tensor(np.ones((1, 2, 4, 4))))
        assert c.total == 96


class TestModelCosts:
    def test_totals_are_component_sums(self):
        rep = cost_report("SwinPose-B-S3")
        assert rep.params == sum(c["params"] for c in rep.per_component.values())
        assert rep.flops == sum(c["flops"] for c in rep.per_component.values())

    @pytest.mark.parametrize("name", ["SwinPose-T-S2", "GMFHMR2.0-S-S4", "VMPose-B-S3", "ViTPose-S"])
    def test_flat_walker_agrees(self, name):
        m = build_model(name)
        assert _walk_params(m) == count_params(m).params

    def test_params_independent_of_input(self):
        a = count_params(build_model("VMPose-S-S3", input_hw=(256, 192))).params
        b = count_params(build_model("VMPose-S-S3", input_hw=(512, 192))).params
        assert a == b

    @pytest.mark.parametrize("name", ["VMPose-T-S2", "ViTPose-S", "GMFPose-T-S3"])
    def test_conv_stage_flops_double_with_height(self, name):
        a = estimate_flops(name, (256, 192)).per_component
        b = estimate_flops(name, (512, 192)).per_component
        for comp in ("head", "adapter"):
            if comp in a and a[comp]["flops"]:
                assert b[comp]["flops"] == 2 * a[comp]["flops"]
        assert estimate_flops(name, (512, 192)).flops > estimate_flops(name, (256, 192)).flops

    def test_vm_doubles_exactly(self):
        # scan and conv costs are linear in the token count
        a, b = estimate_flops("VMPose-B-S4", (256, 192)), estimate_flops("VMPose-B-S4", (512, 192))
        assert b.flops == 2 * a.flops

    @pytest.mark.parametrize("name", ["SwinPose-S-S4", "HMR2.0-S", "GMFHMR2.0-T-S2"])
    def test_batch_linearity(self, name):
        m = build_model(name)
        one = sum(m.macs_breakdown(1).values())
        assert sum(m.macs_breakdown(3).values()) == 3 * one
        assert estimate_flops(m, batch=3).flops == estimate_flops(m).flops == 2 * one

    @pytest.mark.parametrize("task", ["HPE", "HMR"])
    def test_traced_equals_analytic(self, task):
        rng = np.random.default_rng(0)
        x = Tensor(rng.uniform(size=(2, 3, 64, 64)))
        for name in all_hierarchical_names(task):
            m = build_model(name, "toy").init_weights(rng)
            with T.no_grad(), T.count_macs() as c:
                m(x)
            assert c.total == sum(m.macs_breakdown(2).values()), name


def _rows(text):
    return list(csv.DictReader(io.StringIO(text)))


class TestSweep:
    def test_all_hierarchical(self):
        text, errors = sweep(all_hierarchical_names("HPE"))
        rows = _rows(text)
        assert not errors and len(rows) == 27
        assert text.splitlines()[0] == ",".join(CSV_HEADER)
        base = [r for r in rows if r["stage"] == "4"]
        assert len(base) == 9
        assert all(float(r["delta_p"]) == 0.0 and float(r["delta_f"]) == 0.0 for r in base)
        assert all(float(r["delta_p"]) < 0 for r in rows if r["stage"] != "4")

    def test_byte_identical(self):
        names = all_hierarchical_names("HMR")[:6]
        assert sweep(names)[0] == sweep(names)[0]
        assert "\r" not in sweep(names)[0]

    def test_unknown_name_is_listed(self):
        text, errors = sweep(["SwinPose-B-S3", "NotAModel", "VMPose-T-S5"])
        assert len(_rows(text)) == 1
        assert [e.split(":")[0] for e in errors] == ["NotAModel", "VMPose-T-S5"]

    def test_baselines_have_no_delta(self):
        rows = _rows(sweep(list(VIT_BASELINES))[0])
        assert len(rows) == len(VIT_BASELINES) == 8 and all(r["delta_p"] == "" for r in rows)

    def test_phi_delta(self):
        reps = {"SwinPose-B-S4": EvalReport("SwinPose-B-S4", "HPE", phi_p2d=77.75),
                "SwinPose-B-S3": EvalReport("SwinPose-B-S3", "HPE", phi_p2d=77.7)}
        rows = _rows(sweep(["SwinPose-B-S3", "SwinPose-B-S4"], reports=reps)[0])
        assert rows[0]["delta_phi"] == "-0.1" and rows[1]["delta_phi"] == "0.0"
        assert rows[0]["phi_p2d"] == "77.70"
