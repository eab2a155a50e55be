"""Parameter counts and analytic FLOPs per model component.

FLOPs count two per multiply-add and ignore normalisation, softmax and
activation costs. Models are walked without allocating weights, so the
full-size ViT-H baselines are cheap to cost.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .metrics import EvalReport, relative_delta
from .models import build_model
from .truncation import ModelName, ModelNameError, format_model_name, parse_model_name

CSV_HEADER = ("name", "family", "size", "stage", "params_m", "gflops",
              "phi_p2d", "phi_m2d", "phi_m3d", "delta_p", "delta_f", "delta_phi")


@dataclass
class CostReport:
    """Per-component ``{"params": n, "flops": n}`` with totals, for one sample at ``input_hw``."""

    name: str
    input_hw: tuple[int, int]
    per_component: dict[str, dict[str, int]] = field(default_factory=dict)

    @property
    def params(self) -> int:
        return sum(c.get("params", 0) for c in self.per_component.values())

    @property
    def flops(self) -> int:
        return sum(c.get("flops", 0) for c in self.per_component.values())

    @property
    def params_m(self) -> float:
        return self.params / 1e6

    @property
    def gflops(self) -> float:
        return self.flops / 1e9


def _resolve(model, profile: str, input_hw):
    if isinstance(model, (str, ModelName)):
        return build_model(model, profile, input_hw)
    return model


def count_params(model, profile: str = "full") -> CostReport:
    """Exact parameter count per component for a model or model name."""
    m = _resolve(model, profile, None)
    rep = CostReport(str(m.name), m.input_hw)
    for comp, n in m.params_breakdown().items():
        rep.per_component.setdefault(comp, {})["params"] = n
    return rep


def estimate_flops(model, input_hw: tuple[int, int] | None = None, profile: str = "full", batch: int = 1) -> CostReport:
    """Analytic FLOPs (2 x MACs) per component, per sample at ``input_hw``."""
    m = _resolve(model, profile, input_hw)
    rep = CostReport(str(m.name), m.input_hw)
    for comp, macs in m.macs_breakdown(batch).items():
        rep.per_component.setdefault(comp, {})["flops"] = 2 * macs // batch
    return rep


def cost_report(model, input_hw=None, profile: str = "full") -> CostReport:
    """Params and FLOPs merged into one report."""
    m = _resolve(model, profile, input_hw)
    rep = count_params(m)
    for comp, c in estimate_flops(m).per_component.items():
        rep.per_component.setdefault(comp, {}).update(c)
    for c in rep.per_component.values():
        c.setdefault("params", 0)
        c.setdefault("flops", 0)
    return rep


def _fmt(x: float | None, digits: int) -> str:
    return "" if x is None else f"{x:.{digits}f}"


def sweep(
    names: Iterable[str],
    reports: Mapping[str, EvalReport] | None = None,
    input_hw: tuple[int, int] | None = None,
    profile: str = "full",
) -> tuple[str, list[str]]:
    """CSV (one row per model, in input order) plus a list of error lines.

    Deltas are percent changes against the same family/size/task S4 model,
    which is costed even when it is not among ``names``. ``delta_phi`` uses
    the P2D score for pose models and M3D for mesh models.
    """
    reports = reports or {}
    rows, errors, cache = [], [], {}

    def costs(m: ModelName) -> CostReport:
        key = str(m)
        if key not in cache:
            cache[key] = cost_report(key, input_hw, profile)
        return cache[key]

    for raw in names:
        try:
            m = parse_model_name(raw)
        except ModelNameError as exc:
            errors.append(f"{raw}: {str(exc).splitlines()[0]}")
            continue
        name = format_model_name(m)
        c = costs(m)
        rep = reports.get(name)
        phi = {k: getattr(rep, k) if rep else None for k in ("phi_p2d", "phi_m2d", "phi_m3d")}
        dp = df = dphi = None
        if m.stage is not None:
            base = ModelName(m.task, m.family, m.size, 4)
            bc = costs(base)
            dp = relative_delta(c.params, bc.params)
            df = relative_delta(c.flops, bc.flops)
            brep = reports.get(str(base))
            key = "phi_p2d" if m.task == "HPE" else "phi_m3d"
            if rep is not None and brep is not None and getattr(rep, key) is not None and getattr(brep, key):
                dphi = relative_delta(getattr(rep, key), getattr(brep, key))
        rows.append([
            name, m.family, m.size, "" if m.stage is None else str(m.stage),
            _fmt(c.params_m, 3), _fmt(c.gflops, 3),
            _fmt(phi["phi_p2d"], 2), _fmt(phi["phi_m2d"], 2), _fmt(phi["phi_m3d"], 2),
            _fmt(dp, 1), _fmt(df, 1), _fmt(dphi, 1),
        ])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(rows)
    return buf.getvalue(), errors
