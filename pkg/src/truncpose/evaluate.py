"""Run a model over a dataset and compute the task metrics, Phi, P and F."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .body_model import default_body_model, forward_kinematics, keypoints_from_joints
from .cost import cost_report
from .data import DatasetRecord, collate
from .heads import heatmaps_to_keypoints, reproject
from .metrics import EvalReport, MetricError, bbox_size, mpjpe, oks_ap_ar, pa_mpjpe, pck_dataset
from .models import HmrModel, PoseModel
from .tensor import Tensor


class EvaluationError(ValueError):
    pass


@dataclass
class Predictions:
    """Per-sample outputs in dataset order.

    ``keypoints2d`` is (N, 17, 2) image pixels; ``scores`` (N,) for AP
    ranking; ``joints3d`` (N, 24, 3) metres for mesh models.
    """

    keypoints2d: np.ndarray
    scores: np.ndarray
    joints3d: np.ndarray | None = None


def predict(model, records: list[DatasetRecord], batch_size: int = 16) -> Predictions:
    kps, scores, joints = [], [], []
    kmap = list(default_body_model().keypoint_map)
    with T.no_grad():
        for k in range(0, len(records), batch_size):
            b = collate(records[k : k + batch_size])
            if isinstance(model, PoseModel):
                dec = heatmaps_to_keypoints(model(Tensor(b.images)))
                kps.append(dec.xy)
                scores.append(dec.confidence.mean(axis=1))
            else:
                out = model(Tensor(b.images))
                j = forward_kinematics(out.rotmats.data, out.beta.data)
                kps.append(reproject(j, out.cam.data, model.input_hw)[:, kmap])
                scores.append(np.ones(len(j)))
                joints.append(j)
    return Predictions(np.concatenate(kps), np.concatenate(scores), np.concatenate(joints) if joints else None)


def oracle_predictions(records: list[DatasetRecord]) -> Predictions:
    """Ground truth dressed as predictions (bypasses any model)."""
    return Predictions(
        np.stack([r.keypoints2d[:, :2] for r in records]),
        np.ones(len(records)),
        np.stack([r.joints3d for r in records]),
    )


def score_predictions(task: str, preds: Predictions, records: list[DatasetRecord]) -> tuple[dict, dict]:
    """Task metrics for one dataset plus counts of samples where a metric was undefined."""
    gts = [r.keypoints2d for r in records]
    if task == "HPE":
        try:
            ap, ar = oks_ap_ar(list(preds.keypoints2d), list(preds.scores), gts)
        except MetricError:
            return {"AP": None, "AR": None}, {"AP": len(records)}
        empty = sum(1 for g in gts if bbox_size(g) is None)
        return {"AP": ap, "AR": ar}, ({"AP": empty} if empty else {})
    if task == "HMR":
        if preds.joints3d is None:
            raise EvaluationError("mesh metrics need 3D joint predictions")
        p05, u05 = pck_dataset(preds.keypoints2d, gts, 0.05)
        p10, _ = pck_dataset(preds.keypoints2d, gts, 0.1)
        gt3 = [r.joints3d for r in records]
        mp = float(np.mean([mpjpe(p, g) for p, g in zip(preds.joints3d, gt3)]))
        pa = float(np.mean([pa_mpjpe(p, g) for p, g in zip(preds.joints3d, gt3)]))
        metrics = {"PCK@0.05": p05, "PCK@0.1": p10, "MPJPE": mp, "PA-MPJPE": pa}
        return metrics, ({"PCK": u05} if u05 else {})
    raise EvaluationError(f"unknown task {task!r}")


def evaluate(model, records: list[DatasetRecord], task: str | None = None, dataset_id: str = "synthetic",
             predictions: Predictions | None = None) -> EvalReport:
    """Metrics, Phi, parameter count (M) and GFLOPs for ``model`` on ``records``.

    Passing ``predictions`` skips the forward pass (e.g. for oracle checks).
    """
    model_task = "HPE" if isinstance(model, PoseModel) else "HMR" if isinstance(model, HmrModel) else None
    task = task or model_task
    if task != model_task:
        raise EvaluationError(f"{task} metrics requested for a {model_task} model ({model.name})")
    preds = predictions if predictions is not None else predict(model, records)
    metrics, undefined = score_predictions(task, preds, records)
    cost = cost_report(model)
    rep = EvalReport(str(model.name), task, {dataset_id: metrics}, {dataset_id: undefined} if undefined else {},
                     params_m=cost.params_m, gflops=cost.gflops)
    return rep.compute_phi()


def write_report(rep: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")


def read_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


REPORT_CSV_HEADER = ("model", "task", "dataset", "metric", "value")


def report_rows(rep: EvalReport) -> str:
    """Flatten an EvalReport into ``model,task,dataset,metric,value`` CSV rows."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_CSV_HEADER)
    for ds, metrics in sorted(rep.per_dataset.items()):
        for k, v in metrics.items():
            w.writerow([rep.model, rep.task, ds, k, "" if v is None else repr(v)])
    for k in ("phi_p2d", "phi_m2d", "phi_m3d", "params_m", "gflops"):
        v = getattr(rep, k)
        if v is not None:
            w.writerow([rep.model, rep.task, "", k, repr(v)])
    return buf.getvalue()


def tradeoff_table(reports: list[EvalReport]) -> str:
    """Plain-text accuracy/compute table, one row per model sorted by GFLOPs."""
    lines = [f"{'model':<22} {'GFLOPs':>9} {'Phi':>8} {'P (M)':>9}"]
    for r in sorted(reports, key=lambda r: (r.gflops or 0.0, r.model)):
        phi = r.phi_p2d if r.task == "HPE" else r.phi_m3d
        fmt = lambda v, d: "-" if v is None else f"{v:.{d}f}"  # noqa: E731
        lines.append(f"{r.model:<22} {fmt(r.gflops, 3):>9} {fmt(phi, 1):>8} {fmt(r.params_m, 3):>9}")
    return "\n".join(lines) + "\n"
