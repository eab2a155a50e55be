"""Keypoint and joint metrics, aggregate scores and relative deltas.

Percent-valued metrics (PCK, AP, AR) are on a 0-100 scale. 3D errors take
metres and report millimetres.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from typing import Sequence

import numpy as np

# standard COCO per-keypoint constants (nose, eyes, ears, shoulders, elbows,
# wrists, hips, knees, ankles)
COCO_SIGMAS = np.array([
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072,
    0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089,
])
OKS_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


class MetricError(ValueError):
    """Contract violation in a metric call (bad shapes, zero baseline, empty input)."""


class AlignmentError(MetricError):
    """Procrustes alignment is undefined (joint set of rank < 2)."""


# ---------------------------------------------------------------------------
# 2D


def bbox_size(keypoints: np.ndarray) -> float | None:
    """Larger side of the box around the visible keypoints of a ``(J, 3)`` set."""
    kp = np.asarray(keypoints, dtype=np.float64)
    vis = kp[:, 2] > 0
    if not vis.any():
        return None
    span = kp[vis, :2].max(axis=0) - kp[vis, :2].min(axis=0)
    return float(span.max())


def pck(pred: np.ndarray, gt: np.ndarray, norm: float, tau: float) -> float | None:
    """Percent of visible keypoints within ``tau * norm`` (inclusive).

    Args:
        pred: ``(J, 2)`` (extra columns ignored).
        gt: ``(J, 3)`` with a visibility column.

    Returns:
        Percentage, or ``None`` when ``gt`` has no visible keypoint.
    """
    if tau <= 0:
        raise MetricError(f"tau must be positive, got {tau}")
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    vis = gt[:, 2] > 0
    if not vis.any():
        return None
    d = np.linalg.norm(pred[vis, :2] - gt[vis, :2], axis=-1)
    return 100.0 * np.count_nonzero(d <= tau * norm) / vis.sum()


def pck_dataset(preds, gts, tau: float, norms=None) -> tuple[float | None, int]:
    """Mean PCK over samples, plus the count of samples where it is undefined.

    Per-sample norms default to the ground-truth :func:`bbox_size`.
    """
    vals, undefined = [], 0
    for i, (p, g) in enumerate(zip(preds, gts)):
        norm = bbox_size(g) if norms is None else norms[i]
        v = None if norm is None else pck(p, g, norm, tau)
        if v is None:
            undefined += 1
        else:
            vals.append(v)
    return (float(np.mean(vals)) if vals else None), undefined


def oks(pred: np.ndarray, gt: np.ndarray, area: float, sigmas: np.ndarray = COCO_SIGMAS) -> float | None:
    """Object keypoint similarity of one prediction against one ground truth.

    ``sigmas`` are the per-keypoint constants; the falloff in the exponent is
    ``k_i = 2 * sigma_i``, the pycocotools convention.
    """
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if len(sigmas) != gt.shape[0]:
        raise MetricError(f"{len(sigmas)} sigmas for {gt.shape[0]} keypoints")
    vis = gt[:, 2] > 0
    if not vis.any():
        return None
    d2 = np.sum((pred[:, :2] - gt[:, :2]) ** 2, axis=-1)
    k2 = (2 * sigmas) ** 2
    e = d2 / (2 * max(area, np.spacing(1)) * k2)
    return float(np.exp(-e[vis]).sum() / vis.sum())


def keypoint_area(gt: np.ndarray) -> float:
    """Area of the box around the visible keypoints (stand-in for the segment area)."""
    gt = np.asarray(gt)
    vis = gt[:, 2] > 0
    if not vis.any():
        return 0.0
    span = gt[vis, :2].max(axis=0) - gt[vis, :2].min(axis=0)
    return float(span[0] * span[1])


def _interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """COCO 101-point interpolated AP from score-sorted true-positive flags."""
    if n_gt == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.spacing(1))
    # make precision monotone non-increasing from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def oks_ap_ar(
    preds: Sequence[np.ndarray],
    scores: Sequence[float],
    gts: Sequence[np.ndarray],
    sigmas: np.ndarray = COCO_SIGMAS,
    areas: Sequence[float] | None = None,
) -> tuple[float, float]:
    """Single-person AP and AR (percent) averaged over OKS thresholds 0.50:0.05:0.95.

    One prediction and one ground truth per image; images whose ground truth
    has no visible keypoint are ignored. A prediction is a true positive at
    threshold ``t`` when its OKS is ``>= t``.
    """
    if len(preds) != len(gts) or len(scores) != len(gts):
        raise MetricError("preds, scores and gts must have equal length")
    sims, sc = [], []
    for i, (p, g) in enumerate(zip(preds, gts)):
        area = keypoint_area(g) if areas is None else areas[i]
        s = oks(p, g, area, sigmas)
        if s is None:
            continue
        sims.append(s)
        sc.append(scores[i])
    if not sims:
        raise MetricError("no ground truth with visible keypoints")
    sims = np.array(sims)
    order = np.argsort(-np.asarray(sc, dtype=np.float64), kind="mergesort")
    sims = sims[order]
    aps, ars = [], []
    for t in OKS_THRESHOLDS:
        tp = sims >= t - 1e-12
        aps.append(_interpolated_ap(tp, len(sims)))
        ars.append(tp.sum() / len(sims))
    return 100.0 * float(np.mean(aps)), 100.0 * float(np.mean(ars))


# ---------------------------------------------------------------------------
# 3D


def mpjpe(pred3d: np.ndarray, gt3d: np.ndarray, root: int | None = 0) -> float:
    """Mean joint distance in millimetres after subtracting each set's root joint."""
    pred, gt = np.asarray(pred3d, dtype=np.float64), np.asarray(gt3d, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricError(f"joint sets differ in shape: {pred.shape} vs {gt.shape}")
    if root is not None:
        pred = pred - pred[..., root : root + 1, :]
        gt = gt - gt[..., root : root + 1, :]
    return 1000.0 * float(np.linalg.norm(pred - gt, axis=-1).mean())


def similarity_transform(pred3d: np.ndarray, gt3d: np.ndarray, allow_reflection: bool = False):
    """Least-squares ``s, R, t`` with ``s R pred + t ~ gt`` (``det R = +1`` unless reflections are allowed)."""
    X, Y = np.asarray(pred3d, dtype=np.float64), np.asarray(gt3d, dtype=np.float64)
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    var = float(np.sum(Xc**2))
    U, S, Vt = np.linalg.svd(Yc.T @ Xc)
    tol = max(S[0], 1.0) * 1e-10 if S.size else 1.0
    if var < 1e-20 or np.count_nonzero(S > tol) < 2:
        raise AlignmentError("joint set is degenerate (rank < 2); alignment undefined")
    D = np.ones(3)
    if not allow_reflection and np.linalg.det(U @ Vt) < 0:
        D[-1] = -1.0
    R = U @ np.diag(D) @ Vt
    s = float(np.sum(S * D)) / var
    t = my - s * R @ mx
    return s, R, t


def procrustes_align(pred3d: np.ndarray, gt3d: np.ndarray, allow_reflection: bool = False) -> tuple[np.ndarray, float]:
    """Similarity-align ``pred3d`` onto ``gt3d``; return the aligned joints and PA-MPJPE (mm)."""
    s, R, t = similarity_transform(pred3d, gt3d, allow_reflection)
    aligned = s * np.asarray(pred3d) @ R.T + t
    return aligned, mpjpe(aligned, gt3d, root=None)


def pa_mpjpe(pred3d: np.ndarray, gt3d: np.ndarray) -> float:
    return procrustes_align(pred3d, gt3d)[1]


# ---------------------------------------------------------------------------
# aggregates

PHI_KINDS = ("P2D", "M2D", "M3D")


def aggregate_phi(kind: str, per_dataset: Sequence[tuple[float, float]]) -> float:
    """Mean over datasets of the mean of each metric pair.

    Pairs are ``(AP, AR)`` for P2D, ``(PCK@0.05, PCK@0.1)`` for M2D and
    ``(MPJPE, PA-MPJPE)`` for M3D (lower is better for M3D only).
    """
    if kind not in PHI_KINDS:
        raise MetricError(f"unknown aggregate kind {kind!r}")
    if len(per_dataset) == 0:
        raise MetricError(f"{kind}: need at least one dataset")
    pairs = np.asarray(per_dataset, dtype=np.float64)
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise MetricError(f"{kind}: expected metric pairs, got shape {pairs.shape}")
    return float(pairs.mean(axis=1).mean())


def relative_delta(value: float, baseline: float) -> float:
    """Percent change of ``value`` from ``baseline`` (unrounded)."""
    if baseline == 0:
        raise MetricError("relative change against a zero baseline")
    return 100.0 * (value - baseline) / baseline


def round1(x: float | None) -> float | None:
    """One decimal, half to even on the decimal value (float noise below 1e-9 is dropped first)."""
    if x is None:
        return None
    return float(Decimal(f"{x:.9f}").quantize(Decimal("0.1"), rounding=ROUND_HALF_EVEN))


@dataclass
class EvalReport:
    """Metrics of one model on one or more datasets, plus cost and deltas."""

    model: str
    task: str
    per_dataset: dict[str, dict[str, float | None]] = field(default_factory=dict)
    undefined: dict[str, int] = field(default_factory=dict)
    phi_p2d: float | None = None
    phi_m2d: float | None = None
    phi_m3d: float | None = None
    params_m: float | None = None
    gflops: float | None = None
    deltas: dict[str, float] = field(default_factory=dict)
    baseline: str | None = None

    def compute_phi(self) -> "EvalReport":
        ap = [(d["AP"], d["AR"]) for d in self.per_dataset.values() if d.get("AP") is not None]
        m2 = [(d["PCK@0.05"], d["PCK@0.1"]) for d in self.per_dataset.values() if d.get("PCK@0.05") is not None]
        m3 = [(d["MPJPE"], d["PA-MPJPE"]) for d in self.per_dataset.values() if d.get("MPJPE") is not None]
        self.phi_p2d = aggregate_phi("P2D", ap) if ap else None
        self.phi_m2d = aggregate_phi("M2D", m2) if m2 else None
        self.phi_m3d = aggregate_phi("M3D", m3) if m3 else None
        return self

    def to_dict(self) -> dict:
        return {
            "model": self.model, "task": self.task, "per_dataset": self.per_dataset,
            "undefined": self.undefined, "phi_p2d": self.phi_p2d, "phi_m2d": self.phi_m2d,
            "phi_m3d": self.phi_m3d, "params_m": self.params_m, "gflops": self.gflops,
            "deltas": self.deltas, "baseline": self.baseline,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)
