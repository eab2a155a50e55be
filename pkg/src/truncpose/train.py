"""Losses, the Adam optimizer and the training loop."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .body_model import default_body_model, forward_kinematics
from .checkpoint import save_checkpoint
from .config import ExperimentConfig, serialize_config
from .data import Batch, DatasetRecord, collate, generate_records
from .heads import gaussian_heatmaps, reproject
from .layers import Module
from .models import HmrModel, PoseModel, build_model
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, step: int, reason: str):
        self.step = step
        super().__init__(f"training aborted at step {step}: {reason}")


class Adam:
    """Adam with a constant step size; state keyed by parameter path."""

    def __init__(self, named_params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros(p.shape) for n, p in self.params}
        self.v = {n: np.zeros(p.shape) for n, p in self.params}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for name, p in self.params:
            g = p.value.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.value.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.value.grad = None

    def state_table(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([float(self.t)])}
        for n, _ in self.params:
            out[f"m/{n}"] = self.m[n]
            out[f"v/{n}"] = self.v[n]
        return out

    def load_state_table(self, table: dict[str, np.ndarray]) -> None:
        self.t = int(table["t"][0])
        for n, _ in self.params:
            self.m[n] = table[f"m/{n}"].copy()
            self.v[n] = table[f"v/{n}"].copy()


# ---------------------------------------------------------------------------
# losses


def heatmap_targets(batch: Batch, model: PoseModel) -> np.ndarray:
    h, w = model.input_hw
    return gaussian_heatmaps(batch.keypoints2d, (h // 4, w // 4), stride=4, sigma=2.0)


def hpe_loss(model: PoseModel, batch: Batch, weights) -> tuple[Tensor, dict]:
    pred = model(Tensor(batch.images))
    target = heatmap_targets(batch, model)
    mse = T.mean(T.square(T.add_const(pred, -target)))
    return T.scale(mse, weights.heatmap), {"heatmap_mse": mse.item()}


def hmr_loss(model: HmrModel, batch: Batch, weights) -> tuple[Tensor, dict]:
    """MSE on rotations and shape, L1 on normalised reprojected keypoints and on 3D joints."""
    out = model(Tensor(batch.images))
    h, w = model.input_hw
    rot = T.mean(T.square(T.add_const(out.rotmats, -batch.rotmats)))
    shp = T.mean(T.square(T.add_const(out.beta, -batch.beta)))
    joints = forward_kinematics(out.rotmats, out.beta)
    j3d = T.mean(T.abs(T.add_const(joints, -batch.joints3d)))
    kmap = list(default_body_model().keypoint_map)
    kp = T.take(reproject(joints, out.cam, (h, w)), kmap, axis=1)
    vis = batch.keypoints2d[..., 2:3] > 0
    diff = T.mul_const(T.add_const(kp, -batch.keypoints2d[..., :2]), np.broadcast_to(vis, kp.shape) / max(h, w))
    k2d = T.mean(T.abs(diff))
    terms = [(weights.rotation, rot), (weights.shape, shp), (weights.joints3d, j3d), (weights.keypoints2d, k2d)]
    total = None
    for wgt, term in terms:
        if wgt:
            total = T.scale(term, wgt) if total is None else T.add(total, T.scale(term, wgt))
    stats = {"rotation": rot.item(), "shape": shp.item(), "joints3d": j3d.item(), "keypoints2d": k2d.item()}
    return total, stats


def compute_loss(model, batch: Batch, weights):
    if isinstance(model, PoseModel):
        return hpe_loss(model, batch, weights)
    return hmr_loss(model, batch, weights)


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    model: Module
    losses: list[float] = field(default_factory=list)
    best_step: int = 0
    best_loss: float = float("inf")
    final_path: Path | None = None
    best_path: Path | None = None


def batch_schedule(n: int, batch_size: int, steps: int, seed: int) -> list[np.ndarray]:
    """Index batches for ``steps`` steps: reshuffled epochs from a dedicated stream."""
    rng = np.random.default_rng([seed, 0x5EED])
    out, perm = [], np.array([], dtype=int)
    bs = min(batch_size, n)
    while len(out) < steps:
        if len(perm) < bs:
            perm = np.concatenate([perm, rng.permutation(n)])
        out.append(np.sort(perm[:bs]))
        perm = perm[bs:]
    return out


def train(cfg: ExperimentConfig, records: list[DatasetRecord] | None = None, save: bool = True,
          model: Module | None = None) -> TrainResult:
    """Run ``cfg.optim.steps`` Adam steps; write best/final checkpoints and the loss trace."""
    if model is None:
        model = build_model(cfg.model, cfg.profile, cfg.data.hw)
        model.init_weights(np.random.default_rng([cfg.seed, 1]))
    if records is None:
        records = generate_records(cfg.data.n_samples, cfg.seed, cfg.data.hw, cfg.data.noise, cfg.data.occlusion)
    o = cfg.optim
    opt = Adam(model.named_parameters(), o.lr, o.beta1, o.beta2, o.eps)
    res = TrainResult(model)
    best_state = None
    for step, idx in enumerate(batch_schedule(len(records), o.batch_size, o.steps, cfg.seed)):
        batch = collate([records[i] for i in idx])
        try:
            loss, stats = compute_loss(model, batch, cfg.loss)
        except T.NonFiniteError as exc:
            raise TrainingError(step, str(exc)) from None
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(step, f"loss is {value}")
        res.losses.append(value)
        if value < res.best_loss:
            res.best_loss, res.best_step = value, step
            best_state = copy.deepcopy(model.state_dict())
        T.backward(loss)
        opt.step()
        opt.zero_grad()
        if o.log_every and step % o.log_every == 0:
            log.info("step %d loss %.6g %s", step, value, " ".join(f"{k}={v:.4g}" for k, v in stats.items()))
    if save:
        out = cfg.output_path
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(serialize_config(cfg))
        (out / "losses.csv").write_text("step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(res.losses)))
        res.final_path = out / "final.tpck"
        save_checkpoint(res.final_path, model, o.steps, opt)
        if best_state is not None:
            final_state = model.state_dict()
            model.load_state_dict(best_state)
            res.best_path = out / "best.tpck"
            save_checkpoint(res.best_path, model, res.best_step)
            model.load_state_dict(final_state)
    return res
