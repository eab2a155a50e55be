"""Experiment configuration: an INI file with fixed sections and keys.

Example::

    [experiment]
    model = SwinPose-T-S3
    profile = toy
    seed = 0
    output_dir = runs/swin-t-s3

    [data]
    n_samples = 64
    image_h = 64
    image_w = 64
    noise = 0.1
    occlusion = 0.0

    [optim]
    lr = 0.001
    steps = 2000
    batch_size = 16
    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-08
    log_every = 50

    [loss]
    heatmap = 1.0
    rotation = 1.0
    shape = 0.001
    keypoints2d = 0.01
    joints3d = 1.0

Relative ``output_dir`` values resolve against the workspace root, which is
the current directory unless ``TRUNCPOSE_WORKSPACE`` is set.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field
from pathlib import Path

from .layers import ConfigError
from .truncation import parse_model_name

WORKSPACE_ENV = "TRUNCPOSE_WORKSPACE"


def workspace_root() -> Path:
    return Path(os.environ.get(WORKSPACE_ENV, os.getcwd()))


@dataclass
class DataConfig:
    n_samples: int = 64
    image_h: int = 64
    image_w: int = 64
    noise: float = 0.1
    occlusion: float = 0.0

    @property
    def hw(self) -> tuple[int, int]:
        return self.image_h, self.image_w


@dataclass
class OptimConfig:
    lr: float = 1e-3
    steps: int = 2000
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    log_every: int = 50


@dataclass
class LossConfig:
    heatmap: float = 1.0
    rotation: float = 1.0
    shape: float = 0.001
    keypoints2d: float = 0.01
    joints3d: float = 1.0


@dataclass
class ExperimentConfig:
    model: str
    profile: str = "toy"
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        parse_model_name(self.model)
        if self.profile not in ("full", "toy"):
            raise ConfigError(f"profile must be 'full' or 'toy', got {self.profile!r}")
        if self.data.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if self.optim.batch_size < 1 or self.optim.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")

    @property
    def output_path(self) -> Path:
        p = Path(self.output_dir)
        return p if p.is_absolute() else workspace_root() / p


_SECTIONS = (("data", DataConfig), ("optim", OptimConfig), ("loss", LossConfig))


def _coerce(cls, section: configparser.SectionProxy, name: str):
    known = {f.name: f.type for f in dataclasses.fields(cls)}
    unknown = set(section) - set(known)
    if unknown:
        raise ConfigError(f"[{name}] has unknown keys: {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in section:
            conv = int if f.type in (int, "int") else float
            try:
                kwargs[f.name] = conv(section[f.name])
            except ValueError:
                raise ConfigError(f"[{name}] {f.name}: cannot read {section[f.name]!r} as {conv.__name__}") from None
    return cls(**kwargs)


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    if "experiment" not in cp or "model" not in cp["experiment"]:
        raise ConfigError("config needs [experiment] with a model key")
    exp = cp["experiment"]
    parts = {name: _coerce(cls, cp[name], name) if name in cp else cls() for name, cls in _SECTIONS}
    try:
        seed = int(exp.get("seed", "0"))
    except ValueError:
        raise ConfigError(f"seed must be an integer, got {exp.get('seed')!r}") from None
    return ExperimentConfig(
        model=exp["model"], profile=exp.get("profile", "toy"), seed=seed,
        output_dir=exp.get("output_dir", "runs/default"), **parts,
    )


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def serialize_config(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser()
    cp["experiment"] = {"model": cfg.model, "profile": cfg.profile, "seed": str(cfg.seed), "output_dir": cfg.output_dir}
    for name, _ in _SECTIONS:
        cp[name] = {k: _fmt(v) for k, v in dataclasses.asdict(getattr(cfg, name)).items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
