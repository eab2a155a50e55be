"""Truncated hierarchical encoders for human pose estimation and mesh recovery.

A numpy-only stack: a small reverse-mode autograd engine, three four-stage
pyramid encoder families plus a ViT baseline, stage-truncation adapters,
heatmap and SMPL-style decoders, a toy kinematic body model, the evaluation
metrics, analytic cost accounting and a synthetic-data training harness.
"""

from .body_model import SmplParams
from .cost import CostReport, cost_report, count_params, estimate_flops, sweep
from .encoders import EncoderSpec, FeatureMap, load_encoder_spec
from .metrics import EvalReport, aggregate_phi, mpjpe, pa_mpjpe, pck, relative_delta
from .models import build_model, init_model
from .tensor import Tensor
from .truncation import format_model_name, parse_model_name, truncate

__version__ = "0.1.0"

__all__ = [
    "CostReport",
    "EncoderSpec",
    "EvalReport",
    "FeatureMap",
    "SmplParams",
    "Tensor",
    "aggregate_phi",
    "build_model",
    "cost_report",
    "count_params",
    "estimate_flops",
    "format_model_name",
    "init_model",
    "load_encoder_spec",
    "mpjpe",
    "pa_mpjpe",
    "parse_model_name",
    "pck",
    "relative_delta",
    "sweep",
    "truncate",
]
