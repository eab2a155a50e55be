"""Cut a pyramid encoder after stage K and resample its output to 1/16.

K=4 appends a stride-2 transposed convolution, K=3 passes stage 3 through,
K=2 appends a stride-2 convolution. The adapter always emits the stage-3
channel width, so one decoder fits all three cuts.

Model names follow ``<Family><Task>-<Size>-S<K>`` (``SwinPose-S-S3``,
``VMHMR2.0-T-S2``) plus the plain-ViT baselines ``ViTPose-<H|L|B|S>`` and
``HMR2.0[-<L|B|S>]``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .encoders import EncoderSpec, FeatureMap, HierarchicalEncoder
from .layers import ConfigError, Conv2d, ConvTranspose2d, Module

ADAPTER_KINDS = {4: "DeconvUp", 3: "Identity", 2: "ConvDown"}
INPUT_REDUCTION = {"DeconvUp": 32, "Identity": 16, "ConvDown": 8}

# kernel, stride, padding
DEFAULT_ADAPTER_GEOMETRY = {"DeconvUp": (2, 2, 0), "ConvDown": (3, 2, 1), "Identity": (1, 1, 0)}


class ModelNameError(ValueError):
    """Malformed model name; ``position`` is the 0-based offset of the first bad character."""

    def __init__(self, name: str, position: int, expected: str):
        self.name, self.position, self.expected = name, position, expected
        pointer = " " * position + "^"
        super().__init__(f"cannot parse model name at position {position}: expected {expected}\n  {name}\n  {pointer}")


class UnsupportedFamilyError(ConfigError):
    pass


@dataclass(frozen=True)
class AdapterSpec:
    kind: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    padding: int = 0

    @property
    def input_reduction(self) -> int:
        return INPUT_REDUCTION[self.kind]


def adapter_spec(spec: EncoderSpec, k: int, geometry: dict | None = None) -> AdapterSpec:
    if k not in ADAPTER_KINDS:
        raise ConfigError(f"truncation stage must be 2, 3 or 4, got {k}")
    kind = ADAPTER_KINDS[k]
    kernel, stride, padding = (geometry or DEFAULT_ADAPTER_GEOMETRY)[kind]
    return AdapterSpec(kind, spec.stage_dims[k - 1], spec.stage_dims[2], kernel, stride, padding)


class Adapter(Module):
    def __init__(self, a: AdapterSpec):
        super().__init__()
        self.spec = a
        if a.kind == "DeconvUp":
            self.layer = ConvTranspose2d(a.in_channels, a.out_channels, a.kernel, a.stride, a.padding)
        elif a.kind == "ConvDown":
            self.layer = Conv2d(a.in_channels, a.out_channels, a.kernel, a.stride, a.padding)
        elif a.kind != "Identity":
            raise ConfigError(f"unknown adapter kind {a.kind!r}")

    def forward(self, f: FeatureMap) -> FeatureMap:
        return adapter_forward(f, self)

    def macs(self, shape):
        if self.spec.kind == "Identity":
            return 0, tuple(shape)
        return self.layer.macs(shape)


def adapter_forward(f: FeatureMap, adapter: Adapter) -> FeatureMap:
    """Resample ``f`` to 1/16 with the stage-3 width; Identity returns ``f.tensor`` untouched."""
    a = adapter.spec
    if f.reduction != a.input_reduction:
        raise ConfigError(f"{a.kind} adapter expects a 1/{a.input_reduction} map, got 1/{f.reduction}")
    if f.channels != a.in_channels:
        raise ConfigError(f"{a.kind} adapter expects {a.in_channels} channels, got {f.channels}")
    if a.kind == "Identity":
        return FeatureMap(f.tensor, f.stage_index, 16)
    return FeatureMap(adapter.layer(f.tensor), f.stage_index, 16)


class TruncatedEncoder(Module):
    """Stages 1..K of a pyramid encoder followed by the resolution adapter."""

    def __init__(self, spec: EncoderSpec, k: int, input_hw: tuple[int, int], geometry: dict | None = None):
        super().__init__()
        self.base, self.k = spec, k
        self.adapter_spec = adapter_spec(spec, k, geometry)
        self.encoder = HierarchicalEncoder(spec, input_hw, num_stages=k)
        self.adapter = Adapter(self.adapter_spec)

    @property
    def out_channels(self) -> int:
        return self.base.stage_dims[2]

    @property
    def input_hw(self) -> tuple[int, int]:
        return self.encoder.input_hw

    def forward(self, image) -> FeatureMap:
        feats = self.encoder(image)
        return self.adapter(feats[-1])

    def macs_breakdown(self, batch: int = 1) -> dict[str, int]:
        out = self.encoder.macs_breakdown(batch)
        h, w = self.input_hw
        red = 4 * 2 ** (self.k - 1)
        shape = (batch, self.base.stage_dims[self.k - 1], h // red, w // red)
        out["adapter"] = self.adapter.macs(shape)[0]
        return out

    def params_breakdown(self) -> dict[str, int]:
        out = self.encoder.params_breakdown()
        out["adapter"] = self.adapter.num_params()
        return out


def truncate(spec: EncoderSpec, k: int, input_hw: tuple[int, int] = (256, 192), geometry: dict | None = None) -> TruncatedEncoder:
    if not spec.hierarchical:
        raise UnsupportedFamilyError(f"{spec.family} is non-hierarchical and cannot be truncated")
    if k not in ADAPTER_KINDS:
        raise ConfigError(f"truncation stage must be 2, 3 or 4, got {k}")
    return TruncatedEncoder(spec, k, input_hw, geometry)


# ---------------------------------------------------------------------------
# model names


@dataclass(frozen=True)
class ModelName:
    task: str  # "HPE" or "HMR"
    family: str
    size: str
    stage: int | None  # None for ViT baselines

    def __str__(self) -> str:
        return format_model_name(self)

    @property
    def hierarchical(self) -> bool:
        return self.family != "ViT"


_TASK_TOKENS = (("Pose", "HPE"), ("HMR2.0", "HMR"))
_HIER_SIZES = ("B", "S", "T")


def parse_model_name(name: str) -> ModelName:
    if not name:
        raise ModelNameError(name, 0, "a model name")
    if name.startswith("ViTPose"):
        pos = len("ViTPose")
        if name[pos : pos + 1] != "-":
            raise ModelNameError(name, pos, "'-'")
        size = name[pos + 1 :]
        if size not in ("H", "L", "B", "S"):
            raise ModelNameError(name, pos + 1, "one of H, L, B, S")
        return ModelName("HPE", "ViT", size, None)
    if name.startswith("HMR2.0"):
        pos = len("HMR2.0")
        if pos == len(name):
            return ModelName("HMR", "ViT", "H", None)
        if name[pos] != "-":
            raise ModelNameError(name, pos, "'-' or end of name")
        size = name[pos + 1 :]
        if size not in ("L", "B", "S"):
            raise ModelNameError(name, pos + 1, "one of L, B, S")
        return ModelName("HMR", "ViT", size, None)

    for fam in ("Swin", "GMF", "VM"):
        if name.startswith(fam):
            break
    else:
        raise ModelNameError(name, 0, "an encoder family (Swin, GMF, VM, ViTPose, HMR2.0)")
    pos = len(fam)
    for token, task in _TASK_TOKENS:
        if name.startswith(token, pos):
            pos += len(token)
            break
    else:
        raise ModelNameError(name, pos, "a task identifier (Pose or HMR2.0)")
    m = re.compile(r"-([BST])").match(name, pos)
    if not m:
        raise ModelNameError(name, pos if name[pos : pos + 1] != "-" else pos + 1, "'-' followed by B, S or T")
    size = m.group(1)
    pos = m.end()
    m = re.compile(r"-S([234])$").match(name, pos)
    if not m:
        if name[pos : pos + 2] == "-S":
            if name[pos + 2 : pos + 3] in ("2", "3", "4"):
                raise ModelNameError(name, pos + 3, "end of name")
            raise ModelNameError(name, pos + 2, "stage 2, 3 or 4")
        raise ModelNameError(name, pos, "'-S' followed by a stage 2, 3 or 4")
    return ModelName(task, fam, size, int(m.group(1)))


def format_model_name(m: ModelName) -> str:
    if m.family == "ViT":
        if m.task == "HPE":
            return f"ViTPose-{m.size}"
        return "HMR2.0" if m.size == "H" else f"HMR2.0-{m.size}"
    token = "Pose" if m.task == "HPE" else "HMR2.0"
    return f"{m.family}{token}-{m.size}-S{m.stage}"


def all_hierarchical_names(task: str = "HPE") -> list[str]:
    token = "Pose" if task == "HPE" else "HMR2.0"
    return [f"{fam}{token}-{size}-S{k}" for fam in ("Swin", "GMF", "VM") for size in _HIER_SIZES for k in (4, 3, 2)]


VIT_BASELINES = ("ViTPose-H", "ViTPose-L", "ViTPose-B", "ViTPose-S", "HMR2.0", "HMR2.0-L", "HMR2.0-B", "HMR2.0-S")
