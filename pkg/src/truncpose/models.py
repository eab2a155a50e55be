"""Full HPE / HMR models assembled from a model name."""

from __future__ import annotations

import numpy as np

from .encoders import ViTEncoder, load_encoder_spec
from .heads import HeatmapHead, HeatmapHeadSpec, HmrDecoder, flatten_tokens, load_decoder_spec
from .layers import ConfigError, Module
from .tensor import Tensor
from .truncation import ModelName, parse_model_name, truncate

DEFAULT_INPUT_HW = (256, 192)
TOY_INPUT_HW = (64, 64)
HEAD_CHANNELS = {"full": 256, "toy": 32}


class _Composite(Module):
    def __init__(self, name: ModelName, encoder: Module, profile: str):
        super().__init__()
        self.name, self.profile = name, profile
        self.encoder = encoder

    @property
    def input_hw(self) -> tuple[int, int]:
        return self.encoder.input_hw

    @property
    def feature_hw(self) -> tuple[int, int]:
        h, w = self.input_hw
        return h // 16, w // 16

    @property
    def feature_channels(self) -> int:
        if self.name.family == "ViT":
            return self.encoder.spec.stage_dims[0]
        return self.encoder.out_channels

    def features(self, image: Tensor):
        return self.encoder(image)

    def _encoder_macs(self, batch: int) -> dict[str, int]:
        return self.encoder.macs_breakdown(batch)

    def _encoder_params(self) -> dict[str, int]:
        return self.encoder.params_breakdown()

    def describe(self) -> dict:
        enc = self.encoder.spec if self.name.family == "ViT" else self.encoder.base
        out = {
            "name": str(self.name),
            "task": self.name.task,
            "family": self.name.family,
            "size": self.name.size,
            "stage": self.name.stage,
            "profile": self.profile,
            "input_hw": list(self.input_hw),
            "encoder": enc.as_dict(),
        }
        if self.name.family != "ViT":
            a = self.encoder.adapter_spec
            out["adapter"] = {"kind": a.kind, "in_channels": a.in_channels, "out_channels": a.out_channels,
                              "kernel": a.kernel, "stride": a.stride, "padding": a.padding}
        return out


class PoseModel(_Composite):
    """Encoder (+ adapter) followed by the heatmap head."""

    def __init__(self, name: ModelName, encoder: Module, head_spec: HeatmapHeadSpec, profile: str):
        super().__init__(name, encoder, profile)
        self.head = HeatmapHead(self.feature_channels, head_spec)

    def forward(self, image: Tensor) -> Tensor:
        return self.head(self.features(image))

    def macs_breakdown(self, batch: int = 1) -> dict[str, int]:
        out = self._encoder_macs(batch)
        h, w = self.feature_hw
        out["head"] = self.head.macs((batch, self.feature_channels, h, w))[0]
        return out

    def params_breakdown(self) -> dict[str, int]:
        out = self._encoder_params()
        out["head"] = self.head.num_params()
        return out


class HmrModel(_Composite):
    """Encoder (+ adapter) followed by the SMPL-parameter decoder."""

    def __init__(self, name: ModelName, encoder: Module, decoder_variant: str, profile: str):
        super().__init__(name, encoder, profile)
        h, w = self.feature_hw
        self.decoder = HmrDecoder(self.feature_channels, h * w, load_decoder_spec(decoder_variant))

    def forward(self, image: Tensor):
        return self.decoder(flatten_tokens(self.features(image)))

    def macs_breakdown(self, batch: int = 1) -> dict[str, int]:
        out = self._encoder_macs(batch)
        h, w = self.feature_hw
        out["decoder"] = self.decoder.macs((batch, h * w, self.feature_channels))[0]
        return out

    def params_breakdown(self) -> dict[str, int]:
        out = self._encoder_params()
        out["decoder"] = self.decoder.num_params()
        return out


def build_model(name: str | ModelName, profile: str = "full", input_hw: tuple[int, int] | None = None,
                adapter_geometry: dict | None = None) -> PoseModel | HmrModel:
    """Construct (without allocating weights) the model a name describes.

    Call ``init_weights(rng)`` on the result before running it.
    """
    m = parse_model_name(name) if isinstance(name, str) else name
    if input_hw is None:
        input_hw = TOY_INPUT_HW if profile == "toy" else DEFAULT_INPUT_HW
    spec = load_encoder_spec(m.family, m.size, profile)
    if m.family == "ViT":
        encoder = ViTEncoder(spec, input_hw)
    else:
        encoder = truncate(spec, m.stage, input_hw, adapter_geometry)
    if m.task == "HPE":
        return PoseModel(m, encoder, HeatmapHeadSpec(deconv_channels=HEAD_CHANNELS[profile]), profile)
    if m.task == "HMR":
        variant = "toy" if profile == "toy" else m.size
        return HmrModel(m, encoder, variant, profile)
    raise ConfigError(f"unknown task {m.task!r}")


def init_model(model: Module, seed: int) -> Module:
    return model.init_weights(np.random.default_rng(seed))
