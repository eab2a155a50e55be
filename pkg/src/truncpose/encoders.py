"""Four-stage pyramid encoders (Swin-like, GMF-like, VM-like) and a plain ViT.

Blocks operate on channels-last maps ``(B, H, W, C)``; stage outputs are
exposed as :class:`FeatureMap` objects holding ``(B, C, h, w)`` tensors.
Each family has one representative token mixer:

* Swin-like: windowed self-attention with relative position bias, cyclic
  shift on odd blocks.
* GMF-like: depthwise multi-kernel token aggregation in front of an
  efficient (linear-complexity) global attention.
* VM-like: four directional gated linear recurrences over rows and columns.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import tensor as T
from .layers import (
    ConfigError,
    Conv2d,
    LayerNorm,
    Linear,
    Mlp,
    Module,
    MultiHeadAttention,
    Parameter,
    attention_core,
    merge_heads,
    split_heads,
)
from .tensor import ShapeError, Tensor

HIERARCHICAL = ("Swin", "GMF", "VM")
FAMILIES = HIERARCHICAL + ("ViT",)
SIZES = {"Swin": ("B", "S", "T"), "GMF": ("B", "S", "T"), "VM": ("B", "S", "T"), "ViT": ("H", "L", "B", "S")}
PROFILES = ("full", "toy")


@dataclass(frozen=True)
class EncoderSpec:
    family: str
    size: str
    stage_dims: tuple[int, ...]
    stage_depths: tuple[int, ...]
    patch: int
    window: int = 7
    mixer_params: dict = field(default_factory=dict, compare=False, hash=False)
    profile: str = "full"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown encoder family {self.family!r}")
        if self.size not in SIZES[self.family]:
            raise ConfigError(f"size {self.size!r} not defined for family {self.family}")
        if any(d < 1 for d in self.stage_depths):
            raise ConfigError(f"stage depths must be >= 1, got {self.stage_depths}")
        if self.hierarchical:
            if len(self.stage_dims) != 4 or len(self.stage_depths) != 4:
                raise ConfigError("hierarchical encoders need exactly four stage dims and depths")
            for a, b in zip(self.stage_dims, self.stage_dims[1:]):
                if b != 2 * a:
                    raise ConfigError(f"stage dims must double per stage, got {self.stage_dims}")
            if self.patch != 4:
                raise ConfigError("hierarchical encoders use patch size 4")
        else:
            if len(self.stage_dims) != 1 or len(self.stage_depths) != 1:
                raise ConfigError("ViT has a single stage of constant width")
            if self.patch != 16:
                raise ConfigError("ViT uses patch size 16")

    @property
    def hierarchical(self) -> bool:
        return self.family in HIERARCHICAL

    @property
    def input_multiple(self) -> int:
        return 32 if self.hierarchical else 16

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mixer_params"] = dict(sorted(self.mixer_params.items()))
        return d


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def parse_encoder_config(text: str, profile: str = "full") -> EncoderSpec:
    """Parse one encoder config file (INI with ``[full]`` / ``[toy]`` sections)."""
    cp = configparser.ConfigParser()
    cp.read_string(text)
    if profile not in cp:
        raise ConfigError(f"encoder config has no [{profile}] section")
    sec = dict(cp[profile])
    try:
        family, size = sec.pop("family"), sec.pop("size")
        dims, depths = _ints(sec.pop("stage_dims")), _ints(sec.pop("stage_depths"))
        patch = int(sec.pop("patch"))
    except KeyError as exc:
        raise ConfigError(f"encoder config missing key {exc}") from None
    window = int(sec.pop("window", 7))
    mixer = {}
    for key, val in sec.items():
        mixer[key] = _ints(val) if "," in val else int(val)
    return EncoderSpec(family, size, dims, depths, patch, window, mixer, profile)


def load_encoder_spec(family: str, size: str, profile: str = "full") -> EncoderSpec:
    if family not in FAMILIES:
        raise ConfigError(f"unknown encoder family {family!r}")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    path = resources.files("truncpose") / "configs" / "encoders" / f"{family.lower()}-{size.lower()}.cfg"
    if not path.is_file():
        raise ConfigError(f"no encoder config for {family}-{size}")
    return parse_encoder_config(path.read_text(), profile)


@dataclass
class FeatureMap:
    tensor: Tensor
    stage_index: int
    reduction: int

    @property
    def channels(self) -> int:
        return self.tensor.shape[1]

    @property
    def hw(self) -> tuple[int, int]:
        return self.tensor.shape[2], self.tensor.shape[3]


def to_nhwc(x: Tensor) -> Tensor:
    return T.transpose(x, (0, 2, 3, 1))


def to_nchw(x: Tensor) -> Tensor:
    return T.transpose(x, (0, 3, 1, 2))


# ---------------------------------------------------------------------------
# Swin-like block


def _relative_index(ws: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(ws), np.arange(ws), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (ws - 1)
    return (rel[0] * (2 * ws - 1) + rel[1]).reshape(-1)


def _symmetric_pad(n: int, ws: int) -> tuple[int, int]:
    total = -n % ws
    return total // 2, total - total // 2


def _shift_mask(hp: int, wp: int, ws: int, shift: int) -> np.ndarray:
    """(nW, N, N) additive mask separating regions that the cyclic shift made adjacent."""
    img = np.zeros((hp, wp))
    cnt = 0
    for hs in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
        for wsl in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
            img[hs, wsl] = cnt
            cnt += 1
    win = img.reshape(hp // ws, ws, wp // ws, ws).transpose(0, 2, 1, 3).reshape(-1, ws * ws)
    diff = win[:, :, None] != win[:, None, :]
    return np.where(diff, -100.0, 0.0)


def window_partition(x: Tensor, ws: int) -> Tensor:
    """(B, H, W, C) -> (B * nW, ws*ws, C)."""
    b, h, w, c = x.shape
    x = T.reshape(x, (b, h // ws, ws, w // ws, ws, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b * (h // ws) * (w // ws), ws * ws, c))


def window_reverse(x: Tensor, ws: int, b: int, h: int, w: int) -> Tensor:
    c = x.shape[-1]
    x = T.reshape(x, (b, h // ws, w // ws, ws, ws, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, h, w, c))


class SwinBlock(Module):
    """Windowed multi-head self-attention + MLP, both pre-norm residual."""

    def __init__(self, dim: int, heads: int, window: int, shift: int = 0, mlp_ratio: float = 4):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        if not 0 <= shift < window:
            raise ConfigError(f"shift {shift} must lie in [0, window)")
        self.dim, self.heads, self.window, self.shift = dim, heads, window, shift
        self.norm1 = LayerNorm(dim)
        self.qkv = Linear(dim, 3 * dim)
        self.rel_bias = Parameter(((2 * window - 1) ** 2, heads))
        self.proj = Linear(dim, dim)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self._rel_index = _relative_index(window)

    def _padded(self, h: int, w: int):
        ph, pw = _symmetric_pad(h, self.window), _symmetric_pad(w, self.window)
        return ph, pw, h + sum(ph), w + sum(pw)

    def attend(self, x: Tensor) -> Tensor:
        """Token mixing only (no residual); ``x`` is the normalized (B, H, W, C) map."""
        b, h, w, c = x.shape
        ws = self.window
        if ws > h or ws > w:
            raise ConfigError(f"window {ws} larger than feature map {h}x{w}")
        ph, pw, hp, wp = self._padded(h, w)
        if hp != h or wp != w:
            x = T.pad(x, ((0, 0), ph, pw, (0, 0)))
        if self.shift:
            x = T.roll(x, (-self.shift, -self.shift), (1, 2))
        win = window_partition(x, ws)
        bw, n, _ = win.shape
        q, k, v = T.split(self.qkv(win), [c, c, c], axis=-1)
        hd = self.heads
        q, k, v = split_heads(q, hd), split_heads(k, hd), split_heads(v, hd)
        logits = T.matmul(T.scale(q, (c // hd) ** -0.5), T.transpose(k, (0, 2, 1)))
        logits = T.reshape(logits, (bw, hd, n, n))
        bias = T.reshape(T.take(self.rel_bias.value, self._rel_index, axis=0), (n, n, hd))
        logits = T.add(logits, T.transpose(bias, (2, 0, 1)))
        if self.shift:
            mask = _shift_mask(hp, wp, ws, self.shift)
            nw = mask.shape[0]
            logits = T.reshape(logits, (b, nw, hd, n, n))
            logits = T.add_const(logits, mask[None, :, None])
        attn = T.softmax_lastdim(T.reshape(logits, (bw * hd, n, n)))
        out = merge_heads(T.matmul(attn, v), hd)
        out = window_reverse(self.proj(out), ws, b, hp, wp)
        if self.shift:
            out = T.roll(out, (self.shift, self.shift), (1, 2))
        if hp != h or wp != w:
            out = T.slice_axis(T.slice_axis(out, ph[0], ph[0] + h, 1), pw[0], pw[0] + w, 2)
        return out

    def forward(self, x: Tensor) -> Tensor:
        x = T.add(x, self.attend(self.norm1(x)))
        return T.add(x, self.mlp(self.norm2(x)))

    def macs(self, shape):
        b, h, w, c = shape
        _, _, hp, wp = self._padded(h, w)
        npad, n = b * hp * wp, b * h * w
        m = npad * c * 3 * c + npad * c * c + 2 * npad * self.window**2 * c
        return m + self.mlp.macs((n, c))[0], tuple(shape)


# ---------------------------------------------------------------------------
# GMF-like block


def _channel_groups(c: int, n: int) -> list[int]:
    return [len(g) for g in np.array_split(np.arange(c), n)]


class GroupAggregator(Module):
    """Per-branch depthwise aggregation of one of q/k/v; kernel 1 is the identity."""

    def __init__(self, dim: int, group_sizes):
        super().__init__()
        self.group_sizes = tuple(group_sizes)
        if any(k < 1 or k % 2 == 0 for k in self.group_sizes):
            raise ConfigError(f"group sizes must be odd positive kernels, got {self.group_sizes}")
        self.splits = _channel_groups(dim, len(self.group_sizes))
        if min(self.splits) < 1:
            raise ConfigError(f"dim {dim} too small for {len(self.group_sizes)} groups")
        for i, (k, cg) in enumerate(zip(self.group_sizes, self.splits)):
            if k > 1:
                setattr(self, f"dw{i}_weight", Parameter((cg, k, k)))
                setattr(self, f"dw{i}_bias", Parameter((cg,), "zeros"))

    def forward(self, x: Tensor) -> Tensor:
        """``x``: (B, C, H, W)."""
        h, w = x.shape[2:]
        parts = T.split(x, self.splits, axis=1) if len(self.splits) > 1 else [x]
        out = []
        for i, (k, part) in enumerate(zip(self.group_sizes, parts)):
            if k == 1:
                out.append(part)
                continue
            if k > h or k > w:
                raise ConfigError(f"aggregator kernel {k} exceeds feature map {h}x{w}")
            r = k // 2
            padded = T.pad(part, ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")
            out.append(T.depthwise_conv2d(padded, getattr(self, f"dw{i}_weight").value, getattr(self, f"dw{i}_bias").value))
        return T.concat(out, axis=1) if len(out) > 1 else out[0]

    def macs(self, shape):
        b, _, h, w = shape
        return sum(b * h * w * cg * k * k for k, cg in zip(self.group_sizes, self.splits) if k > 1), tuple(shape)


def efficient_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax_channels(q) @ (softmax_tokens(k)^T @ v) on (B', N, d) operands; linear in N."""
    ks = T.softmax_lastdim(T.transpose(k, (0, 2, 1)))
    context = T.matmul(ks, v)
    return T.matmul(T.softmax_lastdim(q), context)


class GroupMixBlock(Module):
    def __init__(self, dim: int, heads: int, group_sizes=(1, 3, 5, 7), mlp_ratio: float = 4):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.norm1 = LayerNorm(dim)
        self.qkv = Linear(dim, 3 * dim)
        self.agg_q = GroupAggregator(dim, group_sizes)
        self.agg_k = GroupAggregator(dim, group_sizes)
        self.agg_v = GroupAggregator(dim, group_sizes)
        self.proj = Linear(dim, dim)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def mix(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        qkv = to_nchw(self.qkv(x))
        q, k, v = T.split(qkv, [c, c, c], axis=1)
        toks = []
        for agg, t in ((self.agg_q, q), (self.agg_k, k), (self.agg_v, v)):
            toks.append(T.reshape(to_nhwc(agg(t)), (b, h * w, c)))
        out = efficient_attention(*(split_heads(t, self.heads) for t in toks))
        out = self.proj(merge_heads(out, self.heads))
        return T.reshape(out, (b, h, w, c))

    def forward(self, x: Tensor) -> Tensor:
        x = T.add(x, self.mix(self.norm1(x)))
        return T.add(x, self.mlp(self.norm2(x)))

    def macs(self, shape):
        b, h, w, c = shape
        n = b * h * w
        m = n * c * 3 * c + n * c * c + 2 * n * c * (c // self.heads)
        m += 3 * self.agg_q.macs((b, c, h, w))[0]
        return m + self.mlp.macs((n, c))[0], tuple(shape)


# ---------------------------------------------------------------------------
# VM-like block


def directional_scans(gates: list[Tensor], u: Tensor) -> Tensor:
    """Sum of the four scans (left->right, right->left, top->bottom, bottom->top) over (B, H, W, C)."""
    lr = T.linear_scan(gates[0], u, axis=2)
    rl = T.linear_scan(gates[1], u, axis=2, reverse=True)
    tb = T.linear_scan(gates[2], u, axis=1)
    bt = T.linear_scan(gates[3], u, axis=1, reverse=True)
    return T.add(T.add(lr, rl), T.add(tb, bt))


class SelectiveScanBlock(Module):
    """h_t = sigmoid(W_a x_t) * h_{t-1} + (W_b x_t) * (W_u x_t) along four directions."""

    def __init__(self, dim: int, mlp_ratio: float = 4):
        super().__init__()
        self.dim = dim
        self.norm1 = LayerNorm(dim)
        self.in_proj = Linear(dim, dim)
        self.gate_proj = Linear(dim, 4 * dim)
        self.b_proj = Linear(dim, dim)
        self.out_proj = Linear(dim, dim)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def mix(self, y: Tensor) -> Tensor:
        c = self.dim
        gates = T.split(T.sigmoid(self.gate_proj(y)), [c] * 4, axis=-1)
        u = T.mul(self.b_proj(y), self.in_proj(y))
        return self.out_proj(directional_scans(gates, u))

    def forward(self, x: Tensor) -> Tensor:
        x = T.add(x, self.mix(self.norm1(x)))
        return T.add(x, self.mlp(self.norm2(x)))

    def macs(self, shape):
        b, h, w, c = shape
        n = b * h * w
        return n * c * c * 7 + 4 * n * c + self.mlp.macs((n, c))[0], tuple(shape)


# ---------------------------------------------------------------------------
# ViT block


class VitBlock(Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: Tensor) -> Tensor:
        x = T.add(x, self.attn(self.norm1(x)))
        return T.add(x, self.mlp(self.norm2(x)))

    def macs(self, shape):
        b, n, c = shape
        return self.attn.macs(shape)[0] + self.mlp.macs(shape)[0], tuple(shape)


# ---------------------------------------------------------------------------
# stages and encoders


def check_input(spec: EncoderSpec, h: int, w: int) -> None:
    m = spec.input_multiple
    if h % m or w % m:
        raise ShapeError(f"input {h}x{w} must be divisible by {m} for {spec.family} encoders")


class PatchMerge(Module):
    """2x2 neighbourhood concat -> LayerNorm -> linear 4C -> 2C (halves resolution)."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"patch merge needs even spatial size, got {h}x{w}")
        x = T.reshape(x, (b, h // 2, 2, w // 2, 2, c))
        x = T.reshape(T.transpose(x, (0, 1, 3, 4, 2, 5)), (b, h // 2, w // 2, 4 * c))
        return self.reduction(self.norm(x))

    def macs(self, shape):
        b, h, w, c = shape
        return self.reduction.macs((b, h // 2, w // 2, 4 * c))


class Stage(Module):
    def __init__(self, blocks: list[Module], merge: PatchMerge | None):
        super().__init__()
        if merge is not None:
            self.merge = merge
        self.blocks = _Seq(blocks)

    @property
    def merge_module(self) -> PatchMerge | None:
        return self._children.get("merge")

    def macs(self, shape):
        m = 0
        if self.merge_module is not None:
            mm, shape = self.merge_module.macs(shape)
            m += mm
        mb, shape = self.blocks.macs(shape)
        return m + mb, shape


class _Seq(Module):
    def __init__(self, mods):
        super().__init__()
        self.items = list(mods)
        for i, m in enumerate(self.items):
            setattr(self, str(i), m)

    def forward(self, x):
        for m in self.items:
            x = m(x)
        return x

    def macs(self, shape):
        total = 0
        for m in self.items:
            mm, shape = m.macs(shape)
            total += mm
        return total, shape


def make_block(spec: EncoderSpec, dim: int, index: int, hw: tuple[int, int]) -> Module:
    """Build block ``index`` of a stage with spatial size ``hw``."""
    mp = spec.mixer_params
    ratio = mp.get("mlp_ratio", 4)
    if spec.family == "Swin":
        heads = max(1, dim // mp.get("head_dim", 32))
        ws = spec.window
        shift = ws // 2 if index % 2 else 0
        if min(hw) <= ws:
            ws, shift = min(hw), 0
        return SwinBlock(dim, heads, ws, shift, ratio)
    if spec.family == "GMF":
        heads = max(1, dim // mp.get("head_dim", 32))
        # branches wider than the map shrink to the largest odd kernel that fits
        fit = min(hw) if min(hw) % 2 else min(hw) - 1
        sizes = tuple(min(k, max(fit, 1)) for k in mp.get("group_sizes", (1, 3, 5, 7)))
        return GroupMixBlock(dim, heads, sizes, ratio)
    if spec.family == "VM":
        return SelectiveScanBlock(dim, ratio)
    raise ConfigError(f"{spec.family} has no pyramid blocks")


class HierarchicalEncoder(Module):
    """Patch embedding plus the first ``num_stages`` pyramid stages."""

    def __init__(self, spec: EncoderSpec, input_hw: tuple[int, int], num_stages: int = 4):
        super().__init__()
        if not spec.hierarchical:
            raise ConfigError(f"{spec.family} is not a hierarchical family")
        if not 1 <= num_stages <= 4:
            raise ConfigError(f"num_stages must be in 1..4, got {num_stages}")
        check_input(spec, *input_hw)
        self.spec, self.input_hw, self.num_stages = spec, tuple(input_hw), num_stages
        c1 = spec.stage_dims[0]
        self.patch_embed = Conv2d(3, c1, spec.patch, spec.patch)
        self.embed_norm = LayerNorm(c1)
        stages = []
        h, w = input_hw[0] // 4, input_hw[1] // 4
        for i in range(num_stages):
            dim = spec.stage_dims[i]
            merge = None
            if i > 0:
                merge = PatchMerge(spec.stage_dims[i - 1])
                h, w = h // 2, w // 2
            blocks = [make_block(spec, dim, j, (h, w)) for j in range(spec.stage_depths[i])]
            stages.append(Stage(blocks, merge))
        self.stages = _Seq(stages)

    def embed(self, image: Tensor) -> FeatureMap:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected a (B, 3, H, W) image, got {image.shape}")
        check_input(self.spec, image.shape[2], image.shape[3])
        x = to_nhwc(self.patch_embed(image))
        x = self.embed_norm(x)
        return FeatureMap(to_nchw(x), 0, 4)

    def downsample(self, f: FeatureMap, i: int) -> FeatureMap:
        """Patch merge feeding stage ``i`` (2..num_stages)."""
        if not 2 <= i <= self.num_stages:
            raise ConfigError(f"no merge before stage {i}")
        if f.stage_index != i - 1:
            raise ConfigError(f"stage {i} merge expects stage {i - 1} output, got stage {f.stage_index}")
        x = self.stages.items[i - 1].merge_module(to_nhwc(f.tensor))
        return FeatureMap(to_nchw(x), i - 1, f.reduction * 2)

    def run_stage(self, f: FeatureMap, i: int) -> FeatureMap:
        """Apply the blocks of stage ``i`` (1-based) at constant resolution."""
        if not 1 <= i <= self.num_stages:
            raise ConfigError(f"stage index {i} out of range 1..{self.num_stages}")
        if f.stage_index != i - 1:
            raise ConfigError(f"stage {i} expects stage {i - 1} input, got stage {f.stage_index}")
        if f.channels != self.spec.stage_dims[i - 1]:
            raise ShapeError(f"stage {i} expects {self.spec.stage_dims[i - 1]} channels, got {f.channels}")
        x = self.stages.items[i - 1].blocks(to_nhwc(f.tensor))
        return FeatureMap(to_nchw(x), i, f.reduction)

    def forward(self, image: Tensor) -> list[FeatureMap]:
        f = self.embed(image)
        outs = []
        for i in range(1, self.num_stages + 1):
            if i > 1:
                f = self.downsample(f, i)
            f = self.run_stage(f, i)
            outs.append(f)
        return outs

    def macs_breakdown(self, batch: int = 1) -> dict[str, int]:
        h, w = self.input_hw
        out = {}
        m, shape = self.patch_embed.macs((batch, 3, h, w))
        out["encoder.patch_embed"] = m
        shape = (batch, shape[2], shape[3], shape[1])
        for i, st in enumerate(self.stages.items):
            m, shape = st.macs(shape)
            out[f"encoder.stage{i + 1}"] = m
        return out

    def params_breakdown(self) -> dict[str, int]:
        out = {"encoder.patch_embed": self.patch_embed.num_params() + self.embed_norm.num_params()}
        for i, st in enumerate(self.stages.items):
            out[f"encoder.stage{i + 1}"] = st.num_params()
        return out


class ViTEncoder(Module):
    """Patch-16 ViT with absolute position embeddings; output stays at 1/16."""

    def __init__(self, spec: EncoderSpec, input_hw: tuple[int, int]):
        super().__init__()
        if spec.family != "ViT":
            raise ConfigError(f"ViTEncoder needs the ViT family, got {spec.family}")
        check_input(spec, *input_hw)
        self.spec, self.input_hw = spec, tuple(input_hw)
        d = spec.stage_dims[0]
        self.grid = (input_hw[0] // 16, input_hw[1] // 16)
        self.patch_embed = Conv2d(3, d, 16, 16)
        self.pos_embed = Parameter((self.grid[0] * self.grid[1], d))
        heads = spec.mixer_params.get("heads", max(1, d // 64))
        self.blocks = _Seq([VitBlock(d, heads, spec.mixer_params.get("mlp_ratio", 4)) for _ in range(spec.stage_depths[0])])
        self.norm = LayerNorm(d)

    def embed(self, image: Tensor) -> FeatureMap:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected a (B, 3, H, W) image, got {image.shape}")
        check_input(self.spec, image.shape[2], image.shape[3])
        if tuple(image.shape[2:]) != self.input_hw:
            raise ShapeError(f"ViT built for {self.input_hw}, got {image.shape[2:]}")
        return FeatureMap(self.patch_embed(image), 0, 16)

    def forward(self, image: Tensor) -> FeatureMap:
        f = self.embed(image)
        b, d, h, w = f.tensor.shape
        x = T.reshape(to_nhwc(f.tensor), (b, h * w, d))
        x = T.add(x, self.pos_embed.value)
        x = self.norm(self.blocks(x))
        return FeatureMap(to_nchw(T.reshape(x, (b, h, w, d))), 0, 16)

    def macs_breakdown(self, batch: int = 1) -> dict[str, int]:
        h, w = self.input_hw
        n = self.grid[0] * self.grid[1]
        d = self.spec.stage_dims[0]
        return {
            "encoder.patch_embed": self.patch_embed.macs((batch, 3, h, w))[0],
            "encoder.blocks": self.blocks.macs((batch, n, d))[0],
        }

    def params_breakdown(self) -> dict[str, int]:
        return {
            "encoder.patch_embed": self.patch_embed.num_params() + self.pos_embed.size,
            "encoder.blocks": self.blocks.num_params() + self.norm.num_params(),
        }


def expected_hw(input_hw: tuple[int, int], reduction: int) -> tuple[int, int]:
    return math.ceil(input_hw[0] / reduction), math.ceil(input_hw[1] / reduction)
