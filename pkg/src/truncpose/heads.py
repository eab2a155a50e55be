"""Task decoders: a deconvolution heatmap head (HPE) and a cross-attention
SMPL-parameter decoder (HMR), plus the pieces around them.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import tensor as T
from .body_model import FOCAL_FRACTION, NUM_BETAS, NUM_JOINTS, NUM_KEYPOINTS, SmplParams
from .encoders import FeatureMap
from .layers import ConfigError, Conv2d, ConvTranspose2d, CrossAttention, LayerNorm, Linear, Mlp, Module, MultiHeadAttention, Parameter
from .tensor import Tensor

__all__ = [
    "HeatmapHeadSpec", "HeatmapHead", "KeypointSet2D", "heatmaps_to_keypoints", "gaussian_heatmaps",
    "HmrDecoderSpec", "HmrDecoder", "load_decoder_spec", "SmplParams", "rot6d_to_rotmat", "reproject",
]

# ---------------------------------------------------------------------------
# heatmap head


@dataclass(frozen=True)
class HeatmapHeadSpec:
    num_deconv: int = 2
    deconv_channels: int = 256
    num_keypoints: int = NUM_KEYPOINTS
    kernel: int = 4

    def __post_init__(self):
        if self.num_deconv < 0 or self.deconv_channels < 1 or self.num_keypoints < 1:
            raise ConfigError(f"invalid heatmap head spec {self}")
        if self.kernel not in (2, 3, 4):
            raise ConfigError("deconv kernel must be 2, 3 or 4")


def _deconv_padding(kernel: int) -> tuple[int, int]:
    # (padding, output_padding) giving exact 2x upsampling; only k=4 (p=1) and k=2 (p=0) avoid output padding
    return {4: (1, 0), 2: (0, 0), 3: (1, 1)}[kernel]


class HeatmapHead(Module):
    """``num_deconv`` stride-2 transposed convs with ReLU, then a 1x1 prediction conv."""

    def __init__(self, in_channels: int, spec: HeatmapHeadSpec = HeatmapHeadSpec()):
        super().__init__()
        if spec.kernel == 3:
            raise ConfigError("kernel 3 needs output padding, which is not supported")
        self.spec = spec
        pad = _deconv_padding(spec.kernel)[0]
        layers, c = [], in_channels
        for _ in range(spec.num_deconv):
            layers.append(ConvTranspose2d(c, spec.deconv_channels, spec.kernel, 2, pad))
            c = spec.deconv_channels
        self.deconvs = layers
        for i, layer in enumerate(layers):
            setattr(self, f"deconv{i}", layer)
        self.predict = Conv2d(c, spec.num_keypoints, 1)
        self.predict.weight.init = "zeros"

    def forward(self, f: FeatureMap) -> Tensor:
        if f.reduction != 16:
            raise ConfigError(f"heatmap head expects a 1/16 feature map, got 1/{f.reduction}")
        x = f.tensor
        for layer in self.deconvs:
            x = T.relu(layer(x))
        return self.predict(x)

    def macs(self, shape):
        total = 0
        for layer in self.deconvs:
            m, shape = layer.macs(shape)
            total += m
        m, shape = self.predict.macs(shape)
        return total + m, shape


@dataclass
class KeypointSet2D:
    """Image-space keypoints ``xy`` of shape (B, J, 2) with confidences (B, J)."""

    xy: np.ndarray
    confidence: np.ndarray


def heatmaps_to_keypoints(hm, stride: int = 4) -> KeypointSet2D:
    """Argmax decoding with a quarter-pixel shift toward the larger neighbour.

    Ties resolve to the lowest flat index (``np.argmax``). Coordinates are
    heatmap indices scaled by ``stride``; confidence is the peak value.
    """
    hm = hm.data if isinstance(hm, Tensor) else np.asarray(hm, dtype=np.float64)
    b, j, h, w = hm.shape
    flat = hm.reshape(b, j, h * w)
    idx = flat.argmax(axis=-1)
    conf = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    r, c = np.divmod(idx, w)
    bi, ji = np.meshgrid(np.arange(b), np.arange(j), indexing="ij")

    def neighbour_sign(rr, cc, dr, dc, limit, pos):
        ok = (pos > 0) & (pos < limit - 1)
        hi = hm[bi, ji, np.clip(rr + dr, 0, h - 1), np.clip(cc + dc, 0, w - 1)]
        lo = hm[bi, ji, np.clip(rr - dr, 0, h - 1), np.clip(cc - dc, 0, w - 1)]
        return np.where(ok, np.sign(hi - lo), 0.0)

    x = c + 0.25 * neighbour_sign(r, c, 0, 1, w, c)
    y = r + 0.25 * neighbour_sign(r, c, 1, 0, h, r)
    return KeypointSet2D(np.stack([x, y], axis=-1) * stride, conf)


def gaussian_heatmaps(keypoints: np.ndarray, hw: tuple[int, int], stride: int = 4, sigma: float = 2.0) -> np.ndarray:
    """Target heatmaps for ``(B, J, 3)`` keypoints in image pixels; invisible joints get all-zero maps."""
    kp = np.asarray(keypoints, dtype=np.float64)
    h, w = hw
    ys = np.arange(h)[None, None, :, None]
    xs = np.arange(w)[None, None, None, :]
    cx = (kp[..., 0] / stride)[..., None, None]
    cy = (kp[..., 1] / stride)[..., None, None]
    g = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma**2))
    return g * (kp[..., 2] > 0)[..., None, None]


# ---------------------------------------------------------------------------
# rotations


def _rot6d_forward(x: np.ndarray):
    a1, a2 = x[..., 0:3], x[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    bad1 = n1 < 1e-12
    b1 = np.where(bad1, np.array([1.0, 0.0, 0.0]), a1 / np.where(bad1, 1.0, n1))
    d = np.sum(b1 * a2, axis=-1, keepdims=True)
    u = a2 - d * b1
    u = u - np.sum(b1 * u, axis=-1, keepdims=True) * b1  # second pass for round-off
    n2 = np.linalg.norm(u, axis=-1, keepdims=True)
    bad2 = n2 < 1e-9 * np.maximum(1.0, np.linalg.norm(a2, axis=-1, keepdims=True))
    if np.any(bad2):
        # a2 (anti)parallel to a1: use the basis axis least aligned with b1
        axis = np.eye(3)[np.argmin(np.abs(b1), axis=-1)]
        alt = axis - np.sum(b1 * axis, axis=-1, keepdims=True) * b1
        u = np.where(bad2, alt, u)
        n2 = np.where(bad2, np.linalg.norm(u, axis=-1, keepdims=True), n2)
    b2 = u / n2
    b3 = np.cross(b1, b2)
    return b1, b2, b3, n1, n2, d, bad1, bad2


def rot6d_to_rotmat(x: Tensor) -> Tensor:
    """Gram-Schmidt map from (..., 6) to rotation matrices (..., 3, 3).

    The first three entries give column 1, the last three are
    orthogonalised against it for column 2, column 3 is their cross
    product. Degenerate inputs (zero first vector, parallel vectors) fall
    back to a fixed completion and get zero gradient along the collapsed
    direction.
    """
    if x.shape[-1] != 6:
        raise T.ShapeError(f"6D rotations need a trailing dim of 6, got {x.shape}")
    b1, b2, b3, n1, n2, d, bad1, bad2 = _rot6d_forward(x.data)
    out = np.stack([b1, b2, b3], axis=-1)
    a2 = x.data[..., 3:6]

    def bw(g):
        g1, g2, g3 = g[..., :, 0], g[..., :, 1], g[..., :, 2]
        # b3 = b1 x b2
        gb1 = g1 + np.cross(b2, g3)
        gb2 = g2 + np.cross(g3, b1)
        # b2 = u / |u|
        gu = (gb2 - b2 * np.sum(b2 * gb2, axis=-1, keepdims=True)) / n2
        gu = np.where(bad2, 0.0, gu)
        # u = a2 - (b1 . a2) b1
        bu = np.sum(b1 * gu, axis=-1, keepdims=True)
        ga2 = gu - b1 * bu
        gb1 = gb1 - d * gu - a2 * bu
        # b1 = a1 / |a1|
        ga1 = (gb1 - b1 * np.sum(b1 * gb1, axis=-1, keepdims=True)) / np.where(bad1, 1.0, n1)
        ga1 = np.where(bad1, 0.0, ga1)
        return (np.concatenate([ga1, ga2], axis=-1),)

    return T.custom_op(out, (x,), bw, "rot6d_to_rotmat")


# ---------------------------------------------------------------------------
# HMR decoder


@dataclass(frozen=True)
class HmrDecoderSpec:
    """``N`` layers, ``h`` heads of width ``d_hid``, feed-forward width ``d_ff``."""

    N: int
    h: int
    d_hid: int
    d_ff: int
    name: str = ""

    def __post_init__(self):
        if min(self.N, self.h, self.d_hid, self.d_ff) < 1:
            raise ConfigError(f"decoder dims must be positive, got {self}")

    @property
    def model_dim(self) -> int:
        return self.h * self.d_hid


def load_decoder_spec(variant: str) -> HmrDecoderSpec:
    """Decoder dims for a variant key (``H``, ``L``, ``B``, ``S``, ``toy``). Tiny models use ``S``."""
    variant = "S" if variant == "T" else variant
    cp = configparser.ConfigParser()
    cp.read_string((resources.files("truncpose") / "configs" / "decoders.cfg").read_text())
    if variant not in cp:
        raise ConfigError(f"no decoder variant {variant!r}")
    sec = cp[variant]
    return HmrDecoderSpec(int(sec["layers"]), int(sec["heads"]), int(sec["head_dim"]), int(sec["ff_dim"]), variant)


class DecoderLayer(Module):
    def __init__(self, spec: HmrDecoderSpec):
        super().__init__()
        d = spec.model_dim
        self.norm1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, spec.h)
        self.norm2 = LayerNorm(d)
        self.cross_attn = CrossAttention(d, d, spec.h, spec.d_hid)
        self.norm3 = LayerNorm(d)
        self.ff = Mlp(d, spec.d_ff)

    def forward(self, q: Tensor, context: Tensor) -> Tensor:
        q = T.add(q, self.self_attn(self.norm1(q)))
        q = T.add(q, self.cross_attn(self.norm2(q), context))
        return T.add(q, self.ff(self.norm3(q)))

    def macs(self, shape, context_shape):
        m = self.self_attn.macs(shape)[0] + self.cross_attn.macs(shape, context_shape)[0] + self.ff.macs(shape)[0]
        return m, tuple(shape)


# 6D of the identity rotation, added to the pose head so zero weights mean rest pose
IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
# softplus(raw + SCALE_OFFSET) == 1 at raw == 0
SCALE_OFFSET = math.log(math.e - 1.0)


class HmrDecoder(Module):
    """One learned query cross-attending to projected encoder tokens."""

    def __init__(self, in_channels: int, num_tokens: int, spec: HmrDecoderSpec):
        super().__init__()
        self.spec, self.in_channels, self.num_tokens = spec, in_channels, num_tokens
        d = spec.model_dim
        self.token_proj = Linear(in_channels, d)
        self.pos_embed = Parameter((num_tokens, d))
        self.query = Parameter((1, 1, d))
        self.layers = [DecoderLayer(spec) for _ in range(spec.N)]
        for i, layer in enumerate(self.layers):
            setattr(self, f"layer{i}", layer)
        self.norm = LayerNorm(d)
        self.pose_head = Linear(d, NUM_JOINTS * 6, init="zeros")
        self.shape_head = Linear(d, NUM_BETAS, init="zeros")
        self.cam_head = Linear(d, 3, init="zeros")

    def forward(self, tokens: Tensor, use_pos: bool = True) -> SmplParams:
        if tokens.ndim != 3 or tokens.shape[1:] != (self.num_tokens, self.in_channels):
            raise ConfigError(f"decoder expects (B, {self.num_tokens}, {self.in_channels}) tokens, got {tokens.shape}")
        b = tokens.shape[0]
        ctx = self.token_proj(tokens)
        if use_pos:
            ctx = T.add(ctx, self.pos_embed.value)
        q = T.expand(self.query.value, (b, 1, self.spec.model_dim))
        for layer in self.layers:
            q = layer(q, ctx)
        q = T.reshape(self.norm(q), (b, self.spec.model_dim))
        alpha = T.add_const(self.pose_head(q), np.tile(IDENTITY_6D, (b, NUM_JOINTS)))
        alpha = T.reshape(alpha, (b, NUM_JOINTS, 6))
        beta = self.shape_head(q)
        raw = self.cam_head(q)
        s_raw, t = T.split(raw, [1, 2], axis=-1)
        s = T.softplus(T.add_scalar(s_raw, SCALE_OFFSET))
        cam = T.concat([s, t], axis=-1)
        return SmplParams(rot6d_to_rotmat(alpha), beta, cam, alpha)

    def forward_features(self, f: FeatureMap, use_pos: bool = True) -> SmplParams:
        return self.forward(flatten_tokens(f), use_pos)

    def macs(self, shape):
        b, n, c = shape
        d = self.spec.model_dim
        m = self.token_proj.macs(shape)[0]
        for layer in self.layers:
            m += layer.macs((b, 1, d), (b, n, d))[0]
        for head in (self.pose_head, self.shape_head, self.cam_head):
            m += head.macs((b, d))[0]
        return m, (b, NUM_JOINTS * 6 + NUM_BETAS + 3)


def flatten_tokens(f: FeatureMap) -> Tensor:
    """(B, C, h, w) -> (B, h*w, C), row-major over the grid."""
    if f.reduction != 16:
        raise ConfigError(f"decoder expects a 1/16 feature map, got 1/{f.reduction}")
    b, c, h, w = f.tensor.shape
    return T.reshape(T.transpose(f.tensor, (0, 2, 3, 1)), (b, h * w, c))


def reproject(joints3d, cam, hw: tuple[int, int]):
    """Weak-perspective projection to crop pixels.

    ``u = W/2 + f*s*(X + t_x)``, ``v = H/2 + f*s*(Y + t_y)`` with
    ``f = FOCAL_FRACTION * min(H, W)``. Works on numpy arrays or Tensors
    shaped (B, J, 3) and (B, 3).
    """
    if not isinstance(joints3d, Tensor) and not isinstance(cam, Tensor):
        from .body_model import project_numpy

        return project_numpy(np.asarray(joints3d, dtype=np.float64), cam, hw)
    joints3d = joints3d if isinstance(joints3d, Tensor) else Tensor(joints3d)
    cam = cam if isinstance(cam, Tensor) else Tensor(cam)
    h, w = hw
    f = FOCAL_FRACTION * min(h, w)
    b, j, _ = joints3d.shape
    xy = T.slice_axis(joints3d, 0, 2, axis=-1)
    s_, t = T.split(cam, [1, 2], axis=-1)
    t = T.expand(T.reshape(t, (b, 1, 2)), (b, j, 2))
    s_ = T.expand(T.reshape(s_, (b, 1, 1)), (b, j, 2))
    out = T.scale(T.mul(s_, T.add(xy, t)), f)
    return T.add_const(out, np.broadcast_to(np.array([w / 2, h / 2]), (b, j, 2)))
