"""A joints-only articulated body with an SMPL-shaped interface.

24 joints, 10 shape coefficients, per-joint rotations. Shape coefficients
rescale bone offsets along their rest direction, so every bone stays
positive for |beta| <= 3. Coordinates are metres with y pointing down
(image convention), x to the image right, root at the origin.

The definition (tree, offsets, shape basis, joint limits, keypoint map,
limbs) lives in ``configs/body.cfg``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import tensor as T
from .layers import ConfigError
from .tensor import Tensor

NUM_JOINTS = 24
NUM_BETAS = 10
NUM_KEYPOINTS = 17
# focal length of the weak-perspective camera as a fraction of min(H, W)
FOCAL_FRACTION = 0.32

COCO_KEYPOINTS = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)


@dataclass
class SmplParams:
    """Pose (rotation matrices, optionally the raw 6D output), shape and camera.

    Arrays may be numpy (ground truth) or :class:`Tensor` (decoder output).
    ``cam`` holds ``(s, t_x, t_y)`` per sample with ``s > 0``.
    """

    rotmats: object  # (B, 24, 3, 3)
    beta: object  # (B, 10)
    cam: object  # (B, 3)
    alpha6d: object | None = None  # (B, 24, 6)


@dataclass(frozen=True)
class BodyModel:
    parents: tuple[int, ...]
    rest_offsets: np.ndarray  # (24, 3)
    shape_basis: np.ndarray  # (24, 3, 10)
    limits: np.ndarray  # (24, 3) axis-angle half-ranges, radians
    keypoint_map: tuple[int, ...]  # 17 joint indices
    limbs: tuple[tuple[int, int], ...]  # keypoint-index pairs
    cam_scale: tuple[float, float]
    cam_tx: tuple[float, float]
    cam_ty: tuple[float, float]
    beta_range: float

    def __post_init__(self):
        validate_tree(self.parents)
        if self.rest_offsets.shape != (NUM_JOINTS, 3):
            raise ConfigError(f"rest offsets must be (24, 3), got {self.rest_offsets.shape}")
        if len(self.keypoint_map) != NUM_KEYPOINTS or len(set(self.keypoint_map)) != NUM_KEYPOINTS:
            raise ConfigError("keypoint map must send 17 keypoints to distinct joints")
        if not all(0 <= j < NUM_JOINTS for j in self.keypoint_map):
            raise ConfigError("keypoint map refers to a missing joint")

    def bone_lengths(self, beta: np.ndarray) -> np.ndarray:
        off = self.rest_offsets + self.shape_basis @ np.asarray(beta, dtype=np.float64)
        return np.linalg.norm(off, axis=-1)


def validate_tree(parents) -> None:
    """Root is joint 0 (its own parent); every other joint has an earlier parent."""
    if len(parents) != NUM_JOINTS:
        raise ConfigError(f"expected {NUM_JOINTS} parents, got {len(parents)}")
    if parents[0] != 0:
        raise ConfigError("joint 0 must be the root (its own parent)")
    for j, p in enumerate(parents[1:], start=1):
        if not 0 <= p < j:
            # parents before children rules out cycles and guarantees connectivity
            raise ConfigError(f"joint {j} has parent {p}; parents must precede children")


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def parse_body_config(text: str) -> BodyModel:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    try:
        parents = tuple(int(v) for v in _floats(cp["tree"]["parents"]))
        offsets = np.array([_floats(cp["offsets"][f"j{j}"]) for j in range(NUM_JOINTS)])
        limits = np.array([_floats(cp["limits"][f"j{j}"]) for j in range(NUM_JOINTS)])
        kmap = tuple(int(cp["keypoints"][name]) for name in COCO_KEYPOINTS)
        limbs = tuple(tuple(int(v) for v in pair.split("-")) for pair in cp["render"]["limbs"].split())
        cam = cp["camera"]
        scale, tx, ty = _floats(cam["scale"]), _floats(cam["tx"]), _floats(cam["ty"])
        beta_range = float(cp["shape"]["beta_range"])
    except KeyError as exc:
        raise ConfigError(f"body config missing entry {exc}") from None
    basis = np.zeros((NUM_JOINTS, 3, NUM_BETAS))
    for c in range(NUM_BETAS):
        spec = cp["shape"].get(f"beta{c}", "")
        for term in filter(None, (t.strip() for t in spec.split(";"))):
            coef, joints = term.split("@")
            for j in _floats(joints):
                basis[int(j), :, c] += float(coef) * offsets[int(j)]
    return BodyModel(parents, offsets, basis, limits, kmap, limbs, tuple(scale), tuple(tx), tuple(ty), beta_range)


_DEFAULT: BodyModel | None = None


def default_body_model() -> BodyModel:
    global _DEFAULT
    if _DEFAULT is None:
        text = (resources.files("truncpose") / "configs" / "body.cfg").read_text()
        _DEFAULT = parse_body_config(text)
    return _DEFAULT


# ---------------------------------------------------------------------------
# rotations


def axis_angle_to_rotmat(v: np.ndarray) -> np.ndarray:
    """Rodrigues formula for (..., 3) axis-angle vectors."""
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(theta > 1e-12, theta, 1.0)
    k = np.where(theta > 1e-12, v / safe, 0.0)
    kx, ky, kz = k[..., 0], k[..., 1], k[..., 2]
    zero = np.zeros_like(kx)
    K = np.stack([zero, -kz, ky, kz, zero, -kx, -ky, kx, zero], axis=-1).reshape(v.shape[:-1] + (3, 3))
    s, c = np.sin(theta)[..., None], np.cos(theta)[..., None]
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + s * K + (1 - c) * (K @ K)


def rotmat_to_6d(R: np.ndarray) -> np.ndarray:
    """First two columns, concatenated: (..., 3, 3) -> (..., 6)."""
    R = np.asarray(R)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


# ---------------------------------------------------------------------------
# kinematics


def forward_kinematics(rotmats, beta, model: BodyModel | None = None):
    """Joint positions for local rotations ``(B, 24, 3, 3)`` and shape ``(B, 10)``.

    Accepts numpy arrays (returns numpy) or Tensors (returns a differentiable
    Tensor of shape ``(B, 24, 3)``).
    """
    model = model or default_body_model()
    if not isinstance(rotmats, Tensor) and not isinstance(beta, Tensor):
        return _fk_numpy(np.asarray(rotmats, dtype=np.float64), np.asarray(beta, dtype=np.float64), model)
    rotmats = rotmats if isinstance(rotmats, Tensor) else Tensor(rotmats)
    beta = beta if isinstance(beta, Tensor) else Tensor(beta)
    b = rotmats.shape[0]
    if rotmats.shape[1:] != (NUM_JOINTS, 3, 3) or beta.shape != (b, NUM_BETAS):
        raise T.ShapeError(f"forward_kinematics: got rotations {rotmats.shape} and betas {beta.shape}")
    # offsets(beta): (B, 72) = beta @ basis^T + rest
    basis = Tensor(model.shape_basis.reshape(NUM_JOINTS * 3, NUM_BETAS).T.copy())
    offsets = T.add_const(T.matmul(beta, basis), np.broadcast_to(model.rest_offsets.reshape(-1), (b, NUM_JOINTS * 3)))
    offsets = T.reshape(offsets, (b, NUM_JOINTS, 3, 1))
    glob: list[Tensor] = []
    pos: list[Tensor] = []
    for j in range(NUM_JOINTS):
        local = T.reshape(T.take(rotmats, [j], axis=1), (b, 3, 3))
        if j == 0:
            glob.append(local)
            pos.append(Tensor(np.zeros((b, 3))))
            continue
        p = model.parents[j]
        off = T.reshape(T.take(offsets, [j], axis=1), (b, 3, 1))
        pos.append(T.add(pos[p], T.reshape(T.matmul(glob[p], off), (b, 3))))
        glob.append(T.matmul(glob[p], local))
    return T.stack(pos, axis=1)


def _fk_numpy(rotmats: np.ndarray, beta: np.ndarray, model: BodyModel) -> np.ndarray:
    b = rotmats.shape[0]
    offsets = model.rest_offsets[None] + np.einsum("jkc,bc->bjk", model.shape_basis, beta)
    glob = np.empty_like(rotmats)
    pos = np.zeros((b, NUM_JOINTS, 3))
    glob[:, 0] = rotmats[:, 0]
    for j in range(1, NUM_JOINTS):
        p = model.parents[j]
        pos[:, j] = pos[:, p] + np.einsum("bij,bj->bi", glob[:, p], offsets[:, j])
        glob[:, j] = glob[:, p] @ rotmats[:, j]
    return pos


def project_numpy(joints3d: np.ndarray, cam: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    """Weak perspective: ``u = W/2 + f*s*(X + t_x)``, ``v = H/2 + f*s*(Y + t_y)``, ``f = 0.32 * min(H, W)``."""
    h, w = hw
    f = FOCAL_FRACTION * min(h, w)
    cam = np.asarray(cam, dtype=np.float64)
    s, t = cam[..., 0, None, None], cam[..., None, 1:3]
    return np.array([w / 2, h / 2]) + f * s * (joints3d[..., :2] + t)


def keypoints_from_joints(joints: np.ndarray, model: BodyModel | None = None) -> np.ndarray:
    model = model or default_body_model()
    return joints[..., list(model.keypoint_map), :]


# ---------------------------------------------------------------------------
# sampling and rendering


def sample_pose(seed, model: BodyModel | None = None, limits: np.ndarray | None = None) -> SmplParams:
    """One random pose with batch dim 1. ``seed`` is anything numpy accepts as a seed."""
    model = model or default_body_model()
    rng = np.random.default_rng(seed)
    lim = model.limits if limits is None else np.asarray(limits, dtype=np.float64)
    aa = rng.uniform(-1.0, 1.0, size=(NUM_JOINTS, 3)) * lim
    beta = rng.uniform(-model.beta_range, model.beta_range, size=NUM_BETAS)
    cam = np.array([rng.uniform(*model.cam_scale), rng.uniform(*model.cam_tx), rng.uniform(*model.cam_ty)])
    R = axis_angle_to_rotmat(aa)
    return SmplParams(R[None], beta[None], cam[None], rotmat_to_6d(R)[None])



def limb_colours(n: int) -> np.ndarray:
    """Evenly spaced hues at full saturation, so each limb is distinguishable."""
    hue = np.arange(n) / n
    k = (np.array([5.0, 3.0, 1.0])[None] + hue[:, None] * 6) % 6
    return 1 - np.clip(np.minimum(k, 4 - k), 0, 1)


def _segment_distance(px: np.ndarray, py: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = b - a
    den = float(d @ d)
    if den < 1e-12:
        return np.hypot(px - a[0], py - a[1])
    t = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / den, 0.0, 1.0)
    return np.hypot(px - a[0] - t * d[0], py - a[1] - t * d[1])


def render_stick_figure(
    keypoints2d: np.ndarray,
    hw: tuple[int, int],
    seed=0,
    occluded_limbs=(),
    noise: float = 0.1,
    model: BodyModel | None = None,
) -> np.ndarray:
    """Draw limbs and joints of a ``(17, 3)`` keypoint set on a noise background.

    Limbs touching an invisible keypoint and limbs listed in ``occluded_limbs``
    are skipped. Coverage is anti-aliased with a one-pixel linear ramp.

    Returns:
        ``(3, H, W)`` float array with values in [0, 1].
    """
    model = model or default_body_model()
    h, w = hw
    if h < 32 or w < 32:
        raise ConfigError(f"canvas must be at least 32x32, got {h}x{w}")
    rng = np.random.default_rng(seed)
    img = noise * rng.random((3, h, w))
    kp = np.asarray(keypoints2d, dtype=np.float64).reshape(-1, 3)
    if kp.shape[0] == 0:
        return img
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    width = max(1.5, min(h, w) / 40)
    colours = limb_colours(len(model.limbs))
    skip = set(occluded_limbs)
    for li, (a, b) in enumerate(model.limbs):
        if li in skip or kp[a, 2] <= 0 or kp[b, 2] <= 0:
            continue
        dist = _segment_distance(px, py, kp[a, :2], kp[b, :2])
        cov = np.clip(width / 2 + 0.5 - dist, 0.0, 1.0)
        img = img * (1 - cov) + colours[li][:, None, None] * cov
    radius = width * 0.9
    for j in range(kp.shape[0]):
        if kp[j, 2] <= 0:
            continue
        cov = np.clip(radius + 0.5 - np.hypot(px - kp[j, 0], py - kp[j, 1]), 0.0, 1.0)
        img = img * (1 - cov) + cov
    return np.clip(img, 0.0, 1.0)
