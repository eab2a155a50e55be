"""Synthetic stick-figure datasets and their binary shard format.

Shard layout (little-endian)::

    magic   4 bytes  b"TPDS"
    version u8       1
    count   u32      number of records
    height  u16
    width   u16
    then ``count`` times:
        length  u32  byte length of the payload that follows
        payload      index u32, then float64 arrays in this order:
                     image (3*H*W), keypoints2d (17*3), joints3d (24*3),
                     rotmats (24*9), beta (10), cam (3), bbox_size (1)

Record ``i`` of a dataset with seed ``s`` is generated from the seed
sequence ``[s, i]`` alone, so any subset can be regenerated independently
and thread workers merge in index order.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .body_model import (NUM_BETAS, NUM_JOINTS, NUM_KEYPOINTS, SmplParams, default_body_model,
                         forward_kinematics, keypoints_from_joints, project_numpy, render_stick_figure, sample_pose)
from .metrics import bbox_size

MAGIC = b"TPDS"
VERSION = 1
_HEADER = struct.Struct("<4sBIHH")


class DataFormatError(ValueError):
    pass


@dataclass
class DatasetRecord:
    index: int
    image: np.ndarray  # (3, H, W) in [0, 1]
    keypoints2d: np.ndarray  # (17, 3): x, y, visible
    joints3d: np.ndarray  # (24, 3) metres
    params: SmplParams  # batch dim 1
    bbox_size: float


def make_record(seed: int, index: int, hw: tuple[int, int], noise: float = 0.1, occlusion: float = 0.0) -> DatasetRecord:
    model = default_body_model()
    params = sample_pose([seed, index], model)
    joints = forward_kinematics(params.rotmats, params.beta, model)
    kp_xy = keypoints_from_joints(project_numpy(joints, params.cam, hw), model)[0]
    h, w = hw
    vis = (kp_xy[:, 0] >= 0) & (kp_xy[:, 0] <= w - 1) & (kp_xy[:, 1] >= 0) & (kp_xy[:, 1] <= h - 1)
    kp = np.concatenate([kp_xy, vis[:, None].astype(np.float64)], axis=1)
    rng = np.random.default_rng([seed, index, 1])
    occluded = [i for i in range(len(model.limbs)) if rng.random() < occlusion]
    image = render_stick_figure(kp, hw, seed=[seed, index, 2], occluded_limbs=occluded, noise=noise, model=model)
    size = bbox_size(kp)
    return DatasetRecord(index, image, kp, joints[0], params, 0.0 if size is None else size)


def generate_records(n: int, seed: int, hw: tuple[int, int], noise: float = 0.1, occlusion: float = 0.0,
                     workers: int = 1) -> list[DatasetRecord]:
    if n < 1:
        raise ValueError(f"n_samples must be >= 1, got {n}")
    jobs = range(n)
    if workers <= 1:
        recs = [make_record(seed, i, hw, noise, occlusion) for i in jobs]
    else:
        with ThreadPoolExecutor(workers) as pool:
            recs = list(pool.map(lambda i: make_record(seed, i, hw, noise, occlusion), jobs))
    return sorted(recs, key=lambda r: r.index)


def _encode(r: DatasetRecord) -> bytes:
    p = r.params
    arrays = [r.image, r.keypoints2d, r.joints3d, np.asarray(p.rotmats), np.asarray(p.beta), np.asarray(p.cam),
              np.array([r.bbox_size])]
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    return struct.pack("<I", r.index) + body


def _decode(buf: bytes, hw: tuple[int, int]) -> DatasetRecord:
    h, w = hw
    sizes = [3 * h * w, NUM_KEYPOINTS * 3, NUM_JOINTS * 3, NUM_JOINTS * 9, NUM_BETAS, 3, 1]
    if len(buf) != 4 + 8 * sum(sizes):
        raise DataFormatError(f"record payload has {len(buf)} bytes, expected {4 + 8 * sum(sizes)}")
    (index,) = struct.unpack_from("<I", buf)
    flat = np.frombuffer(buf, dtype="<f8", offset=4).astype(np.float64)
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    params = SmplParams(parts[3].reshape(1, NUM_JOINTS, 3, 3), parts[4].reshape(1, NUM_BETAS), parts[5].reshape(1, 3))
    return DatasetRecord(index, parts[0].reshape(3, h, w), parts[1].reshape(NUM_KEYPOINTS, 3),
                         parts[2].reshape(NUM_JOINTS, 3), params, float(parts[6][0]))


def write_shard(path, records: list[DatasetRecord], hw: tuple[int, int]) -> None:
    out = [_HEADER.pack(MAGIC, VERSION, len(records), hw[0], hw[1])]
    for r in records:
        payload = _encode(r)
        out.append(struct.pack("<I", len(payload)))
        out.append(payload)
    Path(path).write_bytes(b"".join(out))


def read_shard(path) -> list[DatasetRecord]:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    magic, version, count, h, w = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    pos, recs = _HEADER.size, []
    for _ in range(count):
        if pos + 4 > len(buf):
            raise DataFormatError(f"{path}: truncated record table")
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        recs.append(_decode(buf[pos : pos + n], (h, w)))
        pos += n
    if pos != len(buf):
        raise DataFormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return recs


def generate_dataset(out_dir, n: int, seed: int, hw: tuple[int, int], noise: float = 0.1, occlusion: float = 0.0,
                     shard_size: int = 256, workers: int = 1) -> list[Path]:
    """Generate ``n`` records and write them as ``shard-XXXXX.tpds`` files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    recs = generate_records(n, seed, hw, noise, occlusion, workers)
    paths = []
    for k in range(0, n, shard_size):
        p = out / f"shard-{k // shard_size:05d}.tpds"
        write_shard(p, recs[k : k + shard_size], hw)
        paths.append(p)
    return paths


def load_dataset(path) -> list[DatasetRecord]:
    path = Path(path)
    files = sorted(path.glob("shard-*.tpds")) if path.is_dir() else [path]
    if not files:
        raise DataFormatError(f"no shards under {path}")
    recs = [r for f in files for r in read_shard(f)]
    return sorted(recs, key=lambda r: r.index)


@dataclass
class Batch:
    images: np.ndarray  # (B, 3, H, W)
    keypoints2d: np.ndarray  # (B, 17, 3)
    joints3d: np.ndarray  # (B, 24, 3)
    rotmats: np.ndarray  # (B, 24, 3, 3)
    beta: np.ndarray  # (B, 10)
    cam: np.ndarray  # (B, 3)
    bbox_size: np.ndarray  # (B,)


def collate(records: list[DatasetRecord]) -> Batch:
    return Batch(
        np.stack([r.image for r in records]),
        np.stack([r.keypoints2d for r in records]),
        np.stack([r.joints3d for r in records]),
        np.concatenate([np.asarray(r.params.rotmats) for r in records]),
        np.concatenate([np.asarray(r.params.beta) for r in records]),
        np.concatenate([np.asarray(r.params.cam) for r in records]),
        np.array([r.bbox_size for r in records]),
    )
