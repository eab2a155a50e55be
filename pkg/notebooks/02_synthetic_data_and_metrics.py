"""
Synthetic people and how they are scored
========================================

Training data comes from a toy articulated body: random joint rotations and
shape coefficients, posed by forward kinematics, projected with a
weak-perspective camera and drawn as a stick figure. Every sample carries
its own ground truth, so the metrics can be exercised without any dataset.

Run with ``python notebooks/02_synthetic_data_and_metrics.py``.
"""

# %%
import numpy as np

from truncpose.body_model import default_body_model, forward_kinematics, sample_pose
from truncpose.data import generate_records
from truncpose.metrics import aggregate_phi, mpjpe, oks_ap_ar, pa_mpjpe, pck_dataset, round1

# %% [markdown]
# One sampled pose: 24 joint rotations, 10 shape coefficients and a camera.

# %%
body = default_body_model()
p = sample_pose(0)
joints = forward_kinematics(p.rotmats, p.beta)[0]
print("camera (s, tx, ty):", np.round(p.cam[0], 3))
print("body height (m):   ", round(float(np.ptp(joints[:, 1])), 3))

# %% [markdown]
# A dataset is a list of records; each one holds the rendered image, the 17
# keypoints with visibility, the 24 joints and the generating parameters.

# %%
records = generate_records(32, seed=1, hw=(64, 64))
r = records[0]
print("image", r.image.shape, "keypoints", r.keypoints2d.shape, "joints", r.joints3d.shape)
print("visible keypoints per sample:", [int(x.keypoints2d[:, 2].sum()) for x in records[:8]])

# %%
# crude ASCII view of the first image: bright pixels are the figure
for row in r.image.mean(axis=0)[::4]:
    print("".join("#" if v > 0.5 else "+" if v > 0.2 else "." for v in row[::2]))

# %% [markdown]
# Scoring 2D predictions: add pixel noise to the ground truth and watch PCK
# and OKS-based AP fall.

# %%
gts = [x.keypoints2d for x in records]
rng = np.random.default_rng(2)
for sigma in (0.0, 1.0, 2.0, 4.0):
    preds = [g[:, :2] + rng.normal(0, sigma, (17, 2)) for g in gts]
    p05, _ = pck_dataset(preds, gts, 0.05)
    p10, _ = pck_dataset(preds, gts, 0.1)
    ap, ar = oks_ap_ar(preds, np.ones(len(preds)), gts)
    print(f"noise {sigma:3.1f} px: PCK@0.05 {p05:5.1f}  PCK@0.1 {p10:5.1f}  AP {ap:5.1f}  AR {ar:5.1f}")

# %% [markdown]
# 3D errors: MPJPE centres both skeletons on the root joint; PA-MPJPE first
# finds the best rotation, scale and translation, so a rotated copy scores
# zero while an error in the pose does not.

# %%
gt3 = records[3].joints3d
theta = 0.4
R = np.array([[np.cos(theta), 0, np.sin(theta)], [0, 1, 0], [-np.sin(theta), 0, np.cos(theta)]])
rotated = 1.1 * gt3 @ R.T + 0.2
print(f"rotated copy:  MPJPE {mpjpe(rotated, gt3):6.1f} mm  PA-MPJPE {pa_mpjpe(rotated, gt3):.2e} mm")
bent = gt3 + rng.normal(0, 0.02, gt3.shape)
print(f"noisy joints:  MPJPE {mpjpe(bent, gt3):6.1f} mm  PA-MPJPE {pa_mpjpe(bent, gt3):6.1f} mm")

# %% [markdown]
# Aggregate scores average each metric pair, then average over datasets.

# %%
print(round1(aggregate_phi("P2D", [(75.1, 80.4)])))
print(round1(aggregate_phi("M3D", [(82.2, 54.6), (51.5, 34.3)])))
