"""
Training toy models end to end
==============================

The toy profile shrinks every encoder to a few thousand parameters and a
64x64 input so the whole loop runs on a laptop CPU in about a minute. We
train a truncated pose model and a truncated mesh model on the same
synthetic set, evaluate both, and print the accuracy/compute table.

Run with ``python notebooks/03_train_and_evaluate.py``. Set ``STEPS`` higher
for sharper results (the acceptance suite uses 2000 and 3000).
"""

# %%
from truncpose.config import DataConfig, ExperimentConfig, OptimConfig
from truncpose.data import generate_records
from truncpose.evaluate import evaluate, tradeoff_table
from truncpose.models import build_model, init_model
from truncpose.train import train

STEPS = 200
HW = (64, 64)
records = generate_records(64, seed=0, hw=HW)


def config(model, lr):
    return ExperimentConfig(model, "toy", 0, "runs/notebook", DataConfig(64, *HW),
                            OptimConfig(lr=lr, steps=STEPS, batch_size=16, log_every=0))


# %% [markdown]
# A pose model cut after stage 3: the head regresses one heatmap per keypoint.

# %%
pose_cfg = config("SwinPose-T-S3", 2e-3)
pose = train(pose_cfg, records=records, save=False)
print("heatmap loss", f"{pose.losses[0]:.4g} -> {pose.losses[-1]:.4g}")
pose_report = evaluate(pose.model, records)
print(pose_report.per_dataset)

# %% [markdown]
# A mesh model cut after stage 2: the transformer decoder regresses joint
# rotations, shape and camera. Compare against the untrained starting point.

# %%
mesh_cfg = config("VMHMR2.0-T-S2", 3e-4)
start = evaluate(init_model(build_model(mesh_cfg.model, "toy", HW), [0, 1]), records)
mesh = train(mesh_cfg, records=records, save=False)
mesh_report = evaluate(mesh.model, records)
print(f"MPJPE {start.per_dataset['synthetic']['MPJPE']:.1f} -> {mesh_report.per_dataset['synthetic']['MPJPE']:.1f} mm")

# %% [markdown]
# The trade-off table lists GFLOPs, the task score and the parameter count.
# Costs here are for the toy models.

# %%
print(tradeoff_table([pose_report, mesh_report]))
print("seeded runs repeat exactly:", train(pose_cfg, records=records, save=False).losses == pose.losses)
