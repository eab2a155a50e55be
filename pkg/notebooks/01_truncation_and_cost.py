"""
Truncating a hierarchical encoder
=================================

A four-stage pyramid encoder halves its resolution and doubles its width at
every stage. The pose and mesh heads expect features at 1/16 of the input, so
a truncated encoder needs an adapter: a stride-2 deconvolution after stage 4,
nothing after stage 3, a stride-2 convolution after stage 2.

This walk-through builds the three variants of one encoder, checks the
feature shapes they hand to the head, and compares their cost.

Run with ``python notebooks/01_truncation_and_cost.py``.
"""

# %%
import numpy as np

from truncpose import tensor as T
from truncpose.cost import cost_report, sweep
from truncpose.encoders import load_encoder_spec
from truncpose.tensor import Tensor
from truncpose.truncation import adapter_spec, all_hierarchical_names, parse_model_name, truncate

# %% [markdown]
# The Swin-like base encoder: per-stage widths and depths.

# %%
spec = load_encoder_spec("Swin", "B")
print("stage dims  ", spec.stage_dims)
print("stage depths", spec.stage_depths)

# %% [markdown]
# Each truncation point picks its adapter by rule. The output width always
# matches stage 3.

# %%
for k in (4, 3, 2):
    a = adapter_spec(spec, k)
    print(f"S{k}: {a.kind:<9} {a.in_channels:>5} -> {a.out_channels} channels, stride {a.stride}")

# %% [markdown]
# Running the toy-size versions shows the shape contract: whatever the cut,
# the head sees a 1/16-resolution map with stage-3 width.

# %%
toy = load_encoder_spec("Swin", "B", "toy")
x = Tensor(np.random.default_rng(0).uniform(size=(1, 3, 64, 64)))
for k in (4, 3, 2):
    enc = truncate(toy, k, (64, 64)).init_weights(np.random.default_rng(k))
    with T.no_grad():
        out = enc(x)
    print(f"S{k}: features {out.tensor.shape}, reduction 1/{out.reduction}")

# %% [markdown]
# Costs at the full 256x192 input. FLOPs count two per multiply-add.

# %%
for name in ("SwinPose-B-S4", "SwinPose-B-S3", "SwinPose-B-S2"):
    rep = cost_report(name)
    parts = ", ".join(f"{c} {v['params'] / 1e6:.2f} M" for c, v in rep.per_component.items())
    print(f"{name:<15} {rep.params_m:7.2f} M params {rep.gflops:7.2f} GFLOPs  ({parts})")

# %% [markdown]
# Dropping stage 4 removes most of the parameters but only a small share of
# the compute, since stage 4 runs on the smallest map. Dropping stage 3 as
# well removes most of the compute. The sweep writes the same numbers for
# every family, size and cut, with deltas against the uncut model.

# %%
csv_text, errors = sweep(all_hierarchical_names("HPE"))
print(csv_text)
assert not errors
print(parse_model_name("VMHMR2.0-T-S2"))
