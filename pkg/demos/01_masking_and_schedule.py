# %% [markdown]
# # Masking a teacher, then un-masking it stage by stage
#
# A teacher is weakened by zeroing the smallest-magnitude fraction `r` of every weight
# matrix. Training starts from the most heavily masked teacher and walks the ratio
# down to zero in equal stages.

# %%
import numpy as np

from maskdistill import Model, ModelConfig
from maskdistill.masking import apply_mask, build_mask, masked_fraction
from maskdistill.schedule import StageSchedule, ratio_at
from maskdistill.tasks import VOCAB

teacher = Model(ModelConfig(len(VOCAB), context_len=20, n_layers=2, d_model=32, n_heads=2, seed=0))
print(f"teacher: {teacher.num_params} parameters")

# %% [markdown]
# Each matrix gets its own threshold, so every layer loses (almost exactly) the same share.
# Vectors such as biases and LayerNorm gains are left alone.

# %%
for ratio in (0.05, 0.2, 0.4):
    plan = build_mask(teacher.params, ratio)
    per_layer, overall = masked_fraction(plan)
    spread = max(per_layer.values()) - min(per_layer.values())
    print(f"r={ratio:.2f}: {len(per_layer)} matrices, overall {overall:.4f}, per-layer spread {spread:.5f}")

# %% [markdown]
# Masks nest: everything removed at 0.05 is also removed at 0.2. Removing the mask
# (ratio 0) gives back the original weights untouched.

# %%
small, large = build_mask(teacher.params, 0.05), build_mask(teacher.params, 0.2)
nested = all(not np.any(~a.mask & b.mask) for a, b in zip(small.layers, large.layers))
print("nested:", nested)
print("ratio 0 restores the teacher:", apply_mask(teacher.params, build_mask(teacher.params, 0.0)).equal(teacher.params))

# %% [markdown]
# The schedule: with `r_max = 0.2` and step `s = 0.05` there are five stages.
# 1003 iterations split into stages whose lengths differ by at most one.

# %%
sched = StageSchedule(r_max=0.2, s=0.05, iterations=1003)
for stage in sched.stages:
    print(f"stage {stage.index}: ratio {stage.ratio:.2f}, iterations {stage.first}-{stage.last} ({stage.length})")
print("ratio at iteration 600:", ratio_at(sched, 600))
