# %% [markdown]
# # Does mask-progressive distillation help a small student?
#
# Each seed trains fresh teachers, then trains the same random-init student four ways
# from one shared response store:
#
# * `naive`: ground-truth labels, divergence to the unmasked teacher
# * `progressive`: generated groups, teacher mask decaying 0.2 to 0
# * `masters`: progressive plus accuracy and distillation rewards
# * `curriculum`: masters with a mid-sized teacher's sweep before the large one's
#
# Usage: `python demos/04_directional_experiment.py [n_seeds]` (about ten minutes per seed).

# %%
import sys
import time
from pathlib import Path

from maskdistill.experiments import arm_configs, mean_accuracy, paired, run_seed

root = Path(__file__).resolve().parent.parent / "configs"
toy, curriculum = root / "toy.yaml", root / "toy-curriculum.yaml"
arms = {
    "naive": (toy, ["train.mode=naive"]),
    "progressive": (toy, ["train.mode=progressive"]),
    "masters": (toy, ["train.mode=masters"]),
    "curriculum": (curriculum, ["train.mode=masters"]),
}
n_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 5

# %%
outcomes = []
for seed in range(n_seeds):
    start = time.time()
    base, cfgs = arm_configs(curriculum, seed, arms)
    outcomes.append(run_seed(base, cfgs, seed, log=print))
    print(f"seed {seed} took {time.time() - start:.0f}s")

# %% [markdown]
# Paired differences per seed. With binary-looking rewards (teacher answers right,
# initial-student answers wrong) the reward term mostly pushes down the student's own
# samples, which is worth comparing against the plain progressive arm.

# %%
for arm in arms:
    print(f"{arm:12s} mean held-out accuracy {mean_accuracy(outcomes, arm):.4f}")
for a, b in [("progressive", "naive"), ("masters", "naive"), ("masters", "progressive"), ("curriculum", "masters")]:
    print(f"{a} - {b}: {paired(outcomes, a, b).describe()}")
