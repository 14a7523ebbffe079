# %% [markdown]
# # The whole pipeline in one process, at smoke-test size
#
# Tasks, a pre-trained teacher, masked stages, an offline store of response groups,
# judging, then the three training modes side by side. The command-line tool runs the
# same steps with every artifact written to disk.

# %%
import tempfile
from collections import Counter
from pathlib import Path

from maskdistill import pipeline
from maskdistill.config import load_config
from maskdistill.rollout import RolloutStore
from maskdistill.tasks import evaluate

cfg = load_config(Path(__file__).resolve().parent.parent / "configs" / "smoke.yaml")
train, held_out = pipeline.make_tasks(cfg)
print(f"{len(train)} training questions, {len(held_out)} held out")

# %%
teacher = pipeline.train_teacher(cfg, "large", train)
student = pipeline.init_student(cfg, train)
print("teacher held-out accuracy:", evaluate(teacher, held_out).overall)
print("student held-out accuracy:", evaluate(student, held_out).overall)
print("masked stages:", pipeline.staged_ratios(cfg, "large"))

# %% [markdown]
# Every stage gets its own shard of questions. Each group mixes four teacher answers
# (from that stage's masked teacher) with four answers from the initial student.

# %%
store = RolloutStore(tempfile.mkdtemp())
n = pipeline.generate_store(cfg, train, {"large": teacher}, student, store)
print(n, "responses;", Counter((r.source, r.judge_score) for r in store.records()))

# %%
for mode in ("naive", "progressive", "masters"):
    state = pipeline.train(pipeline.with_mode(cfg, mode), train, held_out, student, {"large": teacher}, store)
    last = state.metrics[-1]
    print(f"{mode:12s} loss {last['loss_total']:+.4f}  held-out accuracy {last['eval_accuracy']:.3f}")
