# %% [markdown]
# # Rewards, advantages and the combined loss for one response group
#
# A group holds several responses to the same question. Each response earns an
# accuracy reward from the judge and a distillation reward from how closely the
# student already matches the (masked) teacher on it.

# %%
import math

import numpy as np

from maskdistill import Model, ModelConfig
from maskdistill.judge import rule_judge
from maskdistill.objectives import advantages, distill_reward, final_objective, group_rewards, jsd
from maskdistill.rollout import ResponseRecord
from maskdistill.tasks import VOCAB, generate_tasks

# %% [markdown]
# Jensen-Shannon divergence is symmetric and bounded by ln 2.

# %%
p, q = np.log([0.7, 0.3]), np.log([0.4, 0.6])
print(f"JSD = {jsd(p, q):.6f}, reversed {jsd(q, p):.6f}, ln 2 = {math.log(2):.6f}")

# %% [markdown]
# The distillation reward reverses a min-max normalization: the lowest divergence in
# the group scores 1, the highest scores 0. Advantages are the group's reward z-scores.

# %%
divergences = [0.1, 0.3, 0.5, 0.3]
print("distill reward:", distill_reward(divergences))
bundles = group_rewards([1, 0, 1, 1], divergences)
print("total reward:  ", [b.total for b in bundles])
print("advantages:    ", np.round(advantages([b.total for b in bundles]).advantages, 4))

# %% [markdown]
# Now a real group: one question, four answers scored by the rule judge, and the
# loss of a random student against a random teacher.

# %%
task = generate_tasks("sorting", 1, seed=3)[0]
answers = [task.label, task.label, "1 2", "9 9 9"]
records = []
for k, text in enumerate(answers):
    tokens = tuple(VOCAB.encode(text)) + (VOCAB.eos,)
    score = rule_judge(task.prompt_text, text, task.label).score
    records.append(ResponseRecord(f"r{k}", task.question_id, "teacher", tokens, (0.0,) * len(tokens),
                                  prompt=task.prompt, judge_score=score))
print(task.prompt_text, "->", [(a, r.judge_score) for a, r in zip(answers, records)])

cfg = ModelConfig(len(VOCAB), 20, 1, 16, 2, seed=1)
student, teacher = Model(cfg), Model(ModelConfig(len(VOCAB), 20, 2, 32, 2, seed=2))


def adv(divs):
    return advantages([b.total for b in group_rewards([r.judge_score for r in records], divs)]).advantages


result = final_objective(student, teacher, student, records, adv)
print({k: round(v, 5) for k, v in result.terms.items()})
print("per-response JSD:", np.round(result.divergences, 4))
