"""Divergences, rewards, group advantages and the combined training loss.

All divergences use natural logarithms. Loss gradients are formed analytically with
respect to the student's logits and then pushed through ``Model.backward``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError, StructuralError
from .model import Model, ParameterView, log_softmax

LN2 = math.log(2.0)
BETA = 0.1
ADV_EPS = 1e-8


# --- token-level divergences -------------------------------------------------

def _jsd_terms(logp: np.ndarray, logq: np.ndarray):
    """Per-row JSD and its gradient with respect to q (not yet through softmax)."""
    logm = np.logaddexp(logp, logq) - LN2
    p, q = np.exp(logp), np.exp(logq)
    kl_pm = np.where(p > 0, p * (logp - logm), 0.0).sum(axis=-1)
    kl_qm = np.where(q > 0, q * (logq - logm), 0.0).sum(axis=-1)
    value = np.clip(0.5 * kl_pm + 0.5 * kl_qm, 0.0, LN2)
    dq = np.where(q > 0, 0.5 * (logq - logm), 0.0)
    return value, dq


def _through_softmax(q: np.ndarray, dq: np.ndarray) -> np.ndarray:
    return q * (dq - (q * dq).sum(axis=-1, keepdims=True))


def jsd(p_logits, q_logits) -> float:
    """Jensen-Shannon divergence between softmax(p_logits) and softmax(q_logits)."""
    p_logits, q_logits = np.asarray(p_logits, float), np.asarray(q_logits, float)
    if p_logits.shape != q_logits.shape:
        raise StructuralError(f"vocab mismatch: {p_logits.shape} vs {q_logits.shape}")
    value, _ = _jsd_terms(log_softmax(p_logits), log_softmax(q_logits))
    return float(value)


def jsd_rows(p_logits, q_logits) -> np.ndarray:
    value, _ = _jsd_terms(log_softmax(p_logits), log_softmax(q_logits))
    return value


def kl_rows(logq: np.ndarray, logr: np.ndarray):
    """Exact KL(q || r) per row and its gradient with respect to q's logits."""
    q = np.exp(logq)
    diff = np.where(q > 0, logq - logr, 0.0)
    value = (q * diff).sum(axis=-1)
    return value, _through_softmax(q, diff)


@dataclass(frozen=True)
class DivergenceReport:
    per_token: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.per_token.mean())


# --- rewards and advantages -------------------------------------------------

def distill_reward(divergences: Sequence[float]) -> np.ndarray:
    """Reverse min-max normalization: lowest divergence -> 1.0, highest -> 0.0.

    A group with no spread gets 0.5 everywhere.
    """
    d = np.asarray(divergences, dtype=np.float64)
    if d.ndim != 1 or d.size < 2:
        raise DomainError("distill_reward needs a group of at least two divergences")
    d_min, d_max = d.min(), d.max()
    if d_max == d_min:
        return np.full(d.size, 0.5)
    out = (d_max - d) / (d_max - d_min)
    out[d == d_min] = 1.0
    out[d == d_max] = 0.0
    return out


@dataclass(frozen=True)
class RewardBundle:
    acc: float
    distill: float

    @property
    def total(self) -> float:
        return self.acc + self.distill

    def to_dict(self) -> dict:
        return {"acc": self.acc, "distill": self.distill, "total": self.total}


@dataclass(frozen=True)
class AdvantageGroup:
    rewards: np.ndarray
    advantages: np.ndarray


def advantages(rewards: Sequence[float], eps: float = ADV_EPS) -> AdvantageGroup:
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise DomainError("advantages need a group of at least two rewards")
    centred = r - r.mean()
    std = np.sqrt((centred**2).mean())
    # shifted constant groups leave rounding-level spread; treat as no spread
    if std <= 1e-12 * max(1.0, np.abs(r).max()):
        return AdvantageGroup(r, np.zeros_like(r))
    return AdvantageGroup(r, centred / (std + eps))


# --- teacher-forced batches --------------------------------------------------

@dataclass
class _Batch:
    """Padded (prompt + response[:-1]) inputs for a group sharing nothing but a vocab."""
    inputs: np.ndarray
    rows: list[np.ndarray]        # per record: indices of positions that predict response tokens
    targets: list[np.ndarray]

    @classmethod
    def build(cls, records) -> "_Batch":
        seqs = [list(r.prompt) + list(r.tokens)[:-1] for r in records]
        if any(len(r.prompt) == 0 or len(r.tokens) == 0 for r in records):
            raise StructuralError("records need a non-empty prompt and response")
        width = max(len(s) for s in seqs)
        pad = records[0].tokens[-1]
        inputs = np.array([s + [pad] * (width - len(s)) for s in seqs], dtype=np.int64)
        rows = [np.arange(len(r.prompt) - 1, len(r.prompt) - 1 + len(r.tokens)) for r in records]
        targets = [np.asarray(r.tokens, dtype=np.int64) for r in records]
        return cls(inputs, rows, targets)


def sequence_divergence(teacher: Model, student: Model, record) -> DivergenceReport:
    """Per-response-token JSD between teacher and student under teacher forcing."""
    batch = _Batch.build([record])
    t_logits = teacher.forward(batch.inputs)[0, batch.rows[0]]
    s_logits = student.forward(batch.inputs)[0, batch.rows[0]]
    if t_logits.shape[-1] != s_logits.shape[-1]:
        raise StructuralError("teacher and student vocabularies differ")
    return DivergenceReport(jsd_rows(t_logits, s_logits))


# --- losses -------------------------------------------------------------------

@dataclass
class ObjectiveResult:
    loss: float
    grads: ParameterView | None
    terms: dict = field(default_factory=dict)
    divergences: np.ndarray | None = None   # per-record mean JSD
    dlogits: np.ndarray | None = None


def final_objective(student: Model, teacher: Model | None, reference: Model | None, records,
                    advantages_: Sequence[float] | None = None, *, beta: float = BETA,
                    use_grpo: bool = True, use_jsd: bool = True,
                    compute_grads: bool = True, detached_logprobs=None) -> ObjectiveResult:
    """Group loss: GRPO term (ratio fixed at 1, KL to reference) plus mean sequence JSD.

    ``L = -1/G sum_j [ mean_t(ratio_jt * A_j) - beta * mean_t KL_jt ] + 1/G sum_j mean_t JSD_jt``
    where ``ratio = exp(log pi(token) - detached log pi(token))``: value 1, gradient
    ``grad log pi(token)``. ``detached_logprobs`` (per-record arrays) pins the detached
    copy to fixed values, which lets a finite-difference check see the ratio's slope.
    ``advantages_`` may also be a callable receiving the per-record mean divergences.
    """
    records = list(records)
    G = len(records)
    if G == 0:
        raise StructuralError("empty group")
    if use_grpo:
        if advantages_ is None:
            raise StructuralError("the GRPO term needs advantages")
        if reference is None:
            raise StructuralError("the GRPO term needs a reference policy")
    if use_jsd and teacher is None:
        raise StructuralError("the distillation term needs a teacher")

    batch = _Batch.build(records)
    s_logits, cache = student.forward(batch.inputs, return_cache=True)
    s_logq = log_softmax(s_logits)
    t_logp = log_softmax(teacher.forward(batch.inputs)) if teacher is not None else None
    r_logp = log_softmax(reference.forward(batch.inputs)) if use_grpo else None
    if t_logp is not None and t_logp.shape != s_logq.shape:
        raise StructuralError("teacher and student vocabularies differ")

    dlogits = np.zeros_like(s_logits)
    pg_sum = kl_sum = jsd_sum = 0.0
    divergences = np.zeros(G)
    for j, rows in enumerate(batch.rows):
        if t_logp is None:
            break
        logq = s_logq[j, rows]
        values, dq = _jsd_terms(t_logp[j, rows], logq)
        divergences[j] = values.mean()
        if use_jsd:
            jsd_sum += divergences[j] / G
            dlogits[j, rows] += _through_softmax(np.exp(logq), dq) / (G * len(rows))

    if use_grpo and callable(advantages_):
        # rewards may depend on the divergences just computed
        advantages_ = advantages_(divergences)
    if use_grpo and len(advantages_) != G:
        raise StructuralError("advantages must align one-to-one with the group's records")

    for j, (rows, tgt) in enumerate(zip(batch.rows, batch.targets)):
        T = len(rows)
        w = 1.0 / (G * T)
        logq = s_logq[j, rows]
        q = np.exp(logq)
        if use_grpo:
            a = float(advantages_[j])
            token_logq = logq[np.arange(T), tgt]
            old = token_logq if detached_logprobs is None else np.asarray(detached_logprobs[j])
            ratio = np.exp(token_logq - old)
            pg_sum += a * ratio.mean() / G
            onehot = np.zeros_like(q)
            onehot[np.arange(T), tgt] = 1.0
            dlogits[j, rows] += -a * w * ratio[:, None] * (onehot - q)
            kl_vals, dkl = kl_rows(logq, r_logp[j, rows])
            kl_sum += kl_vals.mean() / G
            dlogits[j, rows] += beta * w * dkl

    loss_grpo = -(pg_sum - beta * kl_sum) if use_grpo else 0.0
    loss = loss_grpo + (jsd_sum if use_jsd else 0.0)
    grads = student.backward(cache, dlogits) if compute_grads else None
    terms = {"loss_total": float(loss), "loss_grpo": float(loss_grpo),
             "loss_jsd": float(jsd_sum), "kl_ref": float(kl_sum)}
    return ObjectiveResult(float(loss), grads, terms, divergences, dlogits)


def token_logprobs(model: Model, records) -> list[np.ndarray]:
    """Unfiltered log pi(token) for each response position of each record."""
    batch = _Batch.build(list(records))
    logq = log_softmax(model.forward(batch.inputs))
    return [logq[j, rows, tgt] for j, (rows, tgt) in enumerate(zip(batch.rows, batch.targets))]


def grpo_loss(student: Model, reference: Model, records, advantages_, *, beta: float = BETA,
              compute_grads: bool = True, detached_logprobs=None) -> ObjectiveResult:
    return final_objective(student, None, reference, records, advantages_, beta=beta,
                           use_grpo=True, use_jsd=False, compute_grads=compute_grads,
                           detached_logprobs=detached_logprobs)


def group_rewards(judge_scores: Sequence[float], divergences: Sequence[float],
                  use_acc: bool = True, use_distill: bool = True) -> list[RewardBundle]:
    acc = [float(s) if use_acc else 0.0 for s in judge_scores]
    dist = distill_reward(divergences) if use_distill else np.zeros(len(acc))
    return [RewardBundle(a, float(d)) for a, d in zip(acc, dist)]
