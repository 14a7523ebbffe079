"""Supervised next-token training on task labels, used to produce teachers and warm students."""

from __future__ import annotations

import logging
import math
from typing import Sequence

import numpy as np

from .errors import NumericError
from .model import Model, log_softmax
from .optim import AdamW, OptimizerConfig
from .tasks import VOCAB, TaskInstance

log = logging.getLogger(__name__)


def label_batch(tasks: Sequence[TaskInstance]):
    """Right-padded inputs, targets and a mask selecting answer (+ end token) positions."""
    seqs = [list(t.prompt) + t.label_tokens + [VOCAB.eos] for t in tasks]
    width = max(len(s) for s in seqs) - 1
    inputs = np.full((len(seqs), width), VOCAB.eos, dtype=np.int64)
    targets = np.full((len(seqs), width), VOCAB.eos, dtype=np.int64)
    mask = np.zeros((len(seqs), width))
    for k, (t, s) in enumerate(zip(tasks, seqs)):
        n = len(s) - 1
        inputs[k, :n] = s[:-1]
        targets[k, :n] = s[1:]
        mask[k, len(t.prompt) - 1:n] = 1.0
    return inputs, targets, mask


def cross_entropy_step(model: Model, inputs, targets, mask):
    """Mean answer-token cross-entropy and its parameter gradient."""
    logits, cache = model.forward(inputs, return_cache=True)
    logp = log_softmax(logits)
    B, T = targets.shape
    picked = logp[np.arange(B)[:, None], np.arange(T)[None, :], targets]
    total = mask.sum()
    loss = float(-(picked * mask).sum() / total)
    dlogits = np.exp(logp)
    dlogits[np.arange(B)[:, None], np.arange(T)[None, :], targets] -= 1.0
    dlogits *= (mask / total)[..., None]
    return loss, model.backward(cache, dlogits)


def pretrain(model: Model, tasks: Sequence[TaskInstance], steps: int, batch_size: int = 64,
             learning_rate: float = 3e-3, weight_decay: float = 0.01, seed: int = 0,
             warmup: int = 100, log_every: int = 500) -> list[float]:
    """Train ``model`` in place with AdamW, linear warm-up and cosine decay to 10%."""
    if steps <= 0:
        return []
    rng = np.random.default_rng(seed)
    opt = AdamW(model.params, OptimizerConfig(learning_rate, 0.9, 0.98, weight_decay, 1e-8))
    losses = []
    for step in range(steps):
        idx = rng.choice(len(tasks), size=min(batch_size, len(tasks)), replace=False)
        loss, grads = cross_entropy_step(model, *label_batch([tasks[k] for k in idx]))
        if not math.isfinite(loss):
            raise NumericError(f"pretraining loss became non-finite at step {step}")
        warm = min(1.0, (step + 1) / max(1, warmup))
        decay = 0.1 + 0.45 * (1 + math.cos(math.pi * step / steps))
        opt.step(model.params, grads, lr=learning_rate * warm * decay)
        losses.append(loss)
        if log_every and (step + 1) % log_every == 0:
            log.info("pretrain step %d/%d loss %.4f", step + 1, steps, float(np.mean(losses[-log_every:])))
    return losses
