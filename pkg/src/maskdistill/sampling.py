"""Autoregressive sampling with repetition penalty, temperature, top-k and top-p.

Per step the raw logits go through, in order: repetition penalty over tokens already
generated (positive logits divided by the penalty, negative ones multiplied), division
by the temperature, top-k truncation, top-p truncation and renormalization. The
log-probability recorded for a drawn token is taken under that final distribution.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError
from .model import Model, log_softmax


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 1.0
    top_p: float = 0.9
    top_k: int = 50
    repetition_penalty: float = 1.05
    max_new_tokens: int = 8
    greedy: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive (use greedy for the T -> 0 limit)", "sampling.temperature")
        if not 0 < self.top_p <= 1:
            raise ConfigError("top_p must lie in (0, 1]", "sampling.top_p")
        if self.top_k < 1:
            raise ConfigError("top_k must be positive", "sampling.top_k")
        if self.repetition_penalty < 1:
            raise ConfigError("repetition_penalty must be >= 1", "sampling.repetition_penalty")
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens must be positive", "sampling.max_new_tokens")

    def to_dict(self) -> dict:
        return asdict(self)


def apply_repetition_penalty(logits: np.ndarray, generated: Sequence[int], penalty: float) -> np.ndarray:
    out = np.array(logits, dtype=np.float64)
    if penalty == 1.0 or not len(generated):
        return out
    seen = np.unique(np.asarray(generated, dtype=np.int64))
    vals = out[seen]
    out[seen] = np.where(vals > 0, vals / penalty, vals * penalty)
    return out


def filtered_log_probs(logits: np.ndarray, generated: Sequence[int], config: SamplingConfig) -> np.ndarray:
    """Log-probabilities of the post-filter next-token distribution (-inf where removed)."""
    z = apply_repetition_penalty(logits, generated, config.repetition_penalty)
    if config.greedy:
        out = np.full_like(z, -np.inf)
        out[int(np.argmax(z))] = 0.0
        return out
    z = z / config.temperature
    V = z.size
    if config.top_k < V:
        # stable order: equal logits keep the lower token id
        drop = np.argsort(-z, kind="stable")[config.top_k:]
        z[drop] = -np.inf
    logp = z - z.max()
    logp = logp - np.log(np.exp(logp).sum())
    if config.top_p < 1.0:
        order = np.argsort(-logp, kind="stable")
        probs = np.exp(logp[order])
        before = np.cumsum(probs) - probs
        drop = order[before >= config.top_p]
        logp[drop] = -np.inf
        logp = logp - np.log(np.exp(logp[np.isfinite(logp)]).sum())
    return logp


def _draw(logp: np.ndarray, rng: np.random.Generator) -> int:
    probs = np.exp(logp)
    cdf = np.cumsum(probs)
    k = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    k = min(k, logp.size - 1)
    while not np.isfinite(logp[k]):  # float edge at the top of the cdf
        k -= 1
    return k


def sample_batch(model: Model, prompt: Sequence[int], rngs: Sequence[np.random.Generator],
                 config: SamplingConfig, eos: int) -> list[tuple[list[int], list[float]]]:
    """Draw ``len(rngs)`` responses to one prompt; the sequences advance in lockstep."""
    if len(prompt) == 0:
        raise DomainError("cannot sample from an empty prompt")
    ctx = model.config.context_len
    if len(prompt) > ctx:
        raise DomainError(f"prompt of length {len(prompt)} exceeds context_len={ctx}")
    n = len(rngs)
    limit = min(config.max_new_tokens, ctx - len(prompt) + 1)
    seqs = np.tile(np.asarray(prompt, dtype=np.int64), (n, 1))
    tokens: list[list[int]] = [[] for _ in range(n)]
    logps: list[list[float]] = [[] for _ in range(n)]
    active = list(range(n))
    for step in range(limit):
        logits = model.forward(seqs[active])[:, -1, :]
        nxt = np.zeros(n, dtype=np.int64)
        for row, k in enumerate(active):
            lp = filtered_log_probs(logits[row], tokens[k], config)
            tok = int(np.argmax(lp)) if config.greedy else _draw(lp, rngs[k])
            tokens[k].append(tok)
            logps[k].append(float(lp[tok]))
            nxt[k] = tok
        active = [k for k in active if tokens[k][-1] != eos]
        if not active or step == limit - 1:
            break
        seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return list(zip(tokens, logps))


def rescore(model: Model, prompt: Sequence[int], tokens: Sequence[int], config: SamplingConfig) -> np.ndarray:
    """Teacher-forced post-filter log-probabilities of ``tokens`` after ``prompt``."""
    seq = np.asarray(list(prompt) + list(tokens)[:-1], dtype=np.int64)
    logits = model.forward(seq)[len(prompt) - 1:]
    return np.array([
        filtered_log_probs(logits[t], tokens[:t], config)[tokens[t]] for t in range(len(tokens))
    ])


def plain_log_probs(model: Model, prompt: Sequence[int], tokens: Sequence[int]) -> np.ndarray:
    """Unfiltered model log-probabilities of ``tokens`` under teacher forcing."""
    seq = np.asarray(list(prompt) + list(tokens)[:-1], dtype=np.int64)
    lp = log_softmax(model.forward(seq)[len(prompt) - 1:])
    return lp[np.arange(len(tokens)), np.asarray(tokens)]
