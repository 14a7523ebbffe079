"""Synthetic question/answer task families, the shared word-level vocabulary, and evaluation."""

from __future__ import annotations

import hashlib
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError
from .judge import rule_judge
from .model import Model

FAMILIES = ("modular-arithmetic", "sequence-copy", "sorting", "parity")
_PREFIX = {"modular-arithmetic": "mod", "sequence-copy": "copy", "sorting": "sort", "parity": "par"}

LETTERS = tuple("abcdefgh")
NUMBERS = tuple(str(n) for n in range(20))
BOS, EOS = "<bos>", "<eos>"


class Vocab:
    def __init__(self, tokens):
        self.tokens = list(tokens)
        self.index = {tok: k for k, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigError("duplicate vocabulary entries")

    def __len__(self):
        return len(self.tokens)

    @property
    def bos(self) -> int:
        return self.index[BOS]

    @property
    def eos(self) -> int:
        return self.index[EOS]

    def encode(self, text: str) -> list[int]:
        try:
            return [self.index[w] for w in text.split()]
        except KeyError as exc:
            raise DomainError(f"word {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == self.eos:
                break
            words.append(self.tokens[i])
        return " ".join(words)


VOCAB = Vocab([BOS, EOS, "=", ":", "(", ")", "+", "mod", "copy", "sort", "parity", *NUMBERS, *LETTERS])


@dataclass(frozen=True)
class TaskInstance:
    question_id: str
    family: str
    prompt_text: str
    label: str
    prompt: tuple[int, ...] = field(repr=False)

    @property
    def label_tokens(self) -> list[int]:
        return VOCAB.encode(self.label)

    def to_dict(self, split: str | None = None) -> dict:
        doc = {"kind": "task", "question_id": self.question_id, "family": self.family,
               "prompt_text": self.prompt_text, "prompt": list(self.prompt), "label": self.label}
        if split is not None:
            doc["split"] = split
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TaskInstance":
        return cls(doc["question_id"], doc["family"], doc["prompt_text"], doc["label"], tuple(doc["prompt"]))


def _instance(family: str, question: str, label: str) -> TaskInstance:
    digest = hashlib.sha1(question.encode("utf-8")).hexdigest()[:10]
    prompt = (VOCAB.bos, *VOCAB.encode(question))
    return TaskInstance(f"{_PREFIX[family]}-{digest}", family, question, label, prompt)


def _draw(family: str, difficulty: int, rng: np.random.Generator) -> tuple[str, str]:
    if family == "modular-arithmetic":
        hi = min(5 * (difficulty + 1), len(NUMBERS))
        a, b = rng.integers(0, hi, size=2)
        m = int(rng.integers(2, 10))
        return f"( {a} + {b} ) mod {m} =", str((a + b) % m)
    if family == "sequence-copy":
        n = int(rng.integers(2, 4 + difficulty))
        seq = [LETTERS[k] for k in rng.integers(0, len(LETTERS), size=n)]
        return f"copy : {' '.join(seq)} =", " ".join(seq)
    if family == "sorting":
        n = int(rng.integers(2, 4 + difficulty))
        seq = rng.integers(0, 10, size=n)
        return f"sort : {' '.join(map(str, seq))} =", " ".join(map(str, sorted(seq)))
    if family == "parity":
        # label drawn first so the four classes are balanced
        target = int(rng.integers(0, 4))
        while True:
            n = int(rng.integers(4, 9 + 2 * difficulty))
            bits = rng.integers(0, 2, size=n)
            if bits.sum() % 4 == target:
                return f"parity : {' '.join(map(str, bits))} =", str(target)
    raise ConfigError(f"unknown task family {family!r}", "tasks.families")


def generate_tasks(family: str, count: int, difficulty: int = 1, seed: int = 0) -> list[TaskInstance]:
    """``count`` distinct instances of one family; a pure function of its arguments."""
    if family not in FAMILIES:
        raise ConfigError(f"unknown task family {family!r}", "tasks.families")
    if count < 1:
        raise DomainError("count must be at least 1")
    rng = np.random.default_rng([seed, FAMILIES.index(family), difficulty])
    seen, out, misses = set(), [], 0
    while len(out) < count:
        question, label = _draw(family, difficulty, rng)
        if question in seen:
            misses += 1
            if misses > 50 * count:
                raise DomainError(f"cannot draw {count} distinct {family} instances at difficulty {difficulty}")
            continue
        seen.add(question)
        out.append(_instance(family, question, label))
    return out


def make_splits(families, n_train: int, n_eval: int, difficulty: int = 1, seed: int = 0):
    """Disjoint train / held-out lists: each family's distinct draws are cut in two."""
    train, held_out = [], []
    for family in families:
        items = generate_tasks(family, n_train + n_eval, difficulty, seed)
        train += items[:n_train]
        held_out += items[n_train:]
    return train, held_out


def answer_format(instance: TaskInstance) -> tuple[list[int], int]:
    """Token alphabet and answer length implied by the prompt alone."""
    words = instance.prompt_text.split()
    if instance.family == "modular-arithmetic":
        return [VOCAB.index[str(k)] for k in range(int(words[-2]))], 1
    if instance.family == "sequence-copy":
        return [VOCAB.index[c] for c in LETTERS], len(words) - 3
    if instance.family == "sorting":
        return [VOCAB.index[str(k)] for k in range(10)], len(words) - 3
    return [VOCAB.index[str(k)] for k in range(4)], 1


def greedy_decode(model: Model, prompts, max_new_tokens: int, constraints=None) -> list[list[int]]:
    """Batched argmax decoding; equal-length prompts advance in lockstep.

    ``constraints`` optionally gives, per prompt, an (allowed ids, answer length) pair;
    decoding is then restricted to that alphabet and stops after that many tokens.
    """
    eos = VOCAB.eos
    outputs: list[list[int]] = [[] for _ in prompts]
    by_len = defaultdict(list)
    for k, p in enumerate(prompts):
        by_len[len(p)].append(k)
    for plen, idx in sorted(by_len.items()):
        seqs = np.array([prompts[k] for k in idx], dtype=np.int64)
        active = np.ones(len(idx), dtype=bool)
        limit = min(max_new_tokens, model.config.context_len - plen + 1)
        for step in range(limit):
            logits = model.forward(seqs[:, -model.config.context_len:])[:, -1, :]
            if constraints is not None:
                masked = np.full_like(logits, -np.inf)
                for row, k in enumerate(idx):
                    allowed, length = constraints[k]
                    if step < length:
                        masked[row, allowed] = logits[row, allowed]
                    else:
                        masked[row, eos] = 0.0
                logits = masked
            nxt = np.argmax(logits, axis=-1)
            for row, k in enumerate(idx):
                if active[row]:
                    outputs[k].append(int(nxt[row]))
                    if nxt[row] == eos:
                        active[row] = False
            if not active.any() or step == limit - 1:
                break
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return outputs


@dataclass(frozen=True)
class EvalReport:
    per_family: dict[str, float]
    counts: dict[str, int]
    overall: float

    def to_dict(self) -> dict:
        return {"overall": self.overall, "per_family": self.per_family, "counts": self.counts}


def evaluate(model: Model, instances, max_new_tokens: int = 8, constrain: bool = False) -> EvalReport:
    """Greedy-decode every instance and score it with the rule judge."""
    instances = list(instances)
    if not instances:
        raise DomainError("evaluation set is empty")
    constraints = [answer_format(t) for t in instances] if constrain else None
    outputs = greedy_decode(model, [t.prompt for t in instances], max_new_tokens, constraints)
    correct, counts = defaultdict(float), defaultdict(int)
    for inst, out in zip(instances, outputs):
        counts[inst.family] += 1
        correct[inst.family] += rule_judge(inst.prompt_text, VOCAB.decode(out), inst.label).score
    per_family = {f: correct[f] / counts[f] for f in counts}
    overall = sum(correct.values()) / sum(counts.values())
    return EvalReport(per_family, dict(counts), overall)
