"""Multi-seed comparison runs and paired effect sizes.

One seed shares a task split, one set of pre-trained teachers, one initial student and
one rollout store across every arm, so arms differ only in their training configuration.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import pipeline
from .config import RunConfig, load_config
from .rollout import RolloutStore
from .tasks import evaluate


@dataclass
class SeedOutcome:
    seed: int
    teacher_accuracy: dict[str, float]
    accuracy: dict[str, float]                       # held-out accuracy per arm
    per_family: dict[str, dict[str, float]] = field(default_factory=dict)
    seconds: float = 0.0


@dataclass(frozen=True)
class PairedEffect:
    """Per-seed differences ``a - b``."""
    diffs: tuple[float, ...]

    @property
    def mean(self) -> float:
        return float(np.mean(self.diffs))

    @property
    def sd(self) -> float:
        return float(np.std(self.diffs, ddof=1)) if len(self.diffs) > 1 else math.nan

    @property
    def stderr(self) -> float:
        return self.sd / math.sqrt(len(self.diffs))

    @property
    def cohens_dz(self) -> float:
        return self.mean / self.sd if self.sd > 0 else math.nan

    @property
    def wins(self) -> int:
        return sum(d > 0 for d in self.diffs)

    def describe(self) -> str:
        return (f"mean {self.mean:+.4f} (se {self.stderr:.4f}, d_z {self.cohens_dz:+.2f}, "
                f"positive in {self.wins}/{len(self.diffs)} seeds)")


def paired(outcomes: Sequence[SeedOutcome], a: str, b: str) -> PairedEffect:
    return PairedEffect(tuple(o.accuracy[a] - o.accuracy[b] for o in outcomes))


def mean_accuracy(outcomes: Sequence[SeedOutcome], arm: str) -> float:
    return float(np.mean([o.accuracy[arm] for o in outcomes]))


def run_seed(base: RunConfig, arms: Mapping[str, RunConfig], seed: int, store_dir=None,
             log: Callable[[str], None] | None = None) -> SeedOutcome:
    """Train every arm from the same student and store; ``base`` lists every teacher needed."""
    started = time.time()
    say = log or (lambda _msg: None)
    train, held_out = pipeline.make_tasks(base)
    teachers = {tid: pipeline.train_teacher(base, tid, train) for tid in base.curriculum}
    teacher_acc = {tid: evaluate(m, held_out).overall for tid, m in teachers.items()}
    say(f"seed {seed}: teachers {teacher_acc}")
    student = pipeline.init_student(base, train)
    with tempfile.TemporaryDirectory(dir=store_dir) as tmp:
        store = RolloutStore(Path(tmp))
        pipeline.generate_store(pipeline.with_mode(base, "masters"), train, teachers, student, store)
        accuracy, per_family = {}, {}
        for name, cfg in arms.items():
            state = pipeline.train(cfg, train, held_out, student, teachers, store)
            report = evaluate(state.student, held_out)
            accuracy[name], per_family[name] = report.overall, report.per_family
            say(f"seed {seed}: {name} {report.overall:.4f}")
    return SeedOutcome(seed, teacher_acc, accuracy, per_family, time.time() - started)


def arm_configs(base_path, seed: int, arms: Mapping[str, tuple[str | Path, Sequence[str]]],
                overrides: Sequence[str] = ()) -> tuple[RunConfig, dict[str, RunConfig]]:
    """``arms`` maps a name to (config file, extra ``key=value`` overrides).

    ``base_path`` must list every teacher any arm uses; it drives teacher training and the store.
    """
    common = [f"seed={seed}", *overrides]
    base = load_config(base_path, common)
    out = {name: load_config(path, common + list(extra)) for name, (path, extra) in arms.items()}
    for name, cfg in out.items():
        unknown = set(cfg.curriculum) - set(base.curriculum)
        if unknown:
            raise ValueError(f"arm {name} uses teachers {sorted(unknown)} missing from the base config")
    return base, out
