"""Staged mask-ratio schedule and the teacher-size curriculum.

A sweep over ``I`` iterations visits ``M = r_max / s + 1`` stages whose ratios
decrease by ``s`` from ``r_max`` to exactly 0. Iteration ``i`` (1-based) belongs to
stage ``min(floor((i - 1) * M / I), M - 1)``, which keeps stage lengths within one
iteration of each other and makes the final stage the unmasked teacher.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError


def stage_count(r_max: float, s: float) -> int:
    if r_max < 0 or r_max > 1:
        raise ConfigError(f"r_max must lie in [0, 1], got {r_max}", "r_max")
    if r_max == 0:
        return 1
    if s <= 0:
        raise ConfigError(f"decrement must be positive, got {s}", "s")
    steps = r_max / s
    if abs(steps - round(steps)) > 1e-9:
        raise ConfigError(f"r_max={r_max} is not an integer multiple of s={s}", "r_max")
    return int(round(steps)) + 1


@dataclass(frozen=True)
class Stage:
    index: int
    ratio: float
    first: int
    last: int

    @property
    def length(self) -> int:
        return self.last - self.first + 1


@dataclass(frozen=True)
class StageSchedule:
    r_max: float
    s: float
    iterations: int

    def __post_init__(self):
        if self.iterations < self.num_stages:
            raise ConfigError(
                f"{self.iterations} iterations cannot cover {self.num_stages} stages", "iterations"
            )

    @property
    def num_stages(self) -> int:
        return stage_count(self.r_max, self.s)

    def stage_ratio(self, stage: int) -> float:
        # counted up from zero so the last stage is exactly 0.0
        return round((self.num_stages - 1 - stage) * self.s, 12) if self.r_max else 0.0

    def stage_of(self, i: int) -> int:
        if not 1 <= i <= self.iterations:
            raise DomainError(f"iteration {i} outside [1, {self.iterations}]")
        M = self.num_stages
        return min((i - 1) * M // self.iterations, M - 1)

    @property
    def stages(self) -> list[Stage]:
        M, I = self.num_stages, self.iterations
        # first iteration of stage k is the smallest i with (i - 1) * M >= k * I
        firsts = [-(-k * I // M) + 1 for k in range(M)] + [I + 1]
        return [Stage(k, self.stage_ratio(k), firsts[k], firsts[k + 1] - 1) for k in range(M)]


def ratio_at(schedule: StageSchedule, i: int) -> float:
    return schedule.stage_ratio(schedule.stage_of(i))


@dataclass(frozen=True)
class PlanEntry:
    iteration: int
    teacher_id: str
    ratio: float
    stage: int
    shard: int


def stage_plan(schedules: Sequence[StageSchedule], curriculum: Sequence[str],
               total_iterations: int | None = None) -> list[PlanEntry]:
    """Concatenate one full sweep per curriculum teacher into a global iteration table.

    The shard of an entry is the stage index within its teacher's sweep.
    """
    if not curriculum:
        raise ConfigError("teacher curriculum is empty", "teachers")
    if len(schedules) != len(curriculum):
        raise ConfigError("one schedule per curriculum teacher is required", "teachers")
    budget = sum(sch.iterations for sch in schedules)
    if total_iterations is not None and budget != total_iterations:
        raise ConfigError(f"teacher budgets sum to {budget}, expected {total_iterations}", "iterations")
    table, offset = [], 0
    for teacher_id, sch in zip(curriculum, schedules):
        for st in sch.stages:
            for i in range(st.first, st.last + 1):
                table.append(PlanEntry(offset + i, teacher_id, st.ratio, st.index, st.index))
        offset += sch.iterations
    return table


def shard_questions(question_ids: Sequence[str], num_shards: int, seed: int) -> list[list[str]]:
    """Seeded uniform shuffle split into ``num_shards`` contiguous shards of near-equal size."""
    order = np.random.default_rng(seed).permutation(len(question_ids))
    shuffled = [question_ids[k] for k in order]
    bounds = [math.floor(k * len(shuffled) / num_shards) for k in range(num_shards + 1)]
    return [shuffled[bounds[k]:bounds[k + 1]] for k in range(num_shards)]


def write_plan_csv(path, table: Sequence[PlanEntry]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "teacher_id", "ratio", "shard"])
        for e in table:
            writer.writerow([e.iteration, e.teacher_id, f"{e.ratio:g}", e.shard])
