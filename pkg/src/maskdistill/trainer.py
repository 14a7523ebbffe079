"""The distillation loop: schedule walk, masked teachers, rewards, and AdamW updates."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .checkpoint import save_model
from .config import RunConfig
from .errors import ConfigError, NumericError
from .masking import apply_mask, build_mask
from .model import Model
from .objectives import advantages, final_objective, group_rewards
from .optim import AdamW
from .rollout import GenerationGroup, label_record
from .schedule import PlanEntry, StageSchedule, shard_questions, stage_plan
from .tasks import TaskInstance, evaluate

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["iteration", "teacher_id", "ratio", "loss_total", "loss_grpo", "loss_jsd", "kl_ref",
                  "mean_reward_acc", "mean_reward_distill", "eval_accuracy"]


@dataclass
class TrainState:
    student: Model
    optimizer: AdamW
    reference: Model
    iteration: int = 0
    metrics: list[dict] = field(default_factory=list)


def build_plan(cfg: RunConfig) -> list[PlanEntry]:
    schedules = [StageSchedule(cfg.effective_r_max(t), cfg.s, t.iterations) for t in cfg.teachers]
    return stage_plan(schedules, cfg.curriculum, cfg.total_iterations)


def stage_shards(cfg: RunConfig, teacher_id: str, question_ids) -> list[list[str]]:
    """The per-stage question shards the trainer draws from for one teacher."""
    teacher = cfg.teacher(teacher_id)
    return shard_questions(sorted(question_ids), cfg.stage_count(teacher), cfg.derived_seed("shards", teacher_id))


def masked_teacher_loader(base_teachers: Mapping[str, Model]) -> Callable[[str, float], Model]:
    """Build masked teachers in memory from unmasked ones, caching per (teacher, ratio)."""
    cache: dict[tuple[str, float], Model] = {}

    def load(teacher_id: str, ratio: float) -> Model:
        key = (teacher_id, ratio)
        if key not in cache:
            if teacher_id not in base_teachers:
                raise ConfigError(f"no checkpoint for teacher {teacher_id!r}", "teachers")
            base = base_teachers[teacher_id]
            cache[key] = base.with_params(apply_mask(base.params, build_mask(base.params, ratio)))
        return cache[key]

    return load


class Trainer:
    def __init__(self, cfg: RunConfig, train_tasks: Sequence[TaskInstance], eval_tasks: Sequence[TaskInstance],
                 student: Model, teacher_loader: Callable[[str, float], Model],
                 groups: Mapping[tuple[str, int, str], GenerationGroup] | None = None):
        self.cfg = cfg
        self.tasks = {t.question_id: t for t in train_tasks}
        self.eval_tasks = list(eval_tasks)
        self.load_teacher = teacher_loader
        self.groups = groups or {}
        self.plan = build_plan(cfg)
        self.use_rewards = cfg.use_rewards
        self.data_source = cfg.data_source
        if self.use_rewards and self.data_source == "labels":
            raise ConfigError("reward feedback needs generated response groups", "train.data_source")
        self.shards = {t.id: stage_shards(cfg, t.id, self.tasks) for t in cfg.teachers}
        student = student.with_params(student.params.copy())
        self.state = TrainState(student, AdamW(student.params, cfg.optimizer),
                                student.with_params(student.params.copy()))
        self._visits: dict[tuple[str, int], int] = {}
        self._orders: dict[tuple[str, int], np.ndarray] = {}
        if self.data_source == "generated":
            self.check_store()

    # --- data -------------------------------------------------------------

    def missing_groups(self) -> list[tuple[str, int, str]]:
        missing = []
        for teacher_id, shards in self.shards.items():
            for stage, shard in enumerate(shards):
                for qid in shard:
                    group = self.groups.get((teacher_id, stage, qid))
                    if group is None or group.size != self.cfg.group_size:
                        missing.append((teacher_id, stage, qid))
        return missing

    def check_store(self) -> None:
        missing = self.missing_groups()
        if missing:
            stages = sorted({(t, s) for t, s, _ in missing})
            listing = ", ".join(f"{t}/stage{s}" for t, s in stages)
            raise ConfigError(
                f"rollout store is incomplete: {len(missing)} (question, stage) groups missing "
                f"in {listing}; first missing: {missing[:3]}", "store")
        if self.use_rewards:
            unjudged = [r.record_id for g in self.groups.values() for r in g.records if r.judge_score is None]
            if unjudged:
                raise ConfigError(f"{len(unjudged)} records are not judged (e.g. {unjudged[0]})", "store")

    def question_for(self, entry: PlanEntry) -> str:
        key = (entry.teacher_id, entry.shard)
        shard = self.shards[entry.teacher_id][entry.shard]
        if key not in self._orders:
            rng = np.random.default_rng(self.cfg.derived_seed("order", entry.teacher_id, str(entry.shard)))
            self._orders[key] = rng.permutation(len(shard))
        k = self._visits.get(key, 0)
        self._visits[key] = k + 1
        return shard[self._orders[key][k % len(shard)]]

    def records_for(self, entry: PlanEntry, qid: str):
        if self.data_source == "labels":
            return [label_record(self.tasks[qid], entry.teacher_id, entry.stage, entry.ratio)]
        return list(self.groups[(entry.teacher_id, entry.stage, qid)].records)

    # --- one update -------------------------------------------------------

    def _group_objective(self, entry: PlanEntry, teacher: Model, qid: str):
        st, obj = self.state, self.cfg.objective
        records = self.records_for(entry, qid)
        seen = {}

        def advantage_fn(divergences):
            bundles = group_rewards([r.judge_score for r in records], divergences,
                                    obj.use_acc_reward, obj.use_distill_reward)
            seen["acc"] = float(np.mean([b.acc for b in bundles]))
            seen["distill"] = float(np.mean([b.distill for b in bundles]))
            return advantages([b.total for b in bundles], obj.adv_eps).advantages

        result = final_objective(
            st.student, teacher, st.reference if self.use_rewards else None, records,
            advantage_fn if self.use_rewards else None, beta=obj.beta, use_grpo=self.use_rewards,
        )
        if not seen:
            scores = [r.judge_score for r in records if r.judge_score is not None]
            seen = {"acc": float(np.mean(scores)) if scores else math.nan, "distill": math.nan}
        return result, seen

    def train_step(self, entry: PlanEntry) -> dict:
        """One optimizer update from ``train.groups_per_step`` groups of the scheduled shard."""
        st = self.state
        teacher = self.load_teacher(entry.teacher_id, entry.ratio)
        n = self.cfg.train.groups_per_step
        grads, terms, acc, dist = None, {}, [], []
        for _ in range(n):
            qid = self.question_for(entry)
            where = f"iteration {entry.iteration} (teacher {entry.teacher_id}, ratio {entry.ratio}, question {qid})"
            try:
                result, seen = self._group_objective(entry, teacher, qid)
            except NumericError as exc:
                raise NumericError(f"{exc} at {where}") from None
            if not math.isfinite(result.loss):
                raise NumericError(f"non-finite loss at {where}")
            if n == 1:
                grads = result.grads
            elif grads is None:
                grads = result.grads.map(lambda g: g / n)
            else:
                for name, g in result.grads.items():
                    grads[name] += g / n
            for key, value in result.terms.items():
                terms[key] = terms.get(key, 0.0) + value / n
            acc.append(seen["acc"])
            dist.append(seen["distill"])
        st.optimizer.step(st.student.params, grads)
        st.iteration += 1
        return {"iteration": entry.iteration, "teacher_id": entry.teacher_id, "ratio": entry.ratio,
                **terms, "mean_reward_acc": float(np.mean(acc)),
                "mean_reward_distill": float(np.mean(dist)), "eval_accuracy": math.nan}

    def _maybe_refresh_reference(self, prev: PlanEntry | None, entry: PlanEntry) -> None:
        policy = self.cfg.objective.ref_refresh
        if prev is None or policy == "never":
            return
        changed = (prev.teacher_id != entry.teacher_id) or (policy == "stage" and prev.stage != entry.stage)
        if changed:
            st = self.state
            st.reference = st.student.with_params(st.student.params.copy())

    def run(self, progress: Callable[[dict], None] | None = None) -> TrainState:
        every = self.cfg.train.eval_every
        prev = None
        for entry in self.plan[self.state.iteration:]:
            self._maybe_refresh_reference(prev, entry)
            row = self.train_step(entry)
            last = entry.iteration == len(self.plan)
            if self.eval_tasks and (last or (every and entry.iteration % every == 0)):
                row["eval_accuracy"] = evaluate(self.state.student, self.eval_tasks,
                                                self.cfg.rollout.sampling.max_new_tokens).overall
            self.state.metrics.append(row)
            if progress:
                progress(row)
            prev = entry
        return self.state


def _fmt(value) -> str:
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


def metrics_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def write_outputs(out_dir, state: TrainState) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "final.ckpt"
    save_model(ckpt, state.student, extra={"iteration": state.iteration})
    metrics = out_dir / "metrics.csv"
    metrics.write_text(metrics_csv(state.metrics), encoding="utf-8")
    return ckpt, metrics
