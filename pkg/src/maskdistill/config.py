"""Run configuration: YAML file merged over packaged defaults, validated into dataclasses."""

from __future__ import annotations

import copy
import os
import zlib
from dataclasses import asdict, dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .model import ModelConfig
from .optim import OptimizerConfig
from .rollout import Mix
from .sampling import SamplingConfig
from .schedule import stage_count
from .tasks import FAMILIES, VOCAB

ROOT_ENV = "MASKDISTILL_ROOT"
MODES = ("naive", "progressive", "masters")


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 0
    batch_size: int = 64
    learning_rate: float = 3e-3
    weight_decay: float = 0.01


@dataclass(frozen=True)
class TeacherSpec:
    id: str
    n_layers: int
    d_model: int
    n_heads: int
    r_max: float
    iterations: int
    pretrain: PretrainConfig


@dataclass(frozen=True)
class StudentSpec:
    n_layers: int
    d_model: int
    n_heads: int
    pretrain: PretrainConfig


@dataclass(frozen=True)
class TasksConfig:
    families: tuple[str, ...]
    train_per_family: int
    eval_per_family: int
    difficulty: int


@dataclass(frozen=True)
class RolloutConfig:
    group_size: int
    mix: Mix
    student_refresh: bool
    sampling: SamplingConfig


@dataclass(frozen=True)
class JudgeConfig:
    kind: str
    command: str | None


@dataclass(frozen=True)
class ObjectiveConfig:
    beta: float
    adv_eps: float
    use_acc_reward: bool
    use_distill_reward: bool
    ref_refresh: str


@dataclass(frozen=True)
class TrainConfig:
    mode: str
    data_source: str
    use_rewards: Any
    r_max_override: float | None
    eval_every: int
    groups_per_step: int = 1


@dataclass(frozen=True)
class RunConfig:
    seed: int
    root: str
    context_len: int
    tasks: TasksConfig
    teachers: tuple[TeacherSpec, ...]
    student: StudentSpec
    s: float
    rollout: RolloutConfig
    judge: JudgeConfig
    objective: ObjectiveConfig
    optimizer: OptimizerConfig
    train: TrainConfig

    # --- derived values ---
    @property
    def group_size(self) -> int:
        return self.rollout.group_size

    @property
    def total_iterations(self) -> int:
        return sum(t.iterations for t in self.teachers)

    def stage_count(self, teacher: TeacherSpec) -> int:
        return stage_count(self.effective_r_max(teacher), self.s)

    @property
    def curriculum(self) -> list[str]:
        return [t.id for t in self.teachers]

    def teacher(self, teacher_id: str) -> TeacherSpec:
        for t in self.teachers:
            if t.id == teacher_id:
                return t
        raise ConfigError(f"unknown teacher {teacher_id!r}", "teachers")

    def derived_seed(self, *parts: str) -> int:
        key = zlib.crc32("/".join(parts).encode("utf-8"))
        return (self.seed * 1_000_003 + key) % (2**32)

    def teacher_model_config(self, teacher: TeacherSpec) -> ModelConfig:
        return ModelConfig(len(VOCAB), self.context_len, teacher.n_layers, teacher.d_model,
                           teacher.n_heads, seed=self.derived_seed("teacher", teacher.id))

    def student_model_config(self) -> ModelConfig:
        st = self.student
        return ModelConfig(len(VOCAB), self.context_len, st.n_layers, st.d_model, st.n_heads,
                           seed=self.derived_seed("student"))

    # --- mode resolution ---
    @property
    def data_source(self) -> str:
        if self.train.data_source != "auto":
            return self.train.data_source
        return "labels" if self.train.mode == "naive" else "generated"

    @property
    def use_rewards(self) -> bool:
        if self.train.use_rewards != "auto":
            return bool(self.train.use_rewards)
        return self.train.mode == "masters"

    def effective_r_max(self, teacher: TeacherSpec) -> float:
        if self.train.r_max_override is not None:
            return float(self.train.r_max_override)
        return 0.0 if self.train.mode == "naive" else teacher.r_max

    @property
    def root_path(self) -> Path:
        return Path(os.environ.get(ROOT_ENV) or self.root)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["tasks"]["families"] = list(self.tasks.families)
        doc["teachers"] = [asdict(t) for t in self.teachers]
        doc["schedule"] = {"s": doc.pop("s")}
        return doc


def default_dict() -> dict:
    text = resources.files("maskdistill.data").joinpath("defaults.yaml").read_text(encoding="utf-8")
    return yaml.safe_load(text)


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError("unknown configuration key", where)
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``key.sub=value`` strings; list elements are addressed by index."""
    doc = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", "--set")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        parts = key.split(".")
        node = doc
        for part in parts[:-1]:
            node = node[int(part)] if isinstance(node, list) else node.get(part)
            if node is None:
                raise ConfigError("unknown configuration key", key)
        last = parts[-1]
        if isinstance(node, list):
            node[int(last)] = value
        elif last not in node:
            raise ConfigError("unknown configuration key", key)
        else:
            node[last] = value
    return doc


def _build(cls, doc: dict, where: str, **nested):
    if not isinstance(doc, dict):
        raise ConfigError("expected a mapping", where)
    names = {f.name for f in fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", where)
    kwargs = {k: v for k, v in doc.items() if k not in nested}
    for f in fields(cls):
        # YAML 1.1 reads "1e-3" as a string
        if f.name in kwargs and f.type in (float, "float", "float | None") and isinstance(kwargs[f.name], (str, int)) \
                and not isinstance(kwargs[f.name], bool):
            try:
                kwargs[f.name] = float(kwargs[f.name])
            except ValueError:
                raise ConfigError(f"expected a number, got {kwargs[f.name]!r}", f"{where}.{f.name}") from None
    kwargs.update(nested)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc), where) from None
    except ConfigError as exc:
        # component validators name their own field; anchor it at this config path
        if exc.field is None:
            raise ConfigError(str(exc), where) from None
        leaf = exc.field.rsplit(".", 1)[-1]
        raise ConfigError(str(exc).split(": ", 1)[-1], f"{where}.{leaf}") from None


def _positive_int(value, where):
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ConfigError(f"expected a positive integer, got {value!r}", where)


def from_dict(doc: dict) -> RunConfig:
    """Validate a full configuration mapping (defaults already merged)."""
    doc = copy.deepcopy(doc)
    teachers_doc = doc.get("teachers")
    if not teachers_doc:
        raise ConfigError("teacher curriculum is empty", "teachers")
    defaults_teacher = default_dict()["teachers"][0]
    teachers = []
    for k, t in enumerate(teachers_doc):
        where = f"teachers.{k}"
        t = _merge(defaults_teacher, t, where + ".")
        pre = _build(PretrainConfig, t["pretrain"], where + ".pretrain")
        spec = _build(TeacherSpec, t, where, pretrain=pre)
        _positive_int(spec.iterations, where + ".iterations")
        teachers.append(spec)
    if len({t.id for t in teachers}) != len(teachers):
        raise ConfigError("teacher ids must be unique", "teachers")

    st = doc["student"]
    student = _build(StudentSpec, st, "student",
                     pretrain=_build(PretrainConfig, st["pretrain"], "student.pretrain"))
    tasks_doc = doc["tasks"]
    tasks = _build(TasksConfig, tasks_doc, "tasks", families=tuple(tasks_doc["families"]))
    for fam in tasks.families:
        if fam not in FAMILIES:
            raise ConfigError(f"unknown task family {fam!r}", "tasks.families")
    _positive_int(tasks.train_per_family, "tasks.train_per_family")
    _positive_int(tasks.eval_per_family, "tasks.eval_per_family")

    ro = doc["rollout"]
    mix = _build(Mix, ro["mix"], "rollout.mix")
    rollout = _build(RolloutConfig, ro, "rollout", mix=mix,
                     sampling=_build(SamplingConfig, {**ro["sampling"], "seed": doc["seed"]}, "rollout.sampling"))
    _positive_int(rollout.group_size, "rollout.group_size")
    if mix.teacher < 0 or mix.student < 0 or mix.group_size != rollout.group_size:
        raise ConfigError(f"mix {mix.teacher}+{mix.student} does not sum to group_size {rollout.group_size}",
                          "rollout.mix")
    if rollout.group_size < 2:
        raise ConfigError("group-relative advantages need at least two responses", "rollout.group_size")

    judge = _build(JudgeConfig, doc["judge"], "judge")
    if judge.kind not in ("rule", "external"):
        raise ConfigError(f"unknown judge {judge.kind!r}", "judge.kind")
    if judge.kind == "external" and not judge.command:
        raise ConfigError("the external judge needs a command", "judge.command")

    objective = _build(ObjectiveConfig, doc["objective"], "objective")
    if objective.ref_refresh not in ("never", "stage", "teacher"):
        raise ConfigError(f"unknown refresh policy {objective.ref_refresh!r}", "objective.ref_refresh")
    if objective.beta < 0:
        raise ConfigError("beta must be non-negative", "objective.beta")
    optimizer = _build(OptimizerConfig, doc["optimizer"], "optimizer")
    if not optimizer.learning_rate > 0:
        raise ConfigError("learning_rate must be positive", "optimizer.learning_rate")

    train = _build(TrainConfig, doc["train"], "train")
    if train.mode not in MODES:
        raise ConfigError(f"unknown mode {train.mode!r}", "train.mode")
    if train.data_source not in ("auto", "labels", "generated"):
        raise ConfigError(f"unknown data source {train.data_source!r}", "train.data_source")
    _positive_int(train.groups_per_step, "train.groups_per_step")
    if train.use_rewards not in ("auto", True, False):
        raise ConfigError(f"use_rewards must be auto, true or false", "train.use_rewards")

    schedule = doc.get("schedule", {})
    cfg = RunConfig(
        seed=int(doc["seed"]), root=str(doc["root"]), context_len=int(doc["context_len"]),
        tasks=tasks, teachers=tuple(teachers), student=student, s=float(schedule.get("s", 0.05)),
        rollout=rollout, judge=judge, objective=objective, optimizer=optimizer, train=train,
    )
    for k, t in enumerate(teachers):
        where = f"teachers.{k}.r_max"
        try:
            M = cfg.stage_count(t)
            stage_count(t.r_max, cfg.s)
        except ConfigError as exc:
            raise ConfigError(str(exc).split(": ", 1)[-1], where) from None
        if t.iterations < M:
            raise ConfigError(f"{t.iterations} iterations cannot cover {M} stages", f"teachers.{k}.iterations")
    try:
        cfg.teacher_model_config(teachers[0])
        cfg.student_model_config()
    except Exception as exc:
        raise ConfigError(str(exc), "model") from None
    return cfg


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    doc = default_dict()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist", "--config")
        user = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        doc = _merge(doc, user)
    doc = apply_overrides(doc, overrides or [])
    return from_dict(doc)


def dump_config(cfg: RunConfig) -> str:
    doc = cfg.to_dict()
    doc["rollout"]["sampling"].pop("seed", None)
    doc["rollout"]["sampling"].pop("greedy", None)
    return yaml.safe_dump(doc, sort_keys=False)
