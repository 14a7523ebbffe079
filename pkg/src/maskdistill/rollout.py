"""Offline multi-response generation and its append-only JSON-lines store.

Every line of ``records.jsonl`` is one JSON object with a ``kind`` field:

``response``
    a generated (or label) response. Fields: ``record_id``, ``question_id``,
    ``teacher_id``, ``stage``, ``ratio``, ``source`` (``teacher``/``student``/``label``),
    ``sample_index``, ``prompt``, ``tokens``, ``gen_logprobs``, ``text``.
``annotation``
    a later revision of a response's judge fields: ``record_id``, ``judge_score``,
    ``judge_rationale``. Token fields are never revised.

Lines are written with sorted keys and no whitespace, so identical inputs give a
byte-identical file.
"""

from __future__ import annotations

import json
import zlib
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, MissingArtifactError, StructuralError
from .judge import JudgeVerdict
from .model import Model
from .sampling import SamplingConfig, sample_batch
from .tasks import VOCAB, TaskInstance

SOURCES = ("teacher", "student", "label")


@dataclass(frozen=True)
class ResponseRecord:
    record_id: str
    question_id: str
    source: str
    tokens: tuple[int, ...]
    gen_logprobs: tuple[float, ...]
    prompt: tuple[int, ...] = ()
    teacher_id: str = ""
    stage: int = 0
    ratio: float = 0.0
    sample_index: int = 0
    text: str = ""
    judge_score: float | None = None
    judge_rationale: str | None = None
    distill_divergence: float | None = None
    rewards: dict | None = None

    def __post_init__(self):
        if len(self.tokens) != len(self.gen_logprobs):
            raise StructuralError(f"{self.record_id}: tokens and gen_logprobs differ in length")
        if self.source not in SOURCES:
            raise StructuralError(f"unknown record source {self.source!r}")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["kind"] = "response"
        doc["tokens"] = list(self.tokens)
        doc["gen_logprobs"] = list(self.gen_logprobs)
        doc["prompt"] = list(self.prompt)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ResponseRecord":
        doc = {k: v for k, v in doc.items() if k != "kind"}
        doc["tokens"] = tuple(doc["tokens"])
        doc["gen_logprobs"] = tuple(doc["gen_logprobs"])
        doc["prompt"] = tuple(doc.get("prompt", ()))
        return cls(**doc)


@dataclass(frozen=True)
class GenerationGroup:
    question_id: str
    teacher_id: str
    stage: int
    records: tuple[ResponseRecord, ...]

    @property
    def size(self) -> int:
        return len(self.records)

    def composition(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.records:
            out[r.source] = out.get(r.source, 0) + 1
        return out


@dataclass(frozen=True)
class Mix:
    teacher: int = 4
    student: int = 4

    @property
    def group_size(self) -> int:
        return self.teacher + self.student


def _dumps(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)


class RolloutStore:
    """Append-only record store in a directory; a single writer appends lines."""

    FILENAME = "records.jsonl"

    def __init__(self, root):
        self.root = Path(root)

    @property
    def path(self) -> Path:
        return self.root / self.FILENAME

    def exists(self) -> bool:
        return self.path.exists()

    def append(self, docs: Iterable[dict]) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as fh:
            for doc in docs:
                fh.write(_dumps(doc) + "\n")

    def append_records(self, records: Iterable[ResponseRecord]) -> None:
        self.append(r.to_dict() for r in records)

    def annotate(self, record_id: str, verdict: JudgeVerdict) -> None:
        self.annotate_many([(record_id, verdict)])

    def annotate_many(self, items: Iterable[tuple[str, JudgeVerdict]]) -> None:
        self.append({"kind": "annotation", "record_id": rid, "judge_score": v.score,
                     "judge_rationale": v.rationale} for rid, v in items)

    def lines(self) -> list[dict]:
        if not self.exists():
            raise MissingArtifactError(f"no rollout store at {self.root}")
        with open(self.path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]

    def records(self) -> list[ResponseRecord]:
        """Response records with their latest annotation folded in, in insertion order."""
        records: dict[str, ResponseRecord] = {}
        for doc in self.lines():
            if doc["kind"] == "response":
                records[doc["record_id"]] = ResponseRecord.from_dict(doc)
            elif doc["kind"] == "annotation":
                rid = doc["record_id"]
                if rid not in records:
                    raise StructuralError(f"annotation for unknown record {rid}")
                records[rid] = replace(records[rid], judge_score=doc["judge_score"],
                                       judge_rationale=doc.get("judge_rationale"))
        return list(records.values())

    def groups(self) -> dict[tuple[str, int, str], GenerationGroup]:
        """Records grouped by (teacher_id, stage, question_id)."""
        buckets: dict[tuple[str, int, str], list[ResponseRecord]] = {}
        for r in self.records():
            buckets.setdefault((r.teacher_id, r.stage, r.question_id), []).append(r)
        return {k: GenerationGroup(k[2], k[0], k[1], tuple(v)) for k, v in buckets.items()}


def _key(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def derive_rng(seed: int, question_id: str, source: str, index: int,
               teacher_id: str = "", stage: int = 0) -> np.random.Generator:
    """Independent stream per (seed, teacher, stage, question, source, sample index)."""
    return np.random.default_rng([seed, _key(teacher_id), stage, _key(question_id),
                                  SOURCES.index(source), index])


def sample_response(model: Model, prompt: Sequence[int], config: SamplingConfig, *,
                    question_id: str = "", source: str = "teacher", sample_index: int = 0,
                    teacher_id: str = "", stage: int = 0, ratio: float = 0.0) -> ResponseRecord:
    rng = derive_rng(config.seed, question_id, source, sample_index, teacher_id, stage)
    (tokens, logps), = sample_batch(model, prompt, [rng], config, VOCAB.eos)
    return ResponseRecord(
        record_id=f"{teacher_id}:{stage}:{question_id}:{source}:{sample_index}",
        question_id=question_id, source=source, tokens=tuple(tokens), gen_logprobs=tuple(logps),
        prompt=tuple(prompt), teacher_id=teacher_id, stage=stage, ratio=ratio,
        sample_index=sample_index, text=VOCAB.decode(tokens),
    )


def _sample_many(model, task: TaskInstance, config, source, count, teacher_id, stage, ratio, seed_stage):
    rngs = [derive_rng(config.seed, task.question_id, source, k, teacher_id if source == "teacher" else "",
                       seed_stage) for k in range(count)]
    drawn = sample_batch(model, task.prompt, rngs, config, VOCAB.eos)
    return [
        ResponseRecord(
            record_id=f"{teacher_id}:{stage}:{task.question_id}:{source}:{k}",
            question_id=task.question_id, source=source, tokens=tuple(toks), gen_logprobs=tuple(lps),
            prompt=tuple(task.prompt), teacher_id=teacher_id, stage=stage, ratio=ratio,
            sample_index=k, text=VOCAB.decode(toks),
        )
        for k, (toks, lps) in enumerate(drawn)
    ]


@dataclass
class _QuestionJob:
    task: TaskInstance
    teacher_id: str
    stages: list  # (stage index, ratio, Model)
    student: Model
    config: SamplingConfig
    mix: Mix
    student_refresh: bool


def _run_job(job: _QuestionJob) -> list[ResponseRecord]:
    out = []
    fixed_student = None
    if job.mix.student and not job.student_refresh:
        fixed_student = _sample_many(job.student, job.task, job.config, "student", job.mix.student,
                                     job.teacher_id, -1, 0.0, seed_stage=0)
    for stage, ratio, teacher in job.stages:
        if job.mix.teacher:
            out += _sample_many(teacher, job.task, job.config, "teacher", job.mix.teacher,
                                job.teacher_id, stage, ratio, seed_stage=stage)
        if job.mix.student:
            if fixed_student is None:
                out += _sample_many(job.student, job.task, job.config, "student", job.mix.student,
                                    job.teacher_id, stage, ratio, seed_stage=stage + 1)
            else:
                out += [replace(r, stage=stage, ratio=ratio,
                                record_id=f"{job.teacher_id}:{stage}:{r.question_id}:student:{r.sample_index}")
                        for r in fixed_student]
    return out


def pregenerate(tasks: Sequence[TaskInstance], staged_teachers: Mapping[str, Sequence],
                student: Model, config: SamplingConfig, store: RolloutStore, *,
                mix: Mix = Mix(), student_refresh: bool = False, workers: int = 1,
                questions: Callable[[str, int], Iterable[str]] | None = None) -> int:
    """Generate one group per (teacher, stage, question) and append it to ``store``.

    ``staged_teachers`` maps a teacher id to its ``(stage, ratio, Model or None)`` list;
    a ``None`` model means the staged checkpoint is missing. Student responses are drawn
    once per question by the initial student and reused across stages unless
    ``student_refresh`` asks for fresh draws per stage. ``questions(teacher_id, stage)``
    restricts a stage to a subset of question ids. Returns the number of records.
    """
    if mix.group_size < 1:
        raise ConfigError("group must contain at least one response", "rollout.mix")
    for teacher_id, stages in staged_teachers.items():
        missing = [ratio for _, ratio, m in stages if m is None]
        if missing:
            raise ConfigError(f"missing masked checkpoints for ratios {missing}", f"teacher {teacher_id}")
    allowed = {}
    if questions is not None:
        allowed = {(tid, stage): set(questions(tid, stage))
                   for tid, stages in staged_teachers.items() for stage, _, _ in stages}
    jobs = []
    for teacher_id, stages in staged_teachers.items():
        for task in tasks:
            picked = [s for s in stages if questions is None or task.question_id in allowed[(teacher_id, s[0])]]
            if picked:
                jobs.append(_QuestionJob(task, teacher_id, picked, student, config, mix, student_refresh))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = map(_run_job, jobs)
    count = 0
    for records in results:
        store.append_records(records)
        count += len(records)
    return count


def label_record(task: TaskInstance, teacher_id: str = "", stage: int = 0, ratio: float = 0.0) -> ResponseRecord:
    """The ground-truth answer (plus end token) wrapped as a response record."""
    tokens = tuple(task.label_tokens) + (VOCAB.eos,)
    return ResponseRecord(
        record_id=f"{teacher_id}:{stage}:{task.question_id}:label:0", question_id=task.question_id,
        source="label", tokens=tokens, gen_logprobs=(0.0,) * len(tokens), prompt=tuple(task.prompt),
        teacher_id=teacher_id, stage=stage, ratio=ratio, text=task.label, judge_score=1.0,
        judge_rationale="label",
    )


def judge_store(store: RolloutStore, tasks: Mapping[str, TaskInstance],
                judge: Callable[[str, str, str], JudgeVerdict], workers: int = 1,
                rejudge: bool = False) -> int:
    """Append a judge annotation for every record (only unjudged ones unless ``rejudge``)."""
    todo = [r for r in store.records() if rejudge or r.judge_score is None]
    missing = sorted({r.question_id for r in todo if r.question_id not in tasks})
    if missing:
        raise ConfigError(f"no task definitions for questions {missing[:5]}", "tasks")

    def run(r: ResponseRecord) -> JudgeVerdict:
        t = tasks[r.question_id]
        return judge(t.prompt_text, r.text, t.label)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            verdicts = list(pool.map(run, todo))
    else:
        verdicts = [run(r) for r in todo]
    store.annotate_many((r.record_id, v) for r, v in zip(todo, verdicts))
    return len(todo)
