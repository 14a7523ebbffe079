"""Accuracy reward: a rule-based judge plus prompt rendering/parsing for LLM judges."""

from __future__ import annotations

import re
import subprocess
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Callable

_NUMBER_WORDS = {
    w: str(k) for k, w in enumerate(
        "zero one two three four five six seven eight nine ten eleven twelve thirteen "
        "fourteen fifteen sixteen seventeen eighteen nineteen twenty".split()
    )
}
_NUMERAL = re.compile(r"(?<![\w.])\d+(?:\.\d+)?(?![\w])")
# punctuation, keeping a decimal point that sits between two digits
_PUNCT = re.compile(r"(?<!\d)\.|\.(?!\d)|[^\w\s.]|_")
_ANSWER_LEADS = ("the answer is", "answer is", "answer")
_REPEAT_N, _REPEAT_TIMES = 4, 3


@dataclass(frozen=True)
class JudgeVerdict:
    score: float
    rationale: str | None = None
    unparseable: bool = False


def _canon_number(match: re.Match) -> str:
    text = match.group(0)
    value = float(text)
    return str(int(value)) if value.is_integer() else repr(value)


def normalize(text: str) -> str:
    """Lowercase, canonicalize numerals, strip punctuation, collapse whitespace."""
    text = _NUMERAL.sub(_canon_number, text.lower().strip())
    words = _PUNCT.sub(" ", text).split()
    if not words:
        # punctuation-only text keeps its characters so it can still match itself
        return " ".join(text.split())
    return " ".join(_NUMBER_WORDS.get(w, w) for w in words)


def extract_answer(text: str) -> str:
    norm = normalize(text)
    for lead in _ANSWER_LEADS:
        pos = norm.rfind(lead + " ")
        if pos >= 0 and (pos == 0 or norm[pos - 1] == " "):
            return norm[pos + len(lead) + 1:]
    return norm


def is_repetitive(text: str) -> bool:
    """True if some word 4-gram occurs at least three times back to back."""
    words = text.split()
    n, times = _REPEAT_N, _REPEAT_TIMES
    for start in range(len(words) - n * times + 1):
        gram = words[start:start + n]
        if all(words[start + k * n:start + (k + 1) * n] == gram for k in range(1, times)):
            return True
    return False


def rule_judge(question: str, generated: str, label: str) -> JudgeVerdict:
    if not generated.strip():
        return JudgeVerdict(0.0, "empty response")
    answer, target = extract_answer(generated), extract_answer(label)
    if answer == target and answer:
        return JudgeVerdict(1.0, "matches the label")
    if is_repetitive(generated):
        return JudgeVerdict(0.0, "repetitive response")
    return JudgeVerdict(0.0, "does not match the label")


# --- prompt templates for LLM-backed judging ---------------------------------

@dataclass(frozen=True)
class JudgeMessage:
    text: str

    @property
    def system(self) -> str:
        return self.text.split("\n\nUser:\n", 1)[0]

    @property
    def user(self) -> str:
        return self.text.split("\n\nUser:\n", 1)[1]


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    """``name`` is ``"evaluation"`` or ``"parsing"``."""
    return resources.files("maskdistill.data").joinpath(f"judge_{name}.txt").read_text(encoding="utf-8")


def render_judge_prompts(question: str, generated: str, label: str,
                         summary: str = "") -> tuple[JudgeMessage, JudgeMessage]:
    """Fill both templates. ``summary`` is the evaluator's reply fed to the parsing prompt."""
    evaluation = load_template("evaluation").format(question, label, generated)
    parsing = load_template("parsing").format(summary)
    return JudgeMessage(evaluation), JudgeMessage(parsing)


def _slot(text: str, tag: str) -> str:
    match = re.search(rf"<{tag}>\n(.*)\n</{tag}>", text, re.S)
    return match.group(1) if match else ""


def extract_slots(message: JudgeMessage) -> dict[str, str]:
    """Inverse of rendering on the user part of an evaluation message."""
    user = message.user
    return {
        "question": _slot(user, "question"),
        "label": _slot(user, "ground truth"),
        "generated": _slot(user, "generated text"),
    }


_TAGGED = re.compile(r"<answer>(.*?)</answer>", re.S)
_BARE = re.compile(r"(?<![\w.])([01])(?![\w.])")


def parse_judge_reply(reply: str) -> JudgeVerdict:
    """Never raises; anything without a usable 0/1 maps to a flagged score of 0."""
    tagged = _TAGGED.findall(reply or "")
    if tagged:
        body = tagged[-1].strip()
        if body in ("0", "1"):
            return JudgeVerdict(float(body), "tagged score")
        return JudgeVerdict(0.0, f"unparseable tagged score {body!r}", unparseable=True)
    bare = _BARE.findall(reply or "")
    if bare:
        return JudgeVerdict(float(bare[-1]), "bare score")
    return JudgeVerdict(0.0, "unparseable reply", unparseable=True)


class ExternalJudge:
    """Two-round LLM judging through any ``complete(prompt_text) -> reply`` callable."""

    def __init__(self, complete: Callable[[str], str]):
        self.complete = complete

    def __call__(self, question: str, generated: str, label: str) -> JudgeVerdict:
        if not generated.strip():
            return JudgeVerdict(0.0, "empty response")
        evaluation, _ = render_judge_prompts(question, generated, label)
        summary = self.complete(evaluation.text)
        _, parsing = render_judge_prompts(question, generated, label, summary=summary)
        return parse_judge_reply(self.complete(parsing.text))

    @classmethod
    def from_command(cls, command: str, timeout: float = 120.0) -> "ExternalJudge":
        """Prompt text goes to the command's stdin; its stdout is the reply."""
        def complete(prompt: str) -> str:
            proc = subprocess.run(command, shell=True, input=prompt, capture_output=True,
                                  text=True, timeout=timeout, check=True)
            return proc.stdout
        return cls(complete)
