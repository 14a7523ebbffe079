import numpy as np
import pytest

from maskdistill.model import Model, ModelConfig
from maskdistill.rollout import ResponseRecord


def tiny_model(seed=0, vocab=11, ctx=12, layers=1, d=8, heads=2, scale=None):
    """A few-thousand-parameter model; ``scale`` inflates weights so outputs are far from uniform."""
    m = Model(ModelConfig(vocab, ctx, layers, d, heads, seed=seed))
    if scale is not None:
        rng = np.random.default_rng(seed + 1000)
        for name, values in list(m.params.items()):
            m.params[name] = values + rng.normal(0.0, scale, values.shape)
    return m


def make_record(k, prompt, tokens, source="teacher", score=None, qid="q"):
    return ResponseRecord(f"r{k}", qid, source, tuple(int(t) for t in tokens), (0.0,) * len(tokens),
                          prompt=tuple(int(t) for t in prompt), judge_score=score)


def random_group(rng, vocab, size=4, prompt_len=3, max_len=4):
    prompt = rng.integers(0, vocab, prompt_len)
    return [make_record(k, prompt, rng.integers(0, vocab, rng.integers(1, max_len + 1)))
            for k in range(size)]


def relative_error(a, b, floor=1e-6):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance summary ------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(number: int, passed: bool, detail: str, soft: bool = False) -> None:
    verdict = "PASS" if passed else ("FAIL (soft, reported)" if soft else "FAIL")
    ACCEPTANCE_LINES[number] = f"criterion {number}: {verdict} - {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
