import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskdistill.judge import (ExternalJudge, extract_slots, is_repetitive, load_template, normalize,
                               parse_judge_reply, render_judge_prompts, rule_judge)


@pytest.mark.parametrize("generated, label, score", [
    ("5", "5", 1.0),
    ("", "5", 0.0),
    ("   ", "5", 0.0),
    ("the answer is  42.", "42", 1.0),
    ("Answer: 3.0", "3", 1.0),
    ("seven", "7", 1.0),
    ("a b c", "a b c", 1.0),
    ("a c b", "a b c", 0.0),
    ("4", "5", 0.0),
])
def test_rule_judge_examples(generated, label, score):
    assert rule_judge("q", generated, label).score == score


def test_normalization():
    assert normalize("  The Answer is  42. ") == "the answer is 42"
    assert normalize("3.50") == "3.5"
    assert normalize("Twelve!") == "12"


def test_repetition_rule():
    assert is_repetitive("a b c d a b c d a b c d")
    assert not is_repetitive("a b c d a b c d")
    assert not is_repetitive("a b c d e a b c d a b c d")
    v = rule_judge("q", "1 2 3 4 1 2 3 4 1 2 3 4", "5")
    assert v.score == 0.0 and "repetitive" in v.rationale


def test_empty_slots_keep_tags():
    evaluation, parsing = render_judge_prompts("", "", "")
    for tag in ("question", "ground truth", "generated text"):
        assert f"<{tag}>\n\n</{tag}>" in evaluation.user
    assert "<overall_summary>\n\n</overall_summary>" in parsing.user


def test_templates_are_filled_verbatim():
    evaluation, parsing = render_judge_prompts("Q?", "gen", "lab", summary="fine")
    assert evaluation.text == load_template("evaluation").format("Q?", "lab", "gen")
    assert parsing.text == load_template("parsing").format("fine")
    assert evaluation.system.startswith("System:\nYou are an evaluation assistant that gives accuracy scores")


texts = st.text(st.characters(blacklist_characters="<>", blacklist_categories=("Cs",)), max_size=40)


@settings(max_examples=100, deadline=None)
@given(texts, texts, texts)
def test_render_round_trip_and_tag_counts(question, generated, label):
    evaluation, _ = render_judge_prompts(question, generated, label)
    # the system text names each tag once as well; the slot itself appears once in the user turn
    assert evaluation.user.count("<ground truth>") == 1
    assert evaluation.user.count("</ground truth>") == 1
    assert extract_slots(evaluation) == {"question": question, "label": label, "generated": generated}


@pytest.mark.parametrize("reply, score, flagged", [
    ("...<answer>1</answer>", 1.0, False),
    ("0", 0.0, False),
    ("the response is excellent", 0.0, True),
    ("I think 0 but then 1", 1.0, False),
    ("<answer>2</answer>", 0.0, True),
    ("<answer> 0 </answer> and 1", 0.0, False),
    ("", 0.0, True),
])
def test_parse_reply(reply, score, flagged):
    v = parse_judge_reply(reply)
    assert (v.score, v.unparseable) == (score, flagged)


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=60))
def test_parse_never_raises(reply):
    assert parse_judge_reply(reply).score in (0.0, 1.0)


@settings(max_examples=200, deadline=None)
@given(st.text(min_size=1, max_size=30).filter(lambda s: s.strip()), st.text(max_size=20))
def test_label_judges_itself_correct(label, question):
    assert rule_judge(question, label, label).score == 1.0
    assert rule_judge(question, label, label) == rule_judge(question, label, label)


def test_external_judge_two_rounds():
    prompts = []

    def complete(prompt):
        prompts.append(prompt)
        return "Matches the label." if len(prompts) == 1 else "<answer>1</answer>"

    verdict = ExternalJudge(complete)("( 1 + 2 ) mod 5 =", "3", "3")
    assert verdict.score == 1.0
    assert "<generated text>\n3\n</generated text>" in prompts[0]
    assert "<overall_summary>\nMatches the label.\n</overall_summary>" in prompts[1]


def test_external_judge_from_command():
    judge = ExternalJudge.from_command("cat > /dev/null; echo '<answer>0</answer>'")
    assert judge("q", "x", "y").score == 0.0
