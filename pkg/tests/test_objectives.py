import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskdistill.errors import DomainError, SequenceLengthError, StructuralError
from maskdistill.masking import apply_mask, build_mask
from maskdistill.model import Model, log_softmax
from maskdistill.objectives import (BETA, RewardBundle, advantages, distill_reward, final_objective,
                                    group_rewards, grpo_loss, jsd, sequence_divergence, token_logprobs)

from conftest import make_record, random_group, relative_error, tiny_model

LN2 = math.log(2)


def mp_jsd(p, q):
    mpmath.mp.dps = 50
    p, q = [mpmath.mpf(x) for x in p], [mpmath.mpf(x) for x in q]
    m = [(a + b) / 2 for a, b in zip(p, q)]
    kl = lambda x, y: sum(a * mpmath.log(a / b) for a, b in zip(x, y) if a > 0)
    return float(kl(p, m) / 2 + kl(q, m) / 2)


def test_jsd_examples():
    z = np.array([0.3, -1.2, 2.0])
    assert abs(jsd(z, z)) <= 1e-12
    assert abs(jsd([800.0, 0.0], [0.0, 800.0]) - LN2) <= 1e-6
    value = jsd(np.log([0.7, 0.3]), np.log([0.4, 0.6]))
    assert abs(value - mp_jsd(["0.7", "0.3"], ["0.4", "0.6"])) <= 1e-10
    with pytest.raises(StructuralError):
        jsd([0.0, 1.0], [0.0, 1.0, 2.0])


logit_rows = st.integers(2, 12).flatmap(
    lambda n: st.tuples(*[st.lists(st.floats(-30, 30), min_size=n, max_size=n)] * 2))


@settings(max_examples=200, deadline=None)
@given(logit_rows)
def test_jsd_symmetry_and_bounds(rows):
    p, q = map(np.array, rows)
    a, b = jsd(p, q), jsd(q, p)
    assert abs(a - b) <= 1e-12
    assert 0.0 <= a <= LN2 + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_jsd_against_arbitrary_precision(seed):
    rng = np.random.default_rng(seed)
    p, q = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
    assert abs(jsd(np.log(p), np.log(q)) - mp_jsd(p, q)) <= 1e-10


def test_distill_reward_examples():
    np.testing.assert_allclose(distill_reward([0.1, 0.3, 0.5]), [1.0, 0.5, 0.0], atol=1e-15)
    assert distill_reward([0.2, 0.2, 0.2]).tolist() == [0.5] * 3
    assert distill_reward([2, 4]).tolist() == [1.0, 0.0]
    with pytest.raises(DomainError):
        distill_reward([0.3])


@settings(max_examples=150, deadline=None)
@given(st.lists(st.floats(0, 5), min_size=2, max_size=10))
def test_distill_reward_is_order_reversing(d):
    r = distill_reward(d)
    assert np.all((0 <= r) & (r <= 1))
    if max(d) > min(d):
        assert r[int(np.argmin(d))] == 1.0 and r[int(np.argmax(d))] == 0.0
        spread = max(d) - min(d)
        for i in range(len(d)):
            for j in range(len(d)):
                if d[i] < d[j]:
                    assert r[i] >= r[j]
                    # strictness needs the gap to survive rounding against the range
                    if (d[j] - d[i]) / spread > 1e-12:
                        assert r[i] > r[j]


def test_advantage_examples():
    np.testing.assert_allclose(advantages([1, 0, 1, 0]).advantages, [1, -1, 1, -1], atol=1e-7)
    assert advantages([0.7] * 5).advantages.tolist() == [0.0] * 5
    with pytest.raises(DomainError):
        advantages([1.0])


@settings(max_examples=150, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=10), st.floats(-100, 100), st.floats(0.1, 10))
def test_advantage_invariants(r, shift, scale):
    a = advantages(r).advantages
    assert abs(a.mean()) <= 1e-9
    std, sigma = a.std(), np.std(r)
    if std == 0.0:
        return
    # exact relation with the epsilon term; unit spread whenever rewards spread by 1e-2 or more
    assert abs(std - sigma / (sigma + 1e-8)) <= 1e-9
    if sigma >= 1e-2:
        assert abs(std - 1) <= 1e-6
    slack = 1e-9 + 2e-8 * np.abs(a).max() / min(sigma, sigma * scale)
    assert np.max(np.abs(advantages(np.array(r) + shift).advantages - a)) <= slack
    assert np.max(np.abs(advantages(np.array(r) * scale).advantages - a)) <= slack


def test_reward_bundle_total():
    b = RewardBundle(1.0, 0.25)
    assert b.total == 1.25 and b.to_dict() == {"acc": 1.0, "distill": 0.25, "total": 1.25}
    bundles = group_rewards([1, 0, 1], [0.1, 0.3, 0.5])
    assert [x.total for x in bundles] == [2.0, 0.5, 1.0]
    assert [x.total for x in group_rewards([1, 0], [0.1, 0.3], use_distill=False)] == [1.0, 0.0]


def test_sequence_divergence_cases():
    m = tiny_model(scale=0.4)
    rec = make_record(0, [1, 2, 3], [4, 5, 6])
    assert np.all(sequence_divergence(m, m, rec).per_token == 0)
    t, s = tiny_model(1, vocab=2, scale=0.5), tiny_model(2, vocab=2, scale=0.5)
    rep = sequence_divergence(t, s, make_record(0, [0, 1], [1]))
    assert rep.per_token.shape == (1,)
    assert abs(rep.mean - jsd(t.forward([0, 1])[-1], s.forward([0, 1])[-1])) <= 1e-12
    with pytest.raises(SequenceLengthError):
        sequence_divergence(m, m, make_record(0, list(range(8)), [1] * 8))


def test_masking_the_teacher_changes_divergence():
    teacher, student = tiny_model(3, scale=0.5), tiny_model(4, scale=0.5)
    rec = make_record(0, [1, 2, 3], [4, 5])
    values = set()
    for ratio in (0.0, 1.0):
        masked = Model(teacher.config, apply_mask(teacher.params, build_mask(teacher.params, ratio)))
        values.add(round(sequence_divergence(masked, student, rec).mean, 12))
    assert len(values) == 2


def test_zero_loss_cases(rng):
    m = tiny_model(scale=0.4)
    group = random_group(rng, 11)
    assert abs(grpo_loss(m, m, group, [0.0] * 4).loss) <= 1e-9
    assert abs(final_objective(m, m, m, group, [0.0] * 4).loss) <= 1e-9


def test_beta_linearity(rng):
    student, reference = tiny_model(1, scale=0.4), tiny_model(2, scale=0.4)
    group = random_group(rng, 11)
    adv = [0.5, -1.0, 0.2, 0.3]
    one = grpo_loss(student, reference, group, adv, beta=BETA, compute_grads=False)
    two = grpo_loss(student, reference, group, adv, beta=2 * BETA, compute_grads=False)
    pg = -sum(adv) / 4
    assert abs((two.loss - pg) - 2 * (one.loss - pg)) <= 1e-12
    assert one.terms["kl_ref"] > 0


def test_policy_gradient_logits_by_finite_differences(rng):
    m = tiny_model(scale=0.4)
    group = random_group(rng, 11, size=3)
    adv = [1.3, -0.4, 0.7]
    res = grpo_loss(m, m, group, adv, beta=0.0)
    for j, r in enumerate(group):
        inputs = list(r.prompt) + list(r.tokens)[:-1]
        rows = np.arange(len(r.prompt) - 1, len(inputs))
        z0 = m.forward(inputs)[rows]
        old = log_softmax(z0)[np.arange(len(rows)), list(r.tokens)]

        def f(z):
            lp = log_softmax(z)[np.arange(len(rows)), list(r.tokens)]
            return -adv[j] * np.exp(lp - old).mean() / len(group)

        fd = np.zeros_like(z0)
        h = 1e-6
        for idx in np.ndindex(z0.shape):
            up, down = z0.copy(), z0.copy()
            up[idx] += h
            down[idx] -= h
            fd[idx] = (f(up) - f(down)) / (2 * h)
        analytic = res.dlogits[j, rows]
        assert np.max(relative_error(analytic, fd, floor=1e-6)) <= 1e-3
        # closed form: -A (onehot - softmax) per position, averaged over the group and positions
        onehot = np.eye(11)[list(r.tokens)]
        closed = -adv[j] * (onehot - np.exp(log_softmax(z0))) / (len(group) * len(rows))
        np.testing.assert_allclose(analytic, closed, atol=1e-12)


def test_without_jsd_gradient_equals_grpo_gradient(rng):
    student, teacher, reference = (tiny_model(k, scale=0.4) for k in (1, 2, 3))
    group = random_group(rng, 11)
    adv = [0.5, -1.0, 0.2, 0.3]
    a = final_objective(student, teacher, reference, group, adv, use_jsd=False)
    b = grpo_loss(student, reference, group, adv)
    assert a.loss == b.loss
    assert all(np.array_equal(a.grads[n], b.grads[n]) for n in a.grads.names())
    both = final_objective(student, teacher, reference, group, adv)
    jsd_only = final_objective(student, teacher, None, group, use_grpo=False)
    assert abs(both.loss - (b.loss + jsd_only.loss)) <= 1e-12
    for n in both.grads.names():
        np.testing.assert_allclose(both.grads[n], b.grads[n] + jsd_only.grads[n], atol=1e-13)


def test_full_objective_by_finite_differences(rng):
    student = tiny_model(5, vocab=9, ctx=10, layers=2, d=8, heads=2, scale=0.3)
    teacher, reference = tiny_model(6, vocab=9, ctx=10, scale=0.5), tiny_model(7, vocab=9, ctx=10, scale=0.3)
    assert student.num_params <= 5000
    group = random_group(rng, 9, size=3, max_len=3)
    adv = [0.9, -0.6, 0.4]
    detached = token_logprobs(student, group)

    def loss():
        return final_objective(student, teacher, reference, group, adv, compute_grads=False,
                               detached_logprobs=detached).loss

    grads = final_objective(student, teacher, reference, group, adv, detached_logprobs=detached).grads
    worst, h = 0.0, 1e-5
    for name, values in student.params.items():
        for idx in np.ndindex(values.shape):
            orig = values[idx]
            values[idx] = orig + h
            up = loss()
            values[idx] = orig - h
            down = loss()
            values[idx] = orig
            fd = (up - down) / (2 * h)
            worst = max(worst, float(relative_error(np.array(grads[name][idx]), np.array(fd), floor=1e-6)))
    assert worst <= 1e-3


def test_positive_advantage_raises_record_logprob():
    student = tiny_model(8, scale=0.4)
    reference = Model(student.config, student.params.copy())
    rec = make_record(0, [1, 2, 3], [7, 4, 9])
    before = token_logprobs(student, [rec])[0].sum()
    res = grpo_loss(student, reference, [rec], [1.0])
    for name in student.params.names():
        student.params[name] = student.params[name] - 1e-3 * res.grads[name]
    assert token_logprobs(student, [rec])[0].sum() > before


def test_callable_advantages_and_misalignment(rng):
    student, teacher = tiny_model(1, scale=0.4), tiny_model(2, scale=0.4)
    group = random_group(rng, 11)
    seen = []

    def from_divergences(d):
        seen.append(np.array(d))
        return advantages([r.total for r in group_rewards([1, 0, 1, 0], d)]).advantages

    res = final_objective(student, teacher, student, group, from_divergences)
    np.testing.assert_allclose(seen[0], res.divergences)
    np.testing.assert_allclose(res.divergences, [sequence_divergence(teacher, student, r).mean for r in group])
    with pytest.raises(StructuralError):
        final_objective(student, teacher, student, group, [0.0] * 3)
