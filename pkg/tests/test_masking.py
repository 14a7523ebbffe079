import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskdistill.errors import DomainError, StructuralError
from maskdistill.masking import (apply_mask, build_mask, load_plan, masked_count, masked_fraction,
                                 save_plan)
from maskdistill.model import ParameterView

from conftest import tiny_model


def view(*arrays):
    return ParameterView((f"w{k}", np.asarray(a, dtype=float)) for k, a in enumerate(arrays))


def test_ratio_zero_and_one():
    params = tiny_model(scale=0.1).params
    keep_all = build_mask(params, 0.0)
    assert all(layer.mask.all() for layer in keep_all.layers)
    assert apply_mask(params, keep_all).equal(params)
    drop_all = build_mask(params, 1.0)
    assert not any(layer.mask.any() for layer in drop_all.layers)
    masked = apply_mask(params, drop_all)
    for layer in drop_all.layers:
        assert np.all(masked[layer.name] == 0.0)
        assert layer.threshold == math.inf


def test_magnitude_example():
    plan = build_mask(view([[0.5, -0.1], [0.3, -0.9]]), 0.5)
    layer = plan["w0"]
    assert layer.mask.ravel().tolist() == [True, False, False, True]
    assert layer.threshold == 0.5


def test_two_hundred_parameter_layer():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(10, 20))
    out = apply_mask(view(w), build_mask(view(w), 0.2))["w0"]
    zeros = np.flatnonzero(out.ravel() == 0.0)
    assert zeros.size == 40
    brute = sorted(range(200), key=lambda k: abs(w.ravel()[k]))[:40]
    assert sorted(brute) == zeros.tolist()


def test_one_dimensional_tensors_are_never_masked():
    params = tiny_model().params
    plan = build_mask(params, 0.5)
    assert all(params[n].ndim >= 2 for n in plan.names())
    masked = apply_mask(params, plan)
    assert np.array_equal(masked["ln_f.g"], params["ln_f.g"])


def test_global_fraction_counts_over_layers():
    rng = np.random.default_rng(1)
    plan = build_mask(view(rng.normal(size=(10, 10)), rng.normal(size=(10, 30))), 0.2)
    per_layer, total = masked_fraction(plan)
    assert abs(total - 0.2) <= 1 / 100
    assert masked_fraction(build_mask(view(np.ones((3, 3))), 0.0)) == ({"w0": 0.0}, 0.0)


def test_per_layer_balance_at_015():
    rng = np.random.default_rng(2)
    shapes = [(7, 9), (13, 11), (4, 25), (31, 3)]
    plan = build_mask(view(*[rng.normal(size=s) for s in shapes]), 0.15)
    per_layer, _ = masked_fraction(plan)
    for layer in plan.layers:
        assert abs(per_layer[layer.name] - 0.15) <= 1 / layer.size
        assert abs(layer.kept_count - round(0.85 * layer.size)) <= 1


def test_masked_count_guards_float_products():
    assert masked_count(0.29, 100) == 29
    assert masked_count(0.2, 200) == 40
    assert masked_count(1.0, 7) == 7


def test_errors():
    with pytest.raises(DomainError):
        build_mask(view(np.ones((2, 2))), 1.5)
    with pytest.raises(DomainError):
        build_mask(view([[1.0, np.nan]]), 0.5)
    plan = build_mask(view(np.ones((2, 2))), 0.5)
    with pytest.raises(StructuralError):
        apply_mask(view(np.ones((3, 2))), plan)
    with pytest.raises(StructuralError):
        apply_mask(ParameterView([("other", np.ones((2, 2)))]), plan)


def test_teacher_is_not_mutated_and_plan_round_trips(tmp_path):
    params = tiny_model(scale=0.1).params
    snapshot = params.copy()
    plan = build_mask(params, 0.3)
    apply_mask(params, plan)
    assert params.equal(snapshot)
    assert apply_mask(params, build_mask(params, 0.0)).equal(snapshot)
    save_plan(tmp_path / "p.plan", plan)
    back = load_plan(tmp_path / "p.plan")
    assert back.ratio == plan.ratio and back.names() == plan.names()
    for a, b in zip(plan.layers, back.layers):
        assert a.threshold == b.threshold and np.array_equal(a.mask, b.mask)


matrices = st.integers(0, 2**31 - 1).flatmap(
    lambda seed: st.tuples(st.just(seed), st.integers(2, 12), st.integers(2, 12)))


@settings(max_examples=80, deadline=None)
@given(matrices, st.floats(0, 1), st.floats(0, 1), st.booleans())
def test_nesting_rank_consistency_idempotence(shape, r1, r2, with_ties):
    seed, rows, cols = shape
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(rows, cols))
    if with_ties:
        w = np.round(w, 1)
    params = view(w)
    lo, hi = sorted((r1, r2))
    plan_lo, plan_hi = build_mask(params, lo), build_mask(params, hi)
    # nesting: masked at the lower ratio implies masked at the higher one
    assert not np.any(~plan_lo["w0"].mask & plan_hi["w0"].mask)
    for plan in (plan_lo, plan_hi):
        layer = plan["w0"]
        kept, dropped = np.abs(w[layer.mask]), np.abs(w[~layer.mask])
        if kept.size and dropped.size:
            assert kept.min() >= dropped.max()
        assert layer.kept_count == layer.size - masked_count(plan.ratio, layer.size)
        once = apply_mask(params, plan)
        assert apply_mask(once, plan).equal(once)
