import csv
import dataclasses
import hashlib
import io
import math

import numpy as np
import pytest

from maskdistill.checkpoint import load_model, save_model
from maskdistill.config import load_config
from maskdistill.errors import ConfigError, NumericError
from maskdistill.optim import OptimizerConfig
from maskdistill.pipeline import generate_store, init_student, make_tasks, train_teacher, with_mode
from maskdistill.rollout import RolloutStore
from maskdistill.trainer import (METRIC_COLUMNS, Trainer, build_plan, masked_teacher_loader, metrics_csv,
                                 write_outputs)

SMOKE = "configs/smoke.yaml"


@pytest.fixture(scope="module")
def world(tmp_path_factory, request):
    cfg = load_config(request.config.rootpath / SMOKE)
    train, held = make_tasks(cfg)
    teacher = train_teacher(cfg, "large", train)
    student = init_student(cfg, train)
    store = RolloutStore(tmp_path_factory.mktemp("store"))
    generate_store(cfg, train, {"large": teacher}, student, store)
    return cfg, train, held, teacher, student, store.groups()


def make_trainer(world, cfg=None, loader=None, groups="store"):
    base, train, held, teacher, student, store_groups = world
    cfg = cfg or base
    loader = loader or masked_teacher_loader({"large": teacher})
    return Trainer(cfg, train, held, student, loader, store_groups if groups == "store" else groups)


@pytest.mark.parametrize("mode", ["naive", "progressive", "masters"])
def test_zero_learning_rate_leaves_student_unchanged(world, mode):
    cfg = dataclasses.replace(with_mode(world[0], mode), optimizer=OptimizerConfig(learning_rate=0.0))
    trainer = make_trainer(world, cfg)
    state = trainer.run()
    assert state.student.params.equal(world[4].params)
    assert state.iteration == cfg.total_iterations


def test_runs_are_reproducible(world):
    a, b = make_trainer(world).run(), make_trainer(world).run()
    assert metrics_csv(a.metrics) == metrics_csv(b.metrics)
    assert a.student.params.equal(b.student.params)
    assert not a.student.params.equal(world[4].params)


def test_metrics_file_shape(world, tmp_path):
    state = make_trainer(world).run()
    ckpt, metrics = write_outputs(tmp_path, state)
    rows = list(csv.reader(io.StringIO(metrics.read_text())))
    assert rows[0] == METRIC_COLUMNS and len(rows) == world[0].total_iterations + 1
    assert [int(r[0]) for r in rows[1:]] == list(range(1, len(rows)))
    assert rows[-1][-1] != "" and all(r[-1] == "" for r in rows[1:-1])
    for r in rows[1:]:
        assert all(math.isfinite(float(x)) for x in r[3:7])
    assert load_model(ckpt).params.equal(state.student.params)


def test_naive_equals_masters_without_masks_or_rewards(world):
    naive = make_trainer(world, with_mode(world[0], "naive"), groups=None).run()
    algebra = with_mode(world[0], "masters", r_max_override=0.0, use_rewards=False, data_source="labels")
    masters = make_trainer(world, algebra, groups=None).run()
    assert [r["loss_total"] for r in naive.metrics] == [r["loss_total"] for r in masters.metrics]
    assert naive.student.params.equal(masters.student.params)
    assert {r["ratio"] for r in naive.metrics} == {0.0}


def test_progressive_walks_the_mask_schedule(world):
    state = make_trainer(world, with_mode(world[0], "progressive")).run()
    ratios = [r["ratio"] for r in state.metrics]
    assert ratios == sorted(ratios, reverse=True) and ratios[0] == 0.1 and ratios[-1] == 0.0
    assert all(math.isnan(r["mean_reward_distill"]) for r in state.metrics)
    masters = make_trainer(world).run()
    assert all(0.0 <= r["mean_reward_distill"] <= 1.0 for r in masters.metrics)


def test_uneven_iterations_partition(world):
    cfg = dataclasses.replace(world[0], teachers=(dataclasses.replace(world[0].teachers[0], iterations=13),))
    lengths = {}
    for e in build_plan(cfg):
        lengths[e.stage] = lengths.get(e.stage, 0) + 1
    assert sum(lengths.values()) == 13 and max(lengths.values()) - min(lengths.values()) <= 1


def test_teacher_files_are_not_modified(world, tmp_path):
    path = tmp_path / "teacher.ckpt"
    save_model(path, world[3])
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    base = load_model(path)
    make_trainer(world, loader=masked_teacher_loader({"large": base})).run()
    assert hashlib.sha256(path.read_bytes()).hexdigest() == digest
    assert base.params.equal(world[3].params)


def test_non_finite_loss_halts_with_state_preserved(world):
    good = masked_teacher_loader({"large": world[3]})
    broken = world[3].with_params(world[3].params.map(lambda v: np.full_like(v, np.nan)))

    def loader(teacher_id, ratio):
        return broken if ratio == 0.0 else good(teacher_id, ratio)

    trainer = make_trainer(world, loader=loader)
    first_bad = next(e.iteration for e in trainer.plan if e.ratio == 0.0)
    reference = make_trainer(world)
    for entry in reference.plan[: first_bad - 1]:
        reference.train_step(entry)
    with pytest.raises(NumericError, match=f"iteration {first_bad}"):
        trainer.run()
    assert trainer.state.iteration == first_bad - 1 == len(trainer.state.metrics)
    assert trainer.state.student.params.equal(reference.state.student.params)


def test_incomplete_store_names_missing_stages(world):
    groups = dict(world[5])
    dropped = next(k for k in groups if k[1] == 1)
    del groups[dropped]
    with pytest.raises(ConfigError, match=r"large/stage1"):
        make_trainer(world, groups=groups)
    with pytest.raises(ConfigError, match="incomplete"):
        make_trainer(world, groups={})


def test_rewards_need_judged_generated_groups(world):
    groups = {k: dataclasses.replace(g, records=tuple(dataclasses.replace(r, judge_score=None) for r in g.records))
              for k, g in world[5].items()}
    with pytest.raises(ConfigError, match="not judged"):
        make_trainer(world, groups=groups)
    make_trainer(world, with_mode(world[0], "progressive"), groups=groups)
    with pytest.raises(ConfigError, match="data_source"):
        make_trainer(world, with_mode(world[0], "masters", data_source="labels"), groups=None)


def test_reference_refresh_policies(world):
    never = make_trainer(world)
    never.run()
    assert never.state.reference.params.equal(world[4].params)
    cfg = dataclasses.replace(world[0], objective=dataclasses.replace(world[0].objective, ref_refresh="stage"))
    staged = make_trainer(world, cfg)
    staged.run()
    assert not staged.state.reference.params.equal(world[4].params)


def test_groups_per_step_averages(world):
    cfg = with_mode(world[0], "progressive", groups_per_step=2)
    state = make_trainer(world, cfg).run()
    assert state.iteration == cfg.total_iterations and len(state.metrics) == cfg.total_iterations
