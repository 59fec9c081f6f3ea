import numpy as np
import pytest

from otrect.modelsel import (
    IVS_GRID,
    CvPlan,
    SweepResult,
    cross_validate_delta,
    lad_task,
    mean_task,
    split_indices,
    sweep,
)
from otrect.sim import ContaminationModel, generate


def toy_fit(train, delta):
    return float(np.mean(train)) + delta


def toy_score(model, test):
    return float(np.mean(np.abs(np.asarray(test) - model)))


def test_plan_validation():
    with pytest.raises(ValueError):
        CvPlan(())
    with pytest.raises(ValueError):
        CvPlan((0.1, -1.0))
    with pytest.raises(ValueError):
        CvPlan((0.1,), split_frac=1.0)


def test_cv_deterministic_and_table_is_split_mean():
    data = np.random.default_rng(0).normal(size=50)
    plan = CvPlan((0.0, 0.5, 1.0), seed=3)
    a = cross_validate_delta(toy_fit, data, plan, toy_score)
    b = cross_validate_delta(toy_fit, data, plan, toy_score)
    assert a.table == b.table and a.delta_star == b.delta_star
    splits = split_indices(50, plan)
    for row in a.table:
        vals = [toy_score(toy_fit(data[tr], row["delta"]), data[te]) for tr, te in splits]
        assert row["mean_metric"] == pytest.approx(np.mean(vals), abs=1e-14)
    assert a.delta_star == 0.0
    assert a.model == pytest.approx(np.mean(data))


def test_single_candidate_and_ties():
    data = np.arange(10.0)
    res = cross_validate_delta(toy_fit, data, CvPlan((7.0,)), toy_score)
    assert res.delta_star == 7.0
    flat = cross_validate_delta(lambda tr, d: 0.0, data, CvPlan((2.0, 1.0, 3.0)),
                                toy_score, refit=False)
    assert flat.delta_star == 1.0


def test_failures_are_excluded():
    def fit(train, delta):
        if delta == 0.0:
            raise RuntimeError("boom")
        return toy_fit(train, delta)

    res = cross_validate_delta(fit, np.arange(20.0), CvPlan((0.0, 1.0), n_splits=3),
                               toy_score)
    assert res.delta_star == 1.0
    assert len(res.failures) == 3
    assert res.table[0]["n_ok"] == 0
    with pytest.raises(RuntimeError):
        cross_validate_delta(lambda tr, d: 1 / 0, np.arange(20.0), CvPlan((0.0, 1.0)),
                             toy_score)


@pytest.mark.parametrize("task", ["mean", "lad"])
def test_clean_data_prefers_small_budget(task):
    fit, score = mean_task() if task == "mean" else lad_task()
    kind = "mean_mixture" if task == "mean" else "regression_shift"
    for s in range(10):
        d, _ = generate(ContaminationModel(kind, 0.0, 500, s))
        res = cross_validate_delta(fit, d, CvPlan(IVS_GRID, seed=s), score, refit=False)
        assert res.delta_star <= 1e-2


def test_mixture_budget_in_good_range():
    fit, score = mean_task(metric="clean_loss")
    for s in range(3):
        d, clean = generate(ContaminationModel("mean_mixture", 0.45, 1000, s))
        plan = CvPlan((0.25, 0.5, 1, 2, 2.5, 4), seed=s, metric="clean_loss")
        res = cross_validate_delta(fit, (d, clean), plan, score, refit=False)
        assert 0.5 <= res.delta_star <= 2.5


def test_sweep_shape(tmp_path):
    res = sweep("delta", [1.0, 0.0, 2.0], lambda v, s: v + s % 7, 4, seed=1)
    assert [p[0] for p in res.points] == [0.0, 1.0, 2.0]
    # same seeds at every value
    offs = [m - v for v, m, _ in res.points]
    assert np.allclose(offs, offs[0])
    one = sweep("r", [0.5], lambda v, s: 3.0, 1)
    assert one.points == [(0.5, 3.0, 0.0)]
    path = tmp_path / "s.csv"
    res.to_csv(path)
    assert path.read_text().splitlines()[0] == "delta,mean_metric,std_metric"
    with pytest.raises(ValueError):
        sweep("x", [1.0], lambda v, s: 0.0, 1)
    assert isinstance(res, SweepResult)
