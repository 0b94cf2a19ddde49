import numpy as np
import pytest

from ratlab.experiments import load_splits, model_config, preset, sweep_config
from ratlab.landscape import (SweepConfig, _system, empirical_landscape, expected_loss, fit_point,
                              landscape_tolerance)
from ratlab.theory import LandscapeGrid


@pytest.fixture(scope="module")
def setup():
    cfg = preset("landscape")
    sp = load_splits(cfg)
    return sp, model_config(cfg), sweep_config(cfg)


def test_zero_budget_gives_init_losses(setup):
    sp, mcfg, scfg = setup
    cfg = SweepConfig(budget=0, seed=scfg.seed)
    grid = np.linspace(0, 1, 5)
    for kind in ("rationale", "attention"):
        g = empirical_landscape(sp.train, len(sp.vocab), mcfg, kind, grid, cfg)
        fresh = _system(kind, len(sp.vocab), mcfg, cfg.seed)
        want = [expected_loss(fresh, kind, sp.train, [x, 1 - x]) for x in grid]
        np.testing.assert_array_equal(g.loss, want)
    # the two kinds start from the same predictor, so the corners coincide
    r = empirical_landscape(sp.train, len(sp.vocab), mcfg, "rationale", grid, cfg)
    a = empirical_landscape(sp.train, len(sp.vocab), mcfg, "attention", grid, cfg)
    assert r.loss[0] == a.loss[0] and r.loss[-1] == a.loss[-1]


def test_short_sweep_shapes(setup):
    sp, mcfg, _ = setup
    cfg = SweepConfig(budget=20)
    grid = np.linspace(0, 1, 5)
    r = empirical_landscape(sp.train, len(sp.vocab), mcfg, "rationale", grid, cfg)
    a = empirical_landscape(sp.train, len(sp.vocab), mcfg, "attention", grid, cfg)
    assert r.kind == "rationale-empirical" and a.kind == "attention-empirical"
    assert not r.failed.any() and not a.failed.any()
    assert abs(r.loss[0] - a.loss[0]) < 0.01 and abs(r.loss[-1] - a.loss[-1]) < 0.01
    tol = landscape_tolerance(r, a)
    assert a.loss[1:-1].min() <= min(a.loss[0], a.loss[-1]) + tol


def test_parallel_sweep_matches_serial(setup):
    sp, mcfg, _ = setup
    grid = np.linspace(0, 1, 3)
    serial = empirical_landscape(sp.train[:200], len(sp.vocab), mcfg, "rationale", grid,
                                 SweepConfig(budget=2))
    par = empirical_landscape(sp.train[:200], len(sp.vocab), mcfg, "rationale", grid,
                              SweepConfig(budget=2, workers=2))
    np.testing.assert_array_equal(serial.loss, par.loss)


def test_nonfinite_training_marks_point_failed(setup):
    sp, mcfg, _ = setup
    loss, failed = fit_point(sp.train[:64], len(sp.vocab), mcfg, "attention", 0.5,
                             SweepConfig(budget=3, lr=1e300))
    assert failed and np.isnan(loss)


def test_tolerance_and_excess():
    g = LandscapeGrid(np.linspace(0, 1, 3), np.array([0.0, 2.0, 1.0]), "rationale-empirical",
                      np.array([False, False, False]))
    assert g.interior_max_excess() == 1.0
    assert landscape_tolerance(g) == pytest.approx(0.04)


def test_sweep_validation(setup):
    sp, mcfg, _ = setup
    with pytest.raises(ValueError):
        SweepConfig(budget=-1)
    with pytest.raises(ValueError):
        fit_point(sp.train, len(sp.vocab), mcfg, "hybrid", 0.5, SweepConfig(budget=0))
