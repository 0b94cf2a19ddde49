import copy
import math

import numpy as np
import pytest

import ratlab.autograd as ag
import ratlab.training as T
from ratlab.autograd import Tape, Tensor, no_grad
from ratlab.data import Splits, SynthSpec, gen_synth
from ratlab.experiments import (final_metrics, load_splits, model_config, preset,
                                run_training, train_config)
from ratlab.models import ModelConfig, RationaleSystem, make_batches
from ratlab.training import (TrainConfig, TrainError, a2r_step, attention_step, build_system,
                             lambda_schedule, log_prob, new_state, rationale_loss_fixed,
                             reinforce_surrogate, rnp_step, skew_pretrain,
                             sparsity_continuity_penalty, train)

SMALL = ModelConfig(d_emb=8, hidden=4)


@pytest.fixture(scope="module")
def tiny():
    return gen_synth(SynthSpec([1.0, 0.8], n_train=96, n_dev=32, n_test=32, sentence_len=3, seed=1))


def P(v):
    return Tensor(np.array(v, dtype=float))


# -- losses ---------------------------------------------------------------

def test_loss_examples():
    assert float(T.loss_rationale(P([[1.0, 0.0]]), [0]).data) == pytest.approx(0.0, abs=1e-15)
    assert float(T.loss_rationale(P([[0.5, 0.5]]), [1]).data) == pytest.approx(math.log(2))
    assert float(T.loss_rationale(P([[0.8, 0.2]]), [1]).data) == pytest.approx(1.609438, abs=1e-6)
    assert float(T.loss_attention(P([[0.9, 0.1]]), [0]).data) == pytest.approx(0.105361, abs=1e-6)
    assert float(T.loss_js(P([[0.3, 0.7]]), P([[0.3, 0.7]])).data) == pytest.approx(0.0, abs=1e-15)
    assert float(T.loss_js(P([[1.0, 0.0]]), P([[0.0, 1.0]])).data) == pytest.approx(math.log(2))


def test_penalty_examples():
    m10 = np.zeros(100)
    m10[[1, 2, 3, 10, 11, 12, 13, 50, 51, 52]] = 1
    assert sparsity_continuity_penalty(m10, 20, 10, 1.0) == 0.0
    m30 = np.zeros(100)
    m30[:30] = 1
    assert sparsity_continuity_penalty(m30, 20, 10, 1.0) == pytest.approx(0.10, abs=1e-12)
    m12 = np.zeros(100)
    m12[::8][:12] = 1
    assert sparsity_continuity_penalty(m12, 20, 10, 1.0) == pytest.approx(0.02, abs=1e-12)


def test_penalty_zero_iff_within_caps():
    r = np.random.default_rng(0)
    for _ in range(500):
        t = int(r.integers(1, 40))
        m = (r.random(t) < r.random()).astype(float)
        s = float(r.uniform(1, 100))
        k = int(r.integers(0, 12))
        spans = int(m[0] + np.sum(m[1:] * (1 - m[:-1]))) if t else 0
        within = m.mean() <= s / 100 and spans <= k
        pen = sparsity_continuity_penalty(m, s, k, 1.0)
        assert (pen == 0.0) == within


def test_penalty_tensor_matches_numpy_and_is_differentiable():
    r = np.random.default_rng(1)
    probs = r.uniform(0.05, 0.95, size=(3, 12))
    x = Tensor(probs, requires_grad=True)
    with Tape() as tape:
        pen = sparsity_continuity_penalty(x, 20, 2, 1.0)
        loss = ag.sum_(pen)
    np.testing.assert_allclose(pen.data, sparsity_continuity_penalty(probs, 20, 2, 1.0), atol=1e-12)
    g = tape.backward(loss, [x])[x]
    assert np.all(np.isfinite(g)) and np.any(g != 0)


def test_lambda_schedule():
    assert lambda_schedule(TrainConfig(lam=1.0), 37) == 1.0
    ramp = TrainConfig(lam=1.0, lam_schedule="ramp", ramp_start=0, ramp_end=10)
    assert lambda_schedule(ramp, 5) == pytest.approx(0.5)
    assert lambda_schedule(ramp, 10) == pytest.approx(1.0)
    assert lambda_schedule(ramp, 15) == pytest.approx(1.0)
    assert lambda_schedule(ramp, 0) == 0.0


def test_config_validation():
    for bad in (dict(mode="x"), dict(lam=-1), dict(sparsity=0), dict(explore=2), dict(q=0),
                dict(lam_schedule="ramp", ramp_start=5, ramp_end=5), dict(granularity="word")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# -- policy gradient ------------------------------------------------------

def test_reinforce_unbiased_at_zero_baseline():
    theta = Tensor(np.array([0.3, -0.4]), requires_grad=True)
    losses = np.array([0.2, 1.1])
    n = 100_000
    pi = np.exp(theta.data) / np.exp(theta.data).sum()
    rng = np.random.default_rng(0)
    with Tape() as tape:
        probs = ag.softmax(ag.add(Tensor(np.zeros((n, 2))), theta))
        mask = T.sample_mask(probs.data, rng, 0.0)
        cost = mask @ losses
        sur = reinforce_surrogate(log_prob(probs, mask, "sentence"), cost, 0.0)
    est = tape.backward(sur, [theta])[theta]
    exact = sum(pi[i] * losses[i] * (np.eye(2)[i] - pi) for i in range(2))
    per = cost[:, None] * (mask - pi)
    sigma = per.std(axis=0) / math.sqrt(n)
    assert np.all(np.abs(est - exact) <= 3 * sigma)


def test_zero_advantage_gives_zero_policy_gradient():
    theta = Tensor(np.array([[5.0, -5.0]]), requires_grad=True)
    with Tape() as tape:
        probs = ag.softmax(theta)
        sur = reinforce_surrogate(log_prob(probs, np.array([[1.0, 0.0]]), "sentence"), np.zeros(1), 0.0)
    assert np.all(tape.backward(sur, [theta])[theta] == 0)


def test_baseline_converges_to_constant_cost(tiny):
    cfg = TrainConfig("rnp", lr_main=0.0, lr_policy=0.0)
    system = build_system(cfg, SMALL, len(tiny.vocab))
    system.f_r.head.out.W.data[...] = 0
    system.f_r.head.out.b.data[...] = 0
    state = new_state(system, cfg, np.random.default_rng(0))
    batches = make_batches(tiny.train, 32)
    for _ in range(40):
        for b in batches:
            rnp_step(system, b, cfg, state)
    assert abs(state.baseline - math.log(2)) < 1e-3


def test_rnp_step_only_moves_its_players(tiny):
    cfg = TrainConfig("rnp")
    system = build_system(cfg, SMALL, len(tiny.vocab))
    before = system.snapshot()
    state = new_state(system, cfg, np.random.default_rng(0))
    st = rnp_step(system, make_batches(tiny.train, 32)[0], cfg, state)
    assert np.isfinite(st.loss_r)
    changed = [not np.array_equal(a, t.data) for a, t in zip(before, system.params())]
    assert any(changed)


# -- A2R gradient routing -------------------------------------------------

def _a2r_pair(tiny, cfg):
    system = build_system(cfg, SMALL, len(tiny.vocab))
    return system, copy.deepcopy(system)


def test_lr_zero_contribution_does_not_reach_generator(tiny, monkeypatch):
    cfg = TrainConfig("a2r", lam=1.0)
    a, b = _a2r_pair(tiny, cfg)
    batch = make_batches(tiny.train, 32)[0]
    a2r_step(a, batch, cfg, new_state(a, cfg, np.random.default_rng(5)), 1.0)
    monkeypatch.setattr(T, "loss_rationale", lambda p, y: Tensor(np.array(0.7)))
    a2r_step(b, batch, cfg, new_state(b, cfg, np.random.default_rng(5)), 1.0)
    for x, y in zip(a.generator_params(), b.generator_params()):
        np.testing.assert_array_equal(x.data, y.data)
    assert any(not np.array_equal(x.data, y.data) for x, y in zip(a.f_r_params(), b.f_r_params()))


def test_lambda_zero_generator_update_matches_attention_system(tiny):
    cfg = TrainConfig("a2r", lam=0.0)
    a2r = build_system(cfg, SMALL, len(tiny.vocab))
    att = RationaleSystem("attention", len(tiny.vocab), SMALL, 0)
    sa, sb = new_state(a2r, cfg, np.random.default_rng(2)), new_state(att, cfg, np.random.default_rng(2))
    for batch in make_batches(tiny.train, 32)[:3]:
        # L_r also trains the shared encoder, so re-sync before every update
        src = dict(a2r.named_params())
        for name, t in att.named_params():
            t.data[...] = src[name].data
        a2r_step(a2r, batch, cfg, sa, 0.0)
        attention_step(att, batch, cfg, sb)
        for x, y in zip(a2r.generator_params(), att.generator_params()):
            np.testing.assert_array_equal(x.data, y.data)


def test_identical_predictors_give_no_js_gradient(tiny):
    cfg = TrainConfig("a2r")
    s = build_system(cfg, ModelConfig(d_emb=8, hidden=4, r_pooling="mean"), len(tiny.vocab))
    batch = make_batches(tiny.train, 8)[0]
    tape, t = T.a2r_forward(s, batch, cfg, np.random.default_rng(0), 1.0)
    with tape:
        same = T.loss_js(t["p_a"], ag.stop_gradient(t["p_a"]))
    g = tape.backward(same, s.params())
    assert all(np.all(np.abs(v) < 1e-15) for v in g.values())


def test_a2r_generator_gets_gradient_from_attention_side(tiny):
    cfg = TrainConfig("a2r")
    s = build_system(cfg, SMALL, len(tiny.vocab))
    tape, t = T.a2r_forward(s, make_batches(tiny.train, 32)[0], cfg, np.random.default_rng(0), 1.0)
    g = tape.backward(t["total"], s.generator_params())
    assert any(np.any(v != 0) for v in g.values())
    g_r = tape.backward(t["l_r"], s.generator_params())
    assert all(np.all(v == 0) for v in g_r.values())


def test_token_mode_penalty_enters_a2r_objective():
    sp = gen_synth(SynthSpec([1.0, 0.8], n_train=16, n_dev=4, n_test=4, sentence_len=3))
    cfg = TrainConfig("a2r", granularity="token", sparsity=5)
    s = build_system(cfg, SMALL, len(sp.vocab))
    tape, t = T.a2r_forward(s, make_batches(sp.train, 16, "token")[0], cfg, np.random.default_rng(0), 1.0)
    assert float(t["penalty"].data) > 0


# -- skew -----------------------------------------------------------------

def test_skew_zero_epochs_changes_nothing(tiny):
    cfg = TrainConfig("rnp")
    s = build_system(cfg, SMALL, len(tiny.vocab))
    before = s.snapshot()
    skew_pretrain(s, tiny.train, 0, cfg, np.random.default_rng(0))
    for a, t in zip(before, s.params()):
        np.testing.assert_array_equal(a, t.data)


def test_skew_leaves_generator_untouched(tiny):
    cfg = TrainConfig("rnp")
    s = build_system(cfg, SMALL, len(tiny.vocab))
    gen = [t.data.copy() for t in s.generator_params()]
    skew_pretrain(s, tiny.train, 2, cfg, np.random.default_rng(0), unit=1)
    for a, t in zip(gen, s.generator_params()):
        np.testing.assert_array_equal(a, t.data)


def test_skew_gap_grows_with_k():
    # 20 synonyms on the skewed slot keep k=10..20 short of saturation
    cfg = preset("interlock", **{"data.synth.cue_words": [200, 20]})
    sp = load_splits(cfg)
    gaps = []
    for k in (10, 20):
        tc = train_config(cfg, skew_epochs=k)
        s = build_system(tc, model_config(cfg), len(sp.vocab))
        skew_pretrain(s, sp.train, k, tc, np.random.default_rng(0))
        gold, skewed = (rationale_loss_fixed(s, sp.dev, u) for u in (0, 1))
        assert skewed < gold
        gaps.append(gold - skewed)
    assert gaps[1] > gaps[0]


# -- loop -----------------------------------------------------------------

def test_lr_zero_one_epoch_keeps_parameters(tiny):
    cfg = TrainConfig("a2r", epochs=1, lr_main=0.0, lr_policy=0.0, lr_generator=0.0)
    s = build_system(cfg, SMALL, len(tiny.vocab))
    before = s.snapshot()
    r = train(tiny, cfg, SMALL, system=s)
    assert len(r.trajectory) == 1
    for a, t in zip(before, s.params()):
        np.testing.assert_array_equal(a, t.data)


@pytest.mark.parametrize("mode", ["rnp", "a2r", "attention"])
def test_training_is_deterministic(tiny, mode):
    cfg = TrainConfig(mode, epochs=2, seed=4, skew_epochs=1 if mode != "attention" else 0)
    a = train(tiny, cfg, SMALL)
    b = train(tiny, cfg, SMALL)
    assert a.trajectory == b.trajectory or all(
        all((x[k] == y[k]) or (np.isnan(x[k]) and np.isnan(y[k])) for k in x)
        for x, y in zip(a.trajectory, b.trajectory))
    for x, y in zip(a.final_params, b.final_params):
        np.testing.assert_array_equal(x, y)


def test_trajectory_rows_and_best_epoch(tiny):
    r = train(tiny, TrainConfig("a2r", epochs=3, lam_schedule="ramp", ramp_end=2), SMALL)
    assert [row["epoch"] for row in r.trajectory] == [1, 2, 3]
    assert set(r.trajectory[0]) == set(T.TRAJECTORY_FIELDS)
    assert [row["lambda"] for row in r.trajectory] == [0.5, 1.0, 1.0]
    accs = [row["dev_acc"] for row in r.trajectory]
    assert r.best_epoch == 1 + int(np.argmax(accs))


def test_empty_split_rejected(tiny):
    with pytest.raises(TrainError):
        train(Splits([], tiny.dev, tiny.test, tiny.vocab), TrainConfig(), SMALL)


def test_separable_toy_rnp_learns():
    sp = gen_synth(SynthSpec([1.0, 0.8], n_train=1000, n_dev=200, n_test=200, sentence_len=3, seed=0))
    r = train(sp, TrainConfig("rnp", epochs=30, seed=0), ModelConfig(d_emb=16, hidden=8))
    assert max(row["dev_acc"] for row in r.trajectory) > 0.95


def _pi1(system, examples):
    with no_grad():
        return float(np.mean(np.concatenate(
            [system.generator.forward(b.ids, b.layout).data[:, 0] for b in make_batches(examples, 512)])))


@pytest.mark.slow
def test_interlocking_trajectories():
    """Predictor pre-trained on the decoy slot: RNP's pi_1 stays low, A2R's climbs past 0.9."""
    cfg = preset("interlock")
    sp = load_splits(cfg)
    traj = {}
    for mode in ("rnp", "a2r"):
        pis = []
        train(sp, train_config(cfg, mode=mode), model_config(cfg),
              on_epoch=lambda row, s: pis.append(_pi1(s, sp.dev)))
        traj[mode] = pis
    low = np.array(traj["rnp"]) < 0.1
    longest = max(len(run) for run in "".join("1" if v else "0" for v in low).split("0"))
    assert longest >= 20
    assert max(traj["a2r"]) > 0.9


@pytest.mark.slow
def test_skew_causes_the_rnp_trap():
    # with 20 decoy synonyms an unskewed RNP finds the gold slot; skew-20 traps it
    cfg = preset("interlock", **{"data.synth.cue_words": [200, 20]})
    pct = {}
    for k in (0, 20):
        splits, result, tcfg = run_training(cfg, mode="rnp", skew_epochs=k, seed=0)
        pct[k] = final_metrics(splits, result, tcfg).gold_unit_pct(0)
    assert pct[0] > 80.0
    assert pct[20] < 20.0

def test_evaluate_is_deterministic(tiny):
    cfg = TrainConfig("rnp", epochs=1)
    r = train(tiny, cfg, SMALL)
    a = T.evaluate(r.system, tiny.test, cfg)
    b = T.evaluate(r.system, tiny.test, cfg)
    assert a == b
    with pytest.raises(ValueError):
        T.evaluate(r.system, [], cfg)
