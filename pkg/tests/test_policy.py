import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import vemrl.env_mdp
import vemrl.evaluation
import vemrl.theory
from vemrl.dataset import BehaviorPolicyConfig, collect, iter_steps
from vemrl.env_mdp import enumerate_states, is_optimal
from vemrl.features import Encoder, EncoderConfig
from vemrl.policy import (
    PolicyParams,
    PpoConfig,
    SupportError,
    action_probs,
    greedy_policy_from_q,
    load_policy,
    make_batch,
    ppo_update,
    softmax,
    surrogate_and_grad,
    surrogate_value,
    train_bc,
    train_policy,
    write_diagnostics,
)
from vemrl.theory import build_tabular, value_iteration
from vemrl.vem import TableValueModel, VemTrainConfig, freeze, train_vem

K0 = EncoderConfig(history_k=0)


def table_vem(env, fn, k=0):
    """Q table over every enumerated state; fn(state, n_templates) gives the row."""
    enc = Encoder(env, EncoderConfig(history_k=k))
    return TableValueModel(enc, {s.canonical_key(k): fn(s, enc.templates.n) for s in enumerate_states(env, k)}, k)


def live_states(env, k=0):
    return [s for s in enumerate_states(env, k) if not s.done]


# ------------------------------------------------------------ distribution


@pytest.mark.parametrize("kind", ["tabular", "linear", "mlp"])
def test_init_is_uniform(env10, kind):
    pol = PolicyParams.init(kind, env10, K0, hidden=8, seed=1)
    for s in live_states(env10)[:10]:
        p = action_probs(pol, env10, s)
        assert np.allclose(p, 1 / pol.n_actions, atol=1e-15)
        assert abs(p.sum() - 1) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=30), st.floats(-100, 100))
def test_softmax_normalized_and_shift_invariant(z, c):
    z = np.array(z)
    p = softmax(z)
    assert abs(p.sum() - 1) <= 1e-12 and np.all(p >= 0)
    assert np.argmax(p) == np.argmax(softmax(z + c))
    assert np.allclose(p, softmax(z + c), atol=1e-12)


@pytest.mark.parametrize("kind", ["linear", "mlp"])
def test_probs_sum_to_one_after_training(small_env, small_data, kind):
    vem = table_vem(small_env, lambda s, n: np.random.default_rng(len(repr(s))).random(n))
    pol, _ = train_policy(small_data[1], vem, small_env, PpoConfig(epochs=1, hidden=8, learning_rate=0.05), kind, K0)
    for s in live_states(small_env)[:20]:
        assert abs(pol.probs(s).sum() - 1) <= 1e-12


# --------------------------------------------------------------- surrogate


def test_surrogate_point_mass_and_uniform(env3):
    rng = np.random.default_rng(0)
    rows = {}
    vem = table_vem(env3, lambda s, n: rows.setdefault(s.canonical_key(0), rng.random(n)))
    states = live_states(env3)
    pol = PolicyParams.init("tabular", env3, K0)
    assert abs(surrogate_value(pol, vem, states) - np.mean([rows[s.canonical_key(0)].mean() for s in states])) <= 1e-12
    pol.register(states)
    for i, s in enumerate(states):
        pol.params[0][i, 3] = 1e4
    want = np.mean([rows[s.canonical_key(0)][3] for s in states])
    assert abs(surrogate_value(pol, vem, states) - want) <= 1e-12


def test_surrogate_monte_carlo_agrees(env3):
    rng = np.random.default_rng(1)
    vem = table_vem(env3, lambda s, n: rng.random(n))
    states = live_states(env3)
    pol = PolicyParams.init("tabular", env3, K0)
    pol.register(states)
    pol.params[0][:] = np.random.default_rng(2).normal(size=pol.params[0].shape)
    exact = surrogate_value(pol, vem, states)
    mc = surrogate_value(pol, vem, states, m=10_000, rng=np.random.default_rng(3))
    assert abs(mc - exact) <= 0.01 * exact


def test_ratio_one_clipped_equals_unclipped(small_env, small_data):
    vem = table_vem(small_env, lambda s, n: np.random.default_rng(len(repr(s))).random(n))
    pol = PolicyParams.init("mlp", small_env, K0, hidden=8)
    states = [r.state() for r in small_data[1][:20]]
    batch = make_batch(pol, pol.copy(), vem, states, 8, np.random.default_rng(0))
    obj, _, diag = surrogate_and_grad(pol, batch, 0.2, 0.0)
    assert obj == diag["unclipped_objective"]
    assert diag["clip_fraction"] == 0.0
    assert abs(obj) <= 1e-12  # centred advantages at ratio one


def test_constant_q_leaves_parameters_unchanged(small_env, small_data):
    vem = table_vem(small_env, lambda s, n: np.full(n, 0.7))
    states = [r.state() for r in small_data[1]]
    for kind in ("tabular", "linear", "mlp"):
        pol = PolicyParams.init(kind, small_env, K0, hidden=8, seed=2)
        pol.register(states)
        before = [p.copy() for p in pol.params]
        cfg = PpoConfig(entropy_coef=0.0, learning_rate=0.1)
        ppo_update(pol, vem, states, cfg, np.random.default_rng(0))
        for a, b in zip(before, pol.params):
            assert np.max(np.abs(a - b)) <= 1e-12


@pytest.mark.parametrize("kind", ["tabular", "linear", "mlp"])
@pytest.mark.parametrize("clip", [0.05, 0.2, 10.0])
def test_gradient_matches_finite_differences(small_env, small_data, kind, clip):
    vem = table_vem(small_env, lambda s, n: np.random.default_rng(len(repr(s))).random(n))
    states = [r.state() for r in small_data[1][:12]]
    snap = PolicyParams.init(kind, small_env, K0, hidden=5, seed=1)
    snap.register(states)
    rng = np.random.default_rng(4)
    pol = snap.copy()
    pol.params = [p + rng.normal(scale=0.3, size=p.shape) for p in pol.params]
    batch = make_batch(pol, snap, vem, states, 4, rng)
    _, grads, _ = surrogate_and_grad(pol, batch, clip, 0.05)
    h = 1e-6
    worst = 0.0
    for pi, p in enumerate(pol.params):
        for idx in rng.choice(p.size, size=min(p.size, 25), replace=False):
            plus = [q.copy() for q in pol.params]
            minus = [q.copy() for q in pol.params]
            plus[pi].flat[idx] += h
            minus[pi].flat[idx] -= h
            num = (surrogate_and_grad(pol, batch, clip, 0.05, plus)[0]
                   - surrogate_and_grad(pol, batch, clip, 0.05, minus)[0]) / (2 * h)
            worst = max(worst, abs(num - grads[pi].flat[idx]))
    assert worst <= 1e-4


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(-2, 2), st.floats(0.01, 0.5))
def test_clipped_term_never_exceeds_unclipped(log_ratio, adv, clip):
    r = np.exp(log_ratio)
    term = min(r * adv, np.clip(r, 1 - clip, 1 + clip) * adv)
    assert term <= r * adv + 1e-15
    if adv > 0:
        assert term <= (1 + clip) * adv + 1e-12
    else:
        assert term <= (1 - clip) * adv + 1e-12


def test_clip_bound_on_objective(small_env, small_data):
    vem = table_vem(small_env, lambda s, n: np.random.default_rng(len(repr(s))).random(n))
    states = [r.state() for r in small_data[1][:20]]
    snap = PolicyParams.init("tabular", small_env, K0)
    snap.register(states)
    pol = snap.copy()
    pol.params[0][:] = np.random.default_rng(0).normal(scale=3, size=pol.params[0].shape)
    batch = make_batch(pol, snap, vem, states, 8, np.random.default_rng(1))
    obj, _, diag = surrogate_and_grad(pol, batch, 0.2, 0.0)
    A = batch.advantages
    assert obj <= diag["unclipped_objective"] + 1e-12
    assert obj <= np.mean(np.where(A > 0, 1.2 * A, 0.8 * A)) + 1e-12
    assert diag["clip_fraction"] > 0


# ---------------------------------------------------------------- training


@pytest.fixture(scope="module")
def trained_vem(small_env, small_data):
    m, _ = train_vem(small_data[1], small_env, VemTrainConfig(), "tabular", K0)
    return freeze(m)


def test_zero_epochs_returns_init(small_env, small_data, trained_vem):
    pol, hist = train_policy(small_data[1], trained_vem, small_env, PpoConfig(epochs=0), "linear", K0)
    init = PolicyParams.init("linear", small_env, K0)
    assert hist == []
    assert pol.content_hash() == init.content_hash()


@pytest.mark.parametrize("kind", ["tabular", "mlp"])
def test_same_seed_same_policy(small_env, small_data, trained_vem, kind):
    cfg = PpoConfig(epochs=2, hidden=8, learning_rate=0.05, seed=5)
    a, _ = train_policy(small_data[1], trained_vem, small_env, cfg, kind, K0)
    b, _ = train_policy(small_data[1], trained_vem, small_env, cfg, kind, K0)
    assert a.content_hash() == b.content_hash()
    c, _ = train_policy(small_data[1], trained_vem, small_env, PpoConfig(epochs=2, hidden=8, learning_rate=0.05,
                                                                         seed=6), kind, K0)
    assert c.content_hash() != a.content_hash()


def test_training_never_steps_the_environment(monkeypatch, small_env, small_data, trained_vem):
    calls = []

    def counting(*a, **k):
        calls.append(1)
        raise AssertionError("environment stepped during policy training")

    for mod in (vemrl.env_mdp, vemrl.evaluation, vemrl.theory):
        monkeypatch.setattr(mod, "step", counting)
    h = trained_vem.content_hash()
    train_policy(small_data[1], trained_vem, small_env, PpoConfig(epochs=2), "tabular", K0)
    train_bc(small_data[1], small_env, "linear", K0, epochs=1)
    assert calls == []
    assert trained_vem.content_hash() == h


def test_training_improves_surrogate(small_env, small_data, trained_vem):
    cfg = PpoConfig(learning_rate=0.1, epochs=10, actions_per_state=16)
    pol, hist = train_policy(small_data[1], trained_vem, small_env, cfg, "tabular", K0)
    states = [r.state() for r in small_data[1]]
    j0 = surrogate_value(PolicyParams.init("tabular", small_env, K0), trained_vem, states)
    assert hist[-1]["J_exact"] > j0
    assert len([h for h in hist if "J_exact" in h]) == cfg.epochs


def test_diagnostics_csv(tmp_path, small_env, small_data, trained_vem):
    _, hist = train_policy(small_data[1], trained_vem, small_env, PpoConfig(epochs=1), "tabular", K0)
    write_diagnostics(hist, tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0].startswith("iteration,epoch,objective,loss")
    assert len(lines) == len(hist) + 1


def test_config_validation():
    for bad in (dict(clip_epsilon=0), dict(actions_per_state=0), dict(epochs=-1), dict(learning_rate=0),
                dict(entropy_coef=-1), dict(update_steps=0)):
        with pytest.raises(ValueError):
            PpoConfig(**bad)


# --------------------------------------------------------------- greedy / io


def test_greedy_on_exact_q_is_optimal(env3):
    mdp = build_tabular(env3)
    ex = value_iteration(mdp, 0.95, 1e-10)
    vem = TableValueModel(Encoder(env3, K0), {s.canonical_key(0): ex.q[i] for i, s in enumerate(mdp.states)})
    det = greedy_policy_from_q(vem, env3)
    for i, s in enumerate(mdp.states):
        assert det.greedy_index(s) == int(np.argmax(ex.q[i]))
        # every optimal step pays 1, so on the goal screen Q* prefers another lap over completing
        if not s.done and s.screen_id != env3.tasks[0].goal.screen_id:
            assert is_optimal(env3, s, det.greedy_action(env3, s))


def test_greedy_masking_and_ties(env3):
    vem = table_vem(env3, lambda s, n: np.r_[np.ones(3), np.zeros(n - 3)])
    det = greedy_policy_from_q(vem, env3)
    assert all(det.greedy_index(s) == 0 for s in live_states(env3))
    mask = lambda s: np.r_[False, False, True, True, np.zeros(vem.encoder.templates.n - 4, bool)]
    det = greedy_policy_from_q(vem, env3, support=mask)
    assert all(det.greedy_index(s) == 2 for s in live_states(env3))
    assert all(det.probs(s)[2] == 1.0 for s in live_states(env3))
    with pytest.raises(SupportError):
        greedy_policy_from_q(vem, env3, support=lambda s: np.zeros(vem.encoder.templates.n, bool))


@pytest.mark.parametrize("kind", ["tabular", "linear", "mlp"])
def test_policy_file_round_trip(tmp_path, small_env, small_data, trained_vem, kind):
    pol, _ = train_policy(small_data[1], trained_vem, small_env, PpoConfig(epochs=1, hidden=8), kind, K0)
    pol.save(tmp_path / "p.bin")
    back = load_policy(tmp_path / "p.bin", small_env)
    assert back.content_hash() == pol.content_hash()
    for r in small_data[1][:30]:
        assert np.array_equal(back.probs(r.state()), pol.probs(r.state()))


def test_behavior_cloning_tabular_matches_frequencies(small_env, small_data):
    recs = small_data[1]
    bc = train_bc(recs, small_env, "tabular", K0)
    s0 = recs[0].state()
    key = bc.state_key(s0)
    acts = [bc.templates.index_of(r.action) for r in recs if bc.state_key(r.state()) == key]
    counts = np.bincount(acts, minlength=bc.n_actions) + 1e-3
    assert np.allclose(bc.probs(s0), counts / counts.sum(), atol=1e-12)
    assert bc.greedy_index(s0) == int(np.argmax(counts))


def test_behavior_cloning_on_scripted_data_imitates(small_env):
    trajs = collect(small_env, BehaviorPolicyConfig("scripted_optimal"), 30, 0)
    bc = train_bc(list(iter_steps(trajs)), small_env, "tabular", K0)
    seen = {}
    for r in iter_steps(trajs):
        seen.setdefault(bc.state_key(r.state()), set()).add(bc.templates.index_of(r.action))
    for r in iter_steps(trajs):
        assert bc.greedy_index(r.state()) in seen[bc.state_key(r.state())]
