import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vemrl.dataset import StepRecord
from vemrl.env_mdp import click, enumerate_states, plain, ActionType
from vemrl.features import EncodeError, Encoder, EncoderConfig
from vemrl.modelio import ModelFormatError, dumps_params, loads_params
from vemrl.templates import click_cell
from vemrl.vem import (
    LinearNet,
    MlpNet,
    SupportMaskedValue,
    TabularNet,
    VemDiverged,
    VemTrainConfig,
    classify_metrics,
    f1_score,
    fit_features,
    freeze,
    grad_check_vem,
    load_vem,
    loads_vem,
    metrics_from_predictions,
    mse,
    predict_q,
    train_vem,
)


# -------------------------------------------------------------- features


def test_encode_is_deterministic(env10):
    enc = Encoder(env10)
    s = enumerate_states(env10, 2)[7]
    a = click(0.3, 0.4)
    assert np.array_equal(enc.encode(s, a), enc.encode(s, a))
    assert enc.encode(s, a).shape == (enc.dim,)


def test_encode_injective_on_chain_env(env3):
    enc = Encoder(env3)
    tm = enc.templates
    rows = set()
    n = 0
    for s in enumerate_states(env3, env3.history_k):
        for i in range(tm.n):
            rows.add(enc.encode(s, tm.decode(i)).tobytes())
            n += 1
    assert len(rows) == n


def test_click_cell_offset(env10):
    enc = Encoder(env10, EncoderConfig(grid=14))
    assert click_cell((0.5, 0.5), 14) == 7 * 14 + 7 == 105
    v = enc.encode(enumerate_states(env10, 0)[0], click(0.5, 0.5))
    start, size = enc.blocks["cell"]
    assert size == 196
    assert np.flatnonzero(v[start:start + size]).tolist() == [105]


def test_encode_templates_match_encode(env10):
    enc = Encoder(env10, EncoderConfig(history_k=1))
    tm = enc.templates
    for s in enumerate_states(env10, 1)[:15]:
        block = enc.encode_templates(s)
        assert np.array_equal(block, np.array([enc.encode(s, tm.decode(i)) for i in range(tm.n)]))


def test_encode_rejects_bad_state(env10):
    from vemrl.env_mdp import State

    with pytest.raises(EncodeError):
        Encoder(env10).encode(State("t0", 99), click(0.1, 0.1))


def test_features_are_finite(env10):
    enc = Encoder(env10)
    X = enc.encode_pairs((s, click(0.9, 0.9)) for s in enumerate_states(env10, 1)[:50])
    assert np.all(np.isfinite(X))


# -------------------------------------------------------------- training


def recs_with_labels(state_action_labels):
    out = []
    for i, (s, a, ell) in enumerate(state_action_labels):
        out.append(StepRecord(s.task_id, i, s.step_index, s.screen_id, s.typed_buffer, s.focused, s.scroll_offset,
                              s.history, a, 0, s.screen_id, ell=ell))
    return out


def test_tabular_cell_mean_is_two_thirds(env10):
    s = enumerate_states(env10, 0)[0]
    a = click(0.5, 0.5)
    recs = recs_with_labels([(s, a, 1), (s, a, 1), (s, a, 0)])
    model, curve = train_vem(recs, env10, VemTrainConfig(), "tabular", EncoderConfig(history_k=0))
    assert abs(model.q(s, a) - 2 / 3) <= 1e-12
    assert abs(predict_q(freeze(model), model.encoder.encode(s, a)) - 0.6667) <= 1e-4
    assert curve[-1] <= curve[0]


def test_tabular_unseen_cell_uses_prior(env10):
    s = enumerate_states(env10, 0)[0]
    recs = recs_with_labels([(s, click(0.5, 0.5), 1)])
    model, _ = train_vem(recs, env10, VemTrainConfig(), "tabular", EncoderConfig(history_k=0))
    assert model.q(s, plain(ActionType.PRESS_HOME)) == 0.5
    model0, _ = train_vem(recs, env10, VemTrainConfig(prior=0.0), "tabular", EncoderConfig(history_k=0))
    assert model0.q(s, plain(ActionType.PRESS_HOME)) == 0.0


def test_tabular_equals_per_cell_means(small_env, small_data):
    _, recs = small_data
    ec = EncoderConfig(history_k=0)
    model, _ = train_vem(recs, small_env, VemTrainConfig(), "tabular", ec)
    cells = {}
    for r in recs:
        key = model.encoder.encode(r.state(), r.action).tobytes()
        cells.setdefault(key, []).append(r.ell)
    for r in recs:
        want = np.mean(cells[model.encoder.encode(r.state(), r.action).tobytes()])
        assert abs(model.q(r.state(), r.action) - want) <= 1e-12


def test_mlp_memorizes_one_example():
    X = np.random.default_rng(0).normal(size=(1, 12))
    net, curve = fit_features("mlp", X, np.array([1.0]), VemTrainConfig(epochs=3000, learning_rate=0.5, batch_size=1))
    assert curve[-1] < 1e-3


def separable(n, d, seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=d)
    X = rng.normal(size=(n, d))
    margin = X @ w
    keep = np.abs(margin) > 0.3
    return X[keep], (margin[keep] > 0).astype(float)


def test_linear_separable_heldout_accuracy():
    X, y = separable(1200, 8, 1)
    n = len(X) // 2
    net, _ = fit_features("linear", X[:n], y[:n], VemTrainConfig(epochs=60, learning_rate=0.5))
    pred = np.clip(net.forward(X[n:]), 0, 1)
    assert metrics_from_predictions(pred, y[n:]).accuracy >= 0.95


@pytest.mark.parametrize("kind", ["linear", "mlp"])
def test_training_reduces_mse_and_is_deterministic(small_env, small_data, kind):
    _, recs = small_data
    cfg = VemTrainConfig(epochs=5, learning_rate=0.05, seed=3)
    m1, c1 = train_vem(recs, small_env, cfg, kind)
    m2, c2 = train_vem(recs, small_env, cfg, kind)
    assert c1[-1] <= c1[0]
    assert c1 == c2
    assert all(np.array_equal(a, b) for a, b in zip(m1.net.params, m2.net.params))
    assert len(c1) == cfg.epochs + 1


def test_mse_matches_two_line_recomputation(small_env, small_data):
    _, recs = small_data
    model, curve = train_vem(recs, small_env, VemTrainConfig(epochs=3, learning_rate=0.05), "mlp")
    X = model.encoder.encode_pairs((r.state(), r.action) for r in recs)
    y = np.array([r.ell for r in recs], float)
    out = np.clip(model.net.forward(X), 0, 1)
    assert abs(curve[-1] - float(np.mean((out - y) ** 2))) <= 1e-10
    assert abs(mse(model, X, y) - curve[-1]) <= 1e-10
    loss, _ = model.net.loss_and_grads(X[:64], y[:64])
    assert abs(loss - float(np.mean((model.net.forward(X[:64]) - y[:64]) ** 2))) <= 1e-10


def test_training_errors(small_env):
    with pytest.raises(ValueError):
        train_vem([], small_env)
    with pytest.raises(ValueError):
        VemTrainConfig(epochs=0)
    X = np.ones((4, 3))
    X[0, 0] = np.nan
    with pytest.raises(VemDiverged):
        fit_features("linear", X, np.ones(4), VemTrainConfig())


# ------------------------------------------------------------ prediction


def test_predict_dimension_mismatch(small_env, small_data):
    model, _ = train_vem(small_data[1], small_env, VemTrainConfig(epochs=1), "linear")
    with pytest.raises(ValueError):
        model.predict(np.zeros((1, model.dim + 1)))


@pytest.mark.parametrize("squash", ["sigmoid", "softsign"])
def test_mlp_output_in_unit_interval(squash):
    net = MlpNet(20, np.random.default_rng(1), 16, squash)
    net.params = [p * 30 for p in net.params]
    X = np.random.default_rng(2).normal(scale=10, size=(10_000, 20))
    out = net.forward(X)
    assert np.all((out >= 0) & (out <= 1))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=6, max_size=6), st.integers(0, 1000))
def test_linear_output_range_property(x, seed):
    net = LinearNet(6)
    net.params = [np.random.default_rng(seed).normal(size=6) * 100, np.zeros(1)]
    v = net.forward(np.array([x]))[0]
    assert 0.0 <= v <= 1.0


# --------------------------------------------------------- gradient checks


def random_batch(d, n, seed):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, d)), rng.integers(0, 2, n).astype(float)


@pytest.mark.parametrize("squash", ["sigmoid", "softsign"])
def test_linear_gradients(squash):
    X, y = random_batch(7, 16, 0)
    net = LinearNet(7, squash=squash)
    net.params = [np.random.default_rng(1).normal(size=7), np.array([0.3])]
    assert grad_check_vem(net, X, y, l2=0.01) <= 1e-6


@pytest.mark.parametrize("squash", ["sigmoid", "softsign"])
def test_mlp_gradients(squash):
    X, y = random_batch(5, 12, 2)
    net = MlpNet(5, np.random.default_rng(3), hidden=6, squash=squash)
    assert grad_check_vem(net, X, y, l2=0.01) <= 1e-4


def test_zero_model_zero_data_zero_weight_gradient():
    net = LinearNet(4)
    _, (gw, gb) = net.loss_and_grads(np.zeros((3, 4)), np.zeros(3))
    assert np.all(gw == 0)
    # squashed output is 0.5 at z = 0, so only the bias sees a residual
    assert gb[0] > 0


def test_grad_check_rejects_tabular():
    with pytest.raises(ValueError):
        grad_check_vem(TabularNet(3), np.zeros((1, 3)), np.zeros(1))


# ---------------------------------------------------------------- metrics


def test_reference_metric_rows():
    assert round(f1_score(0.81, 0.78), 2) == 0.79
    assert abs(f1_score(0.81, 0.78) - 2 * 0.81 * 0.78 / 1.59) < 1e-15
    assert round(f1_score(0.82, 0.79), 2) == 0.80


def test_perfect_predictor():
    y = np.array([0, 1, 1, 0, 1])
    m = metrics_from_predictions(y.astype(float), y)
    assert (m.precision, m.recall, m.f1, m.accuracy, m.threshold) == (1.0, 1.0, 1.0, 1.0, 0.5)


def test_degenerate_classes_give_zeros():
    m = metrics_from_predictions(np.zeros(4), np.zeros(4))
    assert (m.precision, m.recall, m.f1, m.accuracy) == (0.0, 0.0, 0.0, 1.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=60))
def test_metric_identities(rows):
    pred = np.array([p for p, _ in rows])
    y = np.array([t for _, t in rows])
    m = metrics_from_predictions(pred, y)
    hit = pred >= 0.5
    tp, tn = np.sum(hit & (y == 1)), np.sum(~hit & (y == 0))
    assert m.accuracy == pytest.approx((tp + tn) / len(y), abs=1e-12)
    want = 2 * m.precision * m.recall / (m.precision + m.recall) if m.precision + m.recall > 0 else 0.0
    assert abs(m.f1 - want) <= 1e-12
    assert all(0 <= v <= 1 for v in (m.precision, m.recall, m.f1, m.accuracy))


def test_classify_metrics_on_model(small_env, small_data):
    model, _ = train_vem(small_data[1], small_env, VemTrainConfig(), "tabular")
    X = model.encoder.encode_pairs((r.state(), r.action) for r in small_data[1])
    y = np.array([r.ell for r in small_data[1]])
    m = classify_metrics(model, X, y)
    assert m.n == len(y) and m.threshold == 0.5


# ---------------------------------------------------------------- freezing


@pytest.mark.parametrize("kind", ["tabular", "linear", "mlp"])
def test_freeze_save_load_parity(tmp_path, small_env, small_data, kind):
    model, _ = train_vem(small_data[1], small_env, VemTrainConfig(epochs=2, learning_rate=0.05), kind)
    frozen = freeze(model)
    X = model.encoder.encode_pairs((r.state(), r.action) for r in small_data[1])
    rng = np.random.default_rng(0)
    R = X[rng.integers(0, len(X), 1000)]
    if kind != "tabular":
        R = R + rng.normal(scale=0.1, size=R.shape)
    assert np.array_equal(model.predict(R), frozen.predict(R))
    frozen.save(tmp_path / "vem.bin")
    loaded = load_vem(tmp_path / "vem.bin", small_env)
    assert np.array_equal(loaded.predict(R), frozen.predict(R))
    assert loaded.content_hash() == frozen.content_hash()
    assert (tmp_path / "vem.bin").read_bytes() == frozen.dumps()


def test_frozen_handle_rejects_mutation(small_env, small_data):
    model, _ = train_vem(small_data[1], small_env, VemTrainConfig(epochs=1), "mlp")
    frozen = freeze(model)
    with pytest.raises(AttributeError):
        frozen.params = []
    with pytest.raises(AttributeError):
        frozen._net = None
    with pytest.raises(ValueError):
        frozen.param_arrays()[0][0, 0] = 1.0
    assert not hasattr(frozen, "fit") and not hasattr(frozen, "loss_and_grads")
    h = frozen.content_hash()
    model.net.params[0][:] = 0.0  # mutating the source leaves the frozen copy alone
    assert frozen.content_hash() == h
    q = frozen.q_templates(small_data[1][0].state())
    with pytest.raises(ValueError):
        q[0] = 1.0


def test_model_file_layout(small_env, small_data):
    model, _ = train_vem(small_data[1], small_env, VemTrainConfig(epochs=1), "linear")
    raw = freeze(model).dumps()
    header, arrays = loads_params(raw)
    assert header["kind"] == "linear" and header["dim"] == model.dim
    assert "sha256" in header
    assert arrays[0].dtype == np.dtype("<f8")
    with pytest.raises(ModelFormatError):
        loads_params(raw[:-8])
    with pytest.raises(ModelFormatError):
        loads_vem(dumps_params({"format": "policy"}, []), small_env)


def test_support_mask_fills_unseen_pairs(small_env, small_data):
    _, recs = small_data
    model, _ = train_vem(recs, small_env, VemTrainConfig(), "tabular", EncoderConfig(history_k=0))
    masked = SupportMaskedValue(freeze(model), recs)
    s = recs[0].state()
    q, mask = masked.q_templates(s), masked.support_mask(s)
    seen = {masked.encoder.templates.index_of(r.action) for r in recs if r.state().canonical_key(0) == s.canonical_key(0)}
    assert set(np.flatnonzero(mask)) == seen
    assert np.all(q[~mask] == 0.0)
    assert np.array_equal(q[mask], freeze(model).q_templates(s)[mask])
