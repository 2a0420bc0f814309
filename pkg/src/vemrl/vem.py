"""Value environment model: regress (state, action) features onto binary labels, then freeze.

Three regressors share one interface:

- ``tabular``: a per-feature-vector mean (the closed-form least-squares fit),
- ``linear``: ``sigmoid(w . x + b)``,
- ``mlp``: one tanh hidden layer followed by a sigmoid output.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .dataset import StepRecord
from .env_mdp import Action, EnvSpec, State
from .features import Encoder, EncoderConfig
from .modelio import ModelFormatError, dumps_params, loads_params

log = logging.getLogger(__name__)

KINDS = ("tabular", "linear", "mlp")


class VemDiverged(FloatingPointError):
    pass


@dataclass
class VemTrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    l2: float = 0.0
    momentum: float = 0.0
    adam: bool = False
    hidden: int = 64
    prior: float = 0.5
    squash: str = "sigmoid"

    def __post_init__(self):
        if self.squash not in SQUASHES:
            raise ValueError(f"squash must be one of {tuple(SQUASHES)}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")
        if not 0.0 <= self.prior <= 1.0:
            raise ValueError("prior must lie in [0, 1]")


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softsign01(z):
    return 0.5 * (1.0 + z / (1.0 + np.abs(z)))


# squash name -> (map to (0, 1), derivative written in terms of z)
SQUASHES = {
    "sigmoid": (sigmoid, lambda z: sigmoid(z) * (1.0 - sigmoid(z))),
    "softsign": (softsign01, lambda z: 0.5 / (1.0 + np.abs(z)) ** 2),
}


# ---------------------------------------------------------------- networks


class TabularNet:
    kind = "tabular"

    def __init__(self, dim: int, prior: float = 0.5):
        self.dim = dim
        self.prior = float(prior)
        self.table: dict[bytes, list[float]] = {}  # key -> [label sum, count]

    @staticmethod
    def row_key(row: np.ndarray) -> bytes:
        return hashlib.blake2b(np.ascontiguousarray(row, dtype="<f8").tobytes(), digest_size=16).digest()

    def fit(self, X: np.ndarray, y: np.ndarray) -> None:
        self.table = {}
        for row, t in zip(X, y):
            cell = self.table.setdefault(self.row_key(row), [0.0, 0.0])
            cell[0] += float(t)
            cell[1] += 1.0

    def forward(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(len(X))
        for i, row in enumerate(X):
            cell = self.table.get(self.row_key(row))
            out[i] = self.prior if cell is None else cell[0] / cell[1]
        return out

    def arrays(self) -> list[np.ndarray]:
        keys = sorted(self.table)
        return [np.array([self.table[k] for k in keys]).reshape(-1, 2)]

    def header(self) -> dict:
        return {"keys": [k.hex() for k in sorted(self.table)], "prior": self.prior}

    @classmethod
    def from_arrays(cls, dim: int, header: dict, arrays) -> "TabularNet":
        net = cls(dim, header["prior"])
        net.table = {bytes.fromhex(k): [float(s), float(c)] for k, (s, c) in zip(header["keys"], arrays[0])}
        return net


class LinearNet:
    kind = "linear"

    def __init__(self, dim: int, rng: np.random.Generator | None = None, squash: str = "sigmoid"):
        self.dim = dim
        self.squash = squash
        self.params = [np.zeros(dim), np.zeros(1)]

    def forward(self, X):
        w, b = self.params
        return SQUASHES[self.squash][0](X @ w + b[0])

    def loss_and_grads(self, X, y, l2=0.0):
        w, b = self.params
        f, df = SQUASHES[self.squash]
        z = X @ w + b[0]
        r = f(z) - y
        loss = float(np.mean(r * r) + l2 * np.dot(w, w))
        dz = 2.0 * r * df(z) / len(y)
        return loss, [X.T @ dz + 2.0 * l2 * w, np.array([dz.sum()])]


class MlpNet:
    kind = "mlp"

    def __init__(self, dim: int, rng: np.random.Generator | None = None, hidden: int = 64,
                 squash: str = "sigmoid"):
        rng = rng or np.random.default_rng(0)
        self.dim = dim
        self.squash = squash
        self.params = [
            rng.normal(0.0, 1.0 / np.sqrt(max(dim, 1)), (hidden, dim)),
            np.zeros(hidden),
            rng.normal(0.0, 1.0 / np.sqrt(hidden), hidden),
            np.zeros(1),
        ]

    def forward(self, X):
        W1, b1, w2, b2 = self.params
        return SQUASHES[self.squash][0](np.tanh(X @ W1.T + b1) @ w2 + b2[0])

    def loss_and_grads(self, X, y, l2=0.0):
        W1, b1, w2, b2 = self.params
        f, df = SQUASHES[self.squash]
        H = np.tanh(X @ W1.T + b1)
        z = H @ w2 + b2[0]
        r = f(z) - y
        loss = float(np.mean(r * r) + l2 * (np.sum(W1 * W1) + np.dot(w2, w2)))
        dz = 2.0 * r * df(z) / len(y)
        dH = np.outer(dz, w2) * (1.0 - H * H)
        return loss, [dH.T @ X + 2.0 * l2 * W1, dH.sum(axis=0), H.T @ dz + 2.0 * l2 * w2, np.array([dz.sum()])]


def make_net(kind: str, dim: int, config: VemTrainConfig):
    rng = np.random.default_rng(config.seed)
    if kind == "tabular":
        return TabularNet(dim, config.prior)
    if kind == "linear":
        return LinearNet(dim, rng, config.squash)
    if kind == "mlp":
        return MlpNet(dim, rng, config.hidden, config.squash)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")


# ------------------------------------------------------------ value model


class ValueModel:
    """Trainable Q_theta(s, a): an encoder plus one of the networks above."""

    def __init__(self, kind: str, encoder: Encoder, net):
        self.kind = kind
        self.encoder = encoder
        self.net = net

    @property
    def dim(self) -> int:
        return self.encoder.dim

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            raise ValueError(f"feature dimension {X.shape[1]} != model dimension {self.dim}")
        return np.clip(self.net.forward(X), 0.0, 1.0)

    def q(self, state: State, action: Action) -> float:
        return float(self.predict(self.encoder.encode(state, action)[None])[0])

    def q_templates(self, state: State) -> np.ndarray:
        return self.predict(self.encoder.encode_templates(state))


def predict_q(model, feature) -> float:
    """Q value of one feature vector, for a trainable or frozen model."""
    return float(model.predict(np.asarray(feature, dtype=float)[None])[0])


def mse(model, X: np.ndarray, y: np.ndarray) -> float:
    """Empirical squared error, without the weight penalty."""
    return float(np.mean((model.predict(X) - y) ** 2))


def encode_records(encoder: Encoder, records: Sequence[StepRecord]) -> tuple[np.ndarray, np.ndarray]:
    if not records:
        raise ValueError("empty labeled dataset")
    X = encoder.encode_pairs((r.state(), r.action) for r in records)
    y = np.array([r.ell for r in records], dtype=float)
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 or 1")
    return X, y


class _Optimizer:
    def __init__(self, params, config: VemTrainConfig):
        self.lr = config.learning_rate
        self.momentum = config.momentum
        self.adam = config.adam
        self.v = [np.zeros_like(p) for p in params]
        self.m2 = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        for p, g, v, s in zip(params, grads, self.v, self.m2):
            if self.adam:
                v *= 0.9
                v += 0.1 * g
                s *= 0.999
                s += 0.001 * g * g
                vh = v / (1 - 0.9 ** self.t)
                sh = s / (1 - 0.999 ** self.t)
                p -= self.lr * vh / (np.sqrt(sh) + 1e-8)
            else:
                v *= self.momentum
                v += g
                p -= self.lr * v


def fit_features(kind: str, X: np.ndarray, y: np.ndarray, config: VemTrainConfig, net=None):
    """Fit a network on a feature matrix; returns (net, per-epoch MSE curve)."""
    if len(X) == 0:
        raise ValueError("empty labeled dataset")
    net = net or make_net(kind, X.shape[1], config)

    def curve_point():
        return float(np.mean((np.clip(net.forward(X), 0, 1) - y) ** 2))

    curve = [curve_point()]
    if kind == "tabular":
        net.fit(X, y)
        curve.append(curve_point())
        return net, curve
    rng = np.random.default_rng([config.seed, 1])
    opt = _Optimizer(net.params, config)
    n = len(X)
    it = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = net.loss_and_grads(X[idx], y[idx], config.l2)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise VemDiverged(f"non-finite loss at epoch {epoch}, step {it}")
            opt.step(net.params, grads)
            it += 1
        curve.append(curve_point())
        log.debug("vem epoch %d mse %.6f", epoch + 1, curve[-1])
    return net, curve


def train_vem(records: Sequence[StepRecord], env: EnvSpec, config: VemTrainConfig | None = None,
              kind: str = "mlp", encoder_config: EncoderConfig | None = None) -> tuple[ValueModel, list[float]]:
    """Train on labeled steps; the curve holds the MSE before training and after each epoch."""
    config = config or VemTrainConfig()
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")
    encoder = Encoder(env, encoder_config)
    X, y = encode_records(encoder, records)
    net, curve = fit_features(kind, X, y, config)
    return ValueModel(kind, encoder, net), curve


# ------------------------------------------------------------- diagnostics


def relative_error(a, b) -> np.ndarray:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b) / np.maximum(1e-7, np.abs(a) + np.abs(b))


def grad_check_vem(net, X: np.ndarray, y: np.ndarray, l2: float = 0.0, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    net = net.net if isinstance(net, ValueModel) else net
    if not hasattr(net, "loss_and_grads"):
        raise ValueError("gradient check needs a linear or mlp network")
    _, grads = net.loss_and_grads(X, y, l2)
    worst = 0.0
    for p, g in zip(net.params, grads):
        flat = p.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            up = net.loss_and_grads(X, y, l2)[0]
            flat[i] = old - step
            down = net.loss_and_grads(X, y, l2)[0]
            flat[i] = old
            num = (up - down) / (2 * step)
            worst = max(worst, float(relative_error(gf[i], num)))
    return worst


@dataclass(frozen=True)
class ClassificationMetrics:
    precision: float
    recall: float
    f1: float
    accuracy: float
    threshold: float
    n: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def f1_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def metrics_from_predictions(pred: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> ClassificationMetrics:
    pred = np.asarray(pred) >= threshold
    labels = np.asarray(labels).astype(int) == 1
    if len(labels) == 0:
        raise ValueError("empty test set")
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    tn = int(np.sum(~pred & ~labels))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return ClassificationMetrics(p, r, f1_score(p, r), (tp + tn) / len(labels), threshold, len(labels))


def classify_metrics(model, X: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> ClassificationMetrics:
    """Confusion-matrix metrics with ell=1 as the positive class."""
    return metrics_from_predictions(model.predict(X), labels, threshold)


def evaluate_records(model, records: Sequence[StepRecord], threshold: float = 0.5) -> ClassificationMetrics:
    X, y = encode_records(model.encoder, records)
    return classify_metrics(model, X, y, threshold)


# ---------------------------------------------------------------- freezing


class FrozenValueModel:
    """Prediction-only handle over a private, read-only copy of a trained model.

    Attribute assignment raises, parameter arrays are not writeable, and no
    method updates parameters. A per-state prediction cache is kept; it never
    changes what ``predict`` returns.
    """

    __slots__ = ("_kind", "_encoder", "_net", "_hash", "_cache")

    def __init__(self, model: ValueModel):
        net = copy.deepcopy(model.net)
        if net.kind == "tabular":
            net.table = {k: tuple(v) for k, v in net.table.items()}
        else:
            net.params = [np.array(p, copy=True) for p in net.params]
            for p in net.params:
                p.flags.writeable = False
        object.__setattr__(self, "_kind", model.kind)
        object.__setattr__(self, "_encoder", model.encoder)
        object.__setattr__(self, "_net", net)
        object.__setattr__(self, "_cache", {})
        object.__setattr__(self, "_hash", _content_hash(model.kind, model.encoder, net))

    def __setattr__(self, name, value):
        raise AttributeError("FrozenValueModel is immutable")

    def __delattr__(self, name):
        raise AttributeError("FrozenValueModel is immutable")

    @property
    def kind(self) -> str:
        return self._kind

    @property
    def encoder(self) -> Encoder:
        return self._encoder

    @property
    def dim(self) -> int:
        return self._encoder.dim

    def content_hash(self) -> str:
        return self._hash

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            raise ValueError(f"feature dimension {X.shape[1]} != model dimension {self.dim}")
        return np.clip(self._net.forward(X), 0.0, 1.0)

    def q(self, state: State, action: Action) -> float:
        return float(self.predict(self._encoder.encode(state, action)[None])[0])

    def q_templates(self, state: State) -> np.ndarray:
        """Q over every action template at ``state`` (read-only array)."""
        k = self._encoder.k
        key = state.canonical_key(k) if not state.done else state.core()
        out = self._cache.get(key)
        if out is None:
            out = self.predict(self._encoder.encode_templates(state))
            out.flags.writeable = False
            self._cache[key] = out
        return out

    def param_arrays(self) -> list[np.ndarray]:
        return self._net.arrays() if self._kind == "tabular" else list(self._net.params)

    def dumps(self) -> bytes:
        return dumps_params(_header(self._kind, self._encoder, self._net), self.param_arrays())

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.dumps())


def freeze(model: ValueModel) -> FrozenValueModel:
    return model if isinstance(model, FrozenValueModel) else FrozenValueModel(model)


def _header(kind: str, encoder: Encoder, net) -> dict:
    head = {
        "format": "vem",
        "kind": kind,
        "dim": encoder.dim,
        "env_id": encoder.env.env_id,
        "encoder": encoder.config.to_dict(),
    }
    if kind == "tabular":
        head.update(net.header())
    else:
        head["hidden"] = int(net.params[0].shape[0]) if kind == "mlp" else 0
        head["squash"] = net.squash
    return head


def _content_hash(kind: str, encoder: Encoder, net) -> str:
    arrays = net.arrays() if kind == "tabular" else net.params
    h = hashlib.sha256(json.dumps(_header(kind, encoder, net), sort_keys=True).encode())
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()


def loads_vem(raw: bytes, env: EnvSpec) -> FrozenValueModel:
    header, arrays = loads_params(raw)
    if header.get("format") != "vem":
        raise ModelFormatError("not a value-model file")
    encoder = Encoder(env, EncoderConfig(**header["encoder"]))
    if encoder.dim != header["dim"]:
        raise ModelFormatError(f"file dimension {header['dim']} != encoder dimension {encoder.dim} for this env")
    kind = header["kind"]
    if kind == "tabular":
        net = TabularNet.from_arrays(encoder.dim, header, arrays)
    elif kind == "linear":
        net = LinearNet(encoder.dim, squash=header["squash"])
        net.params = arrays
    elif kind == "mlp":
        net = MlpNet(encoder.dim, hidden=header["hidden"], squash=header["squash"])
        net.params = arrays
    else:
        raise ModelFormatError(f"unknown kind {kind!r}")
    return FrozenValueModel(ValueModel(kind, encoder, net))


def load_vem(path, env: EnvSpec) -> FrozenValueModel:
    with open(path, "rb") as fh:
        return loads_vem(fh.read(), env)


class TableValueModel:
    """Prediction-only Q over enumerated states, e.g. an exact or perturbed Q* table.

    ``table`` maps ``state.canonical_key(k)`` to a vector over action templates.
    """

    def __init__(self, encoder: Encoder, table: dict, history_k: int = 0):
        self._encoder = encoder
        self._table = {k: np.array(v, dtype=float) for k, v in table.items()}
        for v in self._table.values():
            v.flags.writeable = False
        self._k = history_k
        self.kind = "table"

    @property
    def encoder(self) -> Encoder:
        return self._encoder

    def q_templates(self, state: State) -> np.ndarray:
        key = state.canonical_key(self._k)
        try:
            return self._table[key]
        except KeyError:
            raise KeyError(f"state {key} not in the Q table") from None

    def q(self, state: State, action: Action) -> float:
        idx = self._encoder.templates.index_of(action)
        return float(self.q_templates(state)[idx])

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self._table, key=repr):
            h.update(repr(k).encode())
            h.update(self._table[k].tobytes())
        return h.hexdigest()


class SupportMaskedValue:
    """A frozen Q restricted to the dataset's support.

    Pairs (state, template) never observed in the records score ``fill``
    instead of the model's extrapolation; observed pairs keep the model's value.
    The wrapped model is only read.
    """

    def __init__(self, vem, records: Sequence[StepRecord], fill: float = 0.0):
        self._vem = vem
        self._fill = float(fill)
        self._k = vem.encoder.k
        tm = vem.encoder.templates
        support: dict = {}
        for r in records:
            idx = tm.index_of(r.action)
            if idx is not None:
                support.setdefault(r.state().canonical_key(self._k), set()).add(idx)
        self._support = {k: np.array(sorted(v)) for k, v in support.items()}
        self._cache: dict = {}
        self.kind = f"masked-{vem.kind}"

    @property
    def encoder(self) -> Encoder:
        return self._vem.encoder

    def support_mask(self, state: State) -> np.ndarray:
        mask = np.zeros(self.encoder.templates.n, dtype=bool)
        idx = self._support.get(state.canonical_key(self._k))
        if idx is not None:
            mask[idx] = True
        return mask

    def q_templates(self, state: State) -> np.ndarray:
        key = state.core() if state.done else state.canonical_key(self._k)
        out = self._cache.get(key)
        if out is None:
            q = self._vem.q_templates(state)
            out = np.where(self.support_mask(state), q, self._fill)
            out.flags.writeable = False
            self._cache[key] = out
        return out

    def q(self, state: State, action: Action) -> float:
        return float(self.q_templates(state)[self.encoder.templates.index_of(action)])

    def content_hash(self) -> str:
        h = hashlib.sha256(self._vem.content_hash().encode())
        h.update(repr(self._fill).encode())
        for k in sorted(self._support, key=repr):
            h.update(repr(k).encode())
            h.update(self._support[k].tobytes())
        return h.hexdigest()
