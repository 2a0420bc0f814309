"""Softmax policies over action templates, trained offline against a frozen value model.

Training never steps the environment: states come from the dataset, candidate
actions are sampled from a snapshot of the policy, and the frozen model scores
them. The update is a clipped-ratio surrogate with a per-state mean baseline.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .dataset import StepRecord
from .env_mdp import ACTION_TYPES, Action, EnvSpec, State, enumerate_states
from .features import Encoder, EncoderConfig
from .modelio import ModelFormatError, dumps_params, loads_params
from .templates import ActionTemplates

log = logging.getLogger(__name__)

KINDS = ("tabular", "linear", "mlp")


class PolicyDiverged(FloatingPointError):
    pass


class SupportError(ValueError):
    pass


@dataclass
class PpoConfig:
    clip_epsilon: float = 0.2
    actions_per_state: int = 8
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 1e-3
    entropy_coef: float = 0.01
    seed: int = 0
    hidden: int = 64
    update_steps: int = 1  # ascent steps per sampled batch

    def __post_init__(self):
        if self.update_steps < 1:
            raise ValueError("update_steps must be >= 1")
        if self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be positive")
        if self.actions_per_state < 1:
            raise ValueError("actions_per_state must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.entropy_coef < 0:
            raise ValueError("entropy_coef must be non-negative")


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class StateInputs:
    X: np.ndarray          # state features, [n, d_s]
    rows: np.ndarray       # tabular row per state, -1 when unseen
    states: list


class PolicyParams:
    """pi_phi(a|s) = softmax(f_phi(s)) over the environment's action templates."""

    def __init__(self, kind: str, encoder: Encoder, params: list[np.ndarray], keys: list | None = None):
        if kind not in KINDS:
            raise ValueError(f"unknown policy kind {kind!r}; expected one of {KINDS}")
        self.kind = kind
        self.encoder = encoder
        self.templates: ActionTemplates = encoder.templates
        self.params = params
        self.keys: list = list(keys or [])
        self.key_index = {k: i for i, k in enumerate(self.keys)}

    @classmethod
    def init(cls, kind: str, env: EnvSpec, encoder_config: EncoderConfig | None = None,
             hidden: int = 64, seed: int = 0) -> "PolicyParams":
        """Zero output layer, so every kind starts uniform."""
        enc = Encoder(env, encoder_config)
        n, d = enc.templates.n, enc.state_dim
        if kind == "tabular":
            params = [np.zeros((0, n))]
        elif kind == "linear":
            params = [np.zeros((n, d)), np.zeros(n)]
        elif kind == "mlp":
            rng = np.random.default_rng(seed)
            params = [rng.normal(0, 1 / np.sqrt(d), (hidden, d)), np.zeros(hidden), np.zeros((n, hidden)), np.zeros(n)]
        else:
            raise ValueError(f"unknown policy kind {kind!r}; expected one of {KINDS}")
        return cls(kind, enc, params)

    @property
    def n_actions(self) -> int:
        return self.templates.n

    def state_key(self, state: State):
        return state.core() if state.done else state.canonical_key(self.encoder.k)

    def register(self, states: Sequence[State]) -> None:
        """Give every unseen state a zero logit row (tabular only)."""
        if self.kind != "tabular":
            return
        new = []
        for s in states:
            k = self.state_key(s)
            if k not in self.key_index:
                self.key_index[k] = len(self.keys)
                self.keys.append(k)
                new.append(k)
        if new:
            self.params[0] = np.vstack([self.params[0], np.zeros((len(new), self.n_actions))])

    def inputs(self, states: Sequence[State]) -> StateInputs:
        states = list(states)
        if self.kind == "tabular":
            rows = np.array([self.key_index.get(self.state_key(s), -1) for s in states], dtype=np.int64)
            return StateInputs(np.zeros((len(states), 0)), rows, states)
        X = np.array([self.encoder.state_vector(s) for s in states]).reshape(len(states), -1)
        return StateInputs(X, np.full(len(states), -1), states)

    def logits_of(self, inp: StateInputs, params=None) -> np.ndarray:
        p = self.params if params is None else params
        if self.kind == "tabular":
            out = np.zeros((len(inp.rows), self.n_actions))
            known = inp.rows >= 0
            out[known] = p[0][inp.rows[known]]
            return out
        if self.kind == "linear":
            return inp.X @ p[0].T + p[1]
        H = np.tanh(inp.X @ p[0].T + p[1])
        return H @ p[2].T + p[3]

    def backward(self, inp: StateInputs, dlogits: np.ndarray, params=None) -> list[np.ndarray]:
        p = self.params if params is None else params
        if self.kind == "tabular":
            g = np.zeros_like(p[0])
            known = inp.rows >= 0
            np.add.at(g, inp.rows[known], dlogits[known])
            return [g]
        if self.kind == "linear":
            return [dlogits.T @ inp.X, dlogits.sum(axis=0)]
        H = np.tanh(inp.X @ p[0].T + p[1])
        dH = (dlogits @ p[2]) * (1 - H * H)
        return [dH.T @ inp.X, dH.sum(axis=0), dlogits.T @ H, dlogits.sum(axis=0)]

    def logits(self, state: State) -> np.ndarray:
        return self.logits_of(self.inputs([state]))[0]

    def probs(self, state: State) -> np.ndarray:
        return softmax(self.logits(state))

    def greedy_index(self, state: State) -> int:
        return int(np.argmax(self.logits(state)))  # first maximum: lowest index wins ties

    def greedy_action(self, env: EnvSpec, state: State) -> Action:
        return self.templates.decode(self.greedy_index(state))

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.kind, self.encoder, [p.copy() for p in self.params], self.keys)

    def content_hash(self) -> str:
        h = hashlib.sha256(json.dumps(_policy_header(self), sort_keys=True).encode())
        for p in self.params:
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()

    def dumps(self) -> bytes:
        return dumps_params(_policy_header(self), self.params)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.dumps())


def _policy_header(policy: PolicyParams) -> dict:
    head = {
        "format": "policy",
        "kind": policy.kind,
        "env_id": policy.encoder.env.env_id,
        "encoder": policy.encoder.config.to_dict(),
        "n_actions": policy.n_actions,
    }
    if policy.kind == "tabular":
        head["keys"] = [list(k[:-1]) + [list(k[-1])] if isinstance(k[-1], tuple) else list(k) for k in policy.keys]
    return head


def _key_from_json(k: list) -> tuple:
    if isinstance(k[-1], list):
        return tuple(k[:-1]) + (tuple(k[-1]),)
    return tuple(k)


def loads_policy(raw: bytes, env: EnvSpec) -> PolicyParams:
    header, arrays = loads_params(raw)
    if header.get("format") != "policy":
        raise ModelFormatError("not a policy file")
    enc = Encoder(env, EncoderConfig(**header["encoder"]))
    if enc.templates.n != header["n_actions"]:
        raise ModelFormatError(f"policy has {header['n_actions']} actions, env gives {enc.templates.n}")
    keys = [_key_from_json(k) for k in header.get("keys", [])]
    if header["kind"] == "tabular":
        arrays[0] = arrays[0].reshape(len(keys), enc.templates.n)
    return PolicyParams(header["kind"], enc, arrays, keys)


def load_policy(path, env: EnvSpec) -> PolicyParams:
    with open(path, "rb") as fh:
        return loads_policy(fh.read(), env)


def action_probs(policy, env: EnvSpec, state: State) -> np.ndarray:
    return policy.probs(state)


# ---------------------------------------------------------------- surrogate


def _q_rows(vem, states: Sequence[State]) -> np.ndarray:
    return np.array([vem.q_templates(s) for s in states])


def surrogate_value(policy, vem, states: Sequence[State], m: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """J(pi) = E_s E_{a~pi}[Q(s, a)]; exact over templates when ``m`` is None, else m samples per state."""
    states = list(states)
    if not states:
        raise ValueError("empty state batch")
    P = np.array([policy.probs(s) for s in states])
    Q = _q_rows(vem, states)
    if m is None:
        return float(np.mean(np.sum(P * Q, axis=1)))
    rng = rng or np.random.default_rng(0)
    total = 0.0
    for p, q in zip(P, Q):
        total += q[_sample(rng, p, m)].mean()
    return float(total / len(states))


def _sample(rng: np.random.Generator, p: np.ndarray, m: int) -> np.ndarray:
    c = np.cumsum(p)
    idx = np.searchsorted(c, rng.random(m) * c[-1], side="right")
    return np.minimum(idx, len(p) - 1)


@dataclass
class PpoBatch:
    inputs: StateInputs
    state_of: np.ndarray   # sample -> state row
    actions: np.ndarray
    advantages: np.ndarray
    old_logp: np.ndarray
    q_rows: np.ndarray


def make_batch(policy: PolicyParams, snapshot: PolicyParams, vem, states: Sequence[State], m: int,
               rng: np.random.Generator) -> PpoBatch:
    """Sample m actions per state from the snapshot; advantage = Q - mean of the sampled Q."""
    states = list(states)
    if not states:
        raise ValueError("empty state batch")
    snap_logp = log_softmax(snapshot.logits_of(snapshot.inputs(states)))
    Q = _q_rows(vem, states)
    acts, adv, old, owner = [], [], [], []
    for i in range(len(states)):
        a = _sample(rng, np.exp(snap_logp[i]), m)
        q = Q[i, a]
        acts.append(a)
        adv.append(q - q.mean())
        old.append(snap_logp[i, a])
        owner.append(np.full(m, i))
    return PpoBatch(policy.inputs(states), np.concatenate(owner), np.concatenate(acts),
                    np.concatenate(adv), np.concatenate(old), Q)


def surrogate_and_grad(policy: PolicyParams, batch: PpoBatch, clip: float, entropy_coef: float,
                       params=None) -> tuple[float, list[np.ndarray], dict]:
    """Clipped objective (to maximize) and its gradient with respect to the parameters."""
    Z = policy.logits_of(batch.inputs, params)
    logp = log_softmax(Z)
    P = np.exp(logp)
    s, a, A = batch.state_of, batch.actions, batch.advantages
    ratio = np.exp(logp[s, a] - batch.old_logp)
    unclipped = ratio * A
    clipped = np.clip(ratio, 1 - clip, 1 + clip) * A
    surr = np.minimum(unclipped, clipped)
    ent = -np.sum(P * logp, axis=1)
    n_s = len(batch.inputs.states)
    obj = float(surr.mean() + entropy_coef * ent.mean())
    # gradient of min(.) flows only through the unclipped branch when it is the active one
    active = unclipped <= clipped
    coef = np.where(active, A * ratio, 0.0) / len(A)
    dZ = np.zeros_like(Z)
    np.add.at(dZ, (s, a), coef)
    np.add.at(dZ, s, -coef[:, None] * P[s])
    dZ += entropy_coef * (-P * (logp + ent[:, None])) / n_s
    grads = policy.backward(batch.inputs, dZ, params)
    diag = {
        "objective": obj,
        "loss": -obj,
        "unclipped_objective": float(unclipped.mean() + entropy_coef * ent.mean()),
        "mean_advantage": float(A.mean()),
        "clip_fraction": float(np.mean(np.abs(ratio - 1) > clip)),
        "entropy": float(ent.mean()),
    }
    return obj, grads, diag


class Adam:
    def __init__(self, params, lr: float):
        self.lr = lr
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def ascend(self, params, grads):
        self.t += 1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= 0.9
            m += 0.1 * g
            v *= 0.999
            v += 0.001 * g * g
            p += self.lr * (m / (1 - 0.9 ** self.t)) / (np.sqrt(v / (1 - 0.999 ** self.t)) + 1e-8)


def ppo_update(policy: PolicyParams, vem, states: Sequence[State], config: PpoConfig,
               rng: np.random.Generator, snapshot: PolicyParams | None = None,
               optimizer: Adam | None = None) -> tuple[PolicyParams, dict]:
    """Sample a batch from ``snapshot`` (default: the current policy) and take
    ``config.update_steps`` clipped-surrogate ascent steps on it, in place.

    Diagnostics describe the last step.
    """
    policy.register(states)
    snapshot = snapshot or policy.copy()
    if snapshot.kind == "tabular":
        snapshot.register(states)
    optimizer = optimizer or Adam(policy.params, config.learning_rate)
    batch = make_batch(policy, snapshot, vem, states, config.actions_per_state, rng)
    for _ in range(config.update_steps):
        obj, grads, diag = surrogate_and_grad(policy, batch, config.clip_epsilon, config.entropy_coef)
        if not np.isfinite(obj) or not all(np.all(np.isfinite(g)) for g in grads):
            raise PolicyDiverged("non-finite surrogate gradient")
        optimizer.ascend(policy.params, grads)
    counts = np.bincount(policy.templates.type_ids[batch.actions], minlength=len(ACTION_TYPES))
    diag["type_histogram"] = (counts / counts.sum()).tolist()
    return policy, diag


def dataset_states(records: Sequence[StepRecord]) -> list[State]:
    return [r.state() for r in records]


def train_policy(records: Sequence[StepRecord], vem, env: EnvSpec, config: PpoConfig | None = None,
                 kind: str = "tabular", encoder_config: EncoderConfig | None = None,
                 policy: PolicyParams | None = None) -> tuple[PolicyParams, list[dict]]:
    """PPO over dataset states only; ``env`` is used for template decoding and never stepped."""
    config = config or PpoConfig()
    states = dataset_states(records)
    if not states:
        raise ValueError("empty dataset")
    if encoder_config is None and hasattr(vem, "encoder"):
        encoder_config = vem.encoder.config
    policy = policy or PolicyParams.init(kind, env, encoder_config, config.hidden, config.seed)
    policy.register(states)
    opt = Adam(policy.params, config.learning_rate)
    rng = np.random.default_rng([config.seed, 2])
    history = []
    it = 0
    for epoch in range(config.epochs):
        snapshot = policy.copy()  # pi_old for this pass over the dataset states
        order = rng.permutation(len(states))
        for start in range(0, len(states), config.batch_size):
            batch_states = [states[i] for i in order[start:start + config.batch_size]]
            _, diag = ppo_update(policy, vem, batch_states, config, rng, snapshot, opt)
            diag.update(iteration=it, epoch=epoch)
            history.append(diag)
            it += 1
        j = surrogate_value(policy, vem, _unique(policy, states))
        history[-1]["J_exact"] = j
        log.info("policy epoch %d  J=%.4f  entropy=%.3f", epoch + 1, j, history[-1]["entropy"])
    return policy, history


def _unique(policy: PolicyParams, states: Sequence[State]) -> list[State]:
    seen, out = set(), []
    for s in states:
        k = policy.state_key(s)
        if k not in seen:
            seen.add(k)
            out.append(s)
    return out


def write_diagnostics(history: Sequence[dict], path) -> None:
    cols = ["iteration", "epoch", "objective", "loss", "mean_advantage", "clip_fraction", "entropy"]
    type_cols = [f"frac_{t.value}" for t in ACTION_TYPES]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols + type_cols)
        for d in history:
            w.writerow([d[c] for c in cols] + [f"{x:.6f}" for x in d["type_histogram"]])


# ------------------------------------------------------------ behavior cloning


def train_bc(records: Sequence[StepRecord], env: EnvSpec, kind: str = "tabular",
             encoder_config: EncoderConfig | None = None, epochs: int = 20, batch_size: int = 32,
             learning_rate: float = 1e-2, seed: int = 0, smoothing: float = 1e-3) -> PolicyParams:
    """Maximum-likelihood policy of the same class on the dataset actions.

    Tabular kind uses the closed form (log of smoothed empirical frequencies).
    """
    policy = PolicyParams.init(kind, env, encoder_config, seed=seed)
    tm = policy.templates
    pairs = [(r.state(), tm.index_of(r.action)) for r in records]
    pairs = [(s, a) for s, a in pairs if a is not None]
    if not pairs:
        raise ValueError("no encodable actions in the dataset")
    states = [s for s, _ in pairs]
    acts = np.array([a for _, a in pairs])
    policy.register(states)
    if kind == "tabular":
        counts = np.zeros_like(policy.params[0])
        np.add.at(counts, policy.inputs(states).rows, np.eye(tm.n)[acts])
        policy.params[0] = np.log(counts + smoothing)
        return policy
    opt = Adam(policy.params, learning_rate)
    rng = np.random.default_rng([seed, 3])
    for _ in range(epochs):
        order = rng.permutation(len(states))
        for start in range(0, len(states), batch_size):
            idx = order[start:start + batch_size]
            inp = policy.inputs([states[i] for i in idx])
            P = softmax(policy.logits_of(inp))
            dZ = -P
            dZ[np.arange(len(idx)), acts[idx]] += 1.0
            opt.ascend(policy.params, policy.backward(inp, dZ / len(idx)))
    return policy


# ----------------------------------------------------------- greedy on a Q


class DeterministicPolicy:
    """Point-mass policy given as ``{state key: template index}``."""

    def __init__(self, templates: ActionTemplates, table: dict, history_k: int = 0):
        self.templates = templates
        self.table = dict(table)
        self.history_k = history_k

    def _key(self, state: State):
        return state.core() if state.done else state.canonical_key(self.history_k)

    def greedy_index(self, state: State) -> int:
        try:
            return self.table[self._key(state)]
        except KeyError:
            raise KeyError(f"state {self._key(state)} is not covered by this policy") from None

    def probs(self, state: State) -> np.ndarray:
        p = np.zeros(self.templates.n)
        p[self.greedy_index(state)] = 1.0
        return p

    def greedy_action(self, env: EnvSpec, state: State) -> Action:
        return self.templates.decode(self.greedy_index(state))


def greedy_policy_from_q(vem, env: EnvSpec, support: Callable[[State], np.ndarray] | None = None,
                         history_k: int = 0, states: Sequence[State] | None = None,
                         cap: int = 100_000) -> DeterministicPolicy:
    """argmax_a Q(s, a) per enumerated state, optionally restricted to a support mask."""
    states = enumerate_states(env, history_k, cap) if states is None else states
    table = {}
    for s in states:
        q = np.asarray(vem.q_templates(s), dtype=float)
        if support is not None:
            mask = np.asarray(support(s), dtype=bool)
            if not mask.any():
                raise SupportError(f"empty support at state {s.canonical_key(history_k)}")
            q = np.where(mask, q, -np.inf)
        key = s.core() if s.done else s.canonical_key(history_k)
        table[key] = int(np.argmax(q))
    return DeterministicPolicy(vem.encoder.templates, table, history_k)
