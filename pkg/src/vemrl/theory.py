"""Exact solvers on enumerable environments and the empirical performance-bound check.

The environment is flattened into a tabular MDP over (state, action template)
with history dropped (k = 0): rewards and transitions depend only on the core
state, so Q* does too. Terminal states are absorbing with zero reward and the
discounted problem has no step cap.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .env_mdp import EnvSpec, State, enumerate_states, optimal_keys, outcomes, reset, step
from .templates import ActionTemplates

log = logging.getLogger(__name__)


class TheoryError(ValueError):
    pass


@dataclass
class TabularMDP:
    states: list                  # State objects, history-free representatives
    next_idx: np.ndarray          # [S, A, K]
    probs: np.ndarray             # [S, A, K]
    rewards: np.ndarray           # [S, A]
    initial: np.ndarray           # [S], distribution over start states
    terminal: np.ndarray          # [S] bool
    templates: ActionTemplates | None = None
    index: dict = field(default_factory=dict)

    _sa: sparse.csr_matrix | None = field(default=None, repr=False, compare=False)

    @property
    def sa_matrix(self) -> sparse.csr_matrix:
        """Sparse [S * A, S] transition matrix, built on first use."""
        if self._sa is None:
            S, A, K = self.next_idx.shape
            rows = np.repeat(np.arange(S * A), K)
            w = self.probs.reshape(-1)
            keep = w > 0
            self._sa = sparse.csr_matrix((w[keep], (rows[keep], self.next_idx.reshape(-1)[keep])), shape=(S * A, S))
        return self._sa

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_actions(self) -> int:
        return self.rewards.shape[1]

    def state_index(self, state: State) -> int:
        key = state.canonical_key(0)
        try:
            return self.index[key]
        except KeyError:
            raise TheoryError(f"state {key} is not enumerated") from None


def _key(state: State):
    return state.canonical_key(0)


def build_tabular(env: EnvSpec, grid: int = 14, cap: int = 100_000) -> TabularMDP:
    """Flatten an environment into arrays over (state, template)."""
    states = enumerate_states(env, 0, cap)
    tm = ActionTemplates(env, grid)
    index = {_key(s): i for i, s in enumerate(states)}
    S, A = len(states), tm.n
    K = 1 + len(env.ad_screens)
    nxt = np.zeros((S, A, K), dtype=np.int64)
    prob = np.zeros((S, A, K))
    rew = np.zeros((S, A))
    term = np.array([s.done for s in states])
    for i, s in enumerate(states):
        if s.done:
            nxt[i, :, 0] = i
            prob[i, :, 0] = 1.0
            continue
        core = s.core()
        best = optimal_keys(env, core)
        per_key = {}
        for a, key in enumerate(tm.resolved_keys(env, s)):
            if key not in per_key:
                outs = outcomes(env, core, key)
                per_key[key] = ([index[_core_key(c)] for _, c in outs], [p for p, _ in outs])
            ids, ps = per_key[key]
            nxt[i, a, :len(ids)] = ids
            prob[i, a, :len(ps)] = ps
            rew[i, a] = float(key in best)
    init = np.zeros(S)
    for t in env.tasks:
        init[index[_key(reset(env, t.task_id))]] += 1.0 / len(env.tasks)
    return TabularMDP(states, nxt, prob, rew, init, term, tm, index)


def _core_key(core: tuple):
    """``canonical_key(0)`` of the state with this core."""
    if core[1] == -1:
        return core
    return core + ((),)


def _expect(mdp: TabularMDP, V: np.ndarray) -> np.ndarray:
    return (mdp.sa_matrix @ V).reshape(mdp.n_states, mdp.n_actions)


@dataclass
class ExactQ:
    q: np.ndarray          # [S, A]
    v: np.ndarray          # [S]
    gamma: float
    tol: float
    iterations: int
    residual: float

    def bellman_residual(self, mdp: TabularMDP) -> float:
        """sup |T Q - Q| for the returned table."""
        backed = mdp.rewards + self.gamma * _expect(mdp, self.q.max(axis=1))
        return float(np.max(np.abs(backed - self.q)))


def value_iteration(mdp: TabularMDP, gamma: float, tol: float = 1e-6, max_iter: int = 100_000) -> ExactQ:
    """Bellman optimality iteration; stops once sup-norm error is guaranteed below ``tol``."""
    if not 0.0 <= gamma < 1.0:
        raise TheoryError("gamma must lie in [0, 1)")
    if tol <= 0:
        raise TheoryError("tol must be positive")
    if gamma == 0.0:
        q = mdp.rewards.copy()
        return ExactQ(q, q.max(axis=1), gamma, tol, 1, 0.0)
    stop = tol * (1 - gamma) / (2 * gamma)
    V = np.zeros(mdp.n_states)
    for it in range(1, max_iter + 1):
        Q = mdp.rewards + gamma * _expect(mdp, V)
        V_new = Q.max(axis=1)
        res = float(np.max(np.abs(V_new - V)))
        V = V_new
        if res < stop:
            # one more backup so that q is greedy-consistent with the final V
            Q = mdp.rewards + gamma * _expect(mdp, V)
            return ExactQ(Q, Q.max(axis=1), gamma, tol, it, res)
    raise TheoryError(f"value iteration did not converge in {max_iter} sweeps")


def policy_matrix(mdp: TabularMDP, policy: Callable[[State], np.ndarray] | object) -> np.ndarray:
    """[S, A] action probabilities from a policy object (``.probs``) or a callable."""
    fn = policy.probs if hasattr(policy, "probs") else policy
    P = np.empty((mdp.n_states, mdp.n_actions))
    for i, s in enumerate(mdp.states):
        if s.done:
            P[i] = 1.0 / mdp.n_actions
        else:
            P[i] = fn(s)
    return P


def _transition(mdp: TabularMDP, pi: np.ndarray) -> sparse.csr_matrix:
    S, A = pi.shape
    W = sparse.csr_matrix((pi.reshape(-1), (np.repeat(np.arange(S), A), np.arange(S * A))), shape=(S, S * A))
    return W @ mdp.sa_matrix


def state_values(mdp: TabularMDP, pi: np.ndarray, gamma: float) -> np.ndarray:
    P = _transition(mdp, pi)
    r = np.sum(pi * mdp.rewards, axis=1)
    M = sparse.identity(mdp.n_states, format="csc") - gamma * P.tocsc()
    return np.asarray(spsolve(M, r)).reshape(-1)


def policy_eval(mdp: TabularMDP, pi: np.ndarray, gamma: float) -> float:
    """Exact J(pi) from the task-uniform initial distribution (direct sparse solve)."""
    return float(mdp.initial @ state_values(mdp, pi, gamma))


@dataclass
class OccupancyMeasure:
    d: np.ndarray        # [S, A]
    gamma: float

    @property
    def states(self) -> np.ndarray:
        return self.d.sum(axis=1)


def occupancy(mdp: TabularMDP, pi: np.ndarray, gamma: float) -> OccupancyMeasure:
    """d(s, a) = (1 - gamma) sum_t gamma^t Pr(s_t = s, a_t = a)."""
    P = _transition(mdp, pi)
    M = sparse.identity(mdp.n_states, format="csc") - gamma * P.T.tocsc()
    ds = (1 - gamma) * np.asarray(spsolve(M, mdp.initial)).reshape(-1)
    return OccupancyMeasure(ds[:, None] * pi, gamma)


def epsilon_sup(vem, exact: ExactQ, mdp: TabularMDP, records) -> float:
    """max over distinct dataset pairs of |Q_theta(s, a) - Q*(s, a)|."""
    tm = mdp.templates
    seen = {}
    for r in records:
        s = r.state()
        a = tm.index_of(r.action)
        if a is None:
            raise TheoryError(f"step {r.step_key}: action has no template")
        key = (s.canonical_key(getattr(vem.encoder, "k", 0)), _key(s), a)
        if key not in seen:
            seen[key] = (s, a)
    eps = 0.0
    for s, a in seen.values():
        i = mdp.state_index(s)
        eps = max(eps, abs(float(vem.q_templates(s)[a]) - float(exact.q[i, a])))
    return eps


def total_variation(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(p - q).sum(axis=-1)


def policy_shift(pi_hat: np.ndarray, beta: np.ndarray, d_beta_states: np.ndarray) -> float:
    """sum_s d_beta(s) * TV(pi_hat(.|s), beta(.|s))."""
    w = np.asarray(d_beta_states, dtype=float)
    return float(np.clip(np.sum(w * total_variation(pi_hat, beta)) / w.sum(), 0.0, 1.0))


def coverage_check(pi_hat: np.ndarray, beta: np.ndarray, mdp: TabularMDP | None = None,
                   atol: float = 0.0) -> tuple[bool, list]:
    """Support inclusion pi_hat(a|s) > 0 => beta(a|s) > 0 over non-terminal states."""
    bad = (pi_hat > atol) & (beta <= 0)
    if mdp is not None:
        bad &= ~mdp.terminal[:, None]
    viol = [(int(s), int(a)) for s, a in zip(*np.nonzero(bad))]
    if mdp is not None:
        viol = [(_key(mdp.states[s]), a) for s, a in viol]
    return not viol, viol


def greedy_matrix(q: np.ndarray, support: np.ndarray | None = None) -> np.ndarray:
    """Point mass on argmax (lowest index on ties), restricted to ``support`` when given."""
    if support is not None:
        if not support.any(axis=1).all():
            s = int(np.flatnonzero(~support.any(axis=1))[0])
            raise TheoryError(f"empty support at state row {s}")
        q = np.where(support, q, -np.inf)
    pi = np.zeros_like(q, dtype=float)
    pi[np.arange(len(q)), np.argmax(q, axis=1)] = 1.0
    return pi


# ------------------------------------------------------------- Monte Carlo


def monte_carlo_tabular(mdp: TabularMDP, pi: np.ndarray, gamma: float, episodes: int, seed: int = 0,
                        horizon: int | None = None) -> tuple[float, float]:
    """Vectorized rollouts on the flattened arrays; returns (mean, standard error)."""
    rng = np.random.default_rng(seed)
    horizon = horizon or int(np.ceil(np.log(1e-12) / np.log(gamma))) if gamma > 0 else 1
    s = rng.choice(mdp.n_states, size=episodes, p=mdp.initial)
    ret = np.zeros(episodes)
    disc = 1.0
    cpi = np.cumsum(pi, axis=1)
    cpi[:, -1] = 1.0
    for _ in range(horizon):
        alive = ~mdp.terminal[s]
        if not alive.any():
            break
        a = (rng.random(episodes)[:, None] < cpi[s]).argmax(axis=1)
        ret += disc * mdp.rewards[s, a] * alive
        cp = np.cumsum(mdp.probs[s, a], axis=1)
        k = (rng.random(episodes)[:, None] < cp).argmax(axis=1)
        s = np.where(alive, mdp.next_idx[s, a, k], s)
        disc *= gamma
    return float(ret.mean()), float(ret.std(ddof=1) / np.sqrt(episodes))


def monte_carlo_env(env: EnvSpec, mdp: TabularMDP, pi: np.ndarray, gamma: float, episodes: int,
                    seed: int = 0) -> tuple[float, float]:
    """Rollouts through ``env_mdp.step`` with geometric termination at rate 1 - gamma.

    The undiscounted return before termination has the discounted return as its mean.
    """
    rng = np.random.default_rng(seed)
    tm = mdp.templates
    tasks = [t.task_id for t in env.tasks]
    cpi = np.cumsum(pi, axis=1)
    rets = np.empty(episodes)
    for e in range(episodes):
        state = reset(env, tasks[int(rng.integers(len(tasks)))])
        total = 0.0
        while True:
            i = mdp.index[_key(state)]
            a = min(int(np.searchsorted(cpi[i], rng.random() * cpi[i, -1], side="right")), tm.n - 1)
            state, r, done = step(env, state, tm.decode(a), rng)
            total += r
            if done or rng.random() >= gamma:
                break
        rets[e] = total
    return float(rets.mean()), float(rets.std(ddof=1) / np.sqrt(episodes))


# ------------------------------------------------------------------ bounds


@dataclass
class BoundReport:
    env_id: str
    epsilon: float
    shift: float
    j_star: float
    j_hat: float
    gamma: float
    noise: float = 0.0
    seed: int = 0
    c_theory: float = 0.0
    bound_rhs: float = 0.0
    holds: bool = True

    @property
    def gap(self) -> float:
        return self.j_star - self.j_hat

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gap"] = self.gap
        return d


@dataclass
class BoundCase:
    """One (env, dataset, Q_theta, pi_hat, beta) tuple, already in matrix form."""
    env_id: str
    mdp: TabularMDP
    exact: ExactQ
    q_theta: np.ndarray        # [S, A]
    pi_hat: np.ndarray         # [S, A]
    beta: np.ndarray           # [S, A]
    data_pairs: np.ndarray     # [N, 2] (state row, template) present in the dataset
    noise: float = 0.0
    seed: int = 0


@dataclass
class BoundSummary:
    reports: list
    c_fit: float
    c_theory: float
    excluded: list
    theory_violations: list
    trend_violations: list
    zero_gap_violations: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "c_fit": self.c_fit,
            "c_theory": self.c_theory,
            "excluded": self.excluded,
            "theory_violations": self.theory_violations,
            "trend_violations": self.trend_violations,
            "zero_gap_violations": self.zero_gap_violations,
            "reports": [r.to_dict() for r in self.reports],
        }


def measure(case: BoundCase) -> BoundReport:
    g = case.exact.gamma
    pairs = case.data_pairs
    eps = float(np.max(np.abs(case.q_theta[pairs[:, 0], pairs[:, 1]] - case.exact.q[pairs[:, 0], pairs[:, 1]]))) \
        if len(pairs) else 0.0
    d_beta = occupancy(case.mdp, case.beta, g).states
    shift = policy_shift(case.pi_hat, case.beta, d_beta)
    j_star = policy_eval(case.mdp, greedy_matrix(case.exact.q), g)
    j_hat = policy_eval(case.mdp, case.pi_hat, g)
    c_th = 2.0 / (1.0 - g) ** 2
    rhs = c_th * (eps + shift)
    return BoundReport(case.env_id, eps, shift, j_star, j_hat, g, case.noise, case.seed, c_th, rhs,
                       j_star - j_hat <= rhs + 2 * case.exact.tol)


def verify_bound(cases: Sequence[BoundCase], tol: float = 1e-9) -> BoundSummary:
    """Measure every case, fit the smallest c, and check the noise trend per env.

    Cases failing the coverage check are excluded and listed. Cases with
    eps + shift <= tol do not enter the fit; their gap must stay within twice
    the solver tolerance instead.
    """
    reports, excluded, zero = [], [], []
    for case in cases:
        ok, viol = coverage_check(case.pi_hat, case.beta, case.mdp)
        if not ok:
            excluded.append({"env_id": case.env_id, "seed": case.seed, "noise": case.noise,
                             "violations": [repr(v) for v in viol[:5]]})
            continue
        r = measure(case)
        reports.append(r)
        if r.epsilon + r.shift <= tol and r.gap > 2 * case.exact.tol:
            zero.append(r.to_dict())
    ratios = [r.gap / (r.epsilon + r.shift) for r in reports if r.epsilon + r.shift > tol]
    c_fit = max(max(ratios, default=0.0), 0.0)
    c_theory = max((r.c_theory for r in reports), default=0.0)
    theory_viol = [r.to_dict() for r in reports if not r.holds]
    return BoundSummary(reports, c_fit, c_theory, excluded, theory_viol, trend_violations(reports), zero)


def mean_gap_by_noise(reports: Sequence[BoundReport]) -> dict:
    """{env_id: [(noise, mean gap over seeds), ...]} sorted by noise."""
    acc: dict = {}
    for r in reports:
        acc.setdefault(r.env_id, {}).setdefault(r.noise, []).append(r.gap)
    return {e: sorted((n, float(np.mean(v))) for n, v in d.items()) for e, d in acc.items()}


def trend_violations(reports: Sequence[BoundReport], atol: float = 1e-9) -> list:
    out = []
    for env_id, rows in mean_gap_by_noise(reports).items():
        for (n0, g0), (n1, g1) in zip(rows, rows[1:]):
            if g1 < g0 - atol:
                out.append({"env_id": env_id, "noise": [n0, n1], "mean_gap": [g0, g1]})
    return out


def data_pairs(mdp: TabularMDP, records) -> np.ndarray:
    tm = mdp.templates
    pairs = {(mdp.state_index(r.state()), tm.index_of(r.action)) for r in records}
    pairs.discard(None)
    return np.array(sorted(p for p in pairs if p[1] is not None), dtype=np.int64).reshape(-1, 2)


def behavior_matrix(env: EnvSpec, mdp: TabularMDP, behavior) -> np.ndarray:
    from .dataset import behavior_template_probs

    return policy_matrix(mdp, lambda s: behavior_template_probs(env, s, behavior, mdp.templates))


def noise_cases(env: EnvSpec, mdp: TabularMDP, exact: ExactQ, beta: np.ndarray, pairs: np.ndarray,
                noises: Sequence[float], seeds: Sequence[int]) -> list[BoundCase]:
    """Q_theta = Q* + noise * U(-1, 1), one uniform draw per seed shared across noise levels."""
    support = beta > 0
    support[mdp.terminal] = True
    cases = []
    for seed in seeds:
        u = np.random.default_rng([env.seed, seed, 7]).uniform(-1.0, 1.0, exact.q.shape)
        for n in noises:
            q = exact.q + n * u
            cases.append(BoundCase(env.env_id, mdp, exact, q, greedy_matrix(q, support), beta, pairs, n, seed))
    return cases


def run_suite(n_envs: int, screens_min: int, screens_max: int, tasks: int, distractor_prob: float, gamma: float,
              noises: Sequence[float], n_seeds: int, seed: int, tol: float = 1e-6, behavior=None,
              episodes: int = 100) -> BoundSummary:
    """Random environments, a behavior dataset each, and Q* + noise for every (seed, noise level)."""
    from .dataset import BehaviorPolicyConfig, collect, iter_steps
    from .env_mdp import GeneratorConfig, generate_env

    behavior = behavior or BehaviorPolicyConfig("epsilon_scripted", 0.5)
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(n_envs):
        screens = int(rng.integers(screens_min, screens_max + 1))
        env_seed = int(rng.integers(2**31))
        env = generate_env(GeneratorConfig(screens, tasks, distractor_prob, gamma), seed=env_seed)
        mdp = build_tabular(env)
        exact = value_iteration(mdp, gamma, tol)
        beta = behavior_matrix(env, mdp, behavior)
        pairs = data_pairs(mdp, list(iter_steps(collect(env, behavior, episodes, env_seed))))
        cases += noise_cases(env, mdp, exact, beta, pairs, noises, range(n_seeds))
        log.info("theory env %d/%d: %d states", i + 1, n_envs, mdp.n_states)
    return verify_bound(cases)


BOUND_COLUMNS = ("env_id", "noise", "seed", "epsilon", "shift", "j_star", "j_hat", "gap", "bound_rhs", "holds")


def write_bound_csv(reports: Sequence[BoundReport], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BOUND_COLUMNS)
        for r in reports:
            d = r.to_dict()
            w.writerow([d[c] if isinstance(d[c], (str, bool)) else f"{d[c]:.10g}" for c in BOUND_COLUMNS])
