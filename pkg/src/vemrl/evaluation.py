"""Offline action matching against reference trajectories, and online rollouts in the simulator."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .dataset import Trajectory
from .env_mdp import Action, ActionType, EnvSpec, State, optimal_keys, reset, step
from .templates import ActionTemplates

log = logging.getLogger(__name__)

_SCROLLS = {ActionType.SCROLL_DOWN, ActionType.SCROLL_UP, ActionType.SCROLL_LEFT, ActionType.SCROLL_RIGHT}
CSV_COLUMNS = ("method", "domain", "step_sr", "task_sr", "avg_step_length")


class GreedyPolicy(Protocol):
    def greedy_action(self, env: EnvSpec, state: State) -> Action: ...


@dataclass(frozen=True)
class MatcherConfig:
    click_distance_threshold: float = 0.14
    text_match: str = "case_insensitive"
    scroll_match_by_direction: bool = True

    def __post_init__(self):
        if not 0.0 < self.click_distance_threshold <= math.sqrt(2):
            raise ValueError("click threshold must lie in (0, sqrt(2)]")
        if self.text_match not in ("exact", "case_insensitive"):
            raise ValueError("text_match must be 'exact' or 'case_insensitive'")


def match_action(predicted: Action, reference: Action, config: MatcherConfig | None = None) -> bool:
    config = config or MatcherConfig()
    tp, tr = predicted.action_type, reference.action_type
    if tp in _SCROLLS and tr in _SCROLLS and not config.scroll_match_by_direction:
        return True
    if tp is not tr:
        return False
    if tp is ActionType.DUAL_POINT:
        (x0, y0), (x1, y1) = predicted.click_point, reference.click_point
        return math.hypot(x0 - x1, y0 - y1) <= config.click_distance_threshold
    if tp is ActionType.TYPE:
        a, b = predicted.typed_text, reference.typed_text
        return a == b if config.text_match == "exact" else a.casefold() == b.casefold()
    return True


@dataclass
class EvalReport:
    mode: str
    step_sr: float
    task_sr: float
    avg_step_length: float
    n_tasks: int
    n_episodes: int
    method: str = ""
    domain: str = ""
    per_task: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def offline_eval(policy: GreedyPolicy, env: EnvSpec, trajectories: Sequence[Trajectory],
                 matcher: MatcherConfig | None = None, method: str = "", domain: str = "") -> EvalReport:
    """Teacher-forced step matching: the policy sees each recorded state and its stored history."""
    if not trajectories:
        raise ValueError("empty test set")
    matcher = matcher or MatcherConfig()
    rows = []
    n_steps = n_match = n_full = 0
    for traj in trajectories:
        hits = [match_action(policy.greedy_action(env, rec.state()), rec.action, matcher) for rec in traj.steps]
        full = all(hits)
        n_steps += len(hits)
        n_match += sum(hits)
        n_full += full
        rows.append({"episode": traj.episode, "task_id": traj.task_id, "steps": len(hits),
                     "matched": int(sum(hits)), "all_matched": bool(full)})
    return EvalReport("offline", n_match / n_steps if n_steps else 0.0, n_full / len(trajectories),
                      n_steps / len(trajectories), len({t.task_id for t in trajectories}), len(trajectories),
                      method, domain, rows)


def episode_rng(seed: int, task_id: str) -> np.random.Generator:
    """Per-episode stream derived from (seed, task_id) only."""
    h = int.from_bytes(hashlib.sha256(task_id.encode()).digest()[:8], "little")
    return np.random.default_rng([int(seed), h])


def rollout(policy: GreedyPolicy, env: EnvSpec, task_id: str, seed: int, max_steps: int = 10) -> dict:
    rng = episode_rng(seed, task_id)
    state = reset(env, task_id)
    rewards = []
    while not state.done and len(rewards) < max_steps:
        state, r, _ = step(env, state, policy.greedy_action(env, state), rng)
        rewards.append(r)
    return {"task_id": task_id, "seed": int(seed), "success": bool(state.succeeded),
            "length": len(rewards), "optimal_steps": int(sum(rewards))}


def online_eval(policy: GreedyPolicy, env: EnvSpec, task_ids: Sequence[str] | None = None,
                max_steps: int = 10, seeds: Sequence[int] = (0,), method: str = "", domain: str = "") -> EvalReport:
    """Greedy rollouts; success is the goal predicate at STATUS_TASK_COMPLETE within ``max_steps``."""
    task_ids = [t.task_id for t in env.tasks] if task_ids is None else list(task_ids)
    unique = list(dict.fromkeys(task_ids))
    if len(unique) < len(task_ids):
        log.warning("removed %d duplicate tasks", len(task_ids) - len(unique))
    episodes = [rollout(policy, env, t, s, max_steps) for t in unique for s in seeds]
    n = len(episodes)
    steps = sum(e["length"] for e in episodes)
    return EvalReport("online", sum(e["optimal_steps"] for e in episodes) / steps if steps else 0.0,
                      sum(e["success"] for e in episodes) / n if n else 0.0,
                      steps / n if n else 0.0, len(unique), n, method, domain, episodes)


class OraclePolicy:
    """Lowest-index template on a shortest path to the goal."""

    def __init__(self, env: EnvSpec, grid: int = 14):
        self.templates = ActionTemplates(env, grid)

    def greedy_index(self, env: EnvSpec, state: State) -> int:
        best = optimal_keys(env, state.core())
        keys = self.templates.resolved_keys(env, state)
        for i, k in enumerate(keys):
            if k in best:
                return i
        return self.templates.index_of(Action(ActionType.STATUS_TASK_IMPOSSIBLE))

    def greedy_action(self, env: EnvSpec, state: State) -> Action:
        return self.templates.decode(self.greedy_index(env, state))


class RandomPolicy:
    """Uniform over templates, for sanity baselines; seeded per call site."""

    def __init__(self, env: EnvSpec, seed: int = 0, grid: int = 14):
        self.templates = ActionTemplates(env, grid)
        self.rng = np.random.default_rng(seed)

    def greedy_action(self, env: EnvSpec, state: State) -> Action:
        return self.templates.decode(int(self.rng.integers(self.templates.n)))


def write_report_json(reports: Sequence[EvalReport], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=1, sort_keys=True)


def read_report_json(path) -> list[EvalReport]:
    with open(path, encoding="utf-8") as fh:
        return [EvalReport.from_dict(d) for d in json.load(fh)]


def write_summary_csv(reports: Sequence[EvalReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in reports:
            w.writerow([r.method, r.domain, f"{r.step_sr:.6f}", f"{r.task_sr:.6f}", f"{r.avg_step_length:.6f}"])
