"""Offline trajectory collection under behavior policies, and JSONL storage."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .env_mdp import (
    LAYOUT_GRID,
    Action,
    ActionType,
    EnvSpec,
    RecordingStream,
    ReplayStream,
    State,
    available_keys,
    enumerate_states,
    key_to_action,
    optimal_keys,
    reset,
    step,
)
from .templates import ActionTemplates, PLAIN_TYPES

FORMAT_VERSION = 1
BEHAVIOR_KINDS = ("scripted_optimal", "epsilon_scripted", "uniform_random", "mixture")


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True)
class StepRecord:
    task_id: str
    episode: int
    step_index: int
    screen_id: int
    typed_buffer: str
    focused: bool
    scroll_offset: int
    history: tuple[Action, ...]
    action: Action
    reward: int
    next_screen_id: int
    rng_trace: tuple[float, ...] = ()
    ell: int | None = None
    label_source: str | None = None

    @property
    def step_key(self) -> str:
        return f"{self.episode}:{self.step_index}"

    def state(self) -> State:
        """The recorded state (history truncated as stored)."""
        return State(self.task_id, self.screen_id, self.history, self.typed_buffer,
                     self.focused, self.scroll_offset, self.step_index)


@dataclass(frozen=True)
class Trajectory:
    task_id: str
    instruction: str
    episode: int
    steps: tuple[StepRecord, ...]
    terminal_succeeded: bool

    def __post_init__(self):
        for i, s in enumerate(self.steps):
            if s.step_index != i:
                raise ValueError(f"episode {self.episode}: non-contiguous step_index {s.step_index} at {i}")


@dataclass
class BehaviorPolicyConfig:
    kind: str = "epsilon_scripted"
    epsilon: float = 0.3
    mixture_weights: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in BEHAVIOR_KINDS:
            raise ValueError(f"unknown behavior kind {self.kind!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.kind == "mixture":
            if not self.mixture_weights:
                raise ValueError("mixture needs weights")
            if any(k not in BEHAVIOR_KINDS[:3] for k in self.mixture_weights):
                raise ValueError(f"mixture components must be among {BEHAVIOR_KINDS[:3]}")
            if any(w < 0 for w in self.mixture_weights.values()):
                raise ValueError("mixture weights must be non-negative")
            if not math.isclose(sum(self.mixture_weights.values()), 1.0, abs_tol=1e-9):
                raise ValueError("mixture weights must sum to 1")

    def components(self) -> list[tuple[str, float]]:
        """Step-level mixture of the two primitive behaviors."""
        if self.kind == "scripted_optimal":
            return [("scripted_optimal", 1.0)]
        if self.kind == "uniform_random":
            return [("uniform_random", 1.0)]
        if self.kind == "epsilon_scripted":
            return [("scripted_optimal", 1.0 - self.epsilon), ("uniform_random", self.epsilon)]
        acc = {"scripted_optimal": 0.0, "uniform_random": 0.0}
        for k, w in sorted(self.mixture_weights.items()):
            for kk, ww in BehaviorPolicyConfig(k, self.epsilon).components():
                acc[kk] += w * ww
        return list(acc.items())


# ------------------------------------------------------------- behaviors


def _empty_cells(screen, scroll: int) -> list[tuple[float, float, float, float]]:
    """Layout cells with no widget on the current page, as rects."""
    g = LAYOUT_GRID
    out = []
    for r in range(g):
        for c in range(g):
            if screen.widget_at((c + 0.5) / g, (r + 0.5) / g, scroll) is None:
                out.append((c / g, r / g, (c + 1) / g, (r + 1) / g))
    return out


def _uniform_point(rect, rng: np.random.Generator) -> tuple[float, float]:
    x0, y0, x1, y1 = rect
    return (float(x0 + (x1 - x0) * rng.random()), float(y0 + (y1 - y0) * rng.random()))


def _sample_scripted(env: EnvSpec, state: State, rng: np.random.Generator) -> Action:
    keys = sorted(optimal_keys(env, state.core()))
    key = keys[int(rng.integers(len(keys)))]
    if key.startswith("click:"):
        w = next(w for w in env.screens[state.screen_id].widgets if w.widget_id == key[6:])
        return Action(ActionType.DUAL_POINT, _uniform_point(w.rect, rng))
    return key_to_action(env, state.screen_id, key, state.scroll_offset)


def _sample_uniform(env: EnvSpec, state: State, rng: np.random.Generator) -> Action:
    """Uniform over the distinct affordances of the current screen.

    Each visible widget, a tap on empty space, each TYPE word (when a field
    has focus) and each payload-free key is one option; taps land uniformly
    inside the chosen widget or empty cell.
    """
    keys = available_keys(env, state.core())
    key = keys[int(rng.integers(len(keys)))]
    screen = env.screens[state.screen_id]
    if key.startswith("click:"):
        w = next(w for w in screen.widgets if w.widget_id == key[6:])
        return Action(ActionType.DUAL_POINT, _uniform_point(w.rect, rng))
    if key == "noop":
        cells = _empty_cells(screen, state.scroll_offset)
        return Action(ActionType.DUAL_POINT, _uniform_point(cells[int(rng.integers(len(cells)))], rng))
    return key_to_action(env, state.screen_id, key, state.scroll_offset)


def sample_behavior(env: EnvSpec, state: State, behavior: BehaviorPolicyConfig, rng: np.random.Generator) -> Action:
    comps = [(k, w) for k, w in behavior.components() if w > 0]
    if len(comps) == 1:
        kind = comps[0][0]
    else:
        u = rng.random()
        kind = comps[-1][0]
        acc = 0.0
        for k, w in comps:
            acc += w
            if u < acc:
                kind = k
                break
    if kind == "scripted_optimal":
        return _sample_scripted(env, state, rng)
    return _sample_uniform(env, state, rng)


def _cell_overlaps(rect, grid: int) -> dict[int, float]:
    x0, y0, x1, y1 = rect
    area = (x1 - x0) * (y1 - y0)
    out = {}
    for r in range(grid):
        oy = min(y1, (r + 1) / grid) - max(y0, r / grid)
        if oy <= 0:
            continue
        for c in range(grid):
            ox = min(x1, (c + 1) / grid) - max(x0, c / grid)
            if ox > 1e-12 and oy > 1e-12:
                out[r * grid + c] = ox * oy / area
    return out


def behavior_template_probs(env: EnvSpec, state: State, behavior: BehaviorPolicyConfig,
                            templates: ActionTemplates) -> np.ndarray:
    """Exact distribution of the behavior policy's actions over templates.

    Clicks are binned by the cell containing the click point.
    """
    probs = np.zeros(templates.n)
    if state.done:
        probs[:] = 1.0 / templates.n
        return probs
    g = templates.grid
    screen = env.screens[state.screen_id]
    for kind, w in behavior.components():
        if w == 0:
            continue
        if kind == "uniform_random":
            keys = available_keys(env, state.core())
        else:
            keys = sorted(optimal_keys(env, state.core()))
        pk = w / len(keys)
        for key in keys:
            if key.startswith("click:"):
                wd = next(x for x in screen.widgets if x.widget_id == key[6:])
                for cell, frac in _cell_overlaps(wd.rect, g).items():
                    probs[templates.click_offset + cell] += pk * frac
            elif key == "noop":
                cells = _empty_cells(screen, state.scroll_offset)
                for rect in cells:
                    for cell, frac in _cell_overlaps(rect, g).items():
                        probs[templates.click_offset + cell] += pk * frac / len(cells)
            else:
                idx = templates.index_of(key_to_action(env, state.screen_id, key, state.scroll_offset))
                probs[idx] += pk
    return probs


# ------------------------------------------------------------ collection


def _truncate(history: tuple[Action, ...], k: int) -> tuple[Action, ...]:
    return history[-k:] if k > 0 else ()


def rollout_episode(env: EnvSpec, task_id: str, behavior: BehaviorPolicyConfig, episode: int, seed: int) -> Trajectory:
    act_rng = np.random.default_rng([seed, episode, 0])
    env_rng = RecordingStream(np.random.default_rng([seed, episode, 1]))
    task = env.task(task_id)
    state = reset(env, task_id)
    steps = []
    k = env.history_k
    while not state.done and state.step_index < task.max_steps:
        action = sample_behavior(env, state, behavior, act_rng)
        n_before = len(env_rng.draws)
        nxt, reward, _ = step(env, state, action, env_rng)
        steps.append(StepRecord(
            task_id, episode, state.step_index, state.screen_id, state.typed_buffer, state.focused,
            state.scroll_offset, _truncate(state.history, k), action, reward, nxt.screen_id,
            tuple(env_rng.draws[n_before:]),
        ))
        state = nxt
    return Trajectory(task_id, task.instruction, episode, tuple(steps), state.succeeded)


def collect(env: EnvSpec, behavior: BehaviorPolicyConfig, n_episodes: int, seed: int) -> list[Trajectory]:
    """Roll out ``n_episodes`` episodes, cycling over tasks in order.

    Every episode owns streams derived from (seed, episode index), so episodes
    can be produced in any order and still give identical output.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    tasks = [t.task_id for t in env.tasks]
    return [rollout_episode(env, tasks[i % len(tasks)], behavior, i, seed) for i in range(n_episodes)]


def replay_trajectory(env: EnvSpec, traj: Trajectory) -> list[str]:
    """Re-run a trajectory through the simulator; returns mismatch descriptions."""
    problems = []
    state = reset(env, traj.task_id)
    k = env.history_k
    for rec in traj.steps:
        snap = (state.screen_id, state.typed_buffer, state.focused, state.scroll_offset, _truncate(state.history, k))
        want = (rec.screen_id, rec.typed_buffer, rec.focused, rec.scroll_offset, rec.history)
        if snap != want:
            problems.append(f"{rec.step_key}: state {snap} != recorded {want}")
        nxt, reward, _ = step(env, state, rec.action, ReplayStream(rec.rng_trace))
        if reward != rec.reward:
            problems.append(f"{rec.step_key}: reward {reward} != recorded {rec.reward}")
        if nxt.screen_id != rec.next_screen_id:
            problems.append(f"{rec.step_key}: next screen {nxt.screen_id} != {rec.next_screen_id}")
        state = nxt
    if state.succeeded != traj.terminal_succeeded:
        problems.append(f"episode {traj.episode}: success flag mismatch")
    return problems


def iter_steps(trajectories: Iterable[Trajectory]):
    for t in trajectories:
        yield from t.steps


def coverage(env: EnvSpec, trajectories: Sequence[Trajectory], history_k: int = 0, grid: int = 14) -> float:
    """Fraction of enumerable (state, template) pairs present in the data."""
    states = enumerate_states(env, history_k)
    templates = ActionTemplates(env, grid)
    keys = {s.canonical_key(history_k) for s in states}
    seen = set()
    for rec in iter_steps(trajectories):
        sk = rec.state().canonical_key(history_k)
        idx = templates.index_of(rec.action)
        if sk in keys and idx is not None:
            seen.add((sk, idx))
    return len(seen) / (len(keys) * templates.n)


# ----------------------------------------------------------------- JSONL


def _record_to_json(traj: Trajectory, rec: StepRecord) -> dict:
    a = rec.action
    return {
        "format_version": FORMAT_VERSION,
        "episode": rec.episode,
        "task_id": rec.task_id,
        "instruction": traj.instruction,
        "step_index": rec.step_index,
        "screen_id": rec.screen_id,
        "typed_buffer": rec.typed_buffer,
        "focused": rec.focused,
        "scroll_offset": rec.scroll_offset,
        "history": [h.to_dict() for h in rec.history],
        "action_type": a.action_type.value,
        "click_point": list(a.click_point) if a.click_point is not None else None,
        "typed_text": a.typed_text,
        "reward": rec.reward,
        "next_screen_id": rec.next_screen_id,
        "rng_trace": list(rec.rng_trace),
        "terminal_succeeded": traj.terminal_succeeded,
    }


def dumps_jsonl(trajectories: Iterable[Trajectory]) -> str:
    lines = []
    for t in trajectories:
        for rec in t.steps:
            lines.append(json.dumps(_record_to_json(t, rec)))
    return "".join(line + "\n" for line in lines)


def write_jsonl(trajectories: Iterable[Trajectory], path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_jsonl(trajectories))


def _record_from_json(d: dict) -> StepRecord:
    cp = d["click_point"]
    action = Action(d["action_type"], tuple(cp) if cp is not None else None, d["typed_text"])
    return StepRecord(
        d["task_id"], int(d["episode"]), int(d["step_index"]), int(d["screen_id"]), d["typed_buffer"],
        bool(d["focused"]), int(d["scroll_offset"]), tuple(Action.from_dict(h) for h in d["history"]),
        action, int(d["reward"]), int(d["next_screen_id"]), tuple(float(u) for u in d["rng_trace"]),
    )


def read_jsonl(path) -> list[Trajectory]:
    groups: dict[int, list] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON ({exc.msg})", lineno) from None
            if d.get("format_version") != FORMAT_VERSION:
                raise ParseError(f"format_version {d.get('format_version')!r} != {FORMAT_VERSION}", lineno)
            try:
                rec = _record_from_json(d)
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad record: {exc}", lineno) from None
            groups.setdefault(rec.episode, []).append((rec, d["instruction"], bool(d["terminal_succeeded"])))
    out = []
    for ep, rows in groups.items():
        out.append(Trajectory(rows[0][0].task_id, rows[0][1], ep, tuple(r for r, _, _ in rows), rows[0][2]))
    return out


# ------------------------------------------------------- stats and split


@dataclass(frozen=True)
class Manifest:
    episodes: int
    steps: int
    level1_count: int
    level2_count: int


def stats(dataset: Sequence) -> Manifest:
    """Exact counts over a list of trajectories or of (labeled) step records."""
    steps = list(iter_steps(dataset)) if dataset and isinstance(dataset[0], Trajectory) else list(dataset)
    l1 = sum(1 for r in steps if r.ell == 0)
    l2 = sum(1 for r in steps if r.ell == 1)
    return Manifest(len({r.episode for r in steps}), len(steps), l1, l2)


def split(trajectories: Sequence[Trajectory], train_fraction: float, seed: int) -> tuple[list[Trajectory], list[Trajectory]]:
    """Partition by task id so no task lands on both sides."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    tasks = sorted({t.task_id for t in trajectories})
    if len(tasks) < 2:
        raise ValueError("need at least 2 distinct tasks to split")
    n_train = min(max(int(round(train_fraction * len(tasks))), 1), len(tasks) - 1)
    order = np.random.default_rng(seed).permutation(len(tasks))
    train_tasks = {tasks[i] for i in order[:n_train]}
    train = [t for t in trajectories if t.task_id in train_tasks]
    test = [t for t in trajectories if t.task_id not in train_tasks]
    return train, test


def with_labels(trajectories: Sequence[Trajectory], labels: dict) -> list[StepRecord]:
    """Flatten to labeled steps using ``{step_key: (ell, source)}``; unlabeled steps are dropped."""
    out = []
    for r in iter_steps(trajectories):
        if r.step_key in labels:
            ell, source = labels[r.step_key]
            out.append(replace(r, ell=int(ell), label_source=source))
    return out
