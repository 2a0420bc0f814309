"""Synthetic GUI-navigation MDPs.

An environment is a tree of screens rooted at a home screen. Screens carry
widgets laid out on a 14x14 layout grid in normalized [0, 1]^2 coordinates:

- link/button widgets navigate to another screen,
- a textfield (search bar, top row) takes focus on click; TYPE fills the
  buffer and PRESS_ENTER submits to the screen's results page,
- ad widgets open advertisement screens.

Clicks on regular widgets may be hijacked to an ad screen with probability
``distractor_prob``. Ad screens recover to home via PRESS_BACK or PRESS_HOME.

The reward of a step is 1 iff the action lies on a shortest path to the
task goal (see :func:`optimal_actions`), else 0.
"""

from __future__ import annotations

import enum
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Protocol

import numpy as np

LAYOUT_GRID = 14
ENV_VERSION = 1


class EnvError(Exception):
    pass


class UnknownTask(EnvError):
    pass


class EpisodeDone(EnvError):
    pass


class MalformedAction(EnvError):
    pass


class GenerationError(EnvError):
    pass


class CapExceeded(EnvError):
    pass


class ActionType(str, enum.Enum):
    DUAL_POINT = "DUAL_POINT"
    TYPE = "TYPE"
    PRESS_BACK = "PRESS_BACK"
    PRESS_HOME = "PRESS_HOME"
    PRESS_ENTER = "PRESS_ENTER"
    STATUS_TASK_COMPLETE = "STATUS_TASK_COMPLETE"
    STATUS_TASK_IMPOSSIBLE = "STATUS_TASK_IMPOSSIBLE"
    SCROLL_DOWN = "SCROLL_DOWN"
    SCROLL_UP = "SCROLL_UP"
    SCROLL_LEFT = "SCROLL_LEFT"
    SCROLL_RIGHT = "SCROLL_RIGHT"


ACTION_TYPES: tuple[ActionType, ...] = tuple(ActionType)
TYPE_INDEX = {t: i for i, t in enumerate(ACTION_TYPES)}

# Resolved keys for payload-free types.
_PLAIN_KEYS = {
    ActionType.PRESS_BACK: "back",
    ActionType.PRESS_HOME: "home",
    ActionType.PRESS_ENTER: "enter",
    ActionType.STATUS_TASK_COMPLETE: "complete",
    ActionType.STATUS_TASK_IMPOSSIBLE: "impossible",
    ActionType.SCROLL_DOWN: "scroll_down",
    ActionType.SCROLL_UP: "scroll_up",
    ActionType.SCROLL_LEFT: "scroll_left",
    ActionType.SCROLL_RIGHT: "scroll_right",
}
_KEY_TYPES = {v: k for k, v in _PLAIN_KEYS.items()}


@dataclass(frozen=True)
class Action:
    action_type: ActionType
    click_point: tuple[float, float] | None = None
    typed_text: str | None = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "action_type", ActionType(self.action_type))
        except ValueError as exc:
            raise MalformedAction(str(exc)) from None
        if self.action_type is ActionType.DUAL_POINT:
            if self.click_point is None or len(self.click_point) != 2:
                raise MalformedAction("DUAL_POINT requires a click_point")
            x, y = (float(v) for v in self.click_point)
            if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0) or math.isnan(x) or math.isnan(y):
                raise MalformedAction(f"click_point out of [0,1]: {self.click_point}")
            object.__setattr__(self, "click_point", (x, y))
        elif self.click_point is not None:
            raise MalformedAction(f"{self.action_type.value} takes no click_point")
        if self.action_type is ActionType.TYPE:
            if not isinstance(self.typed_text, str):
                raise MalformedAction("TYPE requires typed_text")
        elif self.typed_text is not None:
            raise MalformedAction(f"{self.action_type.value} takes no typed_text")

    def to_dict(self) -> dict:
        d: dict = {"action_type": self.action_type.value}
        if self.click_point is not None:
            d["click_point"] = list(self.click_point)
        if self.typed_text is not None:
            d["typed_text"] = self.typed_text
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Action":
        cp = d.get("click_point")
        return cls(d["action_type"], tuple(cp) if cp is not None else None, d.get("typed_text"))

    def __str__(self):
        s = f'"action_type": "{self.action_type.value}"'
        if self.click_point is not None:
            s += f', "click_point": "[{self.click_point[0]:g}, {self.click_point[1]:g}]"'
        if self.typed_text is not None:
            s += f', "typed_text": "{self.typed_text}"'
        return s


def plain(action_type: ActionType | str) -> Action:
    return Action(ActionType(action_type))


def click(x: float, y: float) -> Action:
    return Action(ActionType.DUAL_POINT, (x, y))


def type_text(text: str) -> Action:
    return Action(ActionType.TYPE, typed_text=text)


@dataclass(frozen=True)
class Widget:
    widget_id: str
    rect: tuple[float, float, float, float]  # x0, y0, x1, y1; half-open
    kind: str  # button | link | textfield | ad
    label: str
    target: int | None = None
    page: int = 0

    def contains(self, x: float, y: float) -> bool:
        x0, y0, x1, y1 = self.rect
        return x0 <= x < x1 and y0 <= y < y1

    @property
    def center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.rect
        return (round((x0 + x1) / 2, 6), round((y0 + y1) / 2, 6))


@dataclass(frozen=True)
class Screen:
    screen_id: int
    name: str
    widgets: tuple[Widget, ...]
    is_ad: bool = False
    parent: int = 0
    n_pages: int = 1
    submit_target: int | None = None
    kind: str = "page"  # home | page | search | results | ad

    def visible(self, scroll: int) -> tuple[Widget, ...]:
        return tuple(w for w in self.widgets if w.page == scroll)

    def widget_at(self, x: float, y: float, scroll: int) -> Widget | None:
        for w in self.widgets:
            if w.page == scroll and w.contains(x, y):
                return w
        return None


@dataclass(frozen=True)
class Goal:
    screen_id: int
    typed_buffer: str | None = None

    def satisfied(self, screen_id: int, typed_buffer: str) -> bool:
        if screen_id != self.screen_id:
            return False
        return self.typed_buffer is None or typed_buffer == self.typed_buffer


@dataclass(frozen=True)
class Task:
    task_id: str
    instruction: str
    goal: Goal
    max_steps: int = 10
    path_names: tuple[str, ...] = ()
    query: str | None = None

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass(frozen=True)
class State:
    task_id: str
    screen_id: int
    history: tuple[Action, ...] = ()
    typed_buffer: str = ""
    focused: bool = False
    scroll_offset: int = 0
    step_index: int = 0
    done: bool = False
    succeeded: bool = False

    def core(self) -> tuple:
        """Dynamics-relevant part of the state (history excluded)."""
        if self.done:
            return (self.task_id, -1, "", False, int(self.succeeded))
        return (self.task_id, self.screen_id, self.typed_buffer, self.focused, self.scroll_offset)

    def history_types(self, k: int) -> tuple[ActionType, ...]:
        if k <= 0:
            return ()
        return tuple(a.action_type for a in self.history[-k:])

    def canonical_key(self, k: int) -> tuple:
        if self.done:
            return self.core()
        return self.core() + (tuple(t.value for t in self.history_types(k)),)


@dataclass(frozen=True, eq=False)
class EnvSpec:
    env_id: str
    screens: tuple[Screen, ...]
    tasks: tuple[Task, ...]
    transition_table: dict  # (screen_id, resolved_key) -> screen_id
    distractor_prob: float = 0.0
    gamma: float = 0.95
    seed: int = 0
    history_k: int = 4
    vocabulary: tuple[str, ...] = ()
    home: int = 0
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.distractor_prob <= 1.0:
            raise EnvError("distractor_prob must lie in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise EnvError("gamma must lie in [0, 1)")
        ids = [s.screen_id for s in self.screens]
        if ids != list(range(len(ids))):
            raise EnvError("screen ids must be 0..n-1 in order")
        if sum(1 for s in self.screens if s.kind == "home") != 1 or self.screens[self.home].kind != "home":
            raise EnvError("exactly one home screen required")
        for (sid, _), tgt in self.transition_table.items():
            if not (0 <= sid < len(ids) and 0 <= tgt < len(ids)):
                raise EnvError(f"transition references missing screen: {sid}->{tgt}")
        for s in self.screens:
            if s.is_ad and ((s.screen_id, "back") not in self.transition_table
                            or (s.screen_id, "home") not in self.transition_table):
                raise EnvError(f"ad screen {s.screen_id} lacks back/home recovery")

    def task(self, task_id: str) -> Task:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise UnknownTask(task_id)

    @property
    def ad_screens(self) -> tuple[int, ...]:
        return tuple(s.screen_id for s in self.screens if s.is_ad)

    @property
    def max_pages(self) -> int:
        return max(s.n_pages for s in self.screens)


class RandomStream(Protocol):
    def random(self) -> float: ...


class RecordingStream:
    """Wraps a numpy Generator and records every uniform draw."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.draws: list[float] = []

    def random(self) -> float:
        u = float(self.rng.random())
        self.draws.append(u)
        return u


class ReplayStream:
    def __init__(self, draws: Iterable[float]):
        self._draws = deque(float(u) for u in draws)

    def random(self) -> float:
        if not self._draws:
            raise EnvError("replay stream exhausted")
        return self._draws.popleft()


# ---------------------------------------------------------------- dynamics


def resolve(env: EnvSpec, state: State, action: Action) -> str:
    """Map a concrete action to the discrete key the dynamics act on."""
    t = action.action_type
    if t is ActionType.DUAL_POINT:
        w = env.screens[state.screen_id].widget_at(*action.click_point, state.scroll_offset)
        return f"click:{w.widget_id}" if w is not None else "noop"
    if t is ActionType.TYPE:
        return f"type:{action.typed_text}" if state.focused else "noop"
    return _PLAIN_KEYS[t]


def _widget(env: EnvSpec, screen_id: int, widget_id: str) -> Widget:
    for w in env.screens[screen_id].widgets:
        if w.widget_id == widget_id:
            return w
    raise EnvError(f"no widget {widget_id} on screen {screen_id}")


def _next_core(env: EnvSpec, core: tuple, key: str) -> tuple:
    """Deterministic (hijack-free) successor of a non-terminal core state."""
    task_id, sid, typed, focused, scroll = core
    screen = env.screens[sid]
    if key.startswith("click:"):
        w = _widget(env, sid, key[6:])
        if w.kind == "textfield":
            return (task_id, sid, typed, True, scroll)
        return (task_id, env.transition_table[(sid, key)], "", False, 0)
    if key.startswith("type:"):
        return (task_id, sid, key[5:], True, scroll)
    if key == "enter":
        if screen.submit_target is not None and typed:
            return (task_id, env.transition_table[(sid, "enter")], typed, False, 0)
        return core
    if key in ("back", "home"):
        return (task_id, env.transition_table.get((sid, key), env.home), "", False, 0)
    if key == "scroll_down":
        return (task_id, sid, typed, focused, min(scroll + 1, screen.n_pages - 1))
    if key == "scroll_up":
        return (task_id, sid, typed, focused, max(scroll - 1, 0))
    if key == "complete":
        goal = env.task(task_id).goal
        return (task_id, -1, "", False, int(goal.satisfied(sid, typed)))
    if key == "impossible":
        return (task_id, -1, "", False, 0)
    return core  # noop, scroll_left, scroll_right


def _is_hijackable(env: EnvSpec, core: tuple, key: str) -> bool:
    if env.distractor_prob <= 0 or not env.ad_screens or not key.startswith("click:"):
        return False
    sid = core[1]
    if env.screens[sid].is_ad:
        return False
    return _widget(env, sid, key[6:]).kind != "ad"


def available_keys(env: EnvSpec, core: tuple) -> list[str]:
    """All distinct resolved keys reachable from a non-terminal core state."""
    _, sid, _, focused, scroll = core
    keys = [f"click:{w.widget_id}" for w in env.screens[sid].visible(scroll)]
    if empty_point(env.screens[sid], scroll) is not None:
        keys.append("noop")
    if focused:
        keys.extend(f"type:{v}" for v in env.vocabulary)
    keys.extend(_PLAIN_KEYS.values())
    return keys


def outcomes(env: EnvSpec, core: tuple, key: str) -> list[tuple[float, tuple]]:
    """Successor distribution of (core, key) including click hijacks."""
    nxt = _next_core(env, core, key)
    if not _is_hijackable(env, core, key):
        return [(1.0, nxt)]
    p = env.distractor_prob
    ads = env.ad_screens
    out = [(1.0 - p, nxt)] if p < 1.0 else []
    out.extend((p / len(ads), (core[0], a, "", False, 0)) for a in ads)
    return out


def _reset_core(env: EnvSpec, task_id: str) -> tuple:
    return (task_id, env.home, "", False, 0)


def _dynamics(env: EnvSpec, task_id: str) -> dict:
    """Per-task cache: forward-reachable cores and BFS distance-to-goal."""
    cache = env._cache.setdefault("dyn", {})
    if task_id in cache:
        return cache[task_id]
    task = env.task(task_id)
    start = _reset_core(env, task_id)
    succ: dict[tuple, dict[str, tuple]] = {}
    order = [start]
    seen = {start}
    queue = deque([start])
    while queue:
        core = queue.popleft()
        if core[1] == -1:
            continue
        table = {}
        for key in available_keys(env, core):
            table[key] = _next_core(env, core, key)
            for _, c in outcomes(env, core, key):
                if c not in seen:
                    seen.add(c)
                    order.append(c)
                    queue.append(c)
        succ[core] = table
    # backward BFS over deterministic edges
    preds: dict[tuple, list[tuple]] = {}
    for core, table in succ.items():
        for nxt in table.values():
            preds.setdefault(nxt, []).append(core)
    dist = {}
    frontier = deque()
    for core in succ:
        if task.goal.satisfied(core[1], core[2]):
            dist[core] = 0
            frontier.append(core)
    while frontier:
        c = frontier.popleft()
        for p in preds.get(c, ()):
            if p not in dist:
                dist[p] = dist[c] + 1
                frontier.append(p)
    info = {"succ": succ, "dist": dist, "order": order}
    cache[task_id] = info
    return info


def distance_to_goal(env: EnvSpec, state: State) -> float:
    """Shortest number of navigation steps until the goal predicate holds."""
    if state.done:
        return math.inf
    return _dynamics(env, state.task_id)["dist"].get(state.core(), math.inf)


def optimal_keys(env: EnvSpec, core: tuple) -> frozenset[str]:
    if core[1] == -1:
        return frozenset()
    cache = env._cache.setdefault("opt", {})
    if core in cache:
        return cache[core]
    info = _dynamics(env, core[0])
    dist = info["dist"]
    table = info["succ"].get(core)
    if table is None:
        # off the reachable set (e.g. out-of-vocabulary text): one-step lookahead
        table = {k: _next_core(env, core, k) for k in available_keys(env, core)}
        d = dist.get(core, 1 + min(dist.get(c, math.inf) for c in table.values()))
    else:
        d = dist.get(core, math.inf)
    if d == 0:
        keys = frozenset({"complete"})
    elif d == math.inf:
        keys = frozenset({"impossible"})
    else:
        keys = frozenset(k for k, nxt in table.items() if dist.get(nxt, math.inf) == d - 1)
    cache[core] = keys
    return keys


def empty_point(screen: Screen, scroll: int) -> tuple[float, float] | None:
    g = LAYOUT_GRID
    for r in range(g):
        for c in range(g):
            x, y = (c + 0.5) / g, (r + 0.5) / g
            if screen.widget_at(x, y, scroll) is None:
                return (round(x, 6), round(y, 6))
    return None


def key_to_action(env: EnvSpec, screen_id: int, key: str, scroll: int = 0) -> Action:
    if key == "noop":
        pt = empty_point(env.screens[screen_id], scroll)
        if pt is None:
            raise EnvError(f"screen {screen_id} has no empty spot")
        return click(*pt)
    if key.startswith("click:"):
        return click(*_widget(env, screen_id, key[6:]).center)
    if key.startswith("type:"):
        return type_text(key[5:])
    return plain(_KEY_TYPES[key])


def optimal_actions(env: EnvSpec, state: State) -> set[Action]:
    """Canonical actions on a shortest path to the goal (clicks at widget centers)."""
    if state.done:
        return set()
    return {key_to_action(env, state.screen_id, k, state.scroll_offset) for k in optimal_keys(env, state.core())}


def is_optimal(env: EnvSpec, state: State, action: Action) -> bool:
    if state.done:
        return False
    return resolve(env, state, action) in optimal_keys(env, state.core())


def reset(env: EnvSpec, task_id: str) -> State:
    env.task(task_id)
    return State(task_id=task_id, screen_id=env.home)


def goal_satisfied(env: EnvSpec, state: State) -> bool:
    return env.task(state.task_id).goal.satisfied(state.screen_id, state.typed_buffer)


def step(env: EnvSpec, state: State, action: Action, rng: RandomStream | None = None) -> tuple[State, int, bool]:
    if state.done:
        raise EpisodeDone(f"task {state.task_id} already finished")
    if not isinstance(action, Action):
        raise MalformedAction(f"not an Action: {action!r}")
    core = state.core()
    key = resolve(env, state, action)
    reward = int(key in optimal_keys(env, core))
    history = state.history + (action,)
    n = state.step_index + 1
    if key == "complete":
        ok = goal_satisfied(env, state)
        nxt = State(state.task_id, state.screen_id, history, state.typed_buffer, False,
                    state.scroll_offset, n, True, ok)
        return nxt, reward, True
    if key == "impossible":
        nxt = State(state.task_id, state.screen_id, history, state.typed_buffer, False,
                    state.scroll_offset, n, True, False)
        return nxt, reward, True
    new = _next_core(env, core, key)
    if _is_hijackable(env, core, key):
        if rng is None:
            raise EnvError("a random stream is required when distractors are active")
        if rng.random() < env.distractor_prob:
            ads = env.ad_screens
            idx = min(int(rng.random() * len(ads)), len(ads) - 1) if len(ads) > 1 else 0
            new = (state.task_id, ads[idx], "", False, 0)
    _, sid, typed, focused, scroll = new
    return State(state.task_id, sid, history, typed, focused, scroll, n, False, False), reward, False


def state_from_key(env: EnvSpec, core: tuple, history: tuple[Action, ...] = ()) -> State:
    task_id, sid, typed, focused, scroll = core
    if sid == -1:
        return State(task_id, env.home, history, "", False, 0, len(history), True, bool(scroll))
    return State(task_id, sid, history, typed, focused, scroll, len(history))


def enumerate_states(env: EnvSpec, history_k: int | None = None, cap: int = 100_000) -> list[State]:
    """Reachable states in BFS order, deduplicated on (core, last-k action types).

    Terminal states collapse to one per (task, succeeded). Each returned state
    carries the first-discovered representative history, truncated to k.
    """
    k = env.history_k if history_k is None else history_k
    out: list[State] = []
    seen: set = set()
    queue: deque = deque()
    for task in env.tasks:
        s0 = reset(env, task.task_id)
        key = s0.canonical_key(k)
        if key not in seen:
            seen.add(key)
            out.append(s0)
            queue.append(s0)
    if len(out) > cap:
        raise CapExceeded(f"more than {cap} states")
    while queue:
        s = queue.popleft()
        if s.done:
            continue
        core = s.core()
        for key in available_keys(env, core):
            a = key_to_action(env, s.screen_id, key, s.scroll_offset)
            hist = (s.history + (a,))[-k:] if k > 0 else ()
            for _, c in outcomes(env, core, key):
                nxt = state_from_key(env, c, hist)
                ck = nxt.canonical_key(k)
                if ck in seen:
                    continue
                seen.add(ck)
                out.append(nxt)
                if len(out) > cap:
                    raise CapExceeded(f"more than {cap} states")
                queue.append(nxt)
    return out


# -------------------------------------------------------------- generation


@dataclass
class GeneratorConfig:
    screens: int = 10
    tasks: int = 5
    distractor_prob: float = 0.0
    gamma: float = 0.95
    history_k: int = 4
    seed: int = 0
    max_steps: int = 10
    ad_screens: int | None = None
    search_fraction: float = 0.3
    scroll_fraction: float = 0.25
    cross_links: int | None = None
    max_depth: int = 3
    retries: int = 50

    @classmethod
    def from_mapping(cls, m) -> "GeneratorConfig":
        kw = {}
        for f_ in cls.__dataclass_fields__.values():
            if f_.name in m:
                raw = m[f_.name]
                if raw in (None, "", "none", "None"):
                    kw[f_.name] = None
                    continue
                typ = f_.type.split("|")[0].strip()
                kw[f_.name] = {"int": int, "float": float}.get(typ, str)(raw)
        return cls(**kw)


SCREEN_NAMES = (
    "Settings", "Network", "Wi-Fi", "Bluetooth", "Display", "Sound", "Battery", "Storage",
    "Apps", "Chrome", "Maps", "Gmail", "Calendar", "Photos", "Clock", "Alarms", "Contacts",
    "Store", "Cart", "Orders", "Account", "Privacy", "Security", "Location", "Language",
    "Keyboard", "Files", "Downloads", "News", "Weather", "Music", "Podcasts", "Camera",
    "Notes", "Reminders", "Messages", "Phone", "Wallet", "Travel", "Hotels", "Flights",
    "Deals", "Help", "About", "Updates", "Backup", "Accessibility", "Themes", "Widgets",
    "Profile", "Friends", "Groups", "Events", "Library", "Books", "Videos", "Games",
)
QUERIES = (
    "capital of England", "weather today", "pizza near me", "flights to Paris",
    "hotel prices Hong Kong", "usb-c cable", "running shoes", "coffee maker",
    "news headlines", "bus schedule", "laptop stand", "yoga mat",
)
AD_NAMES = ("Sponsored Offer", "Flash Sale", "Casino Bonus", "Free Prize")

# Widget slots on the 14x14 layout grid: (col0, col1, row0, row1).
_SEARCH_SLOT = (1, 13, 0, 1)
_AD_SLOT = (1, 13, 12, 14)
_LINK_SLOTS = tuple(
    (c0, c1, r, r + 2)
    for r in (1, 4, 7, 10)
    for (c0, c1) in ((1, 6), (8, 13))
)


def _rect(slot) -> tuple[float, float, float, float]:
    c0, c1, r0, r1 = slot
    g = LAYOUT_GRID
    return (c0 / g, r0 / g, c1 / g, r1 / g)


def _try_generate(cfg: GeneratorConfig, rng: np.random.Generator, env_id: str, seed: int) -> EnvSpec:
    n = cfg.screens
    n_ad = cfg.ad_screens if cfg.ad_screens is not None else (1 if cfg.distractor_prob > 0 else 0)
    names = [str(x) for x in rng.permutation(SCREEN_NAMES)]
    while len(names) < n:
        names.append(f"Page {len(names)}")
    names = ["Home"] + names[: n - 1]

    parent = [0] * n
    depth = [0] * n
    children: dict[int, list[int]] = {i: [] for i in range(n)}
    for i in range(1, n):
        cands = [j for j in range(i) if depth[j] < cfg.max_depth and len(children[j]) < 2 * len(_LINK_SLOTS) - 1]
        p = int(cands[rng.integers(len(cands))])
        parent[i], depth[i] = p, depth[p] + 1
        children[p].append(i)

    # search screens: a non-home screen whose leaf child becomes its results page
    kind = ["home"] + ["page"] * (n - 1)
    submit: dict[int, int] = {}
    for i in range(1, n):
        p = parent[i]
        if (p != 0 and kind[p] == "page" and not children[i] and p not in submit
                and rng.random() < cfg.search_fraction):
            kind[p], kind[i] = "search", "results"
            submit[p] = i
            names[i] = f"{names[p]} results"
    queries = [str(x) for x in rng.permutation(QUERIES)]
    vocabulary: tuple[str, ...] = ()
    if submit:
        vocabulary = tuple(sorted(queries[: len(submit) + 2]))

    widgets: dict[int, list[Widget]] = {i: [] for i in range(n + n_ad)}
    table: dict[tuple[int, str], int] = {}
    used: dict[int, list] = {i: [] for i in range(n)}

    def place(sid: int, slot, w_kind: str, label: str, target: int | None, page: int):
        wid = f"w{sid}_{len(widgets[sid])}"
        widgets[sid].append(Widget(wid, _rect(slot), w_kind, label, target, page))
        if target is not None:
            table[(sid, f"click:{wid}")] = target

    for sid in range(n):
        links = [c for c in children[sid] if kind[c] != "results"]
        order = list(rng.permutation(len(_LINK_SLOTS)))
        free0 = [(0, _LINK_SLOTS[j]) for j in order]
        free1 = [(1, _LINK_SLOTS[j]) for j in order]
        for idx, c in enumerate(links):
            to_second = (len(links) >= 2 and idx == len(links) - 1 and rng.random() < cfg.scroll_fraction)
            pool = free1 if (to_second or not free0) else free0
            pg, slot = pool.pop(0)
            used[sid].append((pg, slot))
            place(sid, slot, "link" if rng.random() < 0.5 else "button", names[c], c, pg)
        if kind[sid] == "search":
            place(sid, _SEARCH_SLOT, "textfield", "Search", None, 0)
            table[(sid, "enter")] = submit[sid]

    n_cross = cfg.cross_links if cfg.cross_links is not None else n // 5
    targets = [i for i in range(1, n) if kind[i] != "results"]
    for _ in range(n_cross):
        if not targets:
            break
        src = int(rng.integers(n))
        dst = int(targets[rng.integers(len(targets))])
        if dst == src or dst in children[src] or any(w.target == dst for w in widgets[src]):
            continue
        taken = {s for pg, s in used[src] if pg == 0}
        free = [s for s in _LINK_SLOTS if s not in taken]
        if not free:
            continue
        slot = free[int(rng.integers(len(free)))]
        used[src].append((0, slot))
        place(src, slot, "link", names[dst], dst, 0)

    for a in range(n_ad):
        aid = n + a
        for sid in range(n):
            if rng.random() < 0.5:
                place(sid, _AD_SLOT, "ad", "Sponsored", aid, 0)
        place(aid, (1, 13, 1, 12), "ad", AD_NAMES[a % len(AD_NAMES)], aid, 0)

    screens = []
    for sid in range(n + n_ad):
        ws = tuple(widgets[sid])
        pages = 1 + max((w.page for w in ws), default=0)
        if sid < n:
            p = parent[sid] if sid else 0
            table[(sid, "back")] = p
            table[(sid, "home")] = 0
            screens.append(Screen(sid, names[sid], ws, False, p, pages, submit.get(sid), kind[sid]))
        else:
            table[(sid, "back")] = 0
            table[(sid, "home")] = 0
            screens.append(Screen(sid, AD_NAMES[(sid - n) % len(AD_NAMES)], ws, True, 0, 1, None, "ad"))

    def path_to(i: int) -> tuple[str, ...]:
        out = []
        while i != 0:
            out.append(names[i])
            i = parent[i]
        return tuple(reversed(out))

    cand_goals = []
    for i in range(1, n):
        if kind[i] == "results":
            for q in queries[: len(submit)]:
                cand_goals.append((i, q))
        else:
            cand_goals.append((i, None))
    if len(cand_goals) < cfg.tasks:
        raise GenerationError(f"only {len(cand_goals)} distinct goals for {cfg.tasks} tasks")
    picks = rng.permutation(len(cand_goals))[: cfg.tasks]
    tasks = []
    for j, ci in enumerate(sorted(int(c) for c in picks)):
        gid, q = cand_goals[ci]
        if q is None:
            path = path_to(gid)
            instr = "Open " + " > ".join(path)
        else:
            path = path_to(parent[gid])
            instr = f"Search for '{q}' in " + " > ".join(path)
        tasks.append(Task(f"t{j}", instr, Goal(gid, q), cfg.max_steps, path, q))

    env = EnvSpec(env_id, tuple(screens), tuple(tasks), dict(sorted(table.items())),
                  float(cfg.distractor_prob), float(cfg.gamma), int(seed), int(cfg.history_k),
                  vocabulary, 0)
    for t in env.tasks:
        d = distance_to_goal(env, reset(env, t.task_id))
        if d + 1 > t.max_steps:
            raise GenerationError(f"task {t.task_id} needs {d + 1} steps > {t.max_steps}")
    return env


def generate_env(config: GeneratorConfig, seed: int | None = None) -> EnvSpec:
    seed = config.seed if seed is None else seed
    if config.screens < 2:
        raise GenerationError("need at least 2 screens")
    if config.tasks < 1:
        raise GenerationError("need at least 1 task")
    if not 0.0 <= config.distractor_prob <= 1.0:
        raise GenerationError("distractor_prob must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    last = None
    for attempt in range(config.retries):
        try:
            return _try_generate(config, rng, f"env-{seed}", seed)
        except GenerationError as exc:
            last = exc
    raise GenerationError(f"gave up after {config.retries} attempts: {last}")


# ----------------------------------------------------------- serialization


def env_to_dict(env: EnvSpec) -> dict:
    return {
        "env_version": ENV_VERSION,
        "env_id": env.env_id,
        "seed": env.seed,
        "gamma": env.gamma,
        "distractor_prob": env.distractor_prob,
        "history_k": env.history_k,
        "home": env.home,
        "vocabulary": list(env.vocabulary),
        "screens": [
            {
                "screen_id": s.screen_id,
                "name": s.name,
                "kind": s.kind,
                "is_ad": s.is_ad,
                "parent": s.parent,
                "n_pages": s.n_pages,
                "submit_target": s.submit_target,
                "widgets": [
                    {"widget_id": w.widget_id, "rect": list(w.rect), "kind": w.kind,
                     "label": w.label, "target": w.target, "page": w.page}
                    for w in s.widgets
                ],
            }
            for s in env.screens
        ],
        "tasks": [
            {"task_id": t.task_id, "instruction": t.instruction,
             "goal": {"screen_id": t.goal.screen_id, "typed_buffer": t.goal.typed_buffer},
             "max_steps": t.max_steps, "path_names": list(t.path_names), "query": t.query}
            for t in env.tasks
        ],
        "transition_table": [[sid, key, tgt] for (sid, key), tgt in sorted(env.transition_table.items())],
    }


def env_from_dict(d: dict) -> EnvSpec:
    if d.get("env_version") != ENV_VERSION:
        raise EnvError(f"unsupported env_version {d.get('env_version')!r}")
    screens = tuple(
        Screen(s["screen_id"], s["name"],
               tuple(Widget(w["widget_id"], tuple(w["rect"]), w["kind"], w["label"], w["target"], w["page"])
                     for w in s["widgets"]),
               s["is_ad"], s["parent"], s["n_pages"], s["submit_target"], s["kind"])
        for s in d["screens"]
    )
    tasks = tuple(
        Task(t["task_id"], t["instruction"], Goal(t["goal"]["screen_id"], t["goal"]["typed_buffer"]),
             t["max_steps"], tuple(t["path_names"]), t["query"])
        for t in d["tasks"]
    )
    table = {(sid, key): tgt for sid, key, tgt in d["transition_table"]}
    return EnvSpec(d["env_id"], screens, tasks, table, d["distractor_prob"], d["gamma"], d["seed"],
                   d["history_k"], tuple(d["vocabulary"]), d["home"])


def dumps_env(env: EnvSpec) -> str:
    return json.dumps(env_to_dict(env), indent=1)


def loads_env(text: str) -> EnvSpec:
    return env_from_dict(json.loads(text))


def save_env(env: EnvSpec, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_env(env))
        fh.write("\n")


def load_env(path) -> EnvSpec:
    with open(path) as fh:
        return loads_env(fh.read())
