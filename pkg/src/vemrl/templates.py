"""Discrete action templates: 9 payload-free types, G*G click cells, TYPE vocabulary."""

from __future__ import annotations

import math

import numpy as np

from .env_mdp import (
    ACTION_TYPES,
    TYPE_INDEX,
    Action,
    ActionType,
    EnvSpec,
    State,
    click,
    plain,
    resolve,
    type_text,
)

PLAIN_TYPES: tuple[ActionType, ...] = (
    ActionType.PRESS_BACK,
    ActionType.PRESS_HOME,
    ActionType.PRESS_ENTER,
    ActionType.STATUS_TASK_COMPLETE,
    ActionType.STATUS_TASK_IMPOSSIBLE,
    ActionType.SCROLL_DOWN,
    ActionType.SCROLL_UP,
    ActionType.SCROLL_LEFT,
    ActionType.SCROLL_RIGHT,
)
N_PLAIN = len(PLAIN_TYPES)


def click_cell(point: tuple[float, float], grid: int) -> int:
    x, y = point
    col = min(int(math.floor(x * grid)), grid - 1)
    row = min(int(math.floor(y * grid)), grid - 1)
    return row * grid + col


def cell_center(cell: int, grid: int) -> tuple[float, float]:
    row, col = divmod(cell, grid)
    return ((col + 0.5) / grid, (row + 0.5) / grid)


class ActionTemplates:
    """Index <-> Action bijection for one environment and grid size."""

    def __init__(self, env: EnvSpec, grid: int = 14):
        if grid < 1:
            raise ValueError("grid must be positive")
        self.grid = grid
        self.vocabulary = tuple(env.vocabulary)
        self.click_offset = N_PLAIN
        self.type_offset = N_PLAIN + grid * grid
        self.n = self.type_offset + len(self.vocabulary)
        types = [TYPE_INDEX[t] for t in PLAIN_TYPES]
        types += [TYPE_INDEX[ActionType.DUAL_POINT]] * (grid * grid)
        types += [TYPE_INDEX[ActionType.TYPE]] * len(self.vocabulary)
        self.type_ids = np.array(types, dtype=np.int64)
        self._actions = tuple(self._build(i) for i in range(self.n))
        self._keys_cache: dict = {}

    def __len__(self):
        return self.n

    def _build(self, i: int) -> Action:
        if i < N_PLAIN:
            return plain(PLAIN_TYPES[i])
        if i < self.type_offset:
            return click(*cell_center(i - self.click_offset, self.grid))
        return type_text(self.vocabulary[i - self.type_offset])

    def decode(self, i: int) -> Action:
        return self._actions[int(i)]

    def index_of(self, action: Action) -> int | None:
        t = action.action_type
        if t is ActionType.DUAL_POINT:
            return self.click_offset + click_cell(action.click_point, self.grid)
        if t is ActionType.TYPE:
            try:
                return self.type_offset + self.vocabulary.index(action.typed_text)
            except ValueError:
                return None
        return PLAIN_TYPES.index(t)

    def type_name(self, i: int) -> str:
        return ACTION_TYPES[self.type_ids[i]].value

    def resolved_keys(self, env: EnvSpec, state: State) -> list[str]:
        """Resolved dynamics key of every template at ``state``."""
        ck = (state.screen_id, state.scroll_offset, state.focused)
        keys = self._keys_cache.get(ck)
        if keys is None:
            keys = [resolve(env, state, a) for a in self._actions]
            self._keys_cache[ck] = keys
        return keys
