"""Fixed-length (state, action) feature vectors for value models and policies.

Layout, in order:

state block
    screen one-hot, task one-hot, typed-buffer one-hot (empty + vocabulary),
    focused, scroll-page one-hot, done, done-and-succeeded,
    last-k action types (k slots of 12: 11 types + "empty"),
    optional instruction-grounding flags (see ``SEMANTIC_STATE``)
action block
    action type one-hot, click cell one-hot (G*G), typed word one-hot,
    typed-text-matches-query flag
interaction block (optional, zero for non-click actions)
    kind of the widget under the click (none/button/link/textfield/ad),
    widget label lies on the instruction path, widget label is the next hop
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env_mdp import ACTION_TYPES, TYPE_INDEX, Action, ActionType, EnvSpec, State
from .templates import ActionTemplates, cell_center, click_cell

SEMANTIC_STATE = (
    "is_ad", "on_path", "at_last_hop", "at_results_of_last_hop", "buffer_matches_query",
    "goal_satisfied", "next_visible", "next_offpage", "search_task",
)
WIDGET_KINDS = ("none", "button", "link", "textfield", "ad")
N_HIST = len(ACTION_TYPES) + 1


class EncodeError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    grid: int = 14
    history_k: int | None = None  # None: use the environment's k
    semantic: bool = True
    identity: bool = True  # screen / task / buffer one-hots
    cells: bool = True  # click-cell one-hot

    def to_dict(self) -> dict:
        return {"grid": self.grid, "history_k": self.history_k, "semantic": self.semantic,
                "identity": self.identity, "cells": self.cells}


class Encoder:
    def __init__(self, env: EnvSpec, config: EncoderConfig | None = None):
        self.env = env
        self.config = config or EncoderConfig()
        self.k = env.history_k if self.config.history_k is None else self.config.history_k
        self.templates = ActionTemplates(env, self.config.grid)
        self.vocab = tuple(env.vocabulary)
        self.task_index = {t.task_id: i for i, t in enumerate(env.tasks)}
        g = self.config.grid
        ident = self.config.identity
        sizes = [
            ("screen", len(env.screens) if ident else 0), ("task", len(env.tasks) if ident else 0),
            ("buffer", 1 + len(self.vocab) if ident else 0), ("focused", 1), ("scroll", env.max_pages), ("done", 2), ("history", self.k * N_HIST),
        ]
        if self.config.semantic:
            sizes.append(("semantic", len(SEMANTIC_STATE)))
        sizes += [("atype", len(ACTION_TYPES)), ("cell", g * g if self.config.cells else 0), ("word", len(self.vocab)), ("match", 1)]
        if self.config.semantic:
            sizes += [("wkind", len(WIDGET_KINDS)), ("wpath", 2)]
        self.blocks: dict[str, tuple[int, int]] = {}
        pos = 0
        for name, n in sizes:
            self.blocks[name] = (pos, n)
            pos += n
        self.dim = pos
        self.state_dim = self.blocks["atype"][0]
        self._tmpl_cache: dict = {}
        self._inter_cache: dict = {}

    def offset(self, block: str) -> int:
        return self.blocks[block][0]

    # ------------------------------------------------------------- state

    def _next_hop(self, state: State) -> str | None:
        task = self.env.task(state.task_id)
        path = task.path_names
        screen = self.env.screens[state.screen_id]
        if not path:
            return None
        if screen.kind == "home":
            return path[0]
        if screen.name in path:
            i = path.index(screen.name)
            return path[i + 1] if i + 1 < len(path) else None
        return None

    def state_vector(self, state: State) -> np.ndarray:
        env = self.env
        x = np.zeros(self.state_dim)
        if state.task_id not in self.task_index:
            raise EncodeError(f"unknown task {state.task_id!r}")
        ident = self.config.identity
        if ident:
            x[self.offset("task") + self.task_index[state.task_id]] = 1.0
        if state.done:
            x[self.offset("done")] = 1.0
            x[self.offset("done") + 1] = float(state.succeeded)
            return x
        if not 0 <= state.screen_id < len(env.screens):
            raise EncodeError(f"screen {state.screen_id} outside the {len(env.screens)}-screen block")
        if not 0 <= state.scroll_offset < env.max_pages:
            raise EncodeError(f"scroll offset {state.scroll_offset} outside the {env.max_pages}-page block")
        if ident:
            x[self.offset("screen") + state.screen_id] = 1.0
            if state.typed_buffer == "":
                x[self.offset("buffer")] = 1.0
            elif state.typed_buffer in self.vocab:
                x[self.offset("buffer") + 1 + self.vocab.index(state.typed_buffer)] = 1.0
        x[self.offset("focused")] = float(state.focused)
        x[self.offset("scroll") + state.scroll_offset] = 1.0
        types = state.history_types(self.k)
        h0 = self.offset("history")
        for slot in range(self.k):
            j = len(types) - 1 - slot  # slot 0 is the most recent action
            cat = TYPE_INDEX[types[j]] if j >= 0 else N_HIST - 1
            x[h0 + slot * N_HIST + cat] = 1.0
        if self.config.semantic:
            x[self.offset("semantic"):self.offset("semantic") + len(SEMANTIC_STATE)] = self._semantic(state)
        return x

    def _semantic(self, state: State) -> np.ndarray:
        env = self.env
        task = env.task(state.task_id)
        path = task.path_names
        screen = env.screens[state.screen_id]
        last = path[-1] if path else None
        nxt = self._next_hop(state)
        parent = env.screens[screen.parent]
        visible = [w for w in screen.widgets if w.label == nxt and w.kind != "ad"] if nxt else []
        return np.array([
            screen.is_ad,
            screen.name in path,
            last is not None and screen.name == last,
            screen.kind == "results" and parent.name == last,
            task.query is not None and state.typed_buffer == task.query,
            task.goal.satisfied(state.screen_id, state.typed_buffer),
            any(w.page == state.scroll_offset for w in visible),
            any(w.page != state.scroll_offset for w in visible),
            task.query is not None,
        ], dtype=float)

    # ------------------------------------------------------------ action

    def _widget_features(self, state: State, point) -> np.ndarray:
        out = np.zeros(len(WIDGET_KINDS) + 2)
        if state.done:
            out[0] = 1.0
            return out
        w = self.env.screens[state.screen_id].widget_at(*point, state.scroll_offset)
        if w is None:
            out[0] = 1.0
            return out
        out[WIDGET_KINDS.index(w.kind)] = 1.0
        if w.kind != "ad":
            path = self.env.task(state.task_id).path_names
            out[len(WIDGET_KINDS)] = float(w.label in path)
            out[len(WIDGET_KINDS) + 1] = float(w.label == self._next_hop(state))
        return out

    def action_vector(self, state: State, action: Action) -> np.ndarray:
        x = np.zeros(self.dim - self.state_dim)
        base = self.state_dim
        t = action.action_type
        x[self.offset("atype") - base + TYPE_INDEX[t]] = 1.0
        if t is ActionType.DUAL_POINT:
            if self.config.cells:
                x[self.offset("cell") - base + click_cell(action.click_point, self.config.grid)] = 1.0
            if self.config.semantic:
                x[self.offset("wkind") - base:] = self._widget_features(state, action.click_point)
        elif t is ActionType.TYPE:
            if action.typed_text in self.vocab:
                x[self.offset("word") - base + self.vocab.index(action.typed_text)] = 1.0
            query = self.env.task(state.task_id).query
            x[self.offset("match") - base] = float(query is not None and action.typed_text == query)
        return x

    def encode(self, state: State, action: Action) -> np.ndarray:
        return np.concatenate([self.state_vector(state), self.action_vector(state, action)])

    def encode_pairs(self, pairs) -> np.ndarray:
        rows = [self.encode(s, a) for s, a in pairs]
        return np.array(rows) if rows else np.zeros((0, self.dim))

    # --------------------------------------------------------- templates

    def _template_actions(self, task_id: str) -> np.ndarray:
        """Action block for every template; only the match column depends on the task."""
        if task_id not in self._tmpl_cache:
            tm = self.templates
            base = self.state_dim
            m = np.zeros((tm.n, self.dim - base))
            m[np.arange(tm.n), self.offset("atype") - base + tm.type_ids] = 1.0
            if self.config.cells:
                cells = np.arange(tm.grid * tm.grid)
                m[tm.click_offset + cells, self.offset("cell") - base + cells] = 1.0
            words = np.arange(len(self.vocab))
            m[tm.type_offset + words, self.offset("word") - base + words] = 1.0
            query = self.env.task(task_id).query
            if query in self.vocab:
                m[tm.type_offset + self.vocab.index(query), self.offset("match") - base] = 1.0
            self._tmpl_cache[task_id] = m
        return self._tmpl_cache[task_id]

    def _template_interactions(self, state: State) -> np.ndarray:
        key = (state.task_id, state.screen_id, state.scroll_offset, state.done)
        if key not in self._inter_cache:
            tm = self.templates
            m = np.zeros((tm.n, len(WIDGET_KINDS) + 2))
            for c in range(tm.grid * tm.grid):
                m[tm.click_offset + c] = self._widget_features(state, cell_center(c, tm.grid))
            self._inter_cache[key] = m
        return self._inter_cache[key]

    def encode_templates(self, state: State) -> np.ndarray:
        """Feature matrix ``[n_templates, dim]``; row i equals ``encode(state, decode(i))``."""
        acts = self._template_actions(state.task_id)
        s = self.state_vector(state)
        out = np.empty((acts.shape[0], self.dim))
        out[:, :self.state_dim] = s
        out[:, self.state_dim:] = acts
        if self.config.semantic:
            out[:, self.offset("wkind"):] = self._template_interactions(state)
        return out
