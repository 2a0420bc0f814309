from collections import deque
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vemrl.env_mdp import (
    ACTION_TYPES,
    ENV_VERSION,
    Action,
    ActionType,
    CapExceeded,
    EnvError,
    EpisodeDone,
    GenerationError,
    GeneratorConfig,
    MalformedAction,
    ReplayStream,
    State,
    UnknownTask,
    available_keys,
    click,
    distance_to_goal,
    dumps_env,
    enumerate_states,
    env_to_dict,
    generate_env,
    is_optimal,
    key_to_action,
    loads_env,
    optimal_actions,
    plain,
    reset,
    resolve,
    step,
    type_text,
)
from vemrl.templates import ActionTemplates

from conftest import NoHijack, chain_env


def concrete_actions(env, state):
    """One concrete action per resolved key available at ``state``."""
    return [key_to_action(env, state.screen_id, k, state.scroll_offset) for k in available_keys(env, state.core())]


# ------------------------------------------------------------ generation


def test_two_screen_env_has_single_click_transition(env2):
    clicks = {k: v for k, v in env2.transition_table.items() if k[1].startswith("click:")}
    assert len(clicks) == 1
    (src, _), dst = next(iter(clicks.items()))
    assert (src, dst) == (0, 1)
    assert len(env2.screens) == 2 and env2.home == 0
    assert env2.tasks[0].goal.screen_id == 1


def test_generation_is_bit_identical():
    cfg = GeneratorConfig(screens=10, tasks=5, distractor_prob=0.2)
    assert dumps_env(generate_env(cfg, seed=42)) == dumps_env(generate_env(cfg, seed=42))
    assert dumps_env(generate_env(cfg, seed=42)) != dumps_env(generate_env(cfg, seed=43))


def bfs_steps_to_success(env, task_id):
    """Forward BFS over simulator states (no distractors); counts the final STATUS_TASK_COMPLETE."""
    start = reset(env, task_id)
    seen = {start.core()}
    queue = deque([(start, 0)])
    while queue:
        s, d = queue.popleft()
        for a in concrete_actions(env, s):
            nxt, _, done = step(env, s, a, NoHijack())
            if done:
                if nxt.succeeded:
                    return d + 1
                continue
            if nxt.core() not in seen:
                seen.add(nxt.core())
                queue.append((nxt, d + 1))
    return None


def test_every_task_solvable_within_max_steps(env10):
    for task in env10.tasks:
        n = bfs_steps_to_success(env10, task.task_id)
        assert n is not None and n <= task.max_steps
        assert n == distance_to_goal(env10, reset(env10, task.task_id)) + 1


def test_generation_rejects_bad_configs():
    with pytest.raises(GenerationError):
        generate_env(GeneratorConfig(screens=1, tasks=1), seed=0)
    with pytest.raises(GenerationError):
        generate_env(GeneratorConfig(screens=3, tasks=0), seed=0)
    with pytest.raises(GenerationError):
        generate_env(GeneratorConfig(screens=3, tasks=1, distractor_prob=1.5), seed=0)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31), screens=st.integers(2, 14), p=st.sampled_from([0.0, 0.2, 0.5]))
def test_generated_env_invariants(seed, screens, p):
    env = generate_env(GeneratorConfig(screens=screens, tasks=min(3, screens - 1), distractor_prob=p), seed=seed)
    ids = {s.screen_id for s in env.screens}
    assert all(t in ids for t in env.transition_table.values())
    assert sum(s.kind == "home" for s in env.screens) == 1
    assert env.gamma < 1
    for s in env.screens:
        for w in s.widgets:
            x0, y0, x1, y1 = w.rect
            assert 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1
        for a, b in product(s.widgets, s.widgets):
            if a.widget_id < b.widget_id and a.page == b.page:
                overlap = min(a.rect[2], b.rect[2]) > max(a.rect[0], b.rect[0]) and \
                    min(a.rect[3], b.rect[3]) > max(a.rect[1], b.rect[1])
                assert not overlap
        if s.is_ad:
            assert (s.screen_id, "back") in env.transition_table
            assert (s.screen_id, "home") in env.transition_table
    for t in env.tasks:
        assert distance_to_goal(env, reset(env, t.task_id)) + 1 <= t.max_steps


def test_env_json_round_trip(env10):
    d = env_to_dict(env10)
    assert d["env_version"] == ENV_VERSION == 1
    again = loads_env(dumps_env(env10))
    assert dumps_env(again) == dumps_env(env10)


def test_env_json_rejects_other_versions(env2):
    d = env_to_dict(env2)
    d["env_version"] = 2
    import json

    with pytest.raises(EnvError):
        loads_env(json.dumps(d))


# ----------------------------------------------------------------- reset


def test_reset(env10):
    s = reset(env10, "t0")
    assert s.screen_id == env10.home and s.step_index == 0 and s.history == () and not s.done
    assert reset(env10, "t0") == s
    with pytest.raises(UnknownTask):
        reset(env10, "missing")


# ------------------------------------------------------------------ step


def test_complete_on_goal_screen(env2):
    s = State("t0", 1)
    nxt, r, done = step(env2, s, plain(ActionType.STATUS_TASK_COMPLETE))
    assert (done, nxt.succeeded, r) == (True, True, 1)
    assert nxt.step_index == len(nxt.history) == 1


def test_complete_off_goal_terminates_unsuccessfully(env2):
    nxt, r, done = step(env2, reset(env2, "t0"), plain(ActionType.STATUS_TASK_COMPLETE))
    assert done and not nxt.succeeded and r == 0


def test_impossible_always_fails(env2):
    nxt, _, done = step(env2, State("t0", 1), plain(ActionType.STATUS_TASK_IMPOSSIBLE))
    assert done and not nxt.succeeded


def test_click_point_resolves_to_containing_widget(env10):
    # the search field spans the top row of the layout grid on search screens
    screen = next(s for s in env10.screens if any(w.kind == "textfield" for w in s.widgets))
    w = screen.widget_at(0.524, 0.06, 0)
    assert w is not None and w.contains(0.524, 0.06)
    state = State(env10.tasks[0].task_id, screen.screen_id)
    assert resolve(env10, state, click(0.524, 0.06)) == f"click:{w.widget_id}"


def test_two_screen_rewards_over_all_action_types(env2):
    s0 = reset(env2, "t0")
    link = env2.screens[0].widgets[0]
    rewards = {}
    for t in ACTION_TYPES:
        if t is ActionType.DUAL_POINT:
            a = click(*link.center)
        elif t is ActionType.TYPE:
            a = type_text("anything")
        else:
            a = plain(t)
        rewards[t] = step(env2, s0, a)[1]
    assert rewards.pop(ActionType.DUAL_POINT) == 1
    assert set(rewards.values()) == {0}
    # every template: exactly the cells inside the link earn reward
    tm = ActionTemplates(env2)
    for i in range(tm.n):
        a = tm.decode(i)
        want = a.action_type is ActionType.DUAL_POINT and link.contains(*a.click_point)
        assert step(env2, s0, a)[1] == int(want)


def test_step_errors(env2):
    done_state = step(env2, State("t0", 1), plain(ActionType.STATUS_TASK_COMPLETE))[0]
    with pytest.raises(EpisodeDone):
        step(env2, done_state, plain(ActionType.PRESS_BACK))
    with pytest.raises(MalformedAction):
        step(env2, reset(env2, "t0"), "PRESS_BACK")


def test_action_payload_validation():
    with pytest.raises(MalformedAction):
        Action(ActionType.DUAL_POINT)
    with pytest.raises(MalformedAction):
        Action(ActionType.DUAL_POINT, (1.2, 0.3))
    with pytest.raises(MalformedAction):
        Action(ActionType.TYPE)
    with pytest.raises(MalformedAction):
        Action(ActionType.PRESS_BACK, (0.1, 0.1))
    with pytest.raises(MalformedAction):
        Action("JUMP")
    assert Action(ActionType.DUAL_POINT, (0.0, 1.0)).click_point == (0.0, 1.0)


@given(x=st.floats(0, 1), y=st.floats(0, 1))
def test_action_round_trip(x, y):
    a = click(x, y)
    assert Action.from_dict(a.to_dict()) == a


def test_text_field_needs_focus():
    env = generate_env(GeneratorConfig(screens=10, tasks=5, search_fraction=1.0), seed=5)
    task = next(t for t in env.tasks if t.query)
    screen = next(s for s in env.screens if s.submit_target is not None)
    field = next(w for w in screen.widgets if w.kind == "textfield")
    s = State(task.task_id, screen.screen_id)
    unfocused, _, _ = step(env, s, type_text(task.query))
    assert unfocused.typed_buffer == ""
    focused, _, _ = step(env, s, click(*field.center))
    typed, _, _ = step(env, focused, type_text(task.query))
    assert typed.typed_buffer == task.query


# ------------------------------------------------------- optimal actions


def test_goal_satisfied_has_only_complete(env10):
    t = env10.tasks[0]
    s = State(t.task_id, t.goal.screen_id, typed_buffer=t.goal.typed_buffer or "")
    assert optimal_actions(env10, s) == {plain(ActionType.STATUS_TASK_COMPLETE)}


def test_ad_screen_offers_recovery(env10):
    assert env10.ad_screens
    for ad in env10.ad_screens:
        opt = optimal_actions(env10, State("t0", ad))
        assert {plain(ActionType.PRESS_BACK), plain(ActionType.PRESS_HOME)} & opt


def shortest_by_exhaustive_search(env, state, depth):
    """Length of the shortest successful action sequence from ``state`` and its first keys."""
    best_len, firsts = None, set()
    for n in range(1, depth + 1):
        frontier = [(state, None)]
        for _ in range(n):
            nxt_frontier = []
            for s, first in frontier:
                if s.done:
                    continue
                for key in available_keys(env, s.core()):
                    a = key_to_action(env, s.screen_id, key, s.scroll_offset)
                    ns, _, _ = step(env, s, a, NoHijack())
                    nxt_frontier.append((ns, first or key))
            frontier = nxt_frontier
        hits = {first for s, first in frontier if s.done and s.succeeded}
        if hits:
            best_len, firsts = n, hits
            break
    return best_len, firsts


def test_chain_env_optimal_actions_match_brute_force(env3):
    for s in enumerate_states(env3, 0):
        if s.done:
            continue
        n, firsts = shortest_by_exhaustive_search(env3, s, 4)
        got = {resolve(env3, s, a) for a in optimal_actions(env3, s)}
        assert got == firsts
        assert len(got) == 1


# ----------------------------------------------------------- enumeration


def independent_state_count(env, k):
    """BFS over (core, last-k action types) driven by every action template."""
    tm = ActionTemplates(env)
    key = lambda s: s.core() if s.done else s.core() + (tuple(a.action_type for a in s.history[-k:]),)
    starts = [reset(env, t.task_id) for t in env.tasks]
    seen = {key(s) for s in starts}
    queue = deque(starts)
    while queue:
        s = queue.popleft()
        if s.done:
            continue
        for i in range(tm.n):
            ns, _, _ = step(env, s, tm.decode(i), NoHijack())
            if key(ns) not in seen:
                seen.add(key(ns))
                queue.append(ns)
    return len(seen)


def test_enumeration_count_matches_independent_bfs(env2):
    states = enumerate_states(env2, 1)
    assert len(states) == independent_state_count(env2, 1)
    assert len({s.canonical_key(1) for s in states}) == len(states)


def test_enumeration_is_deterministic(env10):
    a = enumerate_states(env10, 1)
    b = enumerate_states(env10, 1)
    assert [s.canonical_key(1) for s in a] == [s.canonical_key(1) for s in b]


def test_enumeration_cap(env2):
    with pytest.raises(CapExceeded):
        enumerate_states(env2, 1, cap=1)


# ------------------------------------------------------------ invariants


@pytest.fixture(scope="module")
def small_envs():
    return [generate_env(GeneratorConfig(screens=n, tasks=2, distractor_prob=0.3), seed=s)
            for n, s in [(4, 1), (5, 2), (6, 3)]]


def test_reward_equals_optimal_membership_exhaustively(small_envs):
    for env in small_envs:
        tm = ActionTemplates(env)
        for s in enumerate_states(env, 0):
            if s.done:
                continue
            for i in range(tm.n):
                a = tm.decode(i)
                _, r, _ = step(env, s, a, NoHijack())
                assert r == int(is_optimal(env, s, a))


def test_recovery_closure(small_envs):
    assert all(env.ad_screens for env in small_envs)
    for env in small_envs:
        for ad in env.ad_screens:
            s = State(env.tasks[0].task_id, ad)
            ok = False
            for a in (plain(ActionType.PRESS_BACK), plain(ActionType.PRESS_HOME)):
                ns, _, _ = step(env, s, a)
                ok |= not env.screens[ns.screen_id].is_ad
            assert ok


def test_greedy_oracle_reaches_goal(small_envs, env10):
    for env in small_envs + [env10]:
        for t in env.tasks:
            s = reset(env, t.task_id)
            while not s.done:
                a = min(optimal_actions(env, s), key=str)
                s, r, _ = step(env, s, a, NoHijack())
                assert r == 1
            assert s.succeeded and s.step_index <= t.max_steps


def test_step_is_pure_without_distractors(env3):
    s = reset(env3, "t0")
    a = click(0.3, 0.3)
    assert step(env3, s, a) == step(env3, s, a)


def test_hijacks_reproduce_under_same_stream(env10):
    s = reset(env10, "t0")
    link = env10.screens[env10.home].visible(0)[0]
    draws = np.random.default_rng(9).random(400).tolist()
    outs = []
    for _ in range(2):
        stream = ReplayStream(draws)
        outs.append([step(env10, s, click(*link.center), stream)[0].screen_id for _ in range(200)])
    assert outs[0] == outs[1]
    frac = np.mean([o in env10.ad_screens for o in outs[0]])
    assert 0.1 < frac < 0.3


def test_distractors_need_a_stream(env10):
    link = env10.screens[env10.home].visible(0)[0]
    with pytest.raises(EnvError):
        step(env10, reset(env10, "t0"), click(*link.center))


def test_chain_helper_is_three_screens():
    env = chain_env(3)
    assert [s.kind for s in env.screens] == ["home", "page", "page"]
