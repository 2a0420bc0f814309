"""Shared fixtures: tiny hand-sized environments and small collected datasets."""

from __future__ import annotations

import pytest

from vemrl.annotator import annotate_oracle, label_map
from vemrl.dataset import BehaviorPolicyConfig, collect, with_labels
from vemrl.env_mdp import EnvSpec, Goal, GeneratorConfig, Screen, Task, Widget, generate_env


class NoHijack:
    """Random stream that never triggers a distractor."""

    def random(self) -> float:
        return 0.999999


def chain_env(n: int = 3, distractor_prob: float = 0.0) -> EnvSpec:
    """Home -> S1 -> ... -> S(n-1) through one link per screen; the task is to reach the last one."""
    screens, table = [], {}
    for i in range(n):
        widgets = ()
        if i < n - 1:
            widgets = (Widget(f"w{i}", (0.2, 0.2, 0.6, 0.4), "link", f"Go{i + 1}", i + 1),)
            table[(i, f"click:w{i}")] = i + 1
        table[(i, "back")] = max(i - 1, 0)
        table[(i, "home")] = 0
        screens.append(Screen(i, "Home" if i == 0 else f"S{i}", widgets, parent=max(i - 1, 0),
                              kind="home" if i == 0 else "page"))
    task = Task("t0", f"Open S{n - 1}", Goal(n - 1), max_steps=10, path_names=tuple(f"S{i}" for i in range(1, n)))
    return EnvSpec("chain", tuple(screens), (task,), table, distractor_prob=distractor_prob, history_k=1)


@pytest.fixture(scope="session")
def env2():
    return generate_env(GeneratorConfig(screens=2, tasks=1, distractor_prob=0.0), seed=7)


@pytest.fixture(scope="session")
def env3():
    return chain_env(3)


@pytest.fixture(scope="session")
def env10():
    return generate_env(GeneratorConfig(screens=10, tasks=5, distractor_prob=0.2), seed=42)


@pytest.fixture(scope="session")
def small_env():
    return generate_env(GeneratorConfig(screens=5, tasks=3, distractor_prob=0.2, history_k=0), seed=11)


@pytest.fixture(scope="session")
def small_data(small_env):
    trajs = collect(small_env, BehaviorPolicyConfig("epsilon_scripted", 0.5), 60, 3)
    return trajs, with_labels(trajs, label_map(annotate_oracle(small_env, trajs)))
