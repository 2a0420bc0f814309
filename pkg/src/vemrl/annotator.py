"""Binary action-quality labels: environment oracle, noisy oracle, or a chat-completion judge."""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

import numpy as np

from .dataset import StepRecord, Trajectory, iter_steps
from .env_mdp import EnvSpec, is_optimal

log = logging.getLogger(__name__)

MODES = ("oracle", "noisy", "llm", "replay")
SOURCES = MODES
FALLBACKS = ("skip", "oracle", "zero")
MAX_ATTEMPTS = 3


class AnnotationError(RuntimeError):
    pass


class RatingParseError(ValueError):
    pass


@dataclass(frozen=True)
class Rating:
    value: int
    explanation: str = ""

    def __post_init__(self):
        if self.value not in (1, 2) or isinstance(self.value, bool):
            raise ValueError(f"rating must be 1 or 2, got {self.value!r}")


@dataclass(frozen=True)
class Label:
    step_key: str
    ell: int
    rating: int | None
    source: str
    transcript_offset: int | None = None
    fallback: bool = False

    def __post_init__(self):
        if self.ell not in (0, 1):
            raise ValueError(f"ell must be 0 or 1, got {self.ell!r}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown label source {self.source!r}")


@dataclass
class AnnotatorConfig:
    mode: str = "oracle"
    agreement_rate: float = 0.9
    seed: int = 0
    endpoint_url: str = ""
    model_name: str = ""
    temperature: float = 0.0
    api_key_env: str = "VEMRL_API_KEY"
    timeout: float = 30.0
    fallback: str = "skip"
    max_in_flight: int = 4
    replay_path: str = ""
    transcript_path: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown annotator mode {self.mode!r}")
        if not 0.0 <= self.agreement_rate <= 1.0:
            raise ValueError("agreement_rate must lie in [0, 1]")
        if self.fallback not in FALLBACKS:
            raise ValueError(f"fallback must be one of {FALLBACKS}")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


def rating_to_label(r: Rating | int) -> int:
    value = r.value if isinstance(r, Rating) else Rating(r).value
    return 1 if value == 2 else 0


# ---------------------------------------------------------------- oracle


def annotate_oracle(env: EnvSpec, trajectories: Sequence[Trajectory]) -> list[Label]:
    out = []
    for rec in iter_steps(trajectories):
        ell = int(is_optimal(env, rec.state(), rec.action))
        if ell != rec.reward:
            raise AnnotationError(f"step {rec.step_key}: oracle label {ell} disagrees with recorded reward {rec.reward}")
        out.append(Label(rec.step_key, ell, ell + 1, "oracle"))
    return out


def annotate_noisy(labels: Sequence[Label], agreement_rate: float, seed: int) -> list[Label]:
    """Flip each label independently with probability ``1 - agreement_rate``."""
    if not 0.0 <= agreement_rate <= 1.0:
        raise ValueError("agreement_rate must lie in [0, 1]")
    u = np.random.default_rng(seed).random(len(labels))
    out = []
    for lab, x in zip(labels, u):
        ell = 1 - lab.ell if x >= agreement_rate else lab.ell
        out.append(Label(lab.step_key, ell, ell + 1, "noisy"))
    return out


# ------------------------------------------------------------------- llm


def load_prompt_template(path=None) -> str:
    if path:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    return resources.files("vemrl").joinpath("prompts/rating.txt").read_text(encoding="utf-8")


def describe_screen(env: EnvSpec, rec: StepRecord) -> str:
    screen = env.screens[rec.screen_id]
    parts = [f"screen: {screen.name}"]
    if screen.n_pages > 1:
        parts.append(f"page {rec.scroll_offset + 1} of {screen.n_pages}")
    for w in screen.visible(rec.scroll_offset):
        x0, y0, x1, y1 = w.rect
        parts.append(f"{w.kind} '{w.label}' at [{x0:.3f}, {y0:.3f}, {x1:.3f}, {y1:.3f}]")
    if rec.typed_buffer:
        parts.append(f"search box contains '{rec.typed_buffer}'")
    if rec.focused:
        parts.append("search box focused")
    return "; ".join(parts)


def render_prompt(template: str, env: EnvSpec, rec: StepRecord) -> str:
    first = rec.step_index - len(rec.history)
    history = "\n".join(f"step {first + j}: {a}" for j, a in enumerate(rec.history)) or "(none)"
    current = f"step {rec.step_index}: {rec.action}\n{describe_screen(env, rec)}"
    task = env.task(rec.task_id).instruction
    return template.replace("{task}", task).replace("{history}", history).replace("{current}", current)


def parse_rating(text: str | None) -> Rating:
    if text is None:
        raise RatingParseError("empty response")
    try:
        obj = json.loads(text)
    except (json.JSONDecodeError, TypeError) as exc:
        raise RatingParseError(f"not JSON: {exc}") from None
    if not isinstance(obj, dict) or "rating" not in obj:
        raise RatingParseError("missing 'rating'")
    value = obj["rating"]
    if isinstance(value, bool) or not isinstance(value, int) or value not in (1, 2):
        raise RatingParseError(f"rating must be 1 or 2, got {value!r}")
    expl = obj.get("explanation", "")
    if not isinstance(expl, str):
        raise RatingParseError("explanation must be a string")
    return Rating(value, expl)


class ChatClient:
    """Minimal chat-completion client: POST {model, messages, temperature}."""

    def __init__(self, config: AnnotatorConfig, transport=None):
        import httpx

        headers = {"Content-Type": "application/json"}
        key = os.environ.get(config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self.config = config
        self._http = httpx.Client(timeout=config.timeout, headers=headers, transport=transport)
        self._errors = (httpx.HTTPError,)

    def request_body(self, prompt: str) -> dict:
        return {
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
        }

    def complete(self, body: dict) -> str:
        resp = self._http.post(self.config.endpoint_url, json=body)
        resp.raise_for_status()
        return resp.json()["choices"][0]["message"]["content"]

    def close(self):
        self._http.close()


def _ask(client: ChatClient, body: dict, step_key: str) -> list[dict]:
    """Up to MAX_ATTEMPTS calls; stops at the first parseable answer."""
    attempts = []
    for attempt in range(MAX_ATTEMPTS):
        t0 = time.perf_counter()
        entry = {"step_key": step_key, "attempt": attempt, "request": body}
        try:
            entry["response"] = client.complete(body)
        except client._errors as exc:
            entry["response"] = None
            entry["error"] = type(exc).__name__
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            entry["response"] = None
            entry["error"] = f"bad payload: {type(exc).__name__}"
        entry["latency_ms"] = round(1000 * (time.perf_counter() - t0), 3)
        attempts.append(entry)
        if entry["response"] is not None:
            try:
                parse_rating(entry["response"])
                break
            except RatingParseError:
                continue
    return attempts


def _label_from_attempts(attempts: list[dict], offset: int, rec: StepRecord, env: EnvSpec,
                         fallback: str, source: str) -> Label | None:
    for a in attempts:
        if a.get("response") is None:
            continue
        try:
            r = parse_rating(a["response"])
        except RatingParseError:
            continue
        return Label(rec.step_key, rating_to_label(r), r.value, source, offset)
    if all(a.get("response") is None for a in attempts):
        raise AnnotationError(f"step {rec.step_key}: no response after {len(attempts)} attempts "
                              f"({attempts[-1].get('error')})")
    log.warning("step %s: unparseable after %d attempts, fallback=%s", rec.step_key, len(attempts), fallback)
    if fallback == "skip":
        return None
    if fallback == "oracle":
        ell = int(is_optimal(env, rec.state(), rec.action))
        return Label(rec.step_key, ell, ell + 1, source, offset, fallback=True)
    return Label(rec.step_key, 0, None, source, offset, fallback=True)


def _finish(records, groups, env, config, source) -> tuple[list[Label], list[dict]]:
    labels, transcript = [], []
    for rec, attempts in zip(records, groups):
        transcript.extend(attempts)
        lab = _label_from_attempts(attempts, len(transcript) - 1, rec, env, config.fallback, source)
        if lab is not None:
            labels.append(lab)
    return labels, transcript


def annotate_llm(env: EnvSpec, trajectories: Sequence[Trajectory], config: AnnotatorConfig,
                 template: str | None = None, transport=None) -> tuple[list[Label], list[dict]]:
    """Label every step with a chat-completion judge; returns labels and the transcript.

    Requests may be in flight concurrently; the transcript is assembled in dataset order.
    """
    template = load_prompt_template() if template is None else template
    records = list(iter_steps(trajectories))
    client = ChatClient(config, transport=transport)
    try:
        bodies = [client.request_body(render_prompt(template, env, r)) for r in records]
        with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
            groups = list(pool.map(lambda rb: _ask(client, rb[1], rb[0].step_key), zip(records, bodies)))
    finally:
        client.close()
    return _finish(records, groups, env, config, "llm")


def annotate_replay(env: EnvSpec, trajectories: Sequence[Trajectory], transcript: Sequence[dict],
                    config: AnnotatorConfig | None = None) -> list[Label]:
    """Re-derive labels from a recorded transcript without any network access."""
    config = config or AnnotatorConfig(mode="replay")
    by_key: dict[str, list[dict]] = {}
    for entry in transcript:
        by_key.setdefault(entry["step_key"], []).append(entry)
    records = list(iter_steps(trajectories))
    missing = [r.step_key for r in records if r.step_key not in by_key]
    if missing:
        raise AnnotationError(f"transcript lacks {len(missing)} steps, first {missing[0]}")
    groups = [sorted(by_key[r.step_key], key=lambda e: e["attempt"]) for r in records]
    labels, _ = _finish(records, groups, env, config, "replay")
    return labels


def annotate(env: EnvSpec, trajectories: Sequence[Trajectory], config: AnnotatorConfig,
             transport=None, template: str | None = None) -> tuple[list[Label], list[dict]]:
    """Dispatch on ``config.mode``; the transcript is empty for non-llm modes."""
    if config.mode == "oracle":
        return annotate_oracle(env, trajectories), []
    if config.mode == "noisy":
        return annotate_noisy(annotate_oracle(env, trajectories), config.agreement_rate, config.seed), []
    if config.mode == "llm":
        return annotate_llm(env, trajectories, config, template, transport)
    if not config.replay_path:
        raise AnnotationError("replay mode needs replay_path")
    return annotate_replay(env, trajectories, read_transcript(config.replay_path), config), []


# ------------------------------------------------------------------- files


def label_to_json(lab: Label) -> dict:
    d = {"step_key": lab.step_key, "ell": lab.ell, "rating": lab.rating, "source": lab.source}
    if lab.transcript_offset is not None:
        d["transcript_offset"] = lab.transcript_offset
    if lab.fallback:
        d["fallback"] = True
    return d


def dumps_labels(labels: Sequence[Label]) -> str:
    return "".join(json.dumps(label_to_json(l), sort_keys=True) + "\n" for l in labels)


def write_labels(labels: Sequence[Label], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_labels(labels))


def read_labels(path) -> list[Label]:
    from .dataset import ParseError

    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                out.append(Label(d["step_key"], d["ell"], d.get("rating"), d["source"],
                                 d.get("transcript_offset"), d.get("fallback", False)))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ParseError(str(exc), n) from None
    return out


def write_transcript(transcript: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in transcript:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def read_transcript(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def label_map(labels: Sequence[Label]) -> dict[str, tuple[int, str]]:
    """``{step_key: (ell, source)}`` as consumed by ``dataset.with_labels``."""
    return {l.step_key: (l.ell, l.source) for l in labels}
