"""Experiment configuration, stage execution with content-addressed caching, and the run manifest.

Config grammar: an INI file read by :mod:`configparser` (``[section]`` headers,
``key = value`` lines, ``#`` or ``;`` comments). Unknown sections or keys are
errors. Each stage's RNG seed is ``stage_seed(global_seed, stage_name)``: the
first 8 bytes of sha256("<seed>:<stage>") as a little-endian integer, reduced
mod 2**32. An explicit ``seed`` key in ``[env]`` pins the environment alone.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import __version__
from .annotator import AnnotatorConfig, annotate, label_map, read_labels, write_labels, write_transcript
from .dataset import BehaviorPolicyConfig, collect, read_jsonl, stats, split, with_labels, write_jsonl
from .env_mdp import GeneratorConfig, generate_env, load_env, save_env
from .evaluation import (
    MatcherConfig, OraclePolicy, offline_eval, online_eval, write_report_json, write_summary_csv,
)
from .features import EncoderConfig
from .policy import PpoConfig, load_policy, train_bc, train_policy, write_diagnostics
from .vem import SupportMaskedValue, VemTrainConfig, evaluate_records, freeze, load_vem, train_vem

log = logging.getLogger(__name__)

STAGES = ("generate", "collect", "annotate", "train_vem", "train_policy", "evaluate", "theory")
MANIFEST = "manifest.json"


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


def stage_seed(global_seed: int, stage: str) -> int:
    h = hashlib.sha256(f"{int(global_seed)}:{stage}".encode()).digest()
    return int.from_bytes(h[:8], "little") % 2**32


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def parse_seeds(text: str) -> list[int]:
    """``"0..9"`` (inclusive) or ``"0,1,2"``."""
    text = str(text).strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo, hi = int(lo), int(hi)
        if hi < lo:
            raise ConfigError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad seed list {text!r}") from None


def parse_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad number list {text!r}") from None


# ------------------------------------------------------------------ config


@dataclass
class EnvSection:
    screens: int = 10
    tasks: int = 5
    distractor_prob: float = 0.2
    gamma: float = 0.95
    history_k: int = 0
    seed: int | None = None


@dataclass
class CollectSection:
    behavior: str = "epsilon_scripted"
    epsilon: float = 0.5
    episodes: int = 500
    test_episodes: int = 50


@dataclass
class AnnotateSection:
    mode: str = "noisy"
    agreement_rate: float = 0.9
    endpoint_url: str = ""
    model_name: str = ""
    temperature: float = 0.0
    api_key_env: str = "VEMRL_API_KEY"
    fallback: str = "skip"
    max_in_flight: int = 4
    replay_path: str = ""
    prompt_path: str = ""


@dataclass
class VemSection:
    kind: str = "mlp"
    epochs: int = 40
    batch_size: int = 64
    learning_rate: float = 1e-2
    optimizer: str = "adam"
    momentum: float = 0.0
    l2: float = 0.0
    hidden: int = 64
    squash: str = "softsign"
    identity: bool = False
    cells: bool = False
    semantic: bool = True
    history_k: int = 0
    support_mask: bool = True
    heldout_fraction: float = 0.8


@dataclass
class PolicySection:
    kind: str = "tabular"
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.1
    clip_epsilon: float = 0.2
    actions_per_state: int = 16
    entropy_coef: float = 0.01
    hidden: int = 64


@dataclass
class EvalSection:
    seeds: str = "0..4"
    max_steps: int = 10
    click_threshold: float = 0.14
    text_match: str = "case_insensitive"


@dataclass
class TheorySection:
    envs: int = 20
    screens_min: int = 5
    screens_max: int = 20
    tasks: int = 5
    noise: str = "0,0.1,0.2"
    seeds: int = 10
    tol: float = 1e-6
    episodes: int = 100


SECTIONS = {
    "env": EnvSection, "collect": CollectSection, "annotate": AnnotateSection, "vem": VemSection,
    "policy": PolicySection, "eval": EvalSection, "theory": TheorySection,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    env: EnvSection = field(default_factory=EnvSection)
    collect: CollectSection = field(default_factory=CollectSection)
    annotate: AnnotateSection = field(default_factory=AnnotateSection)
    vem: VemSection = field(default_factory=VemSection)
    policy: PolicySection = field(default_factory=PolicySection)
    eval: EvalSection = field(default_factory=EvalSection)
    theory: TheorySection = field(default_factory=TheorySection)

    def section(self, name: str) -> dict:
        return dataclasses.asdict(getattr(self, name))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _coerce(cls, name: str, key: str, raw: str):
    f = {f.name: f for f in dataclasses.fields(cls)}.get(key)
    if f is None:
        raise ConfigError(f"[{name}] unknown key {key!r}")
    kind = str(f.type)
    try:
        if "bool" in kind:
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if kind.startswith("int"):
            return None if raw.strip().lower() in ("", "none") else int(raw)
        if kind == "float":
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{name}] {key} = {raw!r} is not a valid {kind}") from None


def parse_config(text: str, base_dir: str | os.PathLike = ".") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = ExperimentConfig()
    for name in cp.sections():
        if name == "run":
            for key, raw in cp.items(name):
                if key == "seed":
                    cfg.seed = _coerce(ExperimentConfig, name, key, raw)
                elif key == "out_dir":
                    cfg.out_dir = raw.strip()
                else:
                    raise ConfigError(f"[run] unknown key {key!r}")
            continue
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        cls = SECTIONS[name]
        values = {k: _coerce(cls, name, k, v) for k, v in cp.items(name)}
        setattr(cfg, name, cls(**{**dataclasses.asdict(getattr(cfg, name)), **values}))
    _resolve_paths(cfg, Path(base_dir))
    validate(cfg)
    return cfg


def _resolve_paths(cfg: ExperimentConfig, base: Path) -> None:
    for attr in ("replay_path", "prompt_path"):
        p = getattr(cfg.annotate, attr)
        if p and not os.path.isabs(p):
            setattr(cfg.annotate, attr, str(base / p))


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text, Path(path).parent)


def validate(cfg: ExperimentConfig) -> None:
    """Build every stage's typed config once so that errors surface before any work."""
    try:
        GeneratorConfig(cfg.env.screens, cfg.env.tasks, cfg.env.distractor_prob, cfg.env.gamma, cfg.env.history_k)
        BehaviorPolicyConfig(cfg.collect.behavior, cfg.collect.epsilon)
        annotator_config(cfg)
        vem_config(cfg)
        ppo_config(cfg)
        MatcherConfig(cfg.eval.click_threshold, cfg.eval.text_match)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg.collect.episodes < 1 or cfg.collect.test_episodes < 1:
        raise ConfigError("[collect] episodes and test_episodes must be >= 1")
    if cfg.vem.kind not in ("tabular", "linear", "mlp"):
        raise ConfigError(f"[vem] unknown kind {cfg.vem.kind!r}")
    if cfg.vem.optimizer not in ("adam", "sgd"):
        raise ConfigError("[vem] optimizer must be adam or sgd")
    if not 0.0 < cfg.vem.heldout_fraction < 1.0:
        raise ConfigError("[vem] heldout_fraction must lie in (0, 1)")
    if cfg.policy.kind not in ("tabular", "linear", "mlp"):
        raise ConfigError(f"[policy] unknown kind {cfg.policy.kind!r}")
    if not parse_seeds(cfg.eval.seeds):
        raise ConfigError("[eval] seeds is empty")
    if cfg.eval.max_steps < 1:
        raise ConfigError("[eval] max_steps must be >= 1")
    t = cfg.theory
    if not 2 <= t.screens_min <= t.screens_max <= 50:
        raise ConfigError("[theory] need 2 <= screens_min <= screens_max <= 50")
    if t.envs < 1 or t.seeds < 1 or t.tol <= 0:
        raise ConfigError("[theory] envs, seeds and tol must be positive")
    if any(n < 0 for n in parse_floats(t.noise)):
        raise ConfigError("[theory] noise levels must be non-negative")
    if cfg.annotate.mode == "replay" and not os.path.isfile(cfg.annotate.replay_path):
        raise ConfigError(f"[annotate] replay_path not found: {cfg.annotate.replay_path!r}")
    if cfg.annotate.prompt_path and not os.path.isfile(cfg.annotate.prompt_path):
        raise ConfigError(f"[annotate] prompt_path not found: {cfg.annotate.prompt_path!r}")


def annotator_config(cfg: ExperimentConfig, transcript_path: str = "") -> AnnotatorConfig:
    a = cfg.annotate
    return AnnotatorConfig(a.mode, a.agreement_rate, stage_seed(cfg.seed, "annotate"), a.endpoint_url,
                           a.model_name, a.temperature, a.api_key_env, fallback=a.fallback,
                           max_in_flight=a.max_in_flight, replay_path=a.replay_path,
                           transcript_path=transcript_path)


def vem_config(cfg: ExperimentConfig) -> VemTrainConfig:
    v = cfg.vem
    return VemTrainConfig(v.epochs, v.batch_size, v.learning_rate, stage_seed(cfg.seed, "train_vem"), v.l2,
                          v.momentum, v.optimizer == "adam", v.hidden, squash=v.squash)


def encoder_config(cfg: ExperimentConfig) -> EncoderConfig:
    v = cfg.vem
    return EncoderConfig(history_k=v.history_k, semantic=v.semantic, identity=v.identity, cells=v.cells)


def ppo_config(cfg: ExperimentConfig) -> PpoConfig:
    p = cfg.policy
    return PpoConfig(p.clip_epsilon, p.actions_per_state, p.epochs, p.batch_size, p.learning_rate,
                     p.entropy_coef, stage_seed(cfg.seed, "train_policy"), p.hidden)


# ------------------------------------------------------------------ stages


@dataclass
class Stage:
    name: str
    sections: tuple[str, ...]
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    run: Callable[["ExperimentConfig", Path], None]


def _env_seed(cfg: ExperimentConfig) -> int:
    return cfg.env.seed if cfg.env.seed is not None else stage_seed(cfg.seed, "generate")


def _run_generate(cfg: ExperimentConfig, d: Path) -> None:
    e = cfg.env
    env = generate_env(GeneratorConfig(e.screens, e.tasks, e.distractor_prob, e.gamma, e.history_k), seed=_env_seed(cfg))
    save_env(env, d / "env.json")


def _run_collect(cfg: ExperimentConfig, d: Path) -> None:
    env = load_env(d / "env.json")
    seed = stage_seed(cfg.seed, "collect")
    c = cfg.collect
    trajs = collect(env, BehaviorPolicyConfig(c.behavior, c.epsilon), c.episodes, seed)
    write_jsonl(trajs, d / "data.jsonl")
    refs = collect(env, BehaviorPolicyConfig("scripted_optimal", 0.0), c.test_episodes, seed + 1)
    write_jsonl(refs, d / "test.jsonl")


def _run_annotate(cfg: ExperimentConfig, d: Path) -> None:
    from .annotator import load_prompt_template

    env = load_env(d / "env.json")
    trajs = read_jsonl(d / "data.jsonl")
    template = load_prompt_template(cfg.annotate.prompt_path or None)
    labels, transcript = annotate(env, trajs, annotator_config(cfg), template=template)
    write_labels(labels, d / "labels.jsonl")
    write_transcript(transcript, d / "transcript.jsonl")


def _records(d: Path):
    trajs = read_jsonl(d / "data.jsonl")
    return trajs, label_map(read_labels(d / "labels.jsonl"))


def _run_train_vem(cfg: ExperimentConfig, d: Path) -> None:
    env = load_env(d / "env.json")
    trajs, labels = _records(d)
    records = with_labels(trajs, labels)
    vc, ec = vem_config(cfg), encoder_config(cfg)
    model, curve = train_vem(records, env, vc, cfg.vem.kind, ec)
    frozen = freeze(model)
    frozen.save(d / "vem.bin")
    with open(d / "vem_curve.csv", "w", encoding="utf-8") as fh:
        fh.write("epoch,mse\n")
        fh.writelines(f"{i},{m:.10f}\n" for i, m in enumerate(curve))
    metrics = {"train": dataclasses.asdict(evaluate_records(model, records)), "labels": dataclasses.asdict(stats(records))}
    try:
        fit, held = split(trajs, cfg.vem.heldout_fraction, vc.seed)
    except ValueError as exc:
        metrics["heldout"] = None
        metrics["heldout_note"] = str(exc)
    else:
        sub, _ = train_vem(with_labels(fit, labels), env, vc, cfg.vem.kind, ec)
        metrics["heldout"] = dataclasses.asdict(evaluate_records(sub, with_labels(held, labels)))
        metrics["heldout_tasks"] = sorted({t.task_id for t in held})
    metrics["content_hash"] = frozen.content_hash()
    (d / "vem_metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True), encoding="utf-8")


def _policy_vem(cfg: ExperimentConfig, d: Path, env, records):
    vem = load_vem(d / "vem.bin", env)
    return SupportMaskedValue(vem, records) if cfg.vem.support_mask else vem


def _run_train_policy(cfg: ExperimentConfig, d: Path) -> None:
    env = load_env(d / "env.json")
    trajs, labels = _records(d)
    records = with_labels(trajs, labels)
    vem = _policy_vem(cfg, d, env, records)
    pc = ppo_config(cfg)
    policy, history = train_policy(records, vem, env, pc, cfg.policy.kind, encoder_config(cfg))
    policy.save(d / "policy.bin")
    write_diagnostics(history, d / "policy_diagnostics.csv")
    bc = train_bc(records, env, cfg.policy.kind, encoder_config(cfg), seed=pc.seed)
    bc.save(d / "bc.bin")


def _run_evaluate(cfg: ExperimentConfig, d: Path) -> None:
    env = load_env(d / "env.json")
    refs = read_jsonl(d / "test.jsonl")
    seeds = parse_seeds(cfg.eval.seeds)
    matcher = MatcherConfig(cfg.eval.click_threshold, cfg.eval.text_match)
    methods = [("vem-ppo", load_policy(d / "policy.bin", env)), ("bc", load_policy(d / "bc.bin", env)),
               ("oracle", OraclePolicy(env))]
    reports = []
    for name, pol in methods:
        reports.append(offline_eval(pol, env, refs, matcher, name, env.env_id))
        reports.append(online_eval(pol, env, None, cfg.eval.max_steps, seeds, name, env.env_id))
    write_report_json(reports, d / "eval.json")
    write_summary_csv([r for r in reports if r.mode == "offline"], d / "summary_offline.csv")
    write_summary_csv([r for r in reports if r.mode == "online"], d / "summary_online.csv")


def _run_theory(cfg: ExperimentConfig, d: Path) -> None:
    from .theory import run_suite, write_bound_csv

    t = cfg.theory
    summary = run_suite(t.envs, t.screens_min, t.screens_max, t.tasks, cfg.env.distractor_prob, cfg.env.gamma,
                        parse_floats(t.noise), t.seeds, stage_seed(cfg.seed, "theory"), t.tol,
                        BehaviorPolicyConfig(cfg.collect.behavior, cfg.collect.epsilon), t.episodes)
    (d / "bound.json").write_text(json.dumps(summary.to_dict(), indent=1, sort_keys=True), encoding="utf-8")
    write_bound_csv(summary.reports, d / "bound.csv")


PIPELINE = (
    Stage("generate", ("env",), (), ("env.json",), _run_generate),
    Stage("collect", ("collect",), ("env.json",), ("data.jsonl", "test.jsonl"), _run_collect),
    Stage("annotate", ("annotate",), ("env.json", "data.jsonl"), ("labels.jsonl", "transcript.jsonl"), _run_annotate),
    Stage("train_vem", ("vem",), ("env.json", "data.jsonl", "labels.jsonl"),
          ("vem.bin", "vem_curve.csv", "vem_metrics.json"), _run_train_vem),
    Stage("train_policy", ("vem", "policy"), ("env.json", "data.jsonl", "labels.jsonl", "vem.bin"),
          ("policy.bin", "policy_diagnostics.csv", "bc.bin"), _run_train_policy),
    Stage("evaluate", ("eval",), ("env.json", "test.jsonl", "policy.bin", "bc.bin"),
          ("eval.json", "summary_offline.csv", "summary_online.csv"), _run_evaluate),
    Stage("theory", ("env", "collect", "theory"), (), ("bound.json", "bound.csv"), _run_theory),
)


@dataclass
class StageRecord:
    name: str
    key: str
    inputs: dict
    outputs: dict
    seconds: float
    cached: bool

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str
    seed: int
    stages: list

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "tool_version": self.tool_version, "seed": self.seed,
                "stages": [s.to_dict() for s in self.stages]}

    def output_hashes(self) -> dict:
        return {f"{s.name}/{k}": v for s in self.stages for k, v in s.outputs.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(d["config_hash"], d["tool_version"], d["seed"], [StageRecord(**s) for s in d["stages"]])


def stage_key(cfg: ExperimentConfig, stage: Stage, inputs: dict) -> str:
    payload = {
        "stage": stage.name, "version": __version__, "seed": stage_seed(cfg.seed, stage.name),
        "sections": {s: cfg.section(s) for s in stage.sections}, "inputs": inputs,
    }
    if stage.name in ("generate", "theory"):
        payload["env_seed"] = _env_seed(cfg)
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def read_manifest(out_dir) -> RunManifest | None:
    p = Path(out_dir) / MANIFEST
    if not p.is_file():
        return None
    return RunManifest.from_dict(json.loads(p.read_text(encoding="utf-8")))


def run_pipeline(cfg: ExperimentConfig, out_dir: str | os.PathLike | None = None,
                 stages: tuple[str, ...] | None = None, force: bool = False) -> RunManifest:
    """Run stages in order, skipping any whose key and outputs match the previous manifest."""
    d = Path(out_dir or cfg.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    wanted = set(stages or STAGES)
    unknown = wanted - set(STAGES)
    if unknown:
        raise ConfigError(f"unknown stages {sorted(unknown)}")
    prev = read_manifest(d)
    prev_by_name = {s.name: s for s in prev.stages} if prev else {}
    records = []
    for stage in PIPELINE:
        if stage.name not in wanted:
            if stage.name in prev_by_name:
                records.append(prev_by_name[stage.name])  # untouched stages keep their record
            continue
        missing = [f for f in stage.inputs if not (d / f).is_file()]
        if missing:
            raise StageError(stage.name, FileNotFoundError(f"missing inputs {missing}"))
        inputs = {f: file_hash(d / f) for f in stage.inputs}
        key = stage_key(cfg, stage, inputs)
        old = prev_by_name.get(stage.name)
        if not force and old is not None and old.key == key and _outputs_match(d, old.outputs):
            log.info("stage %s: cached", stage.name)
            records.append(StageRecord(stage.name, key, inputs, old.outputs, 0.0, True))
            continue
        log.info("stage %s: running", stage.name)
        t0 = time.perf_counter()
        try:
            stage.run(cfg, d)
        except Exception as exc:
            _write_manifest(d, RunManifest(cfg.config_hash(), __version__, cfg.seed, records))
            raise StageError(stage.name, exc) from exc
        outputs = {f: file_hash(d / f) for f in stage.outputs}
        records.append(StageRecord(stage.name, key, inputs, outputs, round(time.perf_counter() - t0, 3), False))
    manifest = RunManifest(cfg.config_hash(), __version__, cfg.seed, records)
    _write_manifest(d, manifest)
    return manifest


def _outputs_match(d: Path, outputs: dict) -> bool:
    return all((d / f).is_file() and file_hash(d / f) == h for f, h in outputs.items())


def _write_manifest(d: Path, manifest: RunManifest) -> None:
    (d / MANIFEST).write_text(json.dumps(manifest.to_dict(), indent=1, sort_keys=True), encoding="utf-8")
