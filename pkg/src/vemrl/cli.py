"""Command-line entry point: one subcommand per pipeline stage, plus ``run`` and ``report``.

Exit codes: 0 success, 2 configuration or usage error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .pipeline import (
    STAGES, ConfigError, ExperimentConfig, StageError, annotator_config, encoder_config, load_config,
    parse_floats, parse_seeds, ppo_config, run_pipeline, stage_seed, validate, vem_config,
)

log = logging.getLogger("vemrl")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global")
    g.add_argument("--config", help="INI experiment config (defaults apply otherwise)")
    g.add_argument("--seed", type=int, help="global seed; stage seeds are derived from it")
    g.add_argument("--out-dir", help="directory for outputs (run: the run directory)")
    g.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="vemrl", description=__doc__.splitlines()[0], parents=[common])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-env", parents=[common], help="generate a synthetic environment")
    p.add_argument("--screens", type=int)
    p.add_argument("--tasks", type=int)
    p.add_argument("--distractor-prob", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--history-k", type=int)
    p.add_argument("--env-seed", type=int, help="pin the environment seed directly")
    p.add_argument("--out", default="env.json")

    p = sub.add_parser("collect", parents=[common], help="collect behavior trajectories")
    p.add_argument("--env", required=True)
    p.add_argument("--behavior", choices=("scripted_optimal", "epsilon_scripted", "uniform_random"))
    p.add_argument("--epsilon", type=float)
    p.add_argument("--episodes", type=int)
    p.add_argument("--out", default="data.jsonl")

    p = sub.add_parser("annotate", parents=[common], help="label every dataset step")
    p.add_argument("--env", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("oracle", "noisy", "llm", "replay"))
    p.add_argument("--agreement-rate", type=float)
    p.add_argument("--endpoint-url")
    p.add_argument("--model-name")
    p.add_argument("--api-key-env", help="name of the environment variable holding the API key")
    p.add_argument("--replay", help="transcript JSONL to replay (replay mode)")
    p.add_argument("--prompt", help="prompt template file")
    p.add_argument("--transcript", default="transcript.jsonl")
    p.add_argument("--out", default="labels.jsonl")

    p = sub.add_parser("train-vem", parents=[common], help="fit and freeze the value model")
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--env", required=True)
    p.add_argument("--kind", choices=("tabular", "linear", "mlp"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", default="vem.bin")
    p.add_argument("--curve", default="vem_curve.csv")
    p.add_argument("--metrics", default="vem_metrics.json")

    p = sub.add_parser("train-policy", parents=[common], help="PPO against the frozen value model")
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True, help="labels used for the value model's support mask")
    p.add_argument("--vem", required=True)
    p.add_argument("--env", required=True)
    p.add_argument("--kind", choices=("tabular", "linear", "mlp"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--no-support-mask", action="store_true")
    p.add_argument("--bc-out", help="also fit a behavior-cloning baseline here")
    p.add_argument("--out", default="policy.bin")
    p.add_argument("--diagnostics", default="policy_diagnostics.csv")

    p = sub.add_parser("evaluate", parents=[common], help="offline or online evaluation")
    p.add_argument("--mode", choices=("offline", "online"), required=True)
    p.add_argument("--policy", required=True, help="policy file, or 'oracle'")
    p.add_argument("--env", required=True)
    p.add_argument("--data", help="reference trajectories (offline mode)")
    p.add_argument("--seeds")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--method", default="")
    p.add_argument("--out", default="report.json")
    p.add_argument("--csv", help="also write the one-row CSV summary")

    p = sub.add_parser("theory-check", parents=[common], help="empirical performance-bound suite")
    p.add_argument("--envs", type=int)
    p.add_argument("--screens-min", type=int)
    p.add_argument("--screens-max", type=int)
    p.add_argument("--noise")
    p.add_argument("--noise-seeds", type=int)
    p.add_argument("--out", default="bound.json")

    p = sub.add_parser("run", parents=[common], help="full pipeline with stage caching")
    p.add_argument("--stages", help=f"comma-separated subset of {','.join(STAGES)}")
    p.add_argument("--force", action="store_true", help="ignore the stage cache")

    p = sub.add_parser("report", parents=[common], help="Markdown + CSV summary and figures of a run")
    p.add_argument("run_dir")
    p.add_argument("--no-figures", action="store_true")
    return ap


def _set(obj, **kw):
    for k, v in kw.items():
        if v is not None:
            setattr(obj, k, v)


def _out(args, name: str) -> Path:
    p = Path(name)
    if args.out_dir and not p.is_absolute():
        p = Path(args.out_dir) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _records(data: str, labels: str):
    from .annotator import label_map, read_labels
    from .dataset import read_jsonl, with_labels

    return with_labels(read_jsonl(data), label_map(read_labels(labels)))


def cmd_generate_env(cfg: ExperimentConfig, args) -> None:
    from .env_mdp import GeneratorConfig, generate_env, save_env

    e = cfg.env
    _set(e, screens=args.screens, tasks=args.tasks, distractor_prob=args.distractor_prob, gamma=args.gamma,
         history_k=args.history_k, seed=args.env_seed)
    validate(cfg)
    seed = e.seed if e.seed is not None else stage_seed(cfg.seed, "generate")
    env = generate_env(GeneratorConfig(e.screens, e.tasks, e.distractor_prob, e.gamma, e.history_k), seed=seed)
    save_env(env, _out(args, args.out))


def cmd_collect(cfg: ExperimentConfig, args) -> None:
    from .dataset import BehaviorPolicyConfig, collect, write_jsonl
    from .env_mdp import load_env

    c = cfg.collect
    _set(c, behavior=args.behavior, epsilon=args.epsilon, episodes=args.episodes)
    validate(cfg)
    trajs = collect(load_env(args.env), BehaviorPolicyConfig(c.behavior, c.epsilon), c.episodes,
                    stage_seed(cfg.seed, "collect"))
    write_jsonl(trajs, _out(args, args.out))


def cmd_annotate(cfg: ExperimentConfig, args) -> None:
    from .annotator import annotate, load_prompt_template, write_labels, write_transcript
    from .dataset import read_jsonl
    from .env_mdp import load_env

    a = cfg.annotate
    _set(a, mode=args.mode, agreement_rate=args.agreement_rate, endpoint_url=args.endpoint_url,
         model_name=args.model_name, api_key_env=args.api_key_env, replay_path=args.replay, prompt_path=args.prompt)
    validate(cfg)
    labels, transcript = annotate(load_env(args.env), read_jsonl(args.data), annotator_config(cfg),
                                  template=load_prompt_template(a.prompt_path or None))
    write_labels(labels, _out(args, args.out))
    if transcript:
        write_transcript(transcript, _out(args, args.transcript))


def cmd_train_vem(cfg: ExperimentConfig, args) -> None:
    from .env_mdp import load_env
    from .vem import evaluate_records, freeze, train_vem

    v = cfg.vem
    _set(v, kind=args.kind, epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr)
    validate(cfg)
    env = load_env(args.env)
    records = _records(args.data, args.labels)
    model, curve = train_vem(records, env, vem_config(cfg), v.kind, encoder_config(cfg))
    frozen = freeze(model)
    frozen.save(_out(args, args.out))
    _out(args, args.curve).write_text("epoch,mse\n" + "".join(f"{i},{m:.10f}\n" for i, m in enumerate(curve)),
                                      encoding="utf-8")
    metrics = {"train": dataclasses.asdict(evaluate_records(model, records)), "content_hash": frozen.content_hash()}
    _out(args, args.metrics).write_text(json.dumps(metrics, indent=1, sort_keys=True), encoding="utf-8")


def cmd_train_policy(cfg: ExperimentConfig, args) -> None:
    from .env_mdp import load_env
    from .policy import train_bc, train_policy, write_diagnostics
    from .vem import SupportMaskedValue, load_vem

    p = cfg.policy
    _set(p, kind=args.kind, epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr)
    if args.no_support_mask:
        cfg.vem.support_mask = False
    validate(cfg)
    env = load_env(args.env)
    records = _records(args.data, args.labels)
    vem = load_vem(args.vem, env)
    if cfg.vem.support_mask:
        vem = SupportMaskedValue(vem, records)
    pc = ppo_config(cfg)
    enc = vem.encoder.config
    policy, history = train_policy(records, vem, env, pc, p.kind, enc)
    policy.save(_out(args, args.out))
    write_diagnostics(history, _out(args, args.diagnostics))
    if args.bc_out:
        train_bc(records, env, p.kind, enc, seed=pc.seed).save(_out(args, args.bc_out))


def cmd_evaluate(cfg: ExperimentConfig, args) -> None:
    from .dataset import read_jsonl
    from .env_mdp import load_env
    from .evaluation import MatcherConfig, OraclePolicy, offline_eval, online_eval, write_report_json, write_summary_csv
    from .policy import load_policy

    ev = cfg.eval
    _set(ev, seeds=args.seeds, max_steps=args.max_steps)
    validate(cfg)
    env = load_env(args.env)
    policy = OraclePolicy(env) if args.policy == "oracle" else load_policy(args.policy, env)
    method = args.method or Path(args.policy).stem
    if args.mode == "offline":
        if not args.data:
            raise ConfigError("offline evaluation needs --data")
        rep = offline_eval(policy, env, read_jsonl(args.data), MatcherConfig(ev.click_threshold, ev.text_match),
                           method, env.env_id)
    else:
        rep = online_eval(policy, env, None, ev.max_steps, parse_seeds(ev.seeds), method, env.env_id)
    write_report_json([rep], _out(args, args.out))
    if args.csv:
        write_summary_csv([rep], _out(args, args.csv))
    print(f"{method} {rep.mode}: step_sr={rep.step_sr:.4f} task_sr={rep.task_sr:.4f} "
          f"avg_step_length={rep.avg_step_length:.3f}")


def cmd_theory_check(cfg: ExperimentConfig, args) -> None:
    from .dataset import BehaviorPolicyConfig
    from .theory import run_suite, write_bound_csv

    t = cfg.theory
    _set(t, envs=args.envs, screens_min=args.screens_min, screens_max=args.screens_max, noise=args.noise,
         seeds=args.noise_seeds)
    validate(cfg)
    summary = run_suite(t.envs, t.screens_min, t.screens_max, t.tasks, cfg.env.distractor_prob, cfg.env.gamma,
                        parse_floats(t.noise), t.seeds, stage_seed(cfg.seed, "theory"), t.tol,
                        BehaviorPolicyConfig(cfg.collect.behavior, cfg.collect.epsilon), t.episodes)
    out = _out(args, args.out)
    out.write_text(json.dumps(summary.to_dict(), indent=1, sort_keys=True), encoding="utf-8")
    write_bound_csv(summary.reports, out.with_suffix(".csv"))
    print(f"c_fit={summary.c_fit:.6g} c_theory={summary.c_theory:.6g} cases={len(summary.reports)} "
          f"trend_violations={len(summary.trend_violations)}")


def cmd_run(cfg: ExperimentConfig, args) -> None:
    stages = tuple(s.strip() for s in args.stages.split(",")) if args.stages else None
    manifest = run_pipeline(cfg, args.out_dir or cfg.out_dir, stages, args.force)
    for s in manifest.stages:
        print(f"{s.name:13s} {'cached' if s.cached else f'{s.seconds:.2f}s'}")


def cmd_report(cfg: ExperimentConfig, args) -> None:
    from .report import write_report

    res = write_report(args.run_dir, figures=not args.no_figures)
    print(res.markdown)
    if res.missing:
        print("missing: " + ", ".join(res.missing))


COMMANDS = {
    "generate-env": cmd_generate_env, "collect": cmd_collect, "annotate": cmd_annotate,
    "train-vem": cmd_train_vem, "train-policy": cmd_train_policy, "evaluate": cmd_evaluate,
    "theory-check": cmd_theory_check, "run": cmd_run, "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg.seed = args.seed
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"{exc.stage}: {type(exc.cause).__name__}: {exc.cause}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:  # a standalone stage failed
        print(f"{args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
