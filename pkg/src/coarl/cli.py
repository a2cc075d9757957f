"""Command-line entry point: ``coarl <subcommand> [flags]``.

Failures print a single JSON line ``{"error": ..., "message": ...}`` on stderr
and exit non-zero (2 for usage errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_model
from .config import ConfigError, RunConfig, load_config, save_config
from .data import (
    DatasetError,
    counterspeech_samples,
    build_multitask_mixture,
    load_jsonl,
    load_records,
    load_templates,
    render_instruction,
    resource_path,
    validate_dataset,
)
from .lora import LoraError, attach, load_adapter
from .metrics import EvaluationError, evaluate_run, generate_outputs, write_generations
from .model import Seq2SeqModel, SamplingConfig
from .ppo import PPOError, Prompt, train_phase3
from .reward import RemoteScorer, RewardError, composite_reward, reference_scorers, score_batch
from .train import TrainingError, train_phase1, train_phase2

log = logging.getLogger("coarl")

LOG_LEVELS = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
RUN_SUBDIRS = ("checkpoints", "metrics", "generations")
DEFAULT_CS = "fixtures/counterspeech_sample.jsonl"
DEFAULT_EXPLANATIONS = "fixtures/explanations_sample.jsonl"


class CliError(RuntimeError):
    pass


class UsageError(CliError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# helpers


def prepare_run_dir(out_dir, cfg: RunConfig, force: bool = False) -> Path:
    """Create ``out_dir`` with the resolved config and the standard subdirectories."""
    root = Path(out_dir)
    if root.exists() and not root.is_dir():
        raise CliError(f"output path {root} exists and is not a directory")
    if root.exists() and any(root.iterdir()):
        if not force:
            raise CliError(f"output directory {root} is not empty (pass --force to overwrite)")
        shutil.rmtree(root)
    for sub in RUN_SUBDIRS:
        (root / sub).mkdir(parents=True, exist_ok=True)
    save_config(root / "config.json", cfg)
    return root


def _data_path(configured, default_resource):
    return Path(configured) if configured else resource_path(default_resource)


def _require_file(path, what):
    if path is None:
        raise CliError(f"{what} is required")
    if not Path(path).is_file():
        raise CliError(f"{what} not found: {path}")
    return Path(path)


def _templates(cfg: RunConfig):
    return load_templates(cfg.data.templates) if cfg.data.templates else None


def _cs_records(cfg: RunConfig, split=None, path=None):
    recs = load_records(path or _data_path(cfg.data.counterspeech, DEFAULT_CS), kind="counterspeech")
    return [r for r in recs if split is None or r.split == split]


def build_scorers(cfg: RunConfig) -> dict:
    rc = cfg.reward
    if rc.scorer == "reference":
        return reference_scorers(rc.lexicon_path, rc.stopwords_path, rc.negations_path)
    missing = [k for k in ("stance", "quality", "toxicity") if k not in rc.endpoints]
    if missing:
        raise CliError(f"remote scorer needs endpoints for: {', '.join(missing)}")
    return {k: RemoteScorer(rc.endpoints[k], k, timeout=rc.timeout, retries=rc.retries) for k in rc.endpoints}


def _load_policy(checkpoint, adapter=None):
    model = load_model(_require_file(checkpoint, "--checkpoint"))
    if adapter:
        load_adapter(_require_file(adapter, "--adapter"), model)
    return model


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


# --------------------------------------------------------------------------
# subcommands


def cmd_phase1(args, cfg: RunConfig):
    root = prepare_run_dir(_require_out_dir(args), cfg, args.force)
    explanations = load_records(_data_path(cfg.data.explanations, DEFAULT_EXPLANATIONS), kind="explanation")
    mixture = build_multitask_mixture(explanations, cfg.phase1.seed, mixing=cfg.data.mixing, templates=_templates(cfg))
    model = Seq2SeqModel(cfg.model, seed=cfg.phase1.seed)
    tcfg = _with_ckpt(cfg.phase1, root)
    res = train_phase1(model, mixture, tcfg, metrics_path=root / "metrics" / "phase1.csv")
    _emit({"phase": "phase1", "steps": res.steps, "final_loss": res.losses[-1], "checkpoint": res.final_checkpoint})


def cmd_phase2(args, cfg: RunConfig):
    ckpt = _require_file(args.checkpoint, "phase-1 checkpoint (--checkpoint)")
    root = prepare_run_dir(_require_out_dir(args), cfg, args.force)
    model = load_model(ckpt)
    attach(model, cfg.lora, seed=cfg.lora_seed)
    templates = _templates(cfg)
    train = counterspeech_samples(_cs_records(cfg, cfg.data.train_split), templates)
    dev = counterspeech_samples(_cs_records(cfg, cfg.data.dev_split), templates) or None
    res = train_phase2(model, train, _with_ckpt(cfg.phase2, root), metrics_path=root / "metrics" / "phase2.csv", dev_samples=dev)
    _emit({"phase": "phase2", "steps": res.steps, "final_loss": res.losses[-1], "checkpoint": res.final_checkpoint})


def cmd_phase3(args, cfg: RunConfig):
    ckpt = _require_file(args.checkpoint, "base checkpoint (--checkpoint)")
    adapter = _require_file(args.adapter, "phase-2 adapter (--adapter)")
    root = prepare_run_dir(_require_out_dir(args), cfg, args.force)
    model = _load_policy(ckpt, adapter)
    templates = _templates(cfg)
    prompts = []
    for r in _cs_records(cfg, cfg.data.train_split):
        text = render_instruction("I8", r.hate_speech, r.intent, templates)
        prompts.append(Prompt(text, text if cfg.reward.topic == "instruction" else r.hate_speech))
    scorers = build_scorers(cfg)
    res = train_phase3(
        model, prompts, lambda x, y: composite_reward(x, y, scorers), cfg.ppo,
        metrics_path=root / "metrics" / "phase3.csv", checkpoint_dir=root / "checkpoints",
    )
    _emit({"phase": "phase3", "batches": len(res.mean_rewards), "final_mean_reward": res.mean_rewards[-1] if res.mean_rewards else None,
           "checkpoint": res.final_checkpoint})


def cmd_generate(args, cfg: RunConfig):
    model = _load_policy(args.checkpoint, args.adapter)
    recs = _cs_records(cfg, args.split or cfg.eval.split, args.input)
    outputs = generate_outputs(model, recs, SamplingConfig(max_new_tokens=cfg.eval.max_new_tokens))
    if args.output:
        write_generations(args.output, outputs)
        _emit({"generated": len(outputs), "output": str(args.output)})
    else:
        for o in outputs:
            _emit(o)


def cmd_evaluate(args, cfg: RunConfig):
    gens = _require_file(args.generations, "--generations")
    model = _load_policy(args.checkpoint, args.adapter) if args.checkpoint else None
    recs = _cs_records(cfg, args.split or cfg.eval.split, args.input)
    report = evaluate_run(gens, recs, scorers=build_scorers(cfg) if cfg.reward.scorer == "reference" else None, model=model)
    sys.stdout.write(report.table())
    for note in report.notes:
        print(f"note: {note}")
    if args.output_csv:
        report.to_csv(args.output_csv)


def cmd_reward_score(args, cfg: RunConfig):
    rows = load_jsonl(_require_file(args.input, "--input"))
    pairs = []
    for n, r in enumerate(rows, 1):
        if "x" not in r or "y" not in r:
            raise CliError(f"{args.input}: line {n}: expected fields 'x' and 'y'")
        pairs.append((r["x"], r["y"]))
    results = score_batch(pairs, build_scorers(cfg), cfg.reward.max_workers)
    lines = [json.dumps(b.to_dict(), sort_keys=True) for b in results]
    if args.output:
        Path(args.output).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    else:
        for line in lines:
            print(line)


def cmd_validate(args, cfg: RunConfig):
    records, issues = validate_dataset(args.path, args.kind)
    for issue in issues:
        print(f"{args.path}:{issue.line}: {issue.message}")
    print(f"{len(records)} records, {len(issues)} errors")
    return 1 if issues else 0


def cmd_render(args, cfg: RunConfig):
    print(render_instruction(args.task, args.hs, args.intent, _templates(cfg)))


def _require_out_dir(args):
    if not args.out_dir:
        raise CliError("--out-dir is required")
    return args.out_dir


def _with_ckpt(tcfg, root):
    from dataclasses import replace

    return replace(tcfg, checkpoint_dir=str(root / "checkpoints"))


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coarl", description="Counterspeech SFT / LoRA / PPO pipeline")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(p, out=False):
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--seed", type=int, help="override the global seed")
        if out:
            p.add_argument("--out-dir", help="run directory to create")
            p.add_argument("--force", action="store_true", help="overwrite a non-empty --out-dir")
        return p

    p = common(sub.add_parser("phase1-train", help="multi-task explanation SFT"), out=True)
    p.set_defaults(func=cmd_phase1)

    p = common(sub.add_parser("phase2-train", help="LoRA counterspeech SFT"), out=True)
    p.add_argument("--checkpoint", help="phase-1 model checkpoint")
    p.set_defaults(func=cmd_phase2)

    p = common(sub.add_parser("phase3-ppo", help="PPO on the LoRA adapter"), out=True)
    p.add_argument("--checkpoint", help="phase-1 model checkpoint (frozen base)")
    p.add_argument("--adapter", help="phase-2 adapter checkpoint")
    p.set_defaults(func=cmd_phase3)

    for name, func in (("generate", cmd_generate), ("evaluate", cmd_evaluate)):
        p = common(sub.add_parser(name))
        p.add_argument("--checkpoint", help="model checkpoint")
        p.add_argument("--adapter", help="adapter checkpoint (lora or ppo-policy)")
        p.add_argument("--input", help="counterspeech JSONL (default: config data.counterspeech)")
        p.add_argument("--split", help="record split to use (default: config eval.split)")
        if name == "generate":
            p.add_argument("--output", help="generations JSONL path (default: stdout)")
        else:
            p.add_argument("--generations", help="generations JSONL to score")
            p.add_argument("--output-csv", help="write the report CSV here")
        p.set_defaults(func=func)

    p = common(sub.add_parser("reward-score", help="score JSONL {x, y} pairs"))
    p.add_argument("--input", help="JSONL with fields x and y")
    p.add_argument("--output", help="output JSONL (default: stdout)")
    p.set_defaults(func=cmd_reward_score)

    p = common(sub.add_parser("validate-data", help="check a dataset file"))
    p.add_argument("path")
    p.add_argument("--kind", choices=("counterspeech", "explanation"))
    p.set_defaults(func=cmd_validate)

    p = common(sub.add_parser("render-prompt", help="print an instruction rendering"))
    p.add_argument("--task", required=True, help="I1..I8")
    p.add_argument("--hs", required=True, help="hate speech text")
    p.add_argument("--intent", help="intent code (I8 only)")
    p.set_defaults(func=cmd_render)
    return parser


def _setup_logging():
    level = os.environ.get("COARL_LOG", "warning").strip().lower()
    if level not in LOG_LEVELS:
        raise CliError(f"COARL_LOG must be one of {', '.join(LOG_LEVELS)}; got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _fail(exc, code):
    msg = str(exc).replace("\n", " ")
    print(json.dumps({"error": type(exc).__name__, "message": msg}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        overrides = {"seed": args.seed} if args.seed is not None else None
        cfg = load_config(args.config, overrides)
        status = args.func(args, cfg)
        return int(status or 0)
    except UsageError as exc:
        return _fail(exc, 2)
    except (CliError, ConfigError, DatasetError, CheckpointError, LoraError, TrainingError, PPOError,
            RewardError, EvaluationError, FileNotFoundError, KeyError, ValueError) as exc:
        return _fail(exc, 1)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
