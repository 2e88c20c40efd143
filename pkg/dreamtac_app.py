#!/usr/bin/env python3
"""
DreamTac command line
Data generation, world-model pretraining, two-stage policy training,
evaluation, ablations, data scaling and heatmap exports from one entrypoint.
"""

import argparse
import json
import platform
import subprocess
import sys
from functools import partial
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

import evalharness
import run_config
from datastore import EpisodeDataset, record_dataset
from diffcore import configure_determinism, seed_everything
from policy import build_policy
from training import ABLATIONS, Trainer, run_ablation, train_pipeline

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_ASSERT = 2
EXIT_USAGE = 64
COMMANDS = ("gen-data", "pretrain-wm", "train", "eval", "ablate", "scaling", "viz")


class UsageError(Exception):
    pass


class AppArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> AppArgumentParser:
    common = AppArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file (e.g. configs/tiny.env)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("--seed", type=int, help="shortcut for --set seed=N")
    common.add_argument("--workers", type=int, help="parallel worker processes (1 = serial and deterministic)")
    common.add_argument("--out", required=True, help="output directory (must be empty unless --resume)")
    common.add_argument("--resume", action="store_true", help="allow a non-empty output directory and resume")
    common.add_argument("--assert", dest="check", action="store_true",
                        help="exit with code 2 when acceptance thresholds fail")
    common.add_argument("--quiet", action="store_true", help="no progress bars or status lines")

    parser = AppArgumentParser(
        prog="dreamtac_app.py",
        description="Think-dream-act visuo-tactile policy: data, world model, training and evaluation.",
        epilog=run_config.describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--replay", metavar="RUN_JSON", help="re-run the command recorded in a run.json")
    parser.add_argument("--replay-out", metavar="DIR", help="output directory for --replay")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND")

    commands.add_parser("gen-data", parents=[common], help="record scripted-expert demonstrations into --out")

    pretrain = commands.add_parser("pretrain-wm", parents=[common], help="pretrain and freeze the tactile world model")
    pretrain.add_argument("--data", required=True, help="dataset directory")
    pretrain.add_argument("--shuffled-targets", action="store_true", help="control run with mismatched targets")

    train = commands.add_parser("train", parents=[common], help="train the policy (stage 1 or stage 2)")
    train.add_argument("--stage", required=True, choices=("1", "2"))
    train.add_argument("--data", required=True, help="dataset directory")
    train.add_argument("--wm", help="frozen world model checkpoint stem")
    train.add_argument("--stage1", help="stage-1 policy checkpoint stem (stage 2 only)")

    evaluate = commands.add_parser("eval", parents=[common], help="closed-loop success rate")
    source = evaluate.add_mutually_exclusive_group(required=True)
    source.add_argument("--checkpoint", help="policy checkpoint stem")
    source.add_argument("--expert", action="store_true", help="evaluate the privileged scripted expert")
    source.add_argument("--random-init", action="store_true", help="evaluate an untrained policy")
    evaluate.add_argument("--pass", dest="pass_name", choices=("draft", "final"), default="final")
    evaluate.add_argument("--task", choices=run_config.TASKS, help="single task (defaults to the config's tasks)")

    ablate = commands.add_parser("ablate", parents=[common], help="train and evaluate the ablation grid")
    ablate.add_argument("--data", required=True, help="dataset directory")
    ablate.add_argument("--wm", help="shared world model checkpoint stem")
    ablate.add_argument("--variants", default=",".join(ABLATIONS), help="comma-separated ablation names")
    ablate.add_argument("--wm-sizes", default="", help="extra world model sizes to sweep for the full variant")

    scaling = commands.add_parser("scaling", parents=[common], help="data scaling curve")
    scaling.add_argument("--data", required=True, help="dataset directory")
    scaling.add_argument("--wm", help="shared world model checkpoint stem")
    scaling.add_argument("--fractions", default="0.2,0.6,1.0", help="comma-separated data fractions")

    viz = commands.add_parser("viz", parents=[common], help="dream quality, heatmap series and prediction strips")
    viz.add_argument("--checkpoint", required=True, help="stage-2 policy checkpoint stem")
    viz.add_argument("--data", required=True, help="dataset directory")
    viz.add_argument("--strip", type=int, metavar="EPISODE", help="episode position for a prediction strip")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    overrides = run_config.parse_overrides(args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    return run_config.load_config(args.config, overrides)


def prepare_out_dir(out: Path, resume: bool) -> None:
    if out.exists() and any(out.iterdir()) and not resume:
        raise UsageError(f"output directory {out} is not empty (use --resume to continue a run)")
    out.mkdir(parents=True, exist_ok=True)


def git_revision() -> Optional[str]:
    try:
        result = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                                cwd=Path(__file__).resolve().parent)
    except (OSError, subprocess.SubprocessError):
        return None
    return result.stdout.strip() or None


def write_run_record(out: Path, argv: List[str], cfg: dict) -> Path:
    """Provenance written before any work starts."""
    record = {
        "command": argv[0] if argv else "",
        "argv": list(argv),
        "config": cfg,
        "config_hash": run_config.config_hash(cfg),
        "seed": cfg["seed"],
        "git": git_revision(),
        "versions": {"python": platform.python_version(), "numpy": np.__version__, "torch": torch.__version__},
    }
    path = out / "run.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True))
    run_config.save_config(cfg, out / "config.env")
    return path


def _without_out(argv: List[str]) -> List[str]:
    cleaned, skip = [], False
    for item in argv:
        if skip:
            skip = False
            continue
        if item == "--out":
            skip = True
            continue
        if item.startswith("--out="):
            continue
        cleaned.append(item)
    return cleaned


class DreamTacApp:
    """
    One command invocation: resolved config, output directory and the
    workflow methods the subcommands dispatch to.
    """

    def __init__(self, cfg: dict, out_dir: Path, verbose: bool = True):
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.verbose = verbose
        configure_determinism()
        seed_everything(cfg["seed"])
        if verbose:
            print("🚀 Initializing DreamTac run...")
            print("=" * 50)
            print(f"📝 config hash {run_config.config_hash(cfg)[:12]}, seed {cfg['seed']}, workers {cfg['workers']}")
            print(f"📝 output directory {self.out_dir}")
            print("=" * 50)

    def _say(self, message: str) -> None:
        if self.verbose:
            print(message)

    def _dataset(self, path: str) -> EpisodeDataset:
        return EpisodeDataset(path, cache_size=self.cfg["cache_episodes"])

    def _report_problems(self, problems: List[str]) -> int:
        if not problems:
            self._say("🧪 acceptance checks passed")
            return EXIT_OK
        for problem in problems:
            print(f"❌ acceptance check failed: {problem}")
        return EXIT_ASSERT

    def gen_data(self, args) -> int:
        data = record_dataset(self.out_dir, self.cfg, self.verbose)
        self._say(f"✅ dataset with {len(data)} episodes in {self.out_dir}")
        return EXIT_OK

    def pretrain_wm(self, args) -> int:
        Trainer(self.cfg, self.out_dir, self.verbose).pretrain_wm(self._dataset(args.data), args.shuffled_targets)
        return EXIT_OK

    def train(self, args) -> int:
        trainer = Trainer(self.cfg, self.out_dir, self.verbose)
        dataset = self._dataset(args.data)
        if args.stage == "1":
            trainer.train_stage1(dataset, args.wm, resume=args.resume)
        else:
            trainer.train_stage2(dataset, args.stage1, args.wm, resume=args.resume)
        return EXIT_OK

    def evaluate(self, args) -> int:
        if args.expert:
            target = evalharness.EXPERT
        elif args.random_init:
            target = build_policy(self.cfg)
        else:
            target = args.checkpoint
        tasks = [args.task] if args.task else self.cfg["tasks"]
        reports = []
        for task in tasks:
            log = self.out_dir / f"inference_{task}.jsonl" if self.cfg["log_inference"] else None
            report = evalharness.evaluate(target, task, self.cfg["eval_episodes"], self.cfg["eval_seeds"],
                                          args.pass_name, self.cfg["workers"], self.cfg["max_episode_steps"],
                                          log, self.verbose)
            if not report.config_hash:
                report.config_hash = run_config.config_hash(self.cfg)
            reports.append(report)
        payload = [report.to_dict() for report in reports]
        path = self.out_dir / "report.json"
        path.write_text(json.dumps(payload if len(payload) > 1 else payload[0], indent=2, sort_keys=True))
        self._say(f"✅ report written to {path}")
        if args.check and args.random_init:
            return self._report_problems(evalharness.check_random_floor(reports)[1])
        return EXIT_OK

    def ablate(self, args) -> int:
        grid = [{"name": name.strip()} for name in args.variants.split(",") if name.strip()]
        unknown = [entry["name"] for entry in grid if entry["name"] not in ABLATIONS]
        if unknown:
            raise UsageError(f"unknown ablation variants: {', '.join(unknown)}")
        grid += [{"name": "full", "wm_size": size.strip()} for size in args.wm_sizes.split(",") if size.strip()]
        rows = run_ablation(grid, self.cfg, self._dataset(args.data), self.out_dir, args.wm, verbose=self.verbose)
        if args.check:
            _, problems = evalharness.check_ablation_ordering(rows)
            return self._report_problems(problems)
        return EXIT_OK

    def scaling(self, args) -> int:
        fractions = [float(f) for f in args.fractions.split(",") if f.strip()]
        train_fn = partial(_train_for_scaling, wm_ckpt=args.wm, verbose=self.verbose)
        rows = evalharness.scaling_study(fractions, self.cfg, self._dataset(args.data), train_fn, self.out_dir,
                                         verbose=self.verbose)
        if args.check:
            _, problems = evalharness.check_scaling_curve(rows)
            return self._report_problems(problems)
        return EXIT_OK

    def viz(self, args) -> int:
        dataset = self._dataset(args.data)
        meta = json.loads(Path(args.checkpoint).with_suffix(".json").read_text())
        horizon = self.cfg["horizon_n"]
        quality = {"trained": evalharness.dream_quality(args.checkpoint, dataset, horizon)}
        snapshots = meta.get("snapshots") or []
        problems = []
        if snapshots:
            quality["init"] = evalharness.dream_quality(snapshots[0], dataset, horizon)
            maes = evalharness.heatmap_series(snapshots, dataset, horizon, self.out_dir / "heatmaps")
            self._say("📉 heatmap MAE per snapshot: " + ", ".join(f"{m:.4f}" for m in maes))
            problems += evalharness.check_heatmap_series(maes)[1]
            self._say(f"📉 dream cosine {quality['init']['cosine_mean']:.3f} -> {quality['trained']['cosine_mean']:.3f}")
            problems += evalharness.check_dream_gain(quality["init"], quality["trained"])[1]
        else:
            print("⚠️ checkpoint records no forecaster snapshots; skipping the heatmap series")
            problems.append("no forecaster snapshots to check")
        (self.out_dir / "dream_quality.json").write_text(json.dumps(quality, indent=2, sort_keys=True))
        if args.strip is not None:
            path = evalharness.prediction_strip(args.checkpoint, dataset, args.strip, horizon, self.out_dir / "strip")
            self._say(f"✅ prediction strip written to {path}")
        return self._report_problems(problems) if args.check else EXIT_OK

    def run(self, args) -> int:
        handlers = {"gen-data": self.gen_data, "pretrain-wm": self.pretrain_wm, "train": self.train,
                    "eval": self.evaluate, "ablate": self.ablate, "scaling": self.scaling, "viz": self.viz}
        return handlers[args.command](args)


def _train_for_scaling(dataset: EpisodeDataset, cfg: dict, run_dir: Path, wm_ckpt=None, verbose: bool = True) -> Path:
    return train_pipeline(dataset, cfg, run_dir, wm_ckpt, verbose)


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parse, resolve the config, write run.json and dispatch.

    Returns:
        0 on success, 1 on failure, 2 on a failed --assert check, 64 on bad usage
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    replayed = None
    if args.replay:
        if not args.replay_out:
            parser.error("--replay needs --replay-out")
        record = json.loads(Path(args.replay).read_text())
        argv = _without_out(record["argv"]) + ["--out", args.replay_out]
        args = parser.parse_args(argv)
        replayed = run_config.validate(dict(record["config"]))
    if args.command is None:
        parser.error(f"a command is required: {', '.join(COMMANDS)}")

    try:
        cfg = replayed if replayed is not None else resolve_config(args)
        out = Path(args.out)
        prepare_out_dir(out, args.resume)
    except (run_config.ConfigError, UsageError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE

    write_run_record(out, argv, cfg)
    try:
        app = DreamTacApp(cfg, out, verbose=not args.quiet)
        return app.run(args)
    except UsageError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("\n👋 Interrupted by user.")
        return EXIT_FAILURE
    except Exception as e:
        print(f"❌ {args.command} failed: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
