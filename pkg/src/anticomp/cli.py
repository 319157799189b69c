"""Command-line entry point: ``anticomp {gen-data,train,eval,ablate,report}``.

Every config key is also a flag (``--loss.beta1 0``); ``--config`` loads a
YAML file first and flags win over it.

Exit codes: 0 success, 1 usage, 2 dataset error, 3 divergence, 4 IO.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from anticomp.config import DESK_SCALE, Config, ConfigError, dump_config, flatten, load_config
from anticomp.core import DatasetError, InvalidArgumentError, TrainingDivergedError

EXIT_OK, EXIT_USAGE, EXIT_DATASET, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4

ALIASES = {
    "--strategy": "train.strategy",
    "--compression-mode": "train.compression_mode",
    "--seed": "train.seed",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML config file; flags override its values")
    parser.add_argument(
        "--desk-scale", action="store_true", help="start from the small-CPU preset instead of the full-scale defaults"
    )
    group = parser.add_argument_group("config keys (all optional; shown with defaults)")
    for alias, key in ALIASES.items():
        group.add_argument(alias, dest=key, metavar="VALUE", help=f"alias for --{key}")
    for key, default in flatten(Config().to_dict()).items():
        if isinstance(default, list):
            default = ",".join(str(v) for v in default)
        group.add_argument(f"--{key}", dest=key, metavar="VALUE", help=f"default: {default}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="anticomp", description="Compression-robust forgery detection experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write the synthetic splice dataset")
    p.add_argument("--out", help="output directory (default: data.root)")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    _add_config_flags(p)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--data", help="dataset root (default: data.root)")
    p.add_argument("--run-dir", help="run directory (default: run.out_dir/<timestamp>-<config hash>)")
    p.add_argument("--resume", help="checkpoint to resume from")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint over compression levels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset root (default: data.root)")
    p.add_argument("--split", default="test")
    p.add_argument("--levels", help="comma-separated levels, e.g. weak,strong,raw,75,50,20,10")
    p.add_argument("--out", help="write the report JSON here")
    _add_config_flags(p)

    p = sub.add_parser("ablate", help="run an ablation preset")
    p.add_argument("--preset", default="table4", choices=["table4", "table5"])
    p.add_argument("--data", help="dataset root (default: data.root)")
    p.add_argument("--run-root", help="directory for the ablation runs (default: run.out_dir)")
    _add_config_flags(p)

    p = sub.add_parser("report", help="render a comparison table from saved reports")
    p.add_argument("--runs", required=True, help="comma-separated report JSON files or run directories")
    p.add_argument("--names", help="comma-separated row names")
    p.add_argument("--out", help="also write the table records as JSON")
    return parser


def resolve_config(args: argparse.Namespace) -> Config:
    overrides = {}
    for key in flatten(Config().to_dict()):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    preset = DESK_SCALE if getattr(args, "desk_scale", False) else None
    return load_config(getattr(args, "config", None), overrides, preset)


def _print_config(cfg: Config) -> None:
    print("# effective config")
    print(dump_config(cfg).rstrip())
    print("# ---", flush=True)


def _manifests(root, cfg: Config):
    from anticomp.data import load_manifests, read_manifest_cache

    root = Path(root)
    if (root / "manifest.json").exists():
        return read_manifest_cache(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist (run `anticomp gen-data` first)")
    splits = [s for s in ("train", "val", "test") if (root / s).is_dir()]
    size = cfg.data.frame_size
    return load_manifests(root, (size, size), splits=splits)


def cmd_gen_data(args, cfg: Config) -> int:
    from anticomp.data import SynthConfig, is_writable_dir, synth_toy_dataset

    out = Path(args.out or cfg.data.root)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: {out} is not empty; pass --force to write into it", file=sys.stderr)
        return EXIT_IO
    if not is_writable_dir(out):
        raise OSError(f"cannot write to {out}")
    d = cfg.data
    synth = SynthConfig(d.n_clips, d.frames_per_clip, d.frame_size, d.artifact_strength, tuple(d.split_fractions))
    manifests = synth_toy_dataset(out, synth, seed=cfg.train.seed)
    for split, m in manifests.items():
        counts = m.label_counts()
        print(f"{split}: {len(m)} clips ({counts[0]} real, {counts[1]} fake), {m.num_frames} frames")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train(args, cfg: Config) -> int:
    from anticomp.eval import EvalSpec, evaluate
    from anticomp.train import default_run_dir, run_training

    manifests = _manifests(args.data or cfg.data.root, cfg)
    run_dir = Path(args.run_dir) if args.run_dir else default_run_dir(cfg)
    result = run_training(cfg, manifests, run_dir=run_dir, resume_from=args.resume)
    print(f"run dir: {result.run_dir}")
    print(f"best checkpoint: {result.best_checkpoint} (val {result.best_val:.4f})")
    if "test" in manifests:
        spec = EvalSpec(cfg.eval.levels, cfg.eval.aggregation, result.eval_branch)
        report = evaluate(result.best_checkpoint, manifests["test"], spec, config=cfg, batch_size=cfg.eval.batch_size)
        report.save(result.run_dir / "eval_test.json")
        _print_report(report)
    return EXIT_OK


def _print_report(report) -> None:
    from anticomp.eval import compare_runs

    print(compare_runs([report], [report.checkpoint_id]).render())


def cmd_eval(args, cfg: Config) -> int:
    from anticomp.eval import EvalSpec, evaluate
    from anticomp.train import bundle_from_checkpoint, eval_branch

    if not Path(args.checkpoint).is_file():
        print(f"error: checkpoint {args.checkpoint} not found", file=sys.stderr)
        return EXIT_IO
    manifests = _manifests(args.data or cfg.data.root, cfg)
    if args.split not in manifests:
        raise DatasetError(f"dataset has no {args.split!r} split")
    levels = args.levels.split(",") if args.levels else cfg.eval.levels
    bundle, trained_cfg = bundle_from_checkpoint(args.checkpoint)
    branch = "online" if cfg.eval.use_online_branch else eval_branch(trained_cfg)
    spec = EvalSpec(levels, cfg.eval.aggregation, branch)
    report = evaluate(bundle, manifests[args.split], spec, config=trained_cfg, batch_size=cfg.eval.batch_size)
    report.checkpoint_id = Path(args.checkpoint).parent.name
    _print_report(report)
    if args.out:
        report.save(args.out)
    return EXIT_OK


def cmd_ablate(args, cfg: Config) -> int:
    from anticomp.eval import compare_runs, run_ablation_matrix

    manifests = _manifests(args.data or cfg.data.root, cfg)
    cells = run_ablation_matrix(cfg, manifests, args.preset, run_root=args.run_root)
    done = [c for c in cells if c.report is not None]
    for c in cells:
        if c.error:
            print(f"cell {c.name} failed: {c.error}", file=sys.stderr)
    if done:
        print(compare_runs([c.report for c in done], [c.name for c in done]).render())
    return EXIT_OK if len(done) == len(cells) else EXIT_DIVERGED


def cmd_report(args) -> int:
    import json

    from anticomp.eval import EvalReport, compare_runs

    reports, names = [], []
    for item in [r for r in args.runs.split(",") if r]:
        path = Path(item)
        if path.is_dir():
            path = path / "eval_test.json"
        if not path.is_file():
            print(f"error: no report at {path}", file=sys.stderr)
            return EXIT_IO
        reports.append(EvalReport.load(path))
        names.append(Path(item).stem if Path(item).is_file() else Path(item).name)
    if args.names:
        names = args.names.split(",")
        if len(names) != len(reports):
            raise UsageError("--names must list one name per run")
    table = compare_runs(reports, names)
    print(table.render())
    if args.out:
        Path(args.out).write_text(json.dumps(table.to_records(), indent=1))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
        if args.command == "report":
            return cmd_report(args)
        cfg = resolve_config(args)
        _print_config(cfg)
        handler = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}[args.command]
        return handler(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except InvalidArgumentError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
