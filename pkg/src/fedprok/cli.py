"""Command line entry point: ``python -m fedprok {run,suite,validate,attack} ...``.

Exit status is 0 on success, 1 when a config or run record fails validation and
2 when a run fails at runtime (including any failed run inside a suite).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigurationError, FedProKError
from .experiment import (DEFAULT_SEEDS, ExperimentConfig, emit_csv, emit_summary, load_config, load_configs,
                         run_experiment, run_suite, attack_round)
from .metrics import privacy_score, save_array

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_validate(args) -> int:
    configs = load_configs(args.config)
    for cfg in configs:
        print(f"ok  {cfg.run_id}  rounds={cfg.rounds} tasks={cfg.partition.num_tasks}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = _out_dir(args.out)
    try:
        rec = run_experiment(cfg)
    except FedProKError as exc:
        print(f"run {cfg.run_id} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    emit_csv([rec], out / "rounds.csv")
    emit_summary([rec], out / "summary.json")
    t = rec.trust
    print(f"{rec.run_id}: acc_all={rec.final_acc_all:.4f} U={_fmt(t.U)} P={_fmt(t.P)} E={t.E:.4g}s/round")
    print(f"wrote {out / 'rounds.csv'} and {out / 'summary.json'}")
    return EXIT_OK


def cmd_suite(args) -> int:
    configs = load_configs(args.config)
    seeds = args.seeds if args.seeds else list(DEFAULT_SEEDS)
    out = _out_dir(args.out)
    result = run_suite(configs, seeds, workers=args.workers)
    if result.records:
        emit_csv(result.records, out / "rounds.csv")
    emit_summary(result.records, out / "summary.json", result.aggregates, result.failures)
    for agg in result.aggregates:
        acc = agg["final_acc_all"]
        print(f"{agg['run_id']}: acc_all {acc['mean']:.4f} +/- {acc['std']:.4f} over seeds {agg['seeds']}")
    for f in result.failures:
        print(f"FAILED {f['run_id']}: {f['error']}", file=sys.stderr)
    return EXIT_RUNTIME if result.failures else EXIT_OK


def _config_from_record(path, index: int) -> ExperimentConfig:
    """Accept a summary file, a single run entry, or a bare config."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    if isinstance(doc, dict) and "runs" in doc:
        runs = doc["runs"]
        if not 0 <= index < len(runs):
            raise ConfigurationError(f"{path}: run index {index} outside [0, {len(runs)})")
        doc = runs[index]
    if isinstance(doc, dict) and "config" in doc:
        doc = doc["config"]
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: no config found")
    try:
        return ExperimentConfig.from_dict(doc).validate()
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def cmd_attack(args) -> int:
    cfg = _config_from_record(args.record, args.run_index)
    results = attack_round(cfg, args.round, args.client, args.target)
    report = {}
    for channel, res in results.items():
        report[channel] = {"mse": res.mse, "P": privacy_score(res.mse), "iterations": res.iterations_used,
                           "final_loss": res.losses[-1] if res.losses else None}
        print(f"{channel:9s} mse={res.mse:.6g} P={privacy_score(res.mse):.4f} iters={res.iterations_used}")
        if args.dump:
            stem = Path(args.dump)
            stem.parent.mkdir(parents=True, exist_ok=True)
            save_array(stem.with_name(f"{stem.name}.{channel}.bin"), res.reconstructed_input)
            save_array(stem.with_name(f"{stem.name}.truth.bin"), res.ground_truth)
    if args.json:
        print(json.dumps({"run_id": cfg.run_id, "round": args.round, "client": args.client, "channels": report}))
    return EXIT_OK


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedprok", description="Federated class-incremental simulations.")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a config file without running it")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("config")
    r.add_argument("--out", default="results", help="output directory (default: results)")
    r.add_argument("--seed", type=int, help="override seeds.master")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("suite", help="run configs x seeds and aggregate")
    s.add_argument("config")
    s.add_argument("--seeds", type=int, nargs="+", help=f"master seeds (default: {' '.join(map(str, DEFAULT_SEEDS))})")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", default="results")
    s.set_defaults(func=cmd_suite)

    a = sub.add_parser("attack", help="replay a run and attack one client at one round")
    a.add_argument("record", help="summary.json from `run`/`suite`, or a config file")
    a.add_argument("--round", type=int, required=True)
    a.add_argument("--client", type=int, required=True)
    a.add_argument("--target", type=int, default=0, help="index of the attacked sample draw")
    a.add_argument("--run-index", type=int, default=0, help="which run of a multi-run summary")
    a.add_argument("--dump", help="path stem for reconstructed arrays (.bin)")
    a.add_argument("--json", action="store_true", help="also print a JSON report")
    a.set_defaults(func=cmd_attack)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "workers", 1) < 1:
            parser.error("--workers must be >= 1")
    except SystemExit as exc:
        # argparse uses 2 for usage errors; here 2 means a failed run
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FedProKError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
