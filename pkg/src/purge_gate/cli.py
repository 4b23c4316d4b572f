"""``purge-gate`` command line.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from purge_gate import analysis, report as report_mod
from purge_gate.adapt import PurgeCandidateSet, Variant, tta_evaluate
from purge_gate.corruptions import CorruptionSpec, Kind, apply_corruption, describe
from purge_gate.data import load_split, make_dataset, save_split
from purge_gate.errors import ConfigError, FormatError, InvalidArgumentError, TrainingFailure
from purge_gate.model.network import forward
from purge_gate.model.save import load_weights, save_weights
from purge_gate.model.train import tokenize_dataset, train_source
from purge_gate.purge import SourceStats, StatsOrigin, collect_source_stats
from purge_gate.runconfig import RunConfig, derive_seed

log = logging.getLogger("purge_gate")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
BN_ALIASES = {"reset": "per_batch_reset", "frozen": "frozen", "per_batch_reset": "per_batch_reset"}
ORIGIN_ALIASES = {"embed": "embedding_output", "ln": "first_ln_input"}


def _candidates(text):
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _u64(text):
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out_dir", None) is not None:
        overrides["out_dir"] = args.out_dir
    if getattr(args, "corruption", None) is not None:
        overrides["corruption"] = args.corruption
    if getattr(args, "severity", None) is not None:
        overrides["severity"] = args.severity
    if getattr(args, "candidates", None) is not None:
        overrides["candidates"] = args.candidates
    if getattr(args, "variant", None) is not None:
        overrides["variant"] = Variant.parse(args.variant).value
    if getattr(args, "bn", None) is not None:
        overrides["bn"] = BN_ALIASES[args.bn]
    if getattr(args, "batch", None) is not None:
        overrides["batch_size"] = args.batch
    if getattr(args, "origin", None) is not None:
        overrides["stats_origin"] = ORIGIN_ALIASES.get(args.origin, args.origin)
    if getattr(args, "epochs", None) is not None:
        overrides["trainer"] = cfg.trainer.__class__(**{**cfg.trainer.to_dict(), "epochs": args.epochs})
    return cfg.override(**overrides)


def _split_path(path, default_dir, name):
    path = Path(path) if path else Path(default_dir) / "data" / f"{name}.npz"
    return path / f"{name}.npz" if path.is_dir() else path


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_gen_data(args, cfg: RunConfig):
    out = Path(cfg.out_dir) / "data"
    out.mkdir(parents=True, exist_ok=True)
    train, test = make_dataset(cfg.data, derive_seed(cfg.seed, "data"))
    save_split(out / "train.npz", train)
    save_split(out / "test.npz", test)
    _write_json(out / "meta.json", {"config_hash": cfg.hash(), "config": cfg.to_dict(),
                                    "n_train": len(train), "n_test": len(test)})
    log.info("wrote %d train / %d test clouds to %s", len(train), len(test), out)


def cmd_pretrain(args, cfg: RunConfig):
    train = load_split(_split_path(args.data, cfg.out_dir, "train"))
    test_path = _split_path(args.test, cfg.out_dir, "test")
    hyper = cfg.trainer.__class__(**{**cfg.trainer.to_dict(), "seed": derive_seed(cfg.seed, "init") % 2**32})
    weights = train_source(train, cfg.model, hyper)
    out = Path(args.out) if args.out else Path(cfg.out_dir) / "weights.pgw"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_weights(weights, out)
    summary = {"config_hash": cfg.hash(), "weights": str(out)}
    if test_path.exists():
        test = tokenize_dataset(load_split(test_path), cfg.model)
        logits = forward(test, weights, "frozen")
        summary["clean_test_accuracy"] = float(np.mean(logits.argmax(1) == np.array([s.label for s in test])))
        log.info("clean test accuracy %.4f", summary["clean_test_accuracy"])
    _write_json(out.with_suffix(".json"), summary)


def cmd_collect_stats(args, cfg: RunConfig):
    weights = load_weights(args.weights)
    train = tokenize_dataset(load_split(_split_path(args.data, cfg.out_dir, "train")), weights.config)
    stats = collect_source_stats(weights, train, StatsOrigin(cfg.stats_origin), batch_size=cfg.batch_size)
    weights.extras.update(stats.to_tensors())
    out = args.out or args.weights
    save_weights(weights, out)
    log.info("stored %s statistics from %d samples in %s", stats.origin.value, stats.n_samples, out)


def _corrupted_test(cfg, weights, data_path):
    clouds = load_split(_split_path(data_path, cfg.out_dir, "test"))
    base = derive_seed(cfg.seed, "corruption")
    if cfg.corruption != "none":
        clouds = [
            apply_corruption(c, CorruptionSpec(cfg.corruption, cfg.severity, derive_seed(base, "corruption", i)))
            for i, c in enumerate(clouds)
        ]
    return tokenize_dataset(clouds, weights.config)


def cmd_tta_eval(args, cfg: RunConfig):
    weights = load_weights(args.weights)
    variant = Variant.parse(cfg.variant)
    prototype = None
    if variant is Variant.PG_SP:
        holder = load_weights(args.stats) if args.stats else weights
        prototype = SourceStats.from_tensors(holder.extras)
    samples = _corrupted_test(cfg, weights, args.data)
    rep = tta_evaluate(
        weights, prototype, samples, PurgeCandidateSet(cfg.candidates), variant,
        batch_size=cfg.batch_size, bn_mode=None if args.bn is None and variant is Variant.SOURCE_ONLY else cfg.bn,
        corruption=cfg.corruption, severity=cfg.severity if cfg.corruption != "none" else 0,
        per_batch_selection=args.per_batch_selection, parallel_arms=args.parallel_arms,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rep.to_csv(out, header_comment=f"config_hash: {cfg.hash()}")
    summary = {**rep.summary(), "config_hash": cfg.hash(), "seed": cfg.seed}
    _write_json(out.with_suffix(".summary.json"), summary)
    print(f"{variant.value} {cfg.corruption}/{summary['severity']}: accuracy {rep.accuracy:.4f}")


def cmd_analyze(args, cfg: RunConfig):
    seed = derive_seed(cfg.seed, "analysis") % 2**32
    if args.what == "lipschitz":
        result = analysis.check_ln_lipschitz(d=args.d, n_pairs=args.pairs, sigma_min=args.sigma_min, seed=seed)
    elif args.what == "sphere":
        result = analysis.check_sphere_orthogonality(args.dims, n_pairs=args.pairs, seed=seed, control=True)
    else:
        if not args.weights:
            raise ConfigError(f"analyze {args.what} needs --weights")
        weights = load_weights(args.weights)
        if args.what == "uniformity":
            test = _corrupted_test(cfg.override(corruption="none"), weights, args.data)
            result = analysis.check_attention_uniformity(
                weights, test[: cfg.batch_size], replicates=args.replicates, seed=seed, check=False
            )
        else:
            holder = load_weights(args.stats) if args.stats else weights
            stats = SourceStats.from_tensors(holder.extras)
            samples = _corrupted_test(cfg, weights, args.data)
            result = analysis.purge_size_sweep(weights, stats, samples, batch_size=cfg.batch_size,
                                               bn_mode=cfg.bn, corruption=cfg.corruption)
    text = result.to_csv()
    header = f"# config_hash: {cfg.hash()}\n"
    if args.out:
        Path(args.out).write_text(header + text, encoding="utf-8")
    else:
        sys.stdout.write(header + text)
    if result.notes:
        log.info("%s", json.dumps({k: (v.item() if hasattr(v, "item") else v) for k, v in result.notes.items()}))


def cmd_report(args, cfg):
    table = report_mod.report(args.runs, args.out)
    sys.stdout.write(report_mod.table_csv(table))


def cmd_corruptions(args, cfg):
    json.dump(describe(), sys.stdout, indent=2)
    sys.stdout.write("\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="purge-gate", description=__doc__.splitlines()[0])
    parser.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run configuration JSON")
        p.add_argument("--seed", type=_u64)
        p.add_argument("--out-dir", dest="out_dir")
        return p

    common(sub.add_parser("gen-data", help="write synthetic train/test splits"))

    p = common(sub.add_parser("pretrain", help="train the source classifier"))
    p.add_argument("--data", help="train split (.npz) or directory")
    p.add_argument("--test", help="test split for the clean accuracy check")
    p.add_argument("--out", help="weights file to write")
    p.add_argument("--epochs", type=int)

    p = common(sub.add_parser("collect-stats", help="store source statistics in a weights file"))
    p.add_argument("--weights", required=True)
    p.add_argument("--data", help="train split (.npz) or directory")
    p.add_argument("--origin", choices=["embed", "ln", "embedding_output", "first_ln_input"])
    p.add_argument("--batch", type=int)
    p.add_argument("--out", help="defaults to updating --weights in place")

    p = common(sub.add_parser("tta-eval", help="test-time evaluation with token purging"))
    p.add_argument("--weights", required=True)
    p.add_argument("--stats", help="weights file holding pg.* statistics (default: --weights)")
    p.add_argument("--data", help="test split (.npz) or directory")
    p.add_argument("--variant", choices=["sp", "sf", "none", "pg_sp", "pg_sf", "source_only"])
    p.add_argument("--corruption", choices=[k.value for k in Kind])
    p.add_argument("--severity", type=int)
    p.add_argument("--candidates", type=_candidates)
    p.add_argument("--batch", type=int)
    p.add_argument("--bn", choices=sorted(BN_ALIASES))
    p.add_argument("--per-batch-selection", action="store_true")
    p.add_argument("--parallel-arms", action="store_true")
    p.add_argument("--out", required=True, help="per-sample CSV; a .summary.json goes next to it")

    p = common(sub.add_parser("analyze", help="attention/normalization checks and purge sweeps"))
    p.add_argument("what", choices=["lipschitz", "sphere", "uniformity", "sweep"])
    p.add_argument("--out")
    p.add_argument("--weights")
    p.add_argument("--stats")
    p.add_argument("--data")
    p.add_argument("--corruption", choices=[k.value for k in Kind])
    p.add_argument("--severity", type=int)
    p.add_argument("--bn", choices=sorted(BN_ALIASES))
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--sigma-min", dest="sigma_min", type=float, default=0.5)
    p.add_argument("--pairs", type=int, default=100_000)
    p.add_argument("--dims", type=_candidates, default=(2, 32, 100, 256))
    p.add_argument("--replicates", type=int, default=100)

    p = sub.add_parser("report", help="aggregate tta-eval summaries into one table")
    p.add_argument("runs", nargs="+", help="run directories or summary files")
    p.add_argument("--out", help="output prefix; writes PREFIX.json and PREFIX.csv")

    p = sub.add_parser("corruptions", help="corruption catalogue")
    p.add_argument("--describe", action="store_true", required=True)
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "collect-stats": cmd_collect_stats,
    "tta-eval": cmd_tta_eval,
    "analyze": cmd_analyze,
    "report": cmd_report,
    "corruptions": cmd_corruptions,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args) if args.command not in ("report", "corruptions") else None
        COMMANDS[args.command](args, cfg)
    except (ConfigError, InvalidArgumentError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except TrainingFailure as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
