"""Command-line entry point: ``denoise-rank <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import io
from .config import ConfigError, ExperimentConfig, load_config, parse_kv
from .evaluation import METRICS, degradation_count, evaluate, fisher_randomization_test, format_ratio
from .experiment import ModelSpec, compare
from .gradients import trainable_params
from .rerank import FusionConfig
from .synth import PRESETS, SynthConfig, generate, profile_stats
from .training import TrainingDiverged, train
from .tuning import grid_search, run_for
from .types import Dataset

log = logging.getLogger("denoise_rank")


def _dataset(cfg: ExperimentConfig, run_path=None) -> Dataset:
    if cfg.dataset is None:
        raise ConfigError("config needs 'dataset = DIR'")
    return io.load_dataset(cfg.dataset, run_path=run_path or cfg.run, qrels_path=cfg.qrels)


def _split_or_all(ds: Dataset, name: str) -> Dataset:
    if any(s == name for s in ds.splits.values()):
        return ds.split(name)
    log.warning("no %r split; using all %d queries", name, len(ds.queries))
    return ds


def _attention(cfg: ExperimentConfig, ds: Dataset):
    """Attention config (from the parameter file if given) and fusion, if stored."""
    if cfg.params is not None:
        attn, fusion, _, _ = io.load_params(cfg.params)
        return attn, fusion
    return cfg.attention(ds.dim), None


def _out_dir(cfg: ExperimentConfig) -> Optional[Path]:
    if cfg.output_dir is None:
        return None
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    return cfg.output_dir


def _load(args) -> ExperimentConfig:
    overrides = {"seed": str(args.seed)} if args.seed is not None else None
    return load_config(args.config, overrides)


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    values = parse_kv(Path(args.config).read_text(encoding="utf-8"), args.config) if args.config else {}
    preset = args.preset or values.pop("preset", None)
    values.pop("preset", None)
    scale = float(values.pop("scale", 0.25))
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        base = PRESETS[preset](scale)
        config = SynthConfig.from_mapping({**base.to_dict(), **values})
    else:
        config = SynthConfig.from_mapping(values)
    ds = generate(config)
    io.save_dataset(ds, args.out)
    (Path(args.out) / "synth_config.json").write_text(json.dumps(config.to_dict(), indent=1) + "\n")
    stats = profile_stats(ds)
    print(f"wrote {len(ds.queries)} queries, {len(ds.profiles)} users to {args.out} "
          f"(user docs {stats['user_docs_mean']:.2f} +- {stats['user_docs_std']:.2f})")
    return 0


def cmd_train(args) -> int:
    cfg = _load(args)
    ds = _dataset(cfg)
    attn, fusion = _attention(cfg, ds)
    trace: List[float] = []
    if trainable_params(attn):
        try:
            result = train(_split_or_all(ds, "train"), cfg.training, attn)
        except TrainingDiverged as exc:
            out = _out_dir(cfg)
            if out is not None:
                io.save_params(out / "params.diverged.json", attn, fusion, exc.trace)
            raise
        attn, trace = result.attn, result.loss_trace
        print(f"trained {attn.variant.value} for {len(trace)} epochs; final loss {trace[-1]:.6f}")
    else:
        print(f"{attn.variant.value} with {attn.alignment.value} has no trainable parameters")
    out = _out_dir(cfg)
    if out is not None:
        io.save_params(out / "params.json", attn, fusion or cfg.fusion, trace)
        print(f"wrote {out / 'params.json'}")
    return 0


def cmd_tune(args) -> int:
    cfg = _load(args)
    ds = _dataset(cfg)
    attn, _ = _attention(cfg, ds)
    # without threshold tuning the trained (or configured) threshold is kept
    thresholds = cfg.grid_threshold if cfg.tune_threshold else (attn.threshold,)
    result = grid_search(_split_or_all(ds, "val"), cfg.grid_lambda, thresholds, attn,
                         cfg.metric, cfg.normalize_first_stage)
    sys.stdout.write(result.to_tsv(cfg.metric))
    thr = "-" if result.best_threshold is None else f"{result.best_threshold:g}"
    print(f"# best lambda={result.best_lambda:g} threshold={thr} {cfg.metric}={result.best_score:.6f}")
    out = _out_dir(cfg)
    if out is not None:
        (out / "grid.tsv").write_text(result.to_tsv(cfg.metric))
        tuned = attn if result.best_threshold is None else attn.with_threshold(result.best_threshold)
        trace = io.load_params(cfg.params)[2] if cfg.params is not None else []
        io.save_params(out / "params.tuned.json", tuned,
                       FusionConfig(result.best_lambda, cfg.normalize_first_stage), trace)
    return 0


def cmd_rerank(args) -> int:
    cfg = _load(args)
    ds = _dataset(cfg, run_path=Path(args.run))
    attn, fusion = _attention(cfg, ds)
    fusion = fusion or cfg.fusion
    missing = sorted({q.user_id for q in ds.queries} - set(ds.profiles))
    if missing:
        raise ValueError(f"no profile for user(s) {', '.join(missing[:5])}")
    qids = [q.query_id for q in ds.queries if q.query_id in ds.candidates]
    run = run_for(ds, attn, fusion, qids, tag=args.tag or attn.variant.value)
    io.write_run(args.out, run)
    print(f"wrote {len(run)} queries to {args.out} (lambda={fusion.lam:g})")
    return 0


def cmd_evaluate(args) -> int:
    qrels = io.load_qrels(args.qrels)
    run = io.load_run(args.run)
    report = evaluate(run, qrels)
    if args.per_query:
        for qid in report.per_query:
            vals = "\t".join(f"{report.values(m, [qid])[0]:.6f}" for m in METRICS)
            print(f"{qid}\t{vals}")
    for m in METRICS:
        print(f"{m}\tall\t{report.means[m]:.6f}")
    if report.excluded:
        print(f"# {len(report.excluded)} run queries without relevant judgments excluded")
    if args.baseline:
        base = evaluate(io.load_run(args.baseline), qrels)
        qids = [q for q in report.per_query if q in base.per_query]
        if not qids:
            raise ValueError("run and baseline share no evaluable query")
        for m in METRICS:
            a, b = report.values(m, qids), base.values(m, qids)
            sig = fisher_randomization_test(a, b, args.iterations, args.alpha, args.comparisons, args.seed or 0, m)
            count, ratio = degradation_count(b, a)
            mark = "significant" if sig.significant else "n.s."
            print(f"{m}\tdiff={sig.mean_difference:+.6f}\tp={sig.p_value:.6f}\t"
                  f"alpha'={sig.corrected_alpha:g}\t{mark}\tdegraded={count} ({format_ratio(ratio)})")
    return 0


def cmd_compare(args) -> int:
    cfgs = []
    for path in args.configs:
        overrides = {"seed": str(args.seed)} if args.seed is not None else None
        cfgs.append(load_config(path, overrides))
    first = cfgs[0]
    if any(c.dataset != first.dataset for c in cfgs):
        raise ConfigError("all compared configs must use the same dataset")
    ds = _dataset(first)
    specs = []
    for c in cfgs:
        attn, _ = _attention(c, ds)
        specs.append(ModelSpec(c.name, attn, train=args.train))
    result = compare(
        ds, specs, training=first.training if args.train else None,
        grid_lambda=first.grid_lambda, grid_threshold=first.grid_threshold, metric=first.metric,
        normalize=first.normalize_first_stage, alpha=first.alpha, iterations=first.iterations,
        seed=first.seed,
    )
    table = result.to_tsv()
    sys.stdout.write(table)
    out = _out_dir(first)
    if out is not None:
        (out / "compare.tsv").write_text(table)
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="denoise-rank", description="Personalized re-ranking with user-model attention.")
    p.add_argument("--seed", type=int, default=None, help="overrides the seed of every config")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config", help="key = value file of generator options (may set 'preset' and 'scale')")
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train user-model parameters")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("tune", help="grid search lambda and the threshold on the validation split")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_tune)

    s = sub.add_parser("rerank", help="write a personalized run")
    s.add_argument("--config", required=True)
    s.add_argument("--run", required=True, help="first-stage TREC run to re-rank")
    s.add_argument("--out", required=True)
    s.add_argument("--tag", default=None)
    s.set_defaults(func=cmd_rerank)

    s = sub.add_parser("evaluate", help="metrics, significance and degradation counts")
    s.add_argument("--run", required=True)
    s.add_argument("--qrels", required=True)
    s.add_argument("--baseline")
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--comparisons", type=int, default=1)
    s.add_argument("--iterations", type=int, default=100_000)
    s.add_argument("--per-query", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("compare", help="fit, tune and test several models on one dataset")
    s.add_argument("--configs", nargs="+", required=True)
    s.add_argument("--no-train", dest="train", action="store_false", help="skip training, only grid-tune")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, io.FormatError, ValueError, KeyError, OSError, TrainingDiverged) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"denoise-rank {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
