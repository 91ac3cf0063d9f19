"""Command-line entry point: ``clusterapt {generate,preprocess,backtest,ttest,report}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Option precedence
is flags, then the JSON ``--config`` file, then built-in defaults.
"""
from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .backtest import (
    LOOKBACKS,
    TABLE1_METHODS,
    BacktestConfig,
    aggregate_report,
    parse_method,
    read_errors,
    read_report,
    run_backtest,
    valid_method_ids,
    write_daily,
    write_errors,
    write_report,
    write_skips,
)
from .data import (
    IngestConfig,
    atomic_write,
    load_embeddings,
    load_headlines,
    load_returns,
    load_sector_map,
    write_embeddings,
)
from .errors import ClusterAPTError
from .similarity import (
    DEFAULT_DEDUP_THRESHOLD,
    embed_documents,
    filter_headlines,
    load_exclusions,
    tfidf_dedup,
    weekly_concat,
)
from .rng import derive_seed
from .stats import TTEST_HEADER, append_ttest, paired_t_test
from .synthetic import WorldSpec, generate_headlines, generate_market, write_world

log = logging.getLogger("clusterapt")

DEFAULTS = {
    "seed": 0,
    "jobs": 1,
    # generate
    "stocks": 100,
    "clusters": 11,
    "days": 756,
    "factor_vol": 1.0,
    "idio_vol": 1.0,
    "beta_lo": 0.5,
    "beta_hi": 1.5,
    "migration_rate": 0.0,
    "market_vol": 0.0,
    "embedding_dim": 32,
    "embedding_noise": 1.0,
    "start_date": "2022-01-03",
    # preprocess
    "dedup_threshold": DEFAULT_DEDUP_THRESHOLD,
    "dim": 64,
    # backtest
    "methods": ",".join(TABLE1_METHODS),
    "k": 11,
    "estimation_days": 21,
    "n_init": 10,
    "max_iterations": 300,
    "linkage": "average",
    "weighting": "equal",
    "start": None,
    "end": None,
}


class UsageError(Exception):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _resolve(args, config: dict, name: str):
    value = getattr(args, name, None)
    if value is not None:
        return value
    if name in config:
        return config[name]
    return DEFAULTS[name]


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=default, help="base seed for every random component")
    p.add_argument("--jobs", type=int, default=default, help="worker processes for the backtest")
    p.add_argument("--config", default=default, help="JSON file of option defaults")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clusterapt", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic market with planted clusters")
    _global_flags(g, suppress=True)
    g.add_argument("--stocks", type=int)
    g.add_argument("--clusters", type=int)
    g.add_argument("--days", type=int)
    g.add_argument("--factor-vol", type=float)
    g.add_argument("--idio-vol", type=float)
    g.add_argument("--beta-lo", type=float)
    g.add_argument("--beta-hi", type=float)
    g.add_argument("--migration-rate", type=float)
    g.add_argument("--market-vol", type=float)
    g.add_argument("--embedding-dim", type=int)
    g.add_argument("--embedding-noise", type=float)
    g.add_argument("--start-date")
    g.add_argument("--headlines", action="store_true", help="also write a synthetic headlines.csv")
    g.add_argument("--out", required=True)

    p = sub.add_parser("preprocess", help="headlines -> weekly documents -> embeddings CSV")
    _global_flags(p, suppress=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--headlines", help="headlines CSV")
    src.add_argument("--embeddings", help="precomputed embeddings CSV to validate and pass through")
    p.add_argument("--exclude", help="article types to drop, one per line")
    p.add_argument("--dedup-threshold", type=float)
    p.add_argument("--dim", type=int, help="stub embedding dimension")
    p.add_argument("--out", required=True)

    b = sub.add_parser("backtest", help="weekly roll-forward evaluation")
    _global_flags(b, suppress=True)
    b.add_argument("--data", help="directory with returns.csv, sectors.csv, embeddings.csv[, membership.csv]")
    b.add_argument("--returns")
    b.add_argument("--membership")
    b.add_argument("--sectors")
    b.add_argument("--embeddings")
    b.add_argument("--methods", help="comma-separated method ids, 'table1' or 'all'")
    b.add_argument("--start")
    b.add_argument("--end")
    b.add_argument("--k", type=int)
    b.add_argument("--estimation-days", type=int)
    b.add_argument("--n-init", type=int)
    b.add_argument("--max-iterations", type=int)
    b.add_argument("--linkage", choices=["average", "complete", "single"])
    b.add_argument("--weighting", choices=["equal", "value"])
    b.add_argument("--out", required=True)

    t = sub.add_parser("ttest", help="paired t-test of two methods from a backtest run")
    _global_flags(t, suppress=True)
    t.add_argument("--run", required=True, help="backtest output directory")
    t.add_argument("--a", required=True, dest="method_a")
    t.add_argument("--b", required=True, dest="method_b")

    r = sub.add_parser("report", help="print the aggregate table of a backtest run")
    _global_flags(r, suppress=True)
    r.add_argument("--run", required=True)
    return parser


def cmd_generate(args, config) -> int:
    try:
        spec = WorldSpec(
            n_stocks=_resolve(args, config, "stocks"),
            n_clusters=_resolve(args, config, "clusters"),
            n_days=_resolve(args, config, "days"),
            factor_vol=_resolve(args, config, "factor_vol"),
            idio_vol=_resolve(args, config, "idio_vol"),
            beta_range=(_resolve(args, config, "beta_lo"), _resolve(args, config, "beta_hi")),
            migration_rate=_resolve(args, config, "migration_rate"),
            seed=_resolve(args, config, "seed"),
            market_vol=_resolve(args, config, "market_vol"),
            embedding_dim=_resolve(args, config, "embedding_dim"),
            embedding_noise=_resolve(args, config, "embedding_noise"),
            start=_resolve(args, config, "start_date"),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    world = generate_market(spec)
    headlines = generate_headlines(world, seed=derive_seed(spec.seed, "headlines")) if args.headlines else None
    for path in write_world(world, args.out, headlines):
        print(path)
    return 0


def cmd_preprocess(args, config) -> int:
    out = Path(args.out)
    if args.embeddings:
        write_embeddings(load_embeddings(args.embeddings), out)
        print(out)
        return 0
    threshold = _resolve(args, config, "dedup_threshold")
    dim = _resolve(args, config, "dim")
    if not threshold > 0:
        raise UsageError("--dedup-threshold must be > 0")
    if dim < 2:
        raise UsageError("--dim must be >= 2")
    excluded = load_exclusions(args.exclude) if args.exclude else set()
    records = load_headlines(args.headlines)
    kept = tfidf_dedup(filter_headlines(records, excluded), threshold)
    docs = weekly_concat(kept)
    series = embed_documents(docs, dim, derive_seed(_resolve(args, config, "seed"), "stub_embed"))
    write_embeddings(series, out)
    print(f"{len(records)} headlines -> {len(kept)} kept -> {len(docs)} weekly documents -> {out}")
    return 0


def _method_list(text: str) -> list[str]:
    if text == "table1":
        return list(TABLE1_METHODS)
    if text == "all":
        return valid_method_ids()
    ids = [m.strip() for m in text.split(",") if m.strip()]
    bad = []
    for m in ids:
        try:
            spec = parse_method(m)
        except ValueError:
            bad.append(m)
            continue
        if spec.lookback_weeks is not None and spec.lookback_weeks not in LOOKBACKS:
            bad.append(m)
    if bad or not ids:
        raise UsageError(
            f"unknown method id(s): {', '.join(bad) or '(none given)'}; valid ids: {', '.join(valid_method_ids())}"
        )
    return ids


def _input_paths(args) -> dict:
    data = Path(args.data) if args.data else None

    def pick(flag, name, required):
        if flag:
            return Path(flag)
        if data is not None and (data / name).exists():
            return data / name
        if required:
            raise FileNotFoundError(f"{name} not found (use --data or --{name.split('.')[0]})")
        return None

    return {
        "returns": pick(args.returns, "returns.csv", True),
        "membership": pick(args.membership, "membership.csv", False),
        "sectors": pick(args.sectors, "sectors.csv", False),
        "embeddings": pick(args.embeddings, "embeddings.csv", False),
    }


def cmd_backtest(args, config) -> int:
    raw = _resolve(args, config, "methods")
    methods = _method_list(",".join(raw) if isinstance(raw, list) else raw)
    paths = _input_paths(args)
    panel = load_returns(paths["returns"], IngestConfig(membership_path=paths["membership"]))
    smap = load_sector_map(paths["sectors"]) if paths["sectors"] else None
    emb = load_embeddings(paths["embeddings"]) if paths["embeddings"] else None
    specs = [parse_method(m) for m in methods]
    if smap is None and any(s.family == "gics" for s in specs):
        raise FileNotFoundError("gics method requested but no sectors.csv given")
    if emb is None and any(s.family == "embedding" for s in specs):
        raise FileNotFoundError("embedding method requested but no embeddings.csv given")

    start = _resolve(args, config, "start")
    end = _resolve(args, config, "end")
    dates = panel.dates
    if start is None:
        max_lb = max([s.lookback_weeks or 1 for s in specs])
        start = dates[0] + np.timedelta64(7 * max_lb, "D")
    if end is None:
        end = dates[-1]
    try:
        cfg = BacktestConfig(
            start=start,
            end=end,
            methods=tuple(specs),
            k=_resolve(args, config, "k"),
            estimation_days=_resolve(args, config, "estimation_days"),
            seed=_resolve(args, config, "seed"),
            n_init=_resolve(args, config, "n_init"),
            max_iterations=_resolve(args, config, "max_iterations"),
            linkage=_resolve(args, config, "linkage"),
            weighting=_resolve(args, config, "weighting"),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    jobs = _resolve(args, config, "jobs")
    if jobs < 1:
        raise UsageError("--jobs must be >= 1")

    series = run_backtest(panel, smap, emb, cfg, jobs=jobs)
    out = Path(args.out)
    rows = aggregate_report(series)
    write_errors(series, out)
    write_daily(series, out / "daily.csv")
    write_skips(series, out / "skips.csv")
    write_report(rows, out / "report.csv")

    resolved = cfg.to_dict()
    manifest = {
        "config_hash": hashlib.sha256(json.dumps(resolved, sort_keys=True).encode()).hexdigest(),
        "config": resolved,
        "input_digests": {k: sha256_file(p) for k, p in paths.items() if p is not None},
        "report_digest": sha256_file(out / "report.csv"),
        "tool_version": __version__,
        "timestamp": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
    }
    with atomic_write(out / "manifest.json") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    _print_report(rows, series_skips={m: len(s.skipped_weeks) for m, s in series.items()})
    return 0


def _print_report(rows, series_skips=None) -> None:
    width = max(len(r.method_id) for r in rows)
    print(f"{'method':<{width}}  {'RMSE':>8}  {'MAE':>8}  {'days':>5}")
    for r in rows:
        print(f"{r.method_id:<{width}}  {r.avg_rmse:8.4f}  {r.avg_mae:8.4f}  {r.n_days:5d}")
    skipped = {r.method_id: r.n_weeks_skipped for r in rows if r.n_weeks_skipped}
    if skipped:
        print("skipped weeks (excluded from averages): " + ", ".join(f"{m}={n}" for m, n in sorted(skipped.items())))
    else:
        print("skipped weeks: none")


def cmd_ttest(args, config) -> int:
    run = Path(args.run)
    a = read_errors(run, args.method_a)
    b = read_errors(run, args.method_b)
    res = paired_t_test(a, b, args.method_a, args.method_b)
    print(",".join(TTEST_HEADER))
    print(",".join(str(x) for x in res.row()))
    print(f"# p = {res.p_text()}" + (" (zero variance of differences)" if res.zero_variance else ""))
    append_ttest(res, run / "ttest.csv")
    return 0


def cmd_report(args, config) -> int:
    run = Path(args.run)
    rows = read_report(run / "report.csv")
    _print_report(rows)
    tt = run / "ttest.csv"
    if tt.exists():
        print(tt.read_text(encoding="utf-8"), end="")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "preprocess": cmd_preprocess,
    "backtest": cmd_backtest,
    "ttest": cmd_ttest,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    config = {}
    if args.config:
        try:
            config = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            print(f"clusterapt: cannot read config: {exc}", file=sys.stderr)
            return 1
        config = {k.replace("-", "_"): v for k, v in config.items()}
    try:
        return COMMANDS[args.command](args, config)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"clusterapt {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ClusterAPTError, OSError, ValueError) as exc:
        print(f"clusterapt {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
