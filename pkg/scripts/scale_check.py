"""Time the full 17-method roster on a 500-stock, 3-year synthetic market.

    python3 scripts/scale_check.py [--stocks 500] [--days 756] [--jobs N]
"""
import argparse
import os
import time

from clusterapt.backtest import TABLE1_METHODS, BacktestConfig, aggregate_report, run_backtest
from clusterapt.synthetic import WorldSpec, generate_market


def run(stocks=500, days=756, jobs=None, seed=0):
    jobs = jobs or os.cpu_count() or 1
    t0 = time.perf_counter()
    world = generate_market(WorldSpec(n_stocks=stocks, n_clusters=11, n_days=days, seed=seed))
    dates = world.panel.dates
    start = dates[0] + (7 * 24)  # room for the longest lookback
    cfg = BacktestConfig(start, dates[-1], TABLE1_METHODS, k=11, seed=seed)
    series = run_backtest(world.panel, world.sector_map, world.embeddings, cfg, jobs=jobs)
    rows = aggregate_report(series)
    return rows, time.perf_counter() - t0, jobs


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--stocks", type=int, default=500)
    ap.add_argument("--days", type=int, default=756)
    ap.add_argument("--jobs", type=int)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    rows, elapsed, jobs = run(a.stocks, a.days, a.jobs, a.seed)
    for r in rows:
        print(f"{r.method_id:28s} {r.avg_rmse:.4f} {r.avg_mae:.4f} {r.n_days}")
    print(f"{a.stocks} stocks x {a.days} days x {len(rows)} methods: {elapsed:.1f} s with {jobs} worker(s)")


if __name__ == "__main__":
    main()
