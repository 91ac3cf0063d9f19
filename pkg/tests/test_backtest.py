import math

import numpy as np
import pytest

from clusterapt.backtest import (
    TABLE1_METHODS,
    BacktestConfig,
    DailyErrorSeries,
    MethodSpec,
    ReportRow,
    aggregate_report,
    assign_clusters,
    daily_metrics,
    parse_method,
    read_daily,
    read_report,
    rebalance_schedule,
    run_backtest,
    valid_method_ids,
    write_daily,
    write_report,
)
from clusterapt.clustering import assignment_ari
from clusterapt.data import ReturnsPanel, SectorMap
from clusterapt.errors import MethodFailedError, NoObservationsError
from clusterapt.factors import PredictionErrors
from clusterapt.synthetic import WorldSpec, generate_market


def series(mid, rmse, mae=None):
    rmse = np.asarray(rmse, dtype=float)
    mae = rmse if mae is None else np.asarray(mae, dtype=float)
    dates = np.arange(len(rmse)).astype("datetime64[D]")
    return DailyErrorSeries(mid, dates, rmse, mae, np.ones(len(rmse), int), np.zeros((0, 0)), dates, ())


def world(seed=0, **kw):
    base = dict(n_stocks=30, n_clusters=3, n_days=160, idio_vol=0.5, seed=seed)
    base.update(kw)
    return generate_market(WorldSpec(**base))


def config(w, methods, weeks_before=4, **kw):
    dates = w.panel.dates
    kw.setdefault("k", w.spec.n_clusters)
    kw.setdefault("n_init", 3)
    return BacktestConfig(dates[5 * weeks_before + 2], dates[-1], tuple(methods), **kw)


# --- method ids and config ---------------------------------------------------------------


def test_method_ids_round_trip():
    ids = valid_method_ids()
    assert len(ids) == 18
    assert set(TABLE1_METHODS) <= set(ids)
    assert len(TABLE1_METHODS) == 17
    for mid in ids:
        assert parse_method(mid).method_id == mid
    assert parse_method("returns_hierarchical_12w") == MethodSpec("returns_hierarchical_12w", "returns", "hierarchical", 12)
    assert parse_method("embedding_4w_kmeans") == MethodSpec("embedding_4w_kmeans", "embedding", "kmeans", 4)
    for bad in ["nonsense", "returns_kmeans", "embedding_kmeans_4w", "returns_ward_4w"]:
        with pytest.raises(ValueError):
            parse_method(bad)


def test_method_spec_invariants():
    with pytest.raises(ValueError):
        MethodSpec("x", "gics", "kmeans")
    with pytest.raises(ValueError):
        MethodSpec("x", "returns", "none", 4)
    with pytest.raises(ValueError):
        MethodSpec("x", "returns", "kmeans", None)


def test_config_invariants():
    with pytest.raises(ValueError):
        BacktestConfig("2022-02-01", "2022-01-01", ("random",))
    with pytest.raises(ValueError):
        BacktestConfig("2022-01-01", "2022-02-01", ())
    with pytest.raises(ValueError):
        BacktestConfig("2022-01-01", "2022-02-01", ("random",), k=11, estimation_days=12)
    with pytest.raises(ValueError):
        BacktestConfig("2022-01-01", "2022-02-01", ("random", "random"))
    cfg = BacktestConfig("2022-01-01", "2022-02-01", ("random",))
    assert cfg.to_dict()["methods"] == ["random"]


# --- metrics ---------------------------------------------------------------------------------


def _errors(rows):
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    dates = np.datetime64("2022-01-03") + np.arange(len(rows))
    return PredictionErrors(dates, tuple(f"T{i}" for i in range(rows.shape[1])), rows)


def test_daily_metrics_examples():
    rmse, mae, n = daily_metrics(_errors([3.0, -4.0]), "2022-01-03")
    assert rmse == pytest.approx(math.sqrt(12.5), abs=1e-12)
    assert mae == 3.5
    assert n == 2
    assert daily_metrics(_errors([0.0, 0.0, 0.0]), "2022-01-03") == (0.0, 0.0, 3)


def test_daily_metrics_ignores_missing_and_errors_when_empty():
    assert daily_metrics(_errors([2.0, np.nan]), "2022-01-03") == (2.0, 2.0, 1)
    with pytest.raises(NoObservationsError):
        daily_metrics(_errors([np.nan, np.nan]), "2022-01-03")
    with pytest.raises(KeyError):
        daily_metrics(_errors([1.0]), "2022-01-04")


def test_daily_metrics_match_loop_oracle(rng):
    e = rng.normal(size=500) * 2
    rmse, mae, n = daily_metrics(_errors(e), "2022-01-03")
    sq = ab = 0.0
    for v in e:
        sq += v * v
        ab += abs(v)
    assert rmse == pytest.approx(math.sqrt(sq / 500), abs=1e-12)
    assert mae == pytest.approx(ab / 500, abs=1e-12)
    assert n == 500


# --- aggregation ---------------------------------------------------------------------------


def test_aggregate_average():
    (row,) = aggregate_report({"m": series("m", [2.0, 4.0])})
    assert row.avg_rmse == 3.0
    assert row.n_days == 2


def test_aggregate_order_matches_reference_table():
    # returns_hierarchical_12w averaged 1.963 and random 2.429 in the reference table
    rows = aggregate_report({
        "random": series("random", [2.429, 2.429]),
        "returns_hierarchical_12w": series("returns_hierarchical_12w", [1.963, 1.963]),
    })
    assert [r.method_id for r in rows] == ["returns_hierarchical_12w", "random"]
    assert rows[0].avg_rmse == pytest.approx(1.963)
    assert rows[1].avg_rmse == pytest.approx(2.429)


def test_aggregate_matches_sort_oracle(rng):
    for _ in range(20):
        vals = {f"m{i}": rng.random(5) for i in range(3)}
        rows = aggregate_report({m: series(m, v) for m, v in vals.items()})
        assert [r.method_id for r in rows] == sorted(vals, key=lambda m: vals[m].mean())


def test_report_and_daily_round_trip(tmp_path):
    s = {"a": series("a", [1.0, 2.0], [0.5, 1.5]), "b": series("b", [0.25])}
    rows = aggregate_report(s)
    write_report(rows, tmp_path / "r.csv")
    assert read_report(tmp_path / "r.csv") == rows
    write_daily(s, tmp_path / "d.csv")
    back = read_daily(tmp_path / "d.csv")
    np.testing.assert_array_equal(back["a"].mae, [0.5, 1.5])
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "method_id,avg_rmse,avg_mae,n_days,n_weeks_skipped"
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "date,method_id,rmse,mae,n_stocks"


# --- schedule ----------------------------------------------------------------------------------


def test_calendar_partition():
    w = world()
    cfg = config(w, ["random"])
    schedule = rebalance_schedule(w.panel, cfg)
    evaluated = np.concatenate([np.arange(a + 1, b) for a, b in schedule])
    assert len(evaluated) == len(set(evaluated.tolist()))
    assert np.all(np.diff(evaluated) == 1)
    bounds = set(w.panel.calendar.week_boundaries.tolist())
    for a, b in schedule:
        assert a in bounds
        assert cfg.start <= w.panel.dates[a] < cfg.end
        assert 1 <= b - a - 1 <= 5
    out = run_backtest(w.panel, None, None, cfg)["random"]
    assert len(set(out.dates.tolist())) == len(out.dates)
    assert set(out.dates.tolist()) <= set(w.panel.dates[evaluated].tolist())


# --- end-to-end properties ---------------------------------------------------------------------


def test_noiseless_two_factor_world():
    w = world(n_stocks=20, n_clusters=2, idio_vol=0.0, n_days=120)
    out = run_backtest(w.panel, None, None, config(w, ["returns_kmeans_4w"]))
    s = out["returns_kmeans_4w"]
    assert len(s.rmse) > 50
    assert np.all(s.rmse <= 1e-6)


def test_random_worse_than_returns_on_most_days():
    w = world(n_stocks=40, n_clusters=4, idio_vol=0.5, n_days=200)
    out = run_backtest(w.panel, None, None, config(w, ["returns_kmeans_4w", "random"]))
    r, q = out["returns_kmeans_4w"], out["random"]
    assert np.array_equal(r.dates, q.dates)
    assert np.mean(q.rmse > r.rmse) >= 0.95


def test_gics_equals_returns_when_sectors_match_blocks():
    w = world(idio_vol=0.1)
    cfg = config(w, ["returns_hierarchical_4w", "gics_sector_tracking"])
    schedule = rebalance_schedule(w.panel, cfg)
    for wk, _ in schedule:
        a = assign_clusters(cfg.methods[0], w.panel, w.panel.dates[wk], cfg)
        b = assign_clusters(cfg.methods[1], w.panel, w.panel.dates[wk], cfg, w.sector_map)
        assert assignment_ari(a, b) == 1.0
    out = run_backtest(w.panel, w.sector_map, None, cfg)
    np.testing.assert_allclose(out["returns_hierarchical_4w"].rmse, out["gics_sector_tracking"].rmse, atol=1e-6)


def test_rmse_dominates_mae_and_counts():
    w = world(seed=3)
    methods = ["returns_kmeans_1w", "returns_hierarchical_4w", "embedding_4w_kmeans", "gics_sector_tracking", "random"]
    out = run_backtest(w.panel, w.sector_map, w.embeddings, config(w, methods))
    for s in out.values():
        assert np.all(s.rmse >= s.mae)
        assert np.all(s.mae >= 0)
        assert np.all((s.n_stocks >= 1) & (s.n_stocks <= 30))
        finite = np.isfinite(s.per_stock_errors).sum(axis=1)
        assert finite[finite > 0].tolist() == s.n_stocks.tolist()


def test_determinism_and_jobs_invariance():
    w = world(seed=5)
    cfg = config(w, ["returns_kmeans_4w", "embedding_1w_hierarchical", "random"])
    a = run_backtest(w.panel, None, w.embeddings, cfg)
    b = run_backtest(w.panel, None, w.embeddings, cfg)
    c = run_backtest(w.panel, None, w.embeddings, cfg, jobs=2)
    for mid in a:
        for other in (b, c):
            np.testing.assert_array_equal(a[mid].rmse, other[mid].rmse)
            np.testing.assert_array_equal(a[mid].per_stock_errors, other[mid].per_stock_errors)


def test_truncation_does_not_change_earlier_metrics():
    w = world(seed=2)
    cfg = config(w, ["returns_hierarchical_4w", "random"])
    full = run_backtest(w.panel, None, None, cfg)
    cut_day = w.panel.dates[110]
    short = run_backtest(w.panel.truncate(cut_day), None, None, cfg)
    for mid in full:
        keep = full[mid].dates <= cut_day
        np.testing.assert_array_equal(full[mid].dates[keep], short[mid].dates)
        np.testing.assert_array_equal(full[mid].rmse[keep], short[mid].rmse)
        np.testing.assert_array_equal(full[mid].mae[keep], short[mid].mae)


def test_non_members_are_never_scored():
    w = world(seed=4)
    membership = np.ones(w.panel.returns.shape, dtype=bool)
    membership[:, :3] = False
    membership[80:, 5] = False
    panel = ReturnsPanel.from_arrays(w.panel.dates, w.panel.tickers, w.panel.returns, membership)
    out = run_backtest(panel, w.sector_map, None, config(w, ["returns_kmeans_4w", "gics_sector_tracking"]))
    for s in out.values():
        rows = np.searchsorted(panel.dates, s.error_dates)
        assert np.all(np.isnan(s.per_stock_errors[:, :3]))
        assert np.all(np.isnan(s.per_stock_errors[rows >= 80, 5]))


def test_unformable_method_fails():
    w = world()
    empty = SectorMap(())
    with pytest.raises(MethodFailedError):
        run_backtest(w.panel, empty, None, config(w, ["gics_sector_tracking"]))


def test_skipped_weeks_recorded():
    w = world(n_days=160)
    r = w.panel.returns.copy()
    # no data in weeks 10-12: correlation windows there fail the coverage gate
    r[50:65] = np.nan
    panel = ReturnsPanel.from_arrays(w.panel.dates, w.panel.tickers, r)
    out = run_backtest(panel, None, None, config(w, ["returns_kmeans_1w"]))["returns_kmeans_1w"]
    assert out.skipped_weeks
    assert all(isinstance(reason, str) and reason for _, reason in out.skipped_weeks)
    (row,) = aggregate_report({"returns_kmeans_1w": out})
    assert row.n_weeks_skipped == len(out.skipped_weeks)
