import time
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

import oracles
from drivecorr.correlation import (
    CorrelationConfig,
    DegenerateSeriesError,
    PolicyFamilyTable,
    bootstrap_ci,
    correlate,
    pearson,
    scatter_rows,
    scatter_svg,
    spearman,
    write_scatter,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_pearson_examples():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    assert pearson(x, 2 * x + 1) == pytest.approx(1.0, abs=1e-15)
    assert pearson(x, -x) == pytest.approx(-1.0, abs=1e-15)
    assert pearson([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-15)


def test_spearman_examples():
    x = np.arange(1.0, 8.0)
    assert spearman(x, np.exp(x)) == pytest.approx(1.0, abs=1e-15)
    assert spearman(x, x[::-1]) == pytest.approx(-1.0, abs=1e-15)
    assert spearman([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-15)


def test_spearman_ties_get_mean_rank():
    x = [1, 2, 2, 3]
    y = [1, 2, 3, 4]
    assert spearman(x, y) == pytest.approx(oracles.pearson_two_pass(oracles.average_ranks(x), oracles.average_ranks(y)))


def test_degenerate_and_invalid_series():
    with pytest.raises(DegenerateSeriesError, match="degenerate series"):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(DegenerateSeriesError):
        spearman([1, 2, 3], [5, 5, 5])
    with pytest.raises(ValueError):
        pearson([1, 2], [1, 2])
    with pytest.raises(ValueError):
        pearson([1, 2, 3], [1, 2])
    with pytest.raises(ValueError):
        pearson([1, 2, np.nan], [1, 2, 3])


def test_pearson_matches_two_pass_oracle_on_random_vectors():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(3, 60))
        x, y = rng.normal(size=n) * rng.uniform(0.1, 10), rng.normal(size=n) + rng.uniform(-5, 5)
        assert pearson(x, y) == pytest.approx(oracles.pearson_two_pass(x.tolist(), y.tolist()), abs=1e-12)


@given(st.lists(st.tuples(finite, finite), min_size=3, max_size=30), st.floats(0.01, 100), finite)
def test_pearson_affine_invariance(pts, a, b):
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    assume(np.std(x) > 1e-3 and np.std(y) > 1e-3)
    r = pearson(x, y)
    assert pearson(a * x + b, y) == pytest.approx(r, abs=1e-9)
    assert pearson(-a * x + b, y) == pytest.approx(-r, abs=1e-9)


@given(st.lists(st.tuples(st.integers(-50, 50), st.integers(-50, 50)), min_size=3, max_size=30))
def test_spearman_monotone_invariance(pts):
    x = np.array([p[0] for p in pts], dtype=float)
    y = np.array([p[1] for p in pts], dtype=float)
    assume(np.ptp(x) > 0 and np.ptp(y) > 0)
    rho = spearman(x, y)
    assert spearman(np.exp(x / 10), y) == pytest.approx(rho, abs=1e-12)
    assert spearman(x, y**3 + 2 * y) == pytest.approx(rho, abs=1e-12)
    assert spearman(-x, y) == pytest.approx(-rho, abs=1e-12)


# -- bootstrap ----------------------------------------------------------------------------------------


def test_bootstrap_perfect_linear_data():
    x = np.arange(10.0)
    res = bootstrap_ci(x, 3 * x - 2, B=200, seed=1)
    assert res.lo == pytest.approx(1.0, abs=1e-12) and res.hi == pytest.approx(1.0, abs=1e-12)


def test_bootstrap_seed_determinism():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=20), rng.normal(size=20)
    for stat in ("pearson", "spearman"):
        assert bootstrap_ci(x, y, stat, 500, seed=11) == bootstrap_ci(x, y, stat, 500, seed=11)
    assert bootstrap_ci(x, y, B=500, seed=11) != bootstrap_ci(x, y, B=500, seed=12)


def oracle_bootstrap(x, y, B, seed, level=0.95):
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    idx = rng.integers(0, len(x), size=(B, len(x)))
    vals = []
    for row in idx:
        xs, ys = [x[i] for i in row], [y[i] for i in row]
        if len(set(xs)) < 2 or len(set(ys)) < 2:
            continue
        vals.append(oracles.pearson_two_pass(xs, ys))
    a = (1 - level) / 2
    return np.quantile(vals, [a, 1 - a]), B - len(vals)


def test_bootstrap_noisy_linear_matches_independent_resampler():
    rng = np.random.default_rng(7)
    x = rng.normal(size=30)
    y = x + rng.normal(size=30)
    res = bootstrap_ci(x, y, "pearson", 1000, seed=7)
    (lo, hi), skipped = oracle_bootstrap(x.tolist(), y.tolist(), 1000, 7)
    assert res.lo == pytest.approx(lo, abs=1e-12) and res.hi == pytest.approx(hi, abs=1e-12)
    assert res.skipped == skipped and res.used + res.skipped == 1000
    assert res.lo <= pearson(x, y) <= res.hi


def test_bootstrap_counts_collapsed_resamples():
    x = [0.0, 0.0, 0.0, 1.0]
    y = [0.0, 1.0, 2.0, 3.0]
    res = bootstrap_ci(x, y, B=1000, seed=2)
    (_, _), skipped = oracle_bootstrap(x, y, 1000, 2)
    assert res.skipped == skipped > 0


def test_bootstrap_preconditions():
    with pytest.raises(ValueError, match="B >= 100"):
        bootstrap_ci([1, 2, 3], [1, 2, 4], B=99)
    with pytest.raises(ValueError):
        bootstrap_ci([1, 2, 3], [1, 2, 4], stat="kendall")


# -- reports --------------------------------------------------------------------------------------------


def table(n=10, seed=0, n_off=3, n_on=2):
    rng = np.random.default_rng(seed)
    return PolicyFamilyTable(
        [f"p{i:02d}" for i in range(n)],
        [f"off{j}" for j in range(n_off)],
        [f"on{j}" for j in range(n_on)],
        rng.normal(size=(n, n_off)),
        rng.normal(size=(n, n_on)),
    )


def test_single_offline_metric_equal_to_online():
    y = np.array([0.1, 0.5, 0.3, 0.9])
    t = PolicyFamilyTable(list("abcd"), ["m"], ["driving_score"], y.reshape(-1, 1), y.reshape(-1, 1))
    rep = correlate(t, CorrelationConfig(B=200))
    assert len(rep.entries) == 1 and rep.entries[0].pearson == pytest.approx(1.0)


def test_report_is_invariant_to_row_order(tmp_path):
    t = table()
    order = np.random.default_rng(1).permutation(len(t.policies))
    shuffled = PolicyFamilyTable([t.policies[i] for i in order], t.offline_names, t.online_names, t.offline[order], t.online[order])
    cfg = CorrelationConfig("on0", B=300)
    correlate(t, cfg).to_csv(tmp_path / "a.csv")
    correlate(shuffled, cfg).to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_parallel_cells_match_serial():
    t = table(12, 4, 5, 3)
    cfg = CorrelationConfig("on1", B=300)
    assert correlate(t, cfg, jobs=1).rows() == correlate(t, cfg, jobs=4).rows()


def test_rows_sorted_by_abs_pearson_against_primary():
    t = table(15, 2, 6, 3)
    for primary in ("on0", "on2"):
        rep = correlate(t, CorrelationConfig(primary, B=200))
        keys = [abs(rep.get(o, primary).pearson) for o in rep.offline_order]
        assert keys == sorted(keys, reverse=True)
        assert [e.offline for e in rep.entries[:: len(t.online_names)]] == rep.offline_order


def test_entry_fields_and_ci_contains_point():
    rep = correlate(table(8, 5), CorrelationConfig("on0", B=200))
    for e in rep.entries:
        assert abs(e.pearson) <= 1 and e.ci_lo <= e.pearson <= e.ci_hi
        assert e.sign == (1 if e.pearson > 0 else -1) and e.abs_pearson == abs(e.pearson)
        assert e.n == 8 and e.status == "ok"


def test_degenerate_and_missing_columns_are_reported_not_dropped():
    t = table(6, 0, 2, 1)
    t.offline[:, 1] = 0.25
    t = t.with_offline("holey", [1.0, np.nan, 2.0, 3.0, 4.0, 5.0])
    rep = correlate(t, CorrelationConfig("on0", B=200))
    assert rep.get("off1", "on0").status == "degenerate offline column"
    assert rep.get("holey", "on0").status == "missing values"
    assert rep.offline_order[0] == "off0"
    assert len(rep.entries) == 3


def test_correlate_preconditions():
    with pytest.raises(ValueError, match="at least 3"):
        correlate(table(2), CorrelationConfig("on0", B=200))
    with pytest.raises(ValueError, match="primary"):
        correlate(table(5), CorrelationConfig("nope", B=200))
    with pytest.raises(ValueError, match="duplicate"):
        PolicyFamilyTable(["a", "a"], ["m"], ["n"], [[1], [2]], [[1], [2]])


def test_from_dicts_and_with_offline():
    off = {"b": {"m": 2.0}, "a": {"m": 1.0}, "c": {"m": None}}
    on = {"a": {"ds": 0.5}, "b": {"ds": 0.4}, "c": {"ds": 0.3}}
    t = PolicyFamilyTable.from_dicts(off, on)
    assert t.policies == ["a", "b", "c"] and np.isnan(t.offline_column("m")[2])
    with pytest.raises(ValueError):
        t.with_offline("m", [1, 2, 3])
    with pytest.raises(ValueError, match="different policies"):
        PolicyFamilyTable.from_dicts(off, {"a": {"ds": 1.0}})


def test_82_policy_table_shape_and_runtime():
    t = table(82, 9, 17, 9)
    t0 = time.perf_counter()
    rep = correlate(t, CorrelationConfig("on0"))
    elapsed = time.perf_counter() - t0
    assert len(rep.entries) == 17 * 9
    assert elapsed < 1.0, f"{elapsed:.2f} s"


def test_scatter_exports(tmp_path):
    t = table(5, 3)
    rows = scatter_rows(t, "off1", "on0")
    assert [r[2] for r in rows] == t.policies
    write_scatter(tmp_path / "s.csv", rows)
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "x,y,policy_id"
    svg = scatter_svg(rows, "off<1>", "on0", "t&t")
    root = ET.fromstring(svg)
    assert root.get("width") == "600" and root.get("height") == "400"
    assert len(root.findall("{http://www.w3.org/2000/svg}circle")) == 5
    assert scatter_svg(rows, "a", "b") == scatter_svg(rows, "a", "b")
