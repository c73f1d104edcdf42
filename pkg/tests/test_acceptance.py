"""Acceptance suite: every release gate with its stated tolerance.

Each test is one criterion; the terminal summary prints a PASS/FAIL line per
criterion (see conftest.py). Tolerances are pinned here, not configurable.
"""

import math
import random
import time
from dataclasses import replace

import numpy as np
import pytest

from panelpipe import econ, pipeline, synth
from panelpipe import extraction as ex
from panelpipe import quality as q
from panelpipe.config import load_config
from panelpipe.dedup import DedupContext, resolve_duplicates
from panelpipe.panel import PanelObservation, PopulationSeries
from panelpipe.tables import TableProvenance, parse_raw_csv, validate_structure

from test_dedup import oracle_resolve, random_scenario
from test_econ import ar_panel, dummy_ols, panel_from_rates, rand_sample, sandwich_oracle


@pytest.mark.criterion("structural validator: 20/20 hand labels in < 1 s")
def test_structural_validator_corpus():
    cases = synth.validator_corpus(seed=97)
    assert len(cases) == 20
    patterns = {c.pattern for c in cases}
    assert {"clean", "clean_blanks", "merged", "extra_cells", "empty"} <= patterns

    started = time.perf_counter()
    correct = 0
    for i, case in enumerate(cases):
        prov = TableProvenance(document_id=f"V{i:02d}", state="MI", year=1923,
                               page=1, ingestion_number=i + 1, model_id="fixture")
        report = validate_structure(parse_raw_csv(case.text, prov))
        correct += report.is_critical_failure == case.expected_critical
    elapsed = time.perf_counter() - started
    assert correct == 20
    assert elapsed < 1.0


@pytest.mark.criterion("ensemble law: mean/fallback/absent + commutative/idempotent")
def test_ensemble_law():
    # exhaustive over {present, absent}^2
    assert ex.ensemble_cell(None, None) is None
    assert ex.ensemble_cell(7, None) == 7
    assert ex.ensemble_cell(None, 7) == 7
    assert ex.ensemble_cell(100, 110) == 105

    rng = random.Random(20240)
    for _ in range(10_000):
        a = None if rng.random() < 0.25 else rng.randint(0, 10**6)
        b = None if rng.random() < 0.25 else rng.randint(0, 10**6)
        combined = ex.ensemble_cell(a, b)
        assert combined == ex.ensemble_cell(b, a)  # commutative
        if a is not None and b is not None:
            assert combined == (a + b) / 2.0
        else:
            assert combined == (a if a is not None else b)
        assert ex.ensemble_cell(a, a) == a  # idempotent on equal inputs


@pytest.mark.criterion("duplicate cascade: 100% oracle agreement on 1000+ scenarios")
def test_duplicate_cascade_oracle():
    rng = random.Random(9001)
    agree = 0
    total = 1200
    for _ in range(total):
        readings, ctx = random_scenario(rng)
        assert len(readings) <= 4
        if resolve_duplicates(readings, ctx) is oracle_resolve(readings, ctx):
            agree += 1
    assert agree == total


def _pop_obs(value):
    prov = TableProvenance(document_id="D", state="MI", year=1925, page=1,
                           ingestion_number=1, model_id="m")
    return PanelObservation(county_id="26001", state="MI", year=1925,
                            field="Total Vehicles", value=value, provenance=prov)


def _pair_obs(autos, total):
    prov = TableProvenance(document_id="D", state="MI", year=1925, page=1,
                           ingestion_number=1, model_id="m")
    return [
        PanelObservation(county_id="26001", state="MI", year=1925,
                         field="Automobiles", value=autos, provenance=prov),
        PanelObservation(county_id="26001", state="MI", year=1925,
                         field="Total Vehicles", value=total, provenance=prov),
    ]


def _dup_obs(values):
    out = []
    for i, v in enumerate(values):
        prov = TableProvenance(document_id=f"D{i}", state="MI", year=1925, page=1,
                               ingestion_number=i + 1, model_id="m")
        out.append(PanelObservation(county_id="26001", state="MI", year=1925,
                                    field="Total Vehicles", value=v, provenance=prov))
    return out


def _series_obs(values):
    out = []
    for i, v in enumerate(values):
        prov = TableProvenance(document_id=f"D{i}", state="MI", year=1920 + i,
                               page=1, ingestion_number=i + 1, model_id="m")
        out.append(PanelObservation(county_id="26001", state="MI", year=1920 + i,
                                    field="Total Vehicles", value=v, provenance=prov))
    return out


@pytest.mark.criterion("outlier boundaries: strict inequalities at 2.0/0.3/1.0/0.5")
def test_outlier_boundaries():
    up = lambda x: math.nextafter(x, math.inf)
    down = lambda x: math.nextafter(x, -math.inf)
    series = {"26001": PopulationSeries("26001", {1920: 1000.0, 1930: 1000.0})}

    # population ratio threshold 2.0
    assert q.detect_population_outliers([_pop_obs(2000.0)], series) == []
    assert q.detect_population_outliers([_pop_obs(down(2000.0))], series) == []
    assert len(q.detect_population_outliers([_pop_obs(up(2000.0))], series)) == 1
    assert len(q.detect_population_outliers([_pop_obs(2001.0)], series)) == 1

    # crossfield 0.3 and 1.0
    assert q.detect_crossfield_outliers(_pair_obs(300.0, 1000.0)) == []
    assert len(q.detect_crossfield_outliers(_pair_obs(down(300.0), 1000.0))) == 1
    assert q.detect_crossfield_outliers(_pair_obs(up(300.0), 1000.0)) == []
    assert q.detect_crossfield_outliers(_pair_obs(1000.0, 1000.0)) == []
    assert len(q.detect_crossfield_outliers(_pair_obs(up(1000.0), 1000.0))) == 1
    assert q.detect_crossfield_outliers(_pair_obs(down(1000.0), 1000.0)) == []
    assert len(q.detect_crossfield_outliers(_pair_obs(200.0, 1000.0))) == 1
    assert len(q.detect_crossfield_outliers(_pair_obs(1100.0, 1000.0))) == 1

    # duplicate stdev/median 0.5
    assert q.detect_duplicate_outliers(_dup_obs([100.0, 300.0])) == []
    assert len(q.detect_duplicate_outliers(_dup_obs([100.0, up(300.0)]))) == 1
    assert q.detect_duplicate_outliers(_dup_obs([100.0, down(300.0)])) == []
    assert len(q.detect_duplicate_outliers(_dup_obs([100.0, 400.0]))) == 1
    assert q.detect_duplicate_outliers(_dup_obs([100.0, 100.0])) == []

    # the three worked timeseries examples
    reversal = q.detect_timeseries_outliers(_series_obs([1000.0, 400.0, 1100.0]))
    assert any(f.detail["sub_rule"] == "reversal" and f.year == 1921
               for f in reversal)
    assert q.detect_timeseries_outliers(_series_obs([700.0, 700.0, 700.0])) == []
    first = q.detect_timeseries_outliers(_series_obs([600.0, 200.0, 210.0, 220.0]))
    assert [f.detail["sub_rule"] for f in first] == ["first_obs"]
    assert first[0].year == 1920


@pytest.mark.criterion("evaluation metrics: 20/30/50 fixture, identity R2, +20/+12.66")
def test_evaluation_metrics():
    gold = [q.GoldCell("T1", f"c{i}", "Automobiles", float(100 + i))
            for i in range(10)]
    extracted = {c.key: c.value for c in gold}
    extracted[gold[0].key] = None
    extracted[gold[1].key] = None
    for i in (2, 3, 4):
        extracted[gold[i].key] = gold[i].value + 13
    report = q.evaluate_against_gold(extracted, gold)
    assert report.missing_output_pct == pytest.approx(20.0, abs=1e-12)
    assert report.incorrect_output_pct == pytest.approx(30.0, abs=1e-12)
    assert report.total_error_rate_pct == pytest.approx(50.0, abs=1e-12)
    assert report.total_error_rate_pct == \
        report.missing_output_pct + report.incorrect_output_pct

    identity = q.evaluate_against_gold({c.key: c.value for c in gold}, gold)
    assert identity.r_squared_pct == 100.0

    slip_gold = [q.GoldCell("T1", "26031", "Trucks", 158.0)]
    slip = q.evaluate_against_gold({("T1", "26031", "Trucks"): 178.0}, slip_gold)
    assert slip.error_only.mean_error_units == pytest.approx(20.0, abs=1e-12)
    assert slip.error_only.mean_error_pct == pytest.approx(12.66, abs=0.01)


@pytest.mark.criterion("convergence harness: 50 points, exact final, shrinking spread")
def test_convergence_harness():
    extracted, gold = synth.synthetic_eval_fixture(
        n_tables=200, cells_per_table=40, error_rate=0.12, missing_rate=0.05,
        seed=515,
    )
    points = q.convergence_analysis(extracted, gold, folds=100, step=1, seed=515)
    assert len(points) == 50

    eval_tables = {p["n_tables"] for p in points}
    final = points[-1]["report"]
    # recompute the full evaluation split directly and compare bit-exactly
    table_ids = sorted({g.table_id for g in gold})
    rng = random.Random(515)
    shuffled = list(table_ids)
    rng.shuffle(shuffled)
    fold_of = {tid: i % 100 for i, tid in enumerate(shuffled)}
    eval_cells = [g for g in gold if fold_of[g.table_id] >= 50]
    direct = q.evaluate_against_gold(extracted, eval_cells)
    assert final == direct

    curve = [p["report"].total_error_rate_pct for p in points]
    assert np.std(curve[-10:]) < np.std(curve[:10])


@pytest.mark.criterion("econometrics: FWL 1e-8, CR1 oracle 1e-8, exact p=1, rho=0.7")
def test_econometrics():
    started = time.perf_counter()

    # absorb-then-OLS equals dummy OLS on 50 random instances <= 200 rows
    rng = np.random.default_rng(88)
    for _ in range(50):
        sample = rand_sample(rng, n_max=200)
        res = econ.estimate(sample)
        beta = dummy_ols(sample.y, sample.x[:, 0], sample.fe_factors)
        assert abs(res.slope - beta[0]) < 1e-8

    # CR1 clustered SEs match the longhand sandwich within 1e-8
    for _ in range(25):
        n = int(rng.integers(40, 200))
        clusters = rng.integers(0, 12, n)
        x = rng.normal(size=n)
        y = 0.8 * x + rng.normal(size=n) * (0.5 + clusters / 6.0)
        y_d, x_d = y - y.mean(), x - x.mean()
        res = econ.ols_cluster(y_d, x_d, clusters, y_pre=y)
        beta, se = sandwich_oracle(y_d, x_d, clusters)
        assert abs(res.slope - beta[0]) < 1e-8
        assert abs(res.slope_se - se[0]) < 1e-8

    # identical stacked datasets: equality p-value exactly 1.0
    rates, _ = ar_panel(0.6, seed=77, n_counties=300, states=15)
    panel = panel_from_rates(rates)
    pair = econ.persistence_spec(panel, panel_from_rates(dict(rates)), 1930)
    assert pair.equality_p == 1.0
    assert pair.equality_diff == 0.0

    # seeded DGP with rho = 0.7: recovered within 3 Monte-Carlo SEs
    rates, _ = ar_panel(0.7, seed=2024, n_counties=2000, states=40)
    panel = panel_from_rates(rates)
    fit = econ.persistence_spec(panel, panel, 1930)
    assert abs(fit.llm.slope - 0.7) < 3 * fit.llm.slope_se

    assert time.perf_counter() - started < 60.0


@pytest.mark.criterion("end-to-end determinism: byte-identical run directories")
def test_end_to_end_determinism(tmp_path):
    corpus = tmp_path / "corpus"
    synth.generate_corpus(corpus, seed=41)
    base = load_config(corpus / "config.json")
    cfg1 = replace(base, output_dir=tmp_path / "run1")
    cfg2 = replace(base, output_dir=tmp_path / "run2")
    pipeline.run_pipeline(cfg1)
    pipeline.run_pipeline(cfg2)

    files1 = sorted(p.relative_to(cfg1.output_dir)
                    for p in cfg1.output_dir.rglob("*") if p.is_file())
    files2 = sorted(p.relative_to(cfg2.output_dir)
                    for p in cfg2.output_dir.rglob("*") if p.is_file())
    assert files1 == files2
    for rel in files1:
        assert (cfg1.output_dir / rel).read_bytes() == \
            (cfg2.output_dir / rel).read_bytes(), str(rel)


@pytest.mark.criterion("cost report: 0.28 input share, batch halves exactly")
def test_cost_report():
    prices = {"model-a": (3.0, 3.0), "model-b": (3.0, 3.0)}
    usage = []
    for _ in range(9):
        usage.append(ex.UsageRecord("model-a", 2800, 7200))
        usage.append(ex.UsageRecord("model-b", 2800, 7200))
    report = ex.estimate_cost(usage, prices, n_tables=18)
    assert abs(report.input_share - 0.28) <= 0.001
    batch = ex.estimate_cost(usage, prices, n_tables=18, batch_mode=True)
    assert batch.total == report.total / 2.0
    assert batch.input_cost == report.input_cost / 2.0
    assert batch.output_cost == report.output_cost / 2.0
