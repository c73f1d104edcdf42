"""Fixed-effects OLS with cluster-robust inference, the two panel
specifications, and the stacked coefficient-equality test.

Fixed effects are absorbed by alternating within-group demeaning (exact in
one sweep for a single factor); slopes then come from the demeaned normal
equations. Standard errors are CR1 cluster-robust with a t(G-1) reference
distribution. The equality test stacks both datasets, interacts the regressor
and every fixed-effect factor with a dataset indicator, clusters at the
county level across datasets, and Wald-tests the slope difference.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy import stats

from . import kernels
from .panel import TOTAL_VEHICLES, PanelObservation

logger = logging.getLogger(__name__)

__all__ = [
    "AbsorptionError",
    "DegenerateRegressor",
    "SampleError",
    "RegressionSample",
    "RegressionResult",
    "SpecPair",
    "absorb_fixed_effects",
    "ols_cluster",
    "stacked_equality_test",
    "panel_log_rates",
    "persistence_spec",
    "popgrowth_spec",
    "render_results_table",
    "PERSISTENCE_END_YEARS",
]

PERSISTENCE_END_YEARS = (1930, 1940, 1950, 1960)

ABSORB_TOL = 1e-10
ABSORB_MAX_SWEEPS = 10_000


class AbsorptionError(Exception):
    def __init__(self, residual: float, sweeps: int):
        super().__init__(f"demeaning did not converge after {sweeps} sweeps "
                         f"(residual {residual:.3e})")
        self.residual = residual
        self.sweeps = sweeps


class DegenerateRegressor(Exception):
    """No within-group variance left in a regressor after absorption."""


class SampleError(Exception):
    """The requested specification has no usable common sample."""


@dataclass(frozen=True)
class RegressionSample:
    """Rows ready for estimation: outcome, regressors, FE labels, clusters."""

    y: np.ndarray
    x: np.ndarray  # (n, k)
    cluster: np.ndarray  # labels, any hashable dtype
    fe_factors: tuple  # tuple of label arrays
    tag: str = ""

    def __post_init__(self):
        if self.x.ndim == 1:
            object.__setattr__(self, "x", self.x[:, None])
        n = len(self.y)
        if self.x.shape[0] != n or len(self.cluster) != n:
            raise ValueError("sample arrays must share their row count")
        for f in self.fe_factors:
            if len(f) != n:
                raise ValueError("FE factor length mismatch")

    @property
    def n(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class RegressionResult:
    coef: np.ndarray
    se: np.ndarray
    t_stat: np.ndarray
    p_value: np.ndarray
    vcov: np.ndarray
    r_squared: float
    r_squared_within: float
    n: int
    n_clusters: int
    fe_group_counts: tuple
    dropped_singletons: int
    sweeps: int

    @property
    def slope(self) -> float:
        return float(self.coef[0])

    @property
    def slope_se(self) -> float:
        return float(self.se[0])

    def to_record(self) -> dict:
        return {
            "coef": [float(c) for c in self.coef],
            "se": [float(s) for s in self.se],
            "t_stat": [float(t) for t in self.t_stat],
            "p_value": [float(p) for p in self.p_value],
            "r_squared": self.r_squared,
            "r_squared_within": self.r_squared_within,
            "n": self.n,
            "n_clusters": self.n_clusters,
            "fe_group_counts": list(self.fe_group_counts),
            "dropped_singletons": self.dropped_singletons,
        }


def _encode(labels: np.ndarray) -> np.ndarray:
    _, codes = np.unique(np.asarray(labels), return_inverse=True)
    return codes.astype(np.int64)


def _drop_singletons(factors: Sequence[np.ndarray]) -> tuple:
    """Iteratively drop rows that sit alone in any FE group."""
    n = len(factors[0]) if factors else 0
    keep = np.ones(n, dtype=bool)
    changed = True
    while changed:
        changed = False
        for labels in factors:
            codes = labels[keep]
            _, inverse, counts = np.unique(codes, return_inverse=True, return_counts=True)
            single = counts[inverse] == 1
            if single.any():
                idx = np.flatnonzero(keep)
                keep[idx[single]] = False
                changed = True
    return keep


def absorb_fixed_effects(sample: RegressionSample,
                         tol: float = ABSORB_TOL,
                         max_sweeps: int = ABSORB_MAX_SWEEPS):
    """Demean y and x within every FE factor, alternating to convergence.

    Singleton groups (rows fully absorbed by their own dummy) are dropped
    first, iterating across factors until stable. Returns the demeaned
    sample plus bookkeeping: (y_d, x_d, keep_mask, group_counts, sweeps,
    dropped_count).
    """
    factors = [np.asarray(f) for f in sample.fe_factors]
    if not factors:
        keep = np.ones(sample.n, dtype=bool)
        return sample.y.copy(), sample.x.copy(), keep, (), 0, 0
    keep = _drop_singletons(factors)
    dropped = int((~keep).sum())
    if dropped:
        logger.info("absorption dropped %d singleton rows", dropped)
    if keep.sum() == 0:
        raise SampleError("every row was a singleton in some FE group")

    codes = [_encode(f[keep]) for f in factors]
    group_counts = tuple(int(c.max()) + 1 for c in codes)
    stacked = np.column_stack([sample.y[keep], sample.x[keep]])
    demeaned, sweeps, converged, last_change = kernels.demean(
        stacked, codes, tol=tol, max_sweeps=max_sweeps
    )
    if not converged:
        raise AbsorptionError(last_change, sweeps)
    return demeaned[:, 0], demeaned[:, 1:], keep, group_counts, sweeps, dropped


def ols_cluster(y_d: np.ndarray, x_d: np.ndarray, cluster: np.ndarray,
                y_pre: Optional[np.ndarray] = None,
                fe_group_counts: tuple = (),
                dropped_singletons: int = 0,
                sweeps: int = 0) -> RegressionResult:
    """OLS on demeaned data with CR1 cluster-robust errors.

    The sandwich is (X'X)^-1 (sum_g s_g s_g') (X'X)^-1 scaled by
    G/(G-1) * (N-1)/(N-K) over cluster score sums s_g = X_g' u_g; p-values
    use a t distribution with G-1 degrees of freedom. R-squared is measured
    against the pre-absorption variation of y when ``y_pre`` is given, with
    the within-R-squared alongside.
    """
    x_d = x_d[:, None] if x_d.ndim == 1 else x_d
    n, k = x_d.shape
    codes = _encode(cluster)
    n_clusters = int(codes.max()) + 1 if n else 0
    if n_clusters < 2:
        raise SampleError("clustered inference needs at least two clusters")

    xtx = x_d.T @ x_d
    if np.any(np.abs(np.diag(xtx)) < 1e-12):
        raise DegenerateRegressor("a regressor has no within-group variance")
    xty = x_d.T @ y_d
    try:
        beta = np.linalg.solve(xtx, xty)
    except np.linalg.LinAlgError as exc:
        raise DegenerateRegressor(str(exc)) from exc

    resid = y_d - x_d @ beta
    scores = x_d * resid[:, None]
    meat = np.zeros((k, k))
    cluster_sums = np.zeros((n_clusters, k))
    np.add.at(cluster_sums, codes, scores)
    meat = cluster_sums.T @ cluster_sums

    xtx_inv = np.linalg.inv(xtx)
    dof_scale = (n_clusters / (n_clusters - 1)) * ((n - 1) / (n - k))
    vcov = dof_scale * (xtx_inv @ meat @ xtx_inv)
    se = np.sqrt(np.maximum(np.diag(vcov), 0.0))

    df = n_clusters - 1
    t_stat = np.zeros(k)
    p_value = np.ones(k)
    for j in range(k):
        if se[j] == 0.0:
            t_stat[j] = 0.0 if beta[j] == 0.0 else math.inf * np.sign(beta[j])
            p_value[j] = 1.0 if beta[j] == 0.0 else 0.0
        else:
            t_stat[j] = beta[j] / se[j]
            p_value[j] = 2.0 * float(stats.t.sf(abs(t_stat[j]), df))

    ssr = float(resid @ resid)
    sst_within = float(((y_d - y_d.mean()) ** 2).sum())
    r2_within = 1.0 - ssr / sst_within if sst_within > 0 else (1.0 if ssr == 0 else 0.0)
    if y_pre is not None:
        sst_pre = float(((y_pre - y_pre.mean()) ** 2).sum())
        r2 = 1.0 - ssr / sst_pre if sst_pre > 0 else (1.0 if ssr == 0 else 0.0)
    else:
        r2 = r2_within

    return RegressionResult(
        coef=beta, se=se, t_stat=t_stat, p_value=p_value, vcov=vcov,
        r_squared=r2, r_squared_within=r2_within, n=n, n_clusters=n_clusters,
        fe_group_counts=fe_group_counts, dropped_singletons=dropped_singletons,
        sweeps=sweeps,
    )


# Problems below this size get an automatic dummy-variable cross-check of
# the absorbed slope; disagreement beyond the tolerance means the alternating
# projections silently failed and must not pass unnoticed.
CROSS_CHECK_MAX_ROWS = 500
CROSS_CHECK_TOL = 1e-6


def _dummy_variable_slopes(y: np.ndarray, x: np.ndarray, factors) -> np.ndarray:
    blocks = [x]
    for i, labels in enumerate(factors):
        codes = _encode(labels)
        dummies = np.eye(int(codes.max()) + 1)[codes]
        if i > 0:
            dummies = dummies[:, 1:]
        blocks.append(dummies)
    design = np.column_stack(blocks)
    beta, *_ = np.linalg.lstsq(design, y, rcond=None)
    return beta[: x.shape[1]]


def estimate(sample: RegressionSample, cross_check: Optional[bool] = None) -> RegressionResult:
    """Absorb the sample's fixed effects, then run clustered OLS.

    On small problems (or when ``cross_check`` is forced on) the slope is
    re-estimated with explicit fixed-effect dummies; a disagreement raises
    AbsorptionError rather than returning a silently wrong estimate.
    """
    y_d, x_d, keep, group_counts, sweeps, dropped = absorb_fixed_effects(sample)
    result = ols_cluster(
        y_d, x_d, sample.cluster[keep], y_pre=sample.y[keep],
        fe_group_counts=group_counts, dropped_singletons=dropped, sweeps=sweeps,
    )
    if cross_check is None:
        cross_check = sample.n <= CROSS_CHECK_MAX_ROWS
    if cross_check and sample.fe_factors:
        reference = _dummy_variable_slopes(
            sample.y[keep], sample.x[keep], [np.asarray(f)[keep] for f in sample.fe_factors]
        )
        gap = float(np.max(np.abs(result.coef - reference)))
        if gap > CROSS_CHECK_TOL:
            raise AbsorptionError(gap, sweeps)
        logger.debug("dummy-variable cross-check agreed within %.2e", gap)
    return result


# ---------------------------------------------------------------------------
# Stacked equality test
# ---------------------------------------------------------------------------


def stacked_equality_test(sample_a: RegressionSample,
                          sample_b: RegressionSample) -> dict:
    """Test whether the slope differs between two stacked datasets.

    The stacked regression carries one slope per dataset (x interacted with
    the dataset indicator, exactly orthogonal columns) and every FE factor
    interacted with the indicator; clusters are shared across stacks so
    within-county error correlation between the datasets enters the sandwich
    through the cross term. Because the interacted columns stay orthogonal
    through demeaning, the system is solved blockwise per dataset, which
    keeps the two slope estimates bit-identical on identical inputs and the
    test statistic exactly zero. Returns the slope difference
    (slope_b - slope_a), its SE, t, p, and df.
    """
    if sample_a.x.shape[1] != 1 or sample_b.x.shape[1] != 1:
        raise ValueError("equality test is defined for a single regressor")
    if len(sample_a.fe_factors) != len(sample_b.fe_factors):
        raise ValueError("samples must share their FE structure")
    n_a, n_b = sample_a.n, sample_b.n
    y = np.concatenate([sample_a.y, sample_b.y])
    x = np.concatenate([sample_a.x[:, 0], sample_b.x[:, 0]])
    factors = []
    for fa, fb in zip(sample_a.fe_factors, sample_b.fe_factors):
        interacted = np.array(
            [f"a:{v}" for v in fa] + [f"b:{v}" for v in fb], dtype=object
        )
        factors.append(interacted)

    # Demean jointly; interacted groups never straddle datasets, so each
    # half demeans exactly as it would alone.
    keep_a = np.ones(n_a, dtype=bool)
    keep_b = np.ones(n_b, dtype=bool)
    if factors:
        keep = _drop_singletons([np.asarray(f) for f in factors])
        keep_a, keep_b = keep[:n_a], keep[n_a:]
        codes = [_encode(np.asarray(f)[keep]) for f in factors]
        stacked = np.column_stack([y[keep], x[keep]])
        demeaned, sweeps, converged, last_change = kernels.demean(
            stacked, codes, tol=ABSORB_TOL, max_sweeps=ABSORB_MAX_SWEEPS
        )
        if not converged:
            raise AbsorptionError(last_change, sweeps)
        y_d, x_d = demeaned[:, 0], demeaned[:, 1]
    else:
        y_d, x_d = y.copy(), x.copy()

    m_a = int(keep_a.sum())
    ya, yb = y_d[:m_a], y_d[m_a:]
    xa, xb = x_d[:m_a], x_d[m_a:]
    w_a = float(xa @ xa)
    w_b = float(xb @ xb)
    if w_a < 1e-12 or w_b < 1e-12:
        raise DegenerateRegressor("a stack has no within-group variance")
    b_a = float(xa @ ya) / w_a
    b_b = float(xb @ yb) / w_b
    u_a = ya - b_a * xa
    u_b = yb - b_b * xb

    cluster = np.concatenate([
        np.asarray(sample_a.cluster, dtype=object)[keep_a],
        np.asarray(sample_b.cluster, dtype=object)[keep_b],
    ])
    codes_all = _encode(cluster)
    n_clusters = int(codes_all.max()) + 1
    if n_clusters < 2:
        raise SampleError("clustered inference needs at least two clusters")
    scores_a = np.zeros(n_clusters)
    scores_b = np.zeros(n_clusters)
    np.add.at(scores_a, codes_all[:m_a], xa * u_a)
    np.add.at(scores_b, codes_all[m_a:], xb * u_b)
    m_aa = float(scores_a @ scores_a)
    m_bb = float(scores_b @ scores_b)
    m_ab = float(scores_a @ scores_b)

    n = m_a + len(yb)
    k = 2
    dof_scale = (n_clusters / (n_clusters - 1)) * ((n - 1) / (n - k))
    var = dof_scale * ((m_bb / (w_b * w_b) + m_aa / (w_a * w_a))
                       - 2.0 * m_ab / (w_a * w_b))
    se = math.sqrt(var) if var > 0 else 0.0
    diff = b_b - b_a
    df = n_clusters - 1
    if se == 0.0:
        t = 0.0 if diff == 0.0 else math.inf * (1 if diff > 0 else -1)
        p = 1.0 if diff == 0.0 else 0.0
    else:
        t = diff / se
        p = 2.0 * float(stats.t.sf(abs(t), df))
    return {
        "diff": diff,
        "se": se,
        "t_stat": t,
        "p_value": p,
        "df": df,
        "slope_a": b_a,
        "slope_b": b_b,
        "n": n,
        "n_clusters": n_clusters,
    }


# ---------------------------------------------------------------------------
# Panel specifications
# ---------------------------------------------------------------------------


def panel_log_rates(panel: Iterable[PanelObservation],
                    fieldname: str = TOTAL_VEHICLES) -> dict:
    """(state, county, year) -> log per-capita rate for one harmonized field.

    Observations with zero registrations have no log rate and are dropped
    with a count reported through the logger.
    """
    rates = {}
    dropped_zero = 0
    for obs in panel:
        if obs.field != fieldname:
            continue
        if obs.log_rate is None:
            dropped_zero += 1
            continue
        rates[(obs.state, obs.county_id, obs.year)] = obs.log_rate
    if dropped_zero:
        logger.info("dropped %d zero/uncovered observations from log rates", dropped_zero)
    return rates


@dataclass(frozen=True)
class SpecPair:
    """Paired per-dataset estimates plus the stacked equality test."""

    period: str
    llm: RegressionResult
    gold: RegressionResult
    equality_p: float
    equality_diff: float
    n: int

    def to_record(self) -> dict:
        return {
            "period": self.period,
            "llm": self.llm.to_record(),
            "gold": self.gold.to_record(),
            "equality_p": self.equality_p,
            "equality_diff": self.equality_diff,
            "n": self.n,
        }


def _paired(sample_llm: RegressionSample, sample_gold: RegressionSample,
            period: str) -> SpecPair:
    res_llm = estimate(sample_llm)
    res_gold = estimate(sample_gold)
    test = stacked_equality_test(sample_llm, sample_gold)
    return SpecPair(
        period=period,
        llm=res_llm,
        gold=res_gold,
        equality_p=test["p_value"],
        equality_diff=test["diff"],
        n=res_llm.n,
    )


def persistence_spec(panel_llm: Iterable[PanelObservation],
                     panel_gold: Iterable[PanelObservation],
                     end_year: int) -> SpecPair:
    """Decadal persistence: adoption at end_year on adoption ten years prior.

    State fixed effects; clusters at the county; the sample is restricted to
    (county, year) pairs observed in both datasets.
    """
    rates_llm = panel_log_rates(panel_llm)
    rates_gold = panel_log_rates(panel_gold)
    lag_year = end_year - 10

    keys = []
    for state, county, year in sorted(rates_llm):
        if year != end_year:
            continue
        needed = [(state, county, end_year), (state, county, lag_year)]
        if all(k in rates_llm and k in rates_gold for k in needed):
            keys.append((state, county))
    if not keys:
        raise SampleError(f"no common observations for {lag_year}-{end_year}")

    def build(rates: Mapping[tuple, float], tag: str) -> RegressionSample:
        y = np.array([rates[(s, c, end_year)] for s, c in keys])
        x = np.array([rates[(s, c, lag_year)] for s, c in keys])
        cluster = np.array([c for _, c in keys], dtype=object)
        state_fe = np.array([s for s, _ in keys], dtype=object)
        return RegressionSample(y=y, x=x, cluster=cluster,
                                fe_factors=(state_fe,), tag=tag)

    return _paired(build(rates_llm, "llm"), build(rates_gold, "gold"),
                   period=f"{lag_year}-{end_year}")


def popgrowth_spec(panel_llm: Iterable[PanelObservation],
                   panel_gold: Iterable[PanelObservation],
                   decade_start: int,
                   population,
                   max_initial_population: float = 50_000.0) -> SpecPair:
    """Adoption against log population within one decade window.

    County plus state-year fixed effects; counties whose interpolated
    population at the decade start is at or above the cutoff are excluded
    (strictly less-than survives). ``population`` maps county_id to a
    PopulationSeries.
    """
    rates_llm = panel_log_rates(panel_llm)
    rates_gold = panel_log_rates(panel_gold)
    end_year = decade_start + 10

    keys = []
    for state, county, year in sorted(rates_llm):
        if not (decade_start <= year <= end_year):
            continue
        if (state, county, year) not in rates_gold:
            continue
        series = population.get(county)
        if series is None:
            continue
        initial = series.interpolated(decade_start)
        if initial is None or not (initial < max_initial_population):
            continue
        pop = series.interpolated(year)
        if pop is None or pop <= 0:
            continue
        keys.append((state, county, year, math.log(pop)))
    if not keys:
        raise SampleError(f"no common observations in {decade_start}-{end_year}")

    def build(rates: Mapping[tuple, float], tag: str) -> RegressionSample:
        y = np.array([rates[(s, c, yr)] for s, c, yr, _ in keys])
        x = np.array([lp for _, _, _, lp in keys])
        cluster = np.array([c for _, c, _, _ in keys], dtype=object)
        county_fe = np.array([c for _, c, _, _ in keys], dtype=object)
        state_year_fe = np.array([f"{s}:{yr}" for s, c, yr, _ in keys], dtype=object)
        return RegressionSample(y=y, x=x, cluster=cluster,
                                fe_factors=(county_fe, state_year_fe), tag=tag)

    return _paired(build(rates_llm, "llm"), build(rates_gold, "gold"),
                   period=f"{decade_start}-{end_year}")


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _stars(p: float) -> str:
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    if p < 0.10:
        return "+"
    return ""


def render_results_table(panel_a: Sequence[SpecPair],
                         panel_b: Sequence[SpecPair]) -> str:
    """Two-panel results table: estimates, (SE), [equality p], R^2, N."""

    def block(title: str, pairs: Sequence[SpecPair], row_label: str) -> list:
        lines = [title]
        header = f"{'':<24}" + "".join(f"{p.period:>22}" for p in pairs)
        lines.append(header)
        for tag in ("llm", "gold"):
            label = f"{row_label} ({tag})"
            coefs = []
            ses = []
            for pair in pairs:
                res = pair.llm if tag == "llm" else pair.gold
                coefs.append(f"{res.slope:.3f}{_stars(res.p_value[0])}")
                ses.append(f"({res.slope_se:.3f})")
            lines.append(f"{label:<24}" + "".join(f"{c:>22}" for c in coefs))
            lines.append(f"{'':<24}" + "".join(f"{s:>22}" for s in ses))
        lines.append(f"{'p-value equality':<24}"
                     + "".join(f"{'[' + format(p.equality_p, '.3f') + ']':>22}" for p in pairs))
        lines.append(f"{'R^2 (llm / gold)':<24}"
                     + "".join(f"{format(p.llm.r_squared, '.3f') + '/' + format(p.gold.r_squared, '.3f'):>22}"
                               for p in pairs))
        lines.append(f"{'N':<24}" + "".join(f"{p.n:>22}" for p in pairs))
        return lines

    lines = []
    if panel_a:
        lines += block("Panel A. Serial Correlation in Adoption", panel_a, "lag log rate")
        lines.append("")
    if panel_b:
        lines += block("Panel B. Adoption and Population Growth", panel_b, "ln(population)")
        lines.append("")
    lines.append("State-by-period fixed effects in every column (within a single-decade")
    lines.append("sample these coincide with state effects); Panel B adds county fixed")
    lines.append("effects. Clustered (county) CR1 errors, t(G-1) reference distribution.")
    lines.append("+ p<0.10, * p<0.05, ** p<0.01.")
    return "\n".join(lines) + "\n"
