import numpy as np
import pytest

from cfbandits.bootstrap import (BootstrapConfig, clipping_rate_study, subsample_ci,
                                 tail_exponent_plot)
from cfbandits.estimators import compute_weights
from cfbandits.policies import FixedMarginalPolicy
from cfbandits.simulators import synth_heavy_tail_log

N = 10_000
ALWAYS_FIRST = FixedMarginalPolicy({"a0": 1.0})


def mean_stat(m):
    return float(np.mean(m))


def test_default_grid_spans_root_n_to_three_quarters():
    config = BootstrapConfig()
    sizes = config.grid(N)
    assert sizes[0] == pytest.approx(np.sqrt(N), rel=0.02)
    assert sizes[-1] == pytest.approx(N ** 0.75, rel=0.02)
    assert len(sizes) == 6


def test_config_validation():
    with pytest.raises(ValueError, match="replicates"):
        BootstrapConfig(replicates=50)
    with pytest.raises(ValueError, match="quantiles"):
        BootstrapConfig(quantiles=(0.0, 0.9))
    with pytest.raises(ValueError, match="sizes"):
        BootstrapConfig(sizes=(10, 20_000)).grid(N)


def test_uniform_max_rate_near_one():
    data = np.random.default_rng(11).uniform(0, 3.7, N)
    res = subsample_ci(lambda m: float(np.max(m)), data,
                       BootstrapConfig(replicates=2000, seed=7))
    # convergence of a sample max is one-sided: the informative tail is below
    # the full-sample statistic
    assert 0.85 <= res.beta_lower <= 1.15


def test_gaussian_mean_rate_near_half():
    data = np.random.default_rng(12).normal(size=N)
    res = subsample_ci(mean_stat, data, BootstrapConfig(replicates=2000, seed=7))
    assert 0.4 <= res.beta_lower <= 0.6
    assert 0.4 <= res.beta_upper <= 0.6
    lo, hi = res.ci
    assert lo <= 0.0 <= hi


def test_cauchy_mean_flagged_nonconvergent():
    # quantiles must stay well above b/n for the subsample law to track the
    # true one; at these sizes that means mid quantiles
    data = np.random.default_rng(13).standard_cauchy(N)
    res = subsample_ci(mean_stat, data,
                       BootstrapConfig(replicates=2000, seed=7, quantiles=(0.2, 0.8)))
    assert res.beta_lower <= 0.1
    assert res.beta_upper <= 0.1
    assert "nonconvergent" in res.flags


def test_cauchy_median_rate_near_half():
    data = np.random.default_rng(13).standard_cauchy(N)
    res = subsample_ci(lambda m: float(np.median(m)), data,
                       BootstrapConfig(replicates=2000, seed=7))
    assert 0.4 <= res.beta_lower <= 0.65
    assert 0.4 <= res.beta_upper <= 0.65
    assert not res.flags


def test_degenerate_statistic_flagged():
    data = np.ones(N)
    res = subsample_ci(mean_stat, data, BootstrapConfig(replicates=200, seed=1))
    assert "degenerate" in res.flags
    assert res.ci == (1.0, 1.0)
    assert np.isnan(res.beta_lower)


def test_deterministic_given_seed():
    data = np.random.default_rng(5).normal(size=2000)
    config = BootstrapConfig(replicates=300, seed=21)
    r1 = subsample_ci(mean_stat, data, config)
    r2 = subsample_ci(mean_stat, data, config)
    assert r1.ci == r2.ci
    for f1, f2 in zip(r1.fits, r2.fits):
        np.testing.assert_array_equal(f1.deviations, f2.deviations)
        assert f1.beta == f2.beta


def test_threads_do_not_change_results():
    data = np.random.default_rng(5).normal(size=2000)
    base = subsample_ci(mean_stat, data, BootstrapConfig(replicates=300, seed=21))
    threaded = subsample_ci(mean_stat, data,
                            BootstrapConfig(replicates=300, seed=21, threads=4))
    assert base.ci == threaded.ci
    for f1, f2 in zip(base.fits, threaded.fits):
        np.testing.assert_array_equal(f1.deviations, f2.deviations)


def test_gaussian_coverage():
    hits = 0
    for trial in range(100):
        data = np.random.default_rng(1000 + trial).normal(size=2000)
        res = subsample_ci(mean_stat, data, BootstrapConfig(replicates=1000, seed=trial))
        lo, hi = res.ci
        hits += lo <= 0.0 <= hi
    assert hits >= 90


# -- tail table ---------------------------------------------------------------

def test_tail_slope_recovers_pareto_exponent():
    ds = synth_heavy_tail_log(100_000, alpha=1.5, seed=2)
    weights = compute_weights(ds, ALWAYS_FIRST)
    table = tail_exponent_plot(weights)
    assert table.slope == pytest.approx(-1.5, abs=0.2)
    assert np.all(np.diff(table.survival) <= 0)


def test_tail_table_constant_weights():
    table = tail_exponent_plot(np.full(50, 2.5))
    assert table.w.shape == (1,)
    assert np.isnan(table.slope)


def test_tail_slope_exponential_is_light():
    w = np.random.default_rng(3).exponential(size=100_000) + 1e-12
    table = tail_exponent_plot(w)
    assert table.slope < -2.0


# -- clipping study ------------------------------------------------------------

def test_clipping_restores_root_n_rate():
    ds = synth_heavy_tail_log(N, alpha=1.5, seed=4, scale=50.0)
    config = BootstrapConfig(replicates=2000, seed=9)
    rows = clipping_rate_study(ds, ALWAYS_FIRST, [None, 500.0, 1.0], config)
    raw, clipped, unit = rows
    assert raw.tau == np.inf
    # heavy-tail regime: the lower tail of the mean converges near 1 - 1/alpha
    assert raw.beta_lower == pytest.approx(1.0 - 1.0 / 1.5, abs=0.12)
    assert clipped.beta_lower >= 0.4
    assert 0.4 <= unit.beta_lower <= 0.6 and 0.4 <= unit.beta_upper <= 0.6
    lo, hi = unit.result.ci
    assert hi - lo < 0.1
