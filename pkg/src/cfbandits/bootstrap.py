"""Subsampling bootstrap for statistics with unknown convergence rates.

Heavy-tailed importance weights break the usual root-n bootstrap; subsampling
only assumes the estimator converges at SOME rate n^beta to SOME limit law.
Quantile deviations across subsample sizes are regressed on log-size to fit
beta per tail, and the full-sample interval is extrapolated at that rate.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import LoggedDataset
from .estimators import compute_weights
from .policies import PROB_FLOOR

NONCONVERGENT_BETA = 0.1


@dataclass(eq=False)
class BootstrapConfig:
    """Subsample-size grid, replicate count, and quantiles for one study."""

    sizes: tuple | None = None        # explicit grid; default geometric n^0.5..n^0.75
    n_sizes: int = 6
    replicates: int = 10000
    quantiles: tuple = (0.025, 0.975)
    seed: int = 0
    with_replacement: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.replicates < 100:
            raise ValueError("replicates must be >= 100")
        if any(not 0.0 < q < 1.0 for q in self.quantiles):
            raise ValueError("quantiles must lie in (0, 1)")
        if self.n_sizes < 2:
            raise ValueError("need at least two subsample sizes")

    def grid(self, n: int) -> np.ndarray:
        if self.sizes is not None:
            sizes = np.asarray(sorted(set(int(b) for b in self.sizes)), dtype=int)
        else:
            lo, hi = 0.5 * np.log(n), 0.75 * np.log(n)
            sizes = np.unique(np.round(np.exp(np.linspace(lo, hi, self.n_sizes))).astype(int))
        if sizes[0] < 1 or sizes[-1] > n:
            raise ValueError(f"subsample sizes must lie in [1, {n}]")
        return sizes


@dataclass(eq=False)
class QuantileFit:
    """Log-log regression of one quantile's deviation against subsample size."""

    q: float
    deviations: np.ndarray
    beta: float
    intercept: float
    r2: float


@dataclass(eq=False)
class BootstrapResult:
    statistic_full: float
    n: int
    sizes: np.ndarray
    fits: tuple
    ci: tuple
    flags: tuple

    @property
    def beta_lower(self) -> float:
        return self.fits[0].beta

    @property
    def beta_upper(self) -> float:
        return self.fits[-1].beta

    def csv_rows(self):
        yield ["b", "q", "deviation"]
        for fit in self.fits:
            for b, d in zip(self.sizes, fit.deviations):
                yield [int(b), fit.q, d]
        yield ["#fit", "q", "beta", "intercept", "r2"]
        for fit in self.fits:
            yield ["#fit", fit.q, fit.beta, fit.intercept, fit.r2]
        yield ["#ci", self.ci[0], self.ci[1]]
        yield ["#flags", ";".join(self.flags)]


def _take(data, idx: np.ndarray):
    if isinstance(data, LoggedDataset):
        return data.subset(idx)
    return data[idx]


def _replicate_stats(statistic, data, n, b, config) -> np.ndarray:
    out = np.empty(config.replicates)

    def run(lo: int, hi: int):
        for k in range(lo, hi):
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, int(b), k]))
            if config.with_replacement:
                idx = rng.integers(0, n, size=b)
            else:
                idx = rng.permutation(n)[:b]
            out[k] = statistic(_take(data, idx))

    if config.threads > 1:
        chunk = -(-config.replicates // config.threads)
        bounds = [(i, min(i + chunk, config.replicates))
                  for i in range(0, config.replicates, chunk)]
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            list(pool.map(lambda be: run(*be), bounds))
    else:
        run(0, config.replicates)
    return out


def _fit_side(sizes: np.ndarray, devs: np.ndarray, q: float) -> QuantileFit:
    valid = devs > 0
    if valid.sum() < 2:
        return QuantileFit(q, devs, float("nan"), float("nan"), float("nan"))
    x = np.log(sizes[valid].astype(float))
    y = np.log(devs[valid])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else float("nan")
    return QuantileFit(q, devs, float(-slope), float(intercept), r2)


def subsample_ci(statistic, data, config: BootstrapConfig | None = None) -> BootstrapResult:
    """Rate-adaptive confidence interval for ``statistic`` on ``data``.

    For each subsample size b, quantile deviations |Q_q(S_b) - T_n| are
    recorded; their log-log slope against b gives the per-side rate beta, and
    the interval at the full size n is T_n -/+ deviation(b_max) * (n/b_max)^-beta.
    Deterministic given the config seed (replicate streams derive from
    (seed, b, k)).
    """
    config = config or BootstrapConfig()
    n = len(data)
    sizes = config.grid(n)
    t_full = float(statistic(data))
    qs = sorted(config.quantiles)

    per_size = [_replicate_stats(statistic, data, n, int(b), config) for b in sizes]
    fits = []
    for q in qs:
        devs = np.array([abs(float(np.quantile(vals, q)) - t_full) for vals in per_size])
        fits.append(_fit_side(sizes, devs, q))

    flags = []
    degenerate = all(np.all(fit.deviations == 0.0) for fit in fits)
    if degenerate:
        flags.append("degenerate")
    elif any(np.isnan(fit.beta) or fit.beta < NONCONVERGENT_BETA for fit in fits):
        flags.append("nonconvergent")

    def side(fit: QuantileFit, sign: float) -> float:
        d = fit.deviations[-1]
        if d == 0.0:
            return t_full
        scale = (n / float(sizes[-1])) ** (-fit.beta) if np.isfinite(fit.beta) else 1.0
        return t_full + sign * d * scale

    ci = (side(fits[0], -1.0), side(fits[-1], +1.0))
    return BootstrapResult(statistic_full=t_full, n=n, sizes=sizes, fits=tuple(fits),
                           ci=ci, flags=tuple(flags))


@dataclass(eq=False)
class TailTable:
    """Log-log survival table of weight magnitudes, with the top-decade slope."""

    w: np.ndarray
    survival: np.ndarray
    slope: float

    def csv_rows(self):
        yield ["w", "survival"]
        for w, s in zip(self.w, self.survival):
            yield [w, s]
        yield ["#slope", self.slope]


def tail_exponent_plot(weights) -> TailTable:
    """Empirical P(|W| > w) on the weights' support plus the top-decade slope.

    A slope shallower than -2 over the top decade signals infinite variance,
    the regime where plain CLT intervals understate uncertainty.
    """
    w = np.abs(np.asarray(getattr(weights, "w", weights), dtype=float))
    if w.size == 0:
        raise ValueError("weights must be nonempty")
    ws = np.sort(w)
    n = ws.size
    uniq = np.unique(ws)
    surv = (n - np.searchsorted(ws, uniq, side="right")) / n
    top = (uniq >= uniq[-1] / 10.0) & (surv > 0)
    if top.sum() >= 2:
        slope = float(np.polyfit(np.log10(uniq[top]), np.log10(surv[top]), 1)[0])
    else:
        slope = float("nan")
    return TailTable(w=uniq, survival=surv, slope=slope)


@dataclass(eq=False)
class ClippingRateRow:
    tau: float
    beta_lower: float
    beta_upper: float
    result: BootstrapResult


def clipping_rate_study(dataset: LoggedDataset, policy, taus,
                        config: BootstrapConfig | None = None,
                        floor: float = PROB_FLOOR) -> list:
    """Fitted convergence rates of the clipped value estimate per clip level.

    The bootstrapped statistic is the clipped point estimate mean(min(w,tau) r)
    itself; its fitted rate shows how clipping trades the heavy-tail regime
    back toward the root-n one.
    """
    w = compute_weights(dataset, policy, floor).w
    data = np.column_stack([w, dataset.rewards()])
    rows = []
    for tau in taus:
        t = np.inf if tau is None else float(tau)
        if not t > 0:
            raise ValueError("clip level tau must be positive")

        def stat(m, t=t):
            return float(np.mean(np.minimum(m[:, 0], t) * m[:, 1]))

        res = subsample_ci(stat, data, config)
        rows.append(ClippingRateRow(tau=t, beta_lower=res.beta_lower,
                                    beta_upper=res.beta_upper, result=res))
    return rows
