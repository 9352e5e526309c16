"""Point estimators for policy value and improvement from logged data."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .data import DatasetError, LoggedDataset, LoggedRecord
from .policies import PROB_FLOOR, log_prob_matrix, logged_action_log_probs

DEFAULT_TAU = 500.0     # evaluation clip level
DEFAULT_R_MAX = 0.01    # cap on the unobserved mean reward in gap filling


@dataclass(eq=False)
class WeightVector:
    """Per-record importance weights pi(a_i|x_i)/mu_i, optionally clipped."""

    w: np.ndarray
    clipped_at: float | None = None

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if np.any(self.w <= 0) or not np.all(np.isfinite(self.w)):
            raise ValueError("importance weights must be positive and finite")
        if self.clipped_at is not None and np.any(self.w > self.clipped_at):
            raise ValueError("stored weights exceed their declared clip level")

    def __len__(self) -> int:
        return self.w.shape[0]


def compute_weights(dataset: LoggedDataset, policy, floor: float = PROB_FLOOR) -> WeightVector:
    """Importance weights for ``policy`` against the logged propensities.

    log pi is floored at log(floor) inside the ratio so deterministic policies
    produce finite weights on never-taken actions.
    """
    mu = dataset.propensities()
    log_pi = logged_action_log_probs(policy, dataset)
    w = np.exp(np.maximum(log_pi, np.log(floor)) - np.log(mu))
    return WeightVector(w)


def apply_bound(w: np.ndarray, bound) -> np.ndarray:
    """Lower-bound weight map: a clip level, ``"log"`` (1+log w), or ``"pil"``
    (1+log w above 1, identity below)."""
    if bound is None:
        return np.asarray(w, dtype=float)
    if isinstance(bound, str):
        if bound == "log":
            return 1.0 + np.log(w)
        if bound == "pil":
            return np.where(w >= 1.0, 1.0 + np.log(np.maximum(w, 1.0)), w)
        raise ValueError(f"unknown weight bound {bound!r}")
    tau = float(bound)
    if tau <= 0:
        raise ValueError("clip level tau must be positive")
    return np.minimum(w, tau)


@dataclass(eq=False)
class EstimateReport:
    """Point estimate with its self-normalization gap and confidence interval."""

    estimator: str
    point: float
    gap: float
    n: int
    ci: tuple[float, float] | None = None
    tau: float | None = None
    notes: dict = field(default_factory=dict)

    def csv_row(self, seed=None) -> list:
        lo, hi = self.ci if self.ci is not None else (None, None)
        return [self.estimator, self.point, self.gap, lo, hi, self.n, self.tau, seed]


class RewardModel:
    """Reward predictor f_hat(x, a) evaluable at every candidate of a record."""

    def predict(self, record: LoggedRecord) -> np.ndarray:
        raise NotImplementedError

    def predict_matrix(self, dataset: LoggedDataset) -> np.ndarray:
        mask = dataset.candidate_mask()
        out = np.zeros(mask.shape)
        for i, rec in enumerate(dataset):
            vals = np.asarray(self.predict(rec), dtype=float)
            if vals.shape != (rec.n_candidates,) or not np.all(np.isfinite(vals)):
                raise ValueError(f"record {i}: reward model output invalid")
            out[i, : rec.n_candidates] = vals
        return out


@dataclass(eq=False)
class CallableRewardModel(RewardModel):
    fn: object  # record -> array over its candidates

    def predict(self, record: LoggedRecord) -> np.ndarray:
        return np.asarray(self.fn(record), dtype=float)


def _normal_ci(terms: np.ndarray, point: float, level: float) -> tuple[float, float]:
    n = terms.shape[0]
    se = float(np.std(terms, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    z = float(stats.norm.ppf(0.5 + level / 2.0))
    return point - z * se, point + z * se


def _report(name: str, terms: np.ndarray, gap: float, tau=None, ci_level: float = 0.95,
            extra_notes: dict | None = None) -> EstimateReport:
    point = float(np.mean(terms))
    n = terms.shape[0]
    notes = {"variance": float(np.var(terms, ddof=1) / n) if n > 1 else 0.0}
    if extra_notes:
        notes.update(extra_notes)
    return EstimateReport(name, point, gap, n, ci=_normal_ci(terms, point, ci_level),
                          tau=tau, notes=notes)


def _weights(dataset, policy, weights, floor) -> WeightVector:
    if weights is None:
        return compute_weights(dataset, policy, floor)
    if len(weights) != len(dataset):
        raise ValueError("precomputed weights length mismatch")
    return weights


def ipwe(dataset: LoggedDataset, policy, weights: WeightVector | None = None,
         floor: float = PROB_FLOOR, ci_level: float = 0.95) -> EstimateReport:
    """Inverse probability weighted estimate of the policy's expected reward."""
    wv = _weights(dataset, policy, weights, floor)
    terms = wv.w * dataset.rewards()
    return _report("ipwe", terms, gap=float(np.mean(1.0 - wv.w)), ci_level=ci_level)


def delta_ipwe(dataset: LoggedDataset, policy, weights: WeightVector | None = None,
               floor: float = PROB_FLOOR, ci_level: float = 0.95) -> EstimateReport:
    """Estimated improvement over the logging policy, (1/n) sum (w_i - 1) r_i."""
    wv = _weights(dataset, policy, weights, floor)
    terms = (wv.w - 1.0) * dataset.rewards()
    return _report("delta_ipwe", terms, gap=float(np.mean(1.0 - wv.w)), ci_level=ci_level)


def clipped_ipwe(dataset: LoggedDataset, policy, tau: float,
                 weights: WeightVector | None = None, floor: float = PROB_FLOOR,
                 ci_level: float = 0.95) -> EstimateReport:
    """Improvement estimate with weights clipped at tau; gap uses clipped weights."""
    if tau <= 0:
        raise ValueError("clip level tau must be positive")
    wv = _weights(dataset, policy, weights, floor)
    w_bar = np.minimum(wv.w, tau)
    terms = (w_bar - 1.0) * dataset.rewards()
    return _report("clipped_ipwe", terms, gap=float(np.mean(1.0 - w_bar)), tau=tau,
                   ci_level=ci_level)


def dr(dataset: LoggedDataset, policy, reward_model: RewardModel,
       weights: WeightVector | None = None, floor: float = PROB_FLOOR,
       ci_level: float = 0.95) -> EstimateReport:
    """Doubly robust estimate: importance-weighted residuals plus the model value."""
    wv = _weights(dataset, policy, weights, floor)
    f_hat = reward_model.predict_matrix(dataset)
    a_pos = dataset.action_positions()
    f_logged = f_hat[np.arange(len(dataset)), a_pos]
    pi = np.exp(log_prob_matrix(policy, dataset))
    pi = np.where(dataset.candidate_mask(), pi, 0.0)
    terms = wv.w * (dataset.rewards() - f_logged) + (pi * f_hat).sum(axis=1)
    return _report("dr", terms, gap=float(np.mean(1.0 - wv.w)), ci_level=ci_level)


def clipped_pil_dr(dataset: LoggedDataset, policy, reward_model: RewardModel,
                   tau_or_log="log", floor: float = PROB_FLOOR,
                   ci_level: float = 0.95) -> EstimateReport:
    """Lower-bound doubly robust estimate under a weight map w_bar <= w.

    The induced sub-policy w_bar * mu replaces pi in the model-value term, and
    the nonnegative residual correction is dropped, so with r >= 0 the result
    lower-bounds the plain doubly robust estimate in expectation.
    """
    if np.any(dataset.rewards() < 0):
        raise ValueError("lower-bound estimation requires nonnegative rewards")
    mu_all = dataset.full_propensity_matrix()
    mask = dataset.candidate_mask() & (mu_all > 0)
    safe_mu = np.where(mask, mu_all, 1.0)
    log_pi = log_prob_matrix(policy, dataset)
    w_all = np.exp(np.maximum(log_pi, np.log(floor)) - np.log(safe_mu))
    w_bar_all = np.where(mask, apply_bound(np.where(mask, w_all, 1.0), tau_or_log), 0.0)
    a_pos = dataset.action_positions()
    idx = np.arange(len(dataset))
    w_bar_logged = w_bar_all[idx, a_pos]
    f_hat = reward_model.predict_matrix(dataset)
    f_logged = f_hat[idx, a_pos]
    terms = (w_bar_logged * (dataset.rewards() - f_logged)
             + (w_bar_all * mu_all * f_hat).sum(axis=1))
    tau = tau_or_log if isinstance(tau_or_log, (int, float)) else None
    return _report("clipped_pil_dr", terms, gap=float(np.mean(1.0 - w_bar_logged)),
                   tau=tau, ci_level=ci_level, extra_notes={})


def paired_delta(dataset: LoggedDataset, policy_pi, policy_mu_hat, tau: float = DEFAULT_TAU,
                 r_max: float = DEFAULT_R_MAX, n_boot: int = 1000, seed: int = 0,
                 ci_level: float = 0.95) -> tuple[float, float]:
    """Paired improvement interval for policy_pi against a reference policy.

    The per-record probability difference against the reference, scaled by the
    logged propensity, is clipped to [-tau, tau]; the reward-weighted mean gets
    a percentile-bootstrap interval (``n_boot=0`` keeps the point), and the
    clip-mass mean is swept over the unobserved reward range (0, r_max).
    """
    if r_max <= 0:
        raise ValueError("r_max must be positive")
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    mu = dataset.propensities()
    a_pos = dataset.action_positions()[:, None]
    pi = np.exp(np.take_along_axis(log_prob_matrix(policy_pi, dataset), a_pos, axis=1))[:, 0]
    mu_hat = np.exp(np.take_along_axis(log_prob_matrix(policy_mu_hat, dataset), a_pos, axis=1))[:, 0]
    ratio = np.clip((pi - mu_hat) / mu, -tau, tau)
    z = ratio * dataset.rewards()
    point = float(np.mean(z))
    sweep = float(np.mean(ratio)) * r_max
    if n_boot > 0:
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, len(z), size=(n_boot, len(z)))
        means = z[idx].mean(axis=1)
        alpha = 1.0 - ci_level
        lo, hi = np.quantile(means, [alpha / 2.0, 1.0 - alpha / 2.0])
    else:
        lo = hi = point
    return float(lo + min(0.0, sweep)), float(hi + max(0.0, sweep))


def combined_offline_estimate(report: EstimateReport, r_max: float = DEFAULT_R_MAX
                              ) -> tuple[float, float]:
    """Widen a report's interval by the self-normalization gap times an assumed
    mean reward swept over (0, r_max)."""
    if report.ci is None:
        raise ValueError("report has no confidence interval")
    if r_max <= 0:
        raise ValueError("r_max must be positive")
    reach = report.gap * r_max
    lo, hi = report.ci
    return float(lo + min(0.0, reach)), float(hi + max(0.0, reach))
