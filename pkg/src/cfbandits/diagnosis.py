"""Imitation-based causality diagnosis and resampling weights.

A positive residual imitation loss after fitting the best policy in a family
means the log's action probabilities depend on something the family cannot
see: hidden decision variables or a too-small model class. The exact oracles
here quantify that floor on finite environments.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DatasetError, LoggedDataset, Scenario, TabularEnvironment
from .estimators import WeightVector, compute_weights
from .objectives import ObjectiveKind, ObjectiveSpec
from .policies import Family, PolicyParams, context_key
from .training import TrainConfig, train

DEFAULT_UNDERFIT_THRESHOLD = 0.05  # nats


@dataclass(eq=False)
class DiagnosisReport:
    """Residual imitation loss (nats), its perplexity, and the verdict."""

    iml_loss: float
    perplexity: float
    verdict: str                 # "REALIZABLE" or "UNDERFIT"
    threshold: float
    params: PolicyParams         # the fitted imitation policy

    def csv_row(self, family: str, seed=None) -> list:
        return [family, self.iml_loss, self.perplexity, self.verdict, self.threshold, seed]


def diagnose(dataset: LoggedDataset, family: Family | str,
             train_config: TrainConfig | None = None,
             threshold: float = DEFAULT_UNDERFIT_THRESHOLD,
             rank: int | None = None) -> DiagnosisReport:
    """Fit the best imitation of the logging policy within ``family``.

    Reports the residual loss in nats and its perplexity e^loss; the verdict
    is UNDERFIT when the loss exceeds ``threshold``.
    """
    if dataset.scenario is Scenario.MISSING:
        raise DatasetError("diagnosis requires logged propensities")
    kind = ObjectiveKind.IML_FULL if dataset.scenario is Scenario.FULL else ObjectiveKind.IML_PART
    config = train_config or TrainConfig(learning_rate=2.0, decay="constant",
                                         max_epochs=600, tol=1e-12, patience=25)
    params, trace = train(ObjectiveSpec(kind), dataset, family, config, rank=rank)
    loss = trace.objective[-1]
    return DiagnosisReport(
        iml_loss=float(loss),
        perplexity=float(np.exp(loss)),
        verdict="UNDERFIT" if loss > threshold else "REALIZABLE",
        threshold=threshold,
        params=params,
    )


def marginalize_logging_policy(env: TabularEnvironment,
                               observed_split=None) -> np.ndarray:
    """Best observed-context imitation of the logging policy, per context row.

    Within each observed group the optimum is the hidden-state mixture of the
    logging policy; rows of the result repeat that mixture across the group.
    """
    groups = np.asarray(observed_split, dtype=np.intp) if observed_split is not None \
        else env.groups()
    out = np.empty_like(env.logging_policy)
    for g in np.unique(groups):
        sel = groups == g
        pg = env.context_probs[sel]
        total = pg.sum()
        if total <= 0:
            out[sel] = env.logging_policy[sel]
            continue
        out[sel] = (pg / total) @ env.logging_policy[sel]
    return out


def mutual_info_oracle(env: TabularEnvironment, observed_split=None) -> float:
    """Exact conditional mutual information between action and hidden state.

    Equals the minimum expected KL from the logging policy over all policies
    measurable in the observed context, attained at the marginalization.
    """
    pi = marginalize_logging_policy(env, observed_split)
    mu = env.logging_policy
    with np.errstate(divide="ignore", invalid="ignore"):
        contrib = np.where(mu > 0, mu * (np.log(np.where(mu > 0, mu, 1.0))
                                         - np.log(np.where(pi > 0, pi, 1.0))), 0.0)
    return float(env.context_probs @ contrib.sum(axis=1))


def _entropy_rows(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=1)


def entropy_increase(env: TabularEnvironment, marginalized_policy,
                     observed_split=None, tol: float = 1e-9) -> tuple[float, float]:
    """(expected entropy increase, expected KL) for the marginalized policy.

    The two are equal analytically; returning both makes the identity a
    checkable quantity. Raises if the policy is not the marginalization.
    """
    pi = np.asarray(marginalized_policy, dtype=float)
    expect = marginalize_logging_policy(env, observed_split)
    if pi.shape != expect.shape or np.max(np.abs(pi - expect)) > tol:
        raise ValueError("policy is not the marginalization of the logging policy")
    d_h = float(env.context_probs @ (_entropy_rows(pi) - _entropy_rows(env.logging_policy)))
    mu = env.logging_policy
    with np.errstate(divide="ignore", invalid="ignore"):
        contrib = np.where(mu > 0, mu * (np.log(np.where(mu > 0, mu, 1.0))
                                         - np.log(np.where(pi > 0, pi, 1.0))), 0.0)
    kl = float(env.context_probs @ contrib.sum(axis=1))
    return d_h, kl


@dataclass(eq=False)
class ResampleWeights:
    """Per-record ratios of the imitation policy to the logged propensities."""

    weights: np.ndarray
    ess: float                    # sum of weights
    group_sums: dict              # weight sums keyed by hidden value or context

    def __len__(self) -> int:
        return self.weights.shape[0]


def resample_weights(dataset: LoggedDataset, iml_policy) -> ResampleWeights:
    """Importance weights that re-balance the log toward the imitation policy.

    Self-normalization keeps the effective sample size near n overall and per
    hidden group, which the ``group_sums`` breakdown makes checkable.
    """
    wv: WeightVector = compute_weights(dataset, iml_policy)
    sums: dict = {}
    for rec, w in zip(dataset, wv.w):
        key = rec.extras.get("h", context_key(rec.context))
        sums[key] = sums.get(key, 0.0) + float(w)
    return ResampleWeights(weights=wv.w, ess=float(wv.w.sum()), group_sums=sums)
