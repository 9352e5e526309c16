"""Differentiable training objectives over logged data.

Values follow each objective's natural sense: improvement objectives are
maximized, imitation and cross-entropy objectives are losses to minimize
(``ObjectiveSpec.sense`` says which); the trainer reconciles the two. All
gradients reduce to weighted sums of d/d theta log pi and are exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .data import DatasetError, LoggedDataset, Scenario
from .estimators import RewardModel, apply_bound
from .policies import (PROB_FLOOR, PolicyParams, grad_weighted_log_probs,
                       log_prob_matrix)


class ObjectiveKind(str, Enum):
    IPWE_RAW = "ipwe-raw"            # improvement over the log, unclipped
    IPWE_CLIPPED = "ipwe-clipped"    # improvement with weights clipped at tau
    PIL_MU = "pil-mu"                # log-weight lower bound, identity below w=1
    PIL_EMPTY = "pil-empty"          # plain reward-weighted log-weight
    CE_WEIGHTED = "ce"               # reward-weighted cross entropy (loss)
    IML_FULL = "iml-full"            # KL to the log using all candidate propensities
    IML_PART = "iml-part"            # KL to the log from taken-action propensities
    IML_MISS = "iml-miss"            # action cross entropy, no propensities (loss)
    PIL_IML = "pil-iml"              # PIL minus epsilon times IML
    POEM = "poem"                    # improvement minus alpha * sqrt(variance/n)
    DR_OBJ = "dr"                    # doubly robust value
    PIL_DR = "pil-dr"                # lower-bounded DR minus epsilon times IML


_LOSS_KINDS = frozenset({ObjectiveKind.CE_WEIGHTED, ObjectiveKind.IML_FULL,
                         ObjectiveKind.IML_PART, ObjectiveKind.IML_MISS})

# scenarios each kind can run under (propensity needs)
_ALLOWED = {
    ObjectiveKind.IPWE_RAW: (Scenario.PARTIAL, Scenario.FULL),
    ObjectiveKind.IPWE_CLIPPED: (Scenario.PARTIAL, Scenario.FULL),
    ObjectiveKind.PIL_MU: (Scenario.PARTIAL, Scenario.FULL),
    ObjectiveKind.PIL_EMPTY: (Scenario.MISSING, Scenario.PARTIAL, Scenario.FULL),
    ObjectiveKind.CE_WEIGHTED: (Scenario.MISSING, Scenario.PARTIAL, Scenario.FULL),
    ObjectiveKind.IML_FULL: (Scenario.FULL,),
    ObjectiveKind.IML_PART: (Scenario.PARTIAL, Scenario.FULL),
    ObjectiveKind.IML_MISS: (Scenario.MISSING, Scenario.PARTIAL, Scenario.FULL),
    ObjectiveKind.PIL_IML: (Scenario.MISSING, Scenario.PARTIAL, Scenario.FULL),
    ObjectiveKind.POEM: (Scenario.PARTIAL, Scenario.FULL),
    ObjectiveKind.DR_OBJ: (Scenario.PARTIAL, Scenario.FULL),
    ObjectiveKind.PIL_DR: (Scenario.FULL,),
}


@dataclass(eq=False)
class ObjectiveSpec:
    """Declarative choice of training objective and its knobs."""

    kind: ObjectiveKind
    epsilon: float = 1e-4
    tau: float | None = None
    alpha: float = 1.0
    l2: float = 0.0
    reward_model: RewardModel | None = None
    dr_bound: object = "pil"               # float tau, "log", or "pil"
    pil_kind: ObjectiveKind | None = None  # PIL component override for PIL_IML
    iml_kind: ObjectiveKind | None = None  # IML component override

    def __post_init__(self):
        self.kind = ObjectiveKind(self.kind)
        for name in ("epsilon", "alpha", "l2"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative")
        if self.tau is not None and not self.tau > 0:
            raise ValueError("tau must be positive")

    @property
    def sense(self) -> str:
        return "min" if self.kind in _LOSS_KINDS else "max"

    def check_scenario(self, dataset: LoggedDataset) -> None:
        kinds = [self.kind]
        if self.kind is ObjectiveKind.PIL_IML:
            kinds = [_pil_component(self, dataset), _iml_component(self, dataset)]
        for kind in kinds:
            if dataset.scenario not in _ALLOWED[kind]:
                raise DatasetError(f"objective {kind.value} does not support "
                                   f"{dataset.scenario.value} logging")


def _pil_component(spec: ObjectiveSpec, dataset: LoggedDataset) -> ObjectiveKind:
    if spec.pil_kind is not None:
        return spec.pil_kind
    if dataset.scenario is Scenario.MISSING:
        return ObjectiveKind.PIL_EMPTY
    return ObjectiveKind.PIL_MU


def _iml_component(spec: ObjectiveSpec, dataset: LoggedDataset) -> ObjectiveKind:
    if spec.iml_kind is not None:
        return spec.iml_kind
    if dataset.scenario is Scenario.FULL:
        return ObjectiveKind.IML_FULL
    if dataset.scenario is Scenario.PARTIAL:
        return ObjectiveKind.IML_PART
    return ObjectiveKind.IML_MISS


class _ObjContext:
    """Shared per-evaluation quantities, computed lazily."""

    def __init__(self, dataset: LoggedDataset, params: PolicyParams, floor: float):
        self.dataset = dataset
        self.params = params
        self.floor = floor
        self.log_floor = np.log(floor)
        self.n = len(dataset)
        self.r = dataset.rewards()
        self._cache: dict = {}

    def _get(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    @property
    def log_mat(self) -> np.ndarray:
        return self._get("log_mat", lambda: log_prob_matrix(self.params, self.dataset))

    @property
    def log_pi(self) -> np.ndarray:
        def fn():
            a = self.dataset.action_positions()
            return self.log_mat[np.arange(self.n), a]
        return self._get("log_pi", fn)

    @property
    def active(self) -> np.ndarray:
        return self._get("active", lambda: self.log_pi > self.log_floor)

    @property
    def log_w(self) -> np.ndarray:
        def fn():
            mu = self.dataset.propensities()
            return np.maximum(self.log_pi, self.log_floor) - np.log(mu)
        return self._get("log_w", fn)

    @property
    def w(self) -> np.ndarray:
        return self._get("w", lambda: np.exp(self.log_w))

    @property
    def probs_mat(self) -> np.ndarray:
        def fn():
            p = np.exp(self.log_mat)
            return np.where(self.dataset.candidate_mask(), p, 0.0)
        return self._get("probs_mat", fn)

    def candidate_weights(self):
        """Per-candidate (w, mask, active) for FULL logs; w is 1 off-support."""
        def fn():
            mu_all = self.dataset.full_propensity_matrix()
            mask = self.dataset.candidate_mask() & (mu_all > 0)
            safe_mu = np.where(mask, mu_all, 1.0)
            w_all = np.exp(np.maximum(self.log_mat, self.log_floor) - np.log(safe_mu))
            w_all = np.where(mask, w_all, 1.0)
            active = mask & (self.log_mat > self.log_floor)
            return w_all, mask, active
        return self._get("cand_w", fn)


def _kind_value_grad(spec: ObjectiveSpec, kind: ObjectiveKind, ctx: _ObjContext):
    """Return (value, logged_coef, candidate_coef) for one objective kind."""
    n, r = ctx.n, ctx.r
    K = ObjectiveKind
    if kind is K.IPWE_RAW:
        value = float(np.mean((ctx.w - 1.0) * r))
        return value, r * ctx.w * ctx.active / n, None
    if kind is K.IPWE_CLIPPED:
        tau = spec.tau
        if tau is None:
            raise ValueError("IPWE_CLIPPED requires tau")
        w_bar = np.minimum(ctx.w, tau)
        value = float(np.mean((w_bar - 1.0) * r))
        return value, r * ctx.w * (ctx.w < tau) * ctx.active / n, None
    if kind is K.PIL_MU:
        upper = ctx.w >= 1.0
        value = float(np.mean(r * np.where(upper, ctx.log_w, ctx.w - 1.0)))
        return value, r * np.where(upper, 1.0, ctx.w) * ctx.active / n, None
    if kind is K.PIL_EMPTY:
        base = np.maximum(ctx.log_pi, ctx.log_floor)
        if ctx.dataset.scenario is Scenario.MISSING:
            value = float(np.mean(r * base))  # log mu constant unavailable, dropped
        else:
            value = float(np.mean(r * ctx.log_w))
        return value, r * ctx.active / n, None
    if kind is K.CE_WEIGHTED:
        value = float(-np.mean(r * ctx.log_pi))
        return value, -r / n, None
    if kind is K.IML_PART:
        value = float(-np.mean(ctx.log_w))
        return value, -ctx.active.astype(float) / n, None
    if kind is K.IML_MISS:
        value = float(-np.mean(ctx.log_pi))
        return value, -np.ones(n) / n, None
    if kind is K.IML_FULL:
        mu_all = ctx.dataset.full_propensity_matrix()
        mask = ctx.dataset.candidate_mask() & (mu_all > 0)
        safe_mu = np.where(mask, mu_all, 1.0)
        log_w_all = np.maximum(ctx.log_mat, ctx.log_floor) - np.log(safe_mu)
        value = float(-np.mean((mu_all * np.where(mask, log_w_all, 0.0)).sum(axis=1)))
        active = mask & (ctx.log_mat > ctx.log_floor)
        return value, None, -np.where(active, mu_all, 0.0) / n
    if kind is K.POEM:
        z = (ctx.w - 1.0) * r
        dz = r * ctx.w * ctx.active
        mean_z = float(np.mean(z))
        if n < 2 or spec.alpha == 0:
            return mean_z, dz / n, None
        v = float(np.var(z, ddof=1))
        s = np.sqrt(v / n)
        if s == 0.0:
            return mean_z, dz / n, None  # subgradient 0 at sqrt(0)
        coef = dz / n - spec.alpha / (s * n * (n - 1)) * (z - mean_z) * dz
        return mean_z - spec.alpha * s, coef, None
    if kind is K.DR_OBJ:
        rm = _require_model(spec)
        f_hat = rm.predict_matrix(ctx.dataset)
        a_pos = ctx.dataset.action_positions()
        f_logged = f_hat[np.arange(n), a_pos]
        model_term = (ctx.probs_mat * f_hat).sum(axis=1)
        value = float(np.mean(ctx.w * (r - f_logged) + model_term))
        logged = (r - f_logged) * ctx.w * ctx.active / n
        cand = ctx.probs_mat * f_hat / n
        return value, logged, cand
    if kind is K.PIL_DR:
        rm = _require_model(spec)
        bound = spec.tau if spec.tau is not None else spec.dr_bound
        if np.any(r < 0):
            raise ValueError("lower-bound objectives require nonnegative rewards")
        f_hat = rm.predict_matrix(ctx.dataset)
        a_pos = ctx.dataset.action_positions()
        idx = np.arange(n)
        f_logged = f_hat[idx, a_pos]
        w_all, mask, active = ctx.candidate_weights()
        w_bar = np.where(mask, apply_bound(w_all, bound), 0.0)
        dw = _bound_slope(w_all, bound) * active
        mu_all = ctx.dataset.full_propensity_matrix()
        model_term = np.where(mask, w_bar * mu_all * f_hat, 0.0).sum(axis=1)
        dr_value = float(np.mean(w_bar[idx, a_pos] * (r - f_logged) + model_term))
        logged = (r - f_logged) * dw[idx, a_pos] / n
        cand = np.where(mask, mu_all * f_hat * dw, 0.0) / n
        if spec.epsilon == 0:
            return dr_value, logged, cand
        iml_kind = _iml_component(spec, ctx.dataset)
        iml_value, iml_c, iml_d = _kind_value_grad(spec, iml_kind, ctx)
        logged, cand = _combine(logged, cand, iml_c, iml_d, -spec.epsilon, n,
                                ctx.probs_mat.shape)
        return dr_value - spec.epsilon * iml_value, logged, cand
    if kind is K.PIL_IML:
        pil_kind = _pil_component(spec, ctx.dataset)
        iml_kind = _iml_component(spec, ctx.dataset)
        pil_value, pil_c, pil_d = _kind_value_grad(spec, pil_kind, ctx)
        iml_value, iml_c, iml_d = _kind_value_grad(spec, iml_kind, ctx)
        logged, cand = _combine(pil_c, pil_d, iml_c, iml_d, -spec.epsilon, n,
                                ctx.probs_mat.shape)
        return pil_value - spec.epsilon * iml_value, logged, cand
    raise ValueError(f"unknown objective kind {kind}")


def _bound_slope(w: np.ndarray, bound) -> np.ndarray:
    """d w_bar / d log pi expressed as a multiplier on grad log pi."""
    if isinstance(bound, str):
        if bound == "log":
            return np.ones_like(w)
        if bound == "pil":
            return np.where(w >= 1.0, 1.0, w)
        raise ValueError(f"unknown weight bound {bound!r}")
    return w * (w < float(bound))


def _combine(c1, d1, c2, d2, scale2, n, mat_shape):
    c = np.zeros(n) if c1 is None and c2 is None else (
        (c1 if c1 is not None else 0.0) + scale2 * (c2 if c2 is not None else 0.0))
    if d1 is None and d2 is None:
        d = None
    else:
        d = np.zeros(mat_shape)
        if d1 is not None:
            d = d + d1
        if d2 is not None:
            d = d + scale2 * d2
    if isinstance(c, float):
        c = None
    return c, d


def _require_model(spec: ObjectiveSpec) -> RewardModel:
    if spec.reward_model is None:
        raise ValueError(f"objective {spec.kind.value} requires a reward model")
    return spec.reward_model


def eval_objective(spec: ObjectiveSpec, dataset: LoggedDataset, params: PolicyParams,
                   floor: float = PROB_FLOOR) -> tuple[float, np.ndarray]:
    """Objective value (natural sense) and its exact parameter gradient."""
    spec.check_scenario(dataset)
    ctx = _ObjContext(dataset, params, floor)
    value, logged_coef, cand_coef = _kind_value_grad(spec, spec.kind, ctx)
    grad = grad_weighted_log_probs(params, dataset, logged_coef, cand_coef)
    return value, grad


def pil_iml_value(spec: ObjectiveSpec, dataset: LoggedDataset, params: PolicyParams,
                  floor: float = PROB_FLOOR) -> tuple[float, np.ndarray]:
    """PIL minus epsilon times IML, components chosen by the logging scenario."""
    merged = ObjectiveSpec(ObjectiveKind.PIL_IML, epsilon=spec.epsilon, tau=spec.tau,
                           alpha=spec.alpha, l2=spec.l2, reward_model=spec.reward_model,
                           dr_bound=spec.dr_bound, pil_kind=spec.pil_kind,
                           iml_kind=spec.iml_kind)
    return eval_objective(merged, dataset, params, floor)


def poem_objective(alpha: float, dataset: LoggedDataset, params: PolicyParams,
                   floor: float = PROB_FLOOR) -> tuple[float, np.ndarray]:
    """Improvement penalized by alpha times the estimated standard error."""
    return eval_objective(ObjectiveSpec(ObjectiveKind.POEM, alpha=alpha), dataset,
                          params, floor)
