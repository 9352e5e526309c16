"""Parametric stochastic policies over per-record candidate sets.

Four softmax families share one interface: potentials phi(x, a) are mapped to
candidate log-probabilities with a stable log-softmax. Action representations
are either indicator (a global id vocabulary) or explicit feature vectors,
chosen per dataset.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .data import Candidate, DatasetError, LoggedDataset, LoggedRecord, Scenario

# Floor applied to log pi inside importance ratios only (never inside
# sampling), so log-weights stay finite while the policy itself is proper.
PROB_FLOOR = 1e-8


class Family(str, Enum):
    TABULAR = "tabular"
    CONTEXT_FREE = "context-free"
    LINEAR = "linear"
    BILINEAR_LOWRANK = "bilinear-lowrank"
    BILINEAR_FULL = "bilinear-full"


@dataclass(frozen=True)
class Shapes:
    """Dimension record pinning a parameter vector's layout.

    ``action_ids`` is the id vocabulary for indicator action representations
    (None means candidates carry explicit feature vectors); ``context_keys``
    enumerates the distinct contexts a tabular policy was built over.
    """

    context_dim: int
    action_dim: int
    rank: int | None = None
    action_ids: tuple[str, ...] | None = None
    context_keys: tuple[tuple[float, ...], ...] | None = None

    @property
    def feature_mode(self) -> bool:
        return self.action_ids is None


@dataclass(eq=False)
class PolicyParams:
    """Flat parameter vector plus the family and shapes interpreting it."""

    family: Family
    theta: np.ndarray
    shapes: Shapes
    seed: int = 0

    def __post_init__(self):
        self.family = Family(self.family)
        self.theta = np.asarray(self.theta, dtype=float)
        expected = theta_size(self.family, self.shapes)
        if self.theta.shape != (expected,):
            raise ValueError(f"theta length {self.theta.size} != expected {expected} "
                             f"for family {self.family.value}")

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.family, self.theta.copy(), self.shapes, self.seed)


@dataclass(frozen=True)
class ActionDistribution:
    """Log-probabilities over one record's candidates."""

    log_probs: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)


def theta_size(family: Family, shapes: Shapes) -> int:
    p, q, r = shapes.context_dim, shapes.action_dim, shapes.rank
    if family is Family.TABULAR:
        return len(shapes.context_keys) * q
    if family is Family.CONTEXT_FREE:
        return q
    if family is Family.LINEAR:
        return p * q
    if family is Family.BILINEAR_FULL:
        return p * q + q
    if family is Family.BILINEAR_LOWRANK:
        if r is None:
            raise ValueError("BILINEAR_LOWRANK requires a rank")
        return p * r + q * r + q
    raise ValueError(f"unknown family {family}")


def _split_theta(params: PolicyParams):
    p, q, r = params.shapes.context_dim, params.shapes.action_dim, params.shapes.rank
    t = params.theta
    if params.family is Family.TABULAR:
        return (t.reshape(len(params.shapes.context_keys), q),)
    if params.family is Family.CONTEXT_FREE:
        return (t,)
    if params.family is Family.LINEAR:
        return (t.reshape(p, q),)
    if params.family is Family.BILINEAR_FULL:
        return t[: p * q].reshape(p, q), t[p * q:]
    if params.family is Family.BILINEAR_LOWRANK:
        u = t[: p * r].reshape(p, r)
        v = t[p * r: p * r + q * r].reshape(q, r)
        return u, v, t[p * r + q * r:]
    raise ValueError(f"unknown family {params.family}")


def context_key(context: np.ndarray) -> tuple[float, ...]:
    return tuple(float(v) for v in context)


def action_vocabulary(dataset: LoggedDataset) -> tuple[str, ...]:
    ids = sorted({c.id for rec in dataset for c in rec.candidates})
    return tuple(ids)


def init_params(family: Family | str, dataset: LoggedDataset, rank: int | None = None,
                seed: int = 0) -> PolicyParams:
    """Fresh parameters for ``family`` sized to ``dataset``.

    Linear and full-rank parameters start at zero (the uniform policy); the
    low-rank factors start at small uniform noise since zero is a saddle for
    the factorization.
    """
    family = Family(family)
    p = dataset.context_dim
    feature_mode = (dataset.action_feature_dim is not None
                    and family in (Family.LINEAR, Family.BILINEAR_FULL, Family.BILINEAR_LOWRANK))
    ids = None if feature_mode else action_vocabulary(dataset)
    q = dataset.action_feature_dim if feature_mode else len(ids)
    keys = None
    if family is Family.TABULAR:
        seen = {}
        for rec in dataset:
            seen.setdefault(context_key(rec.context), None)
        keys = tuple(seen.keys())
    shapes = Shapes(context_dim=p, action_dim=q, rank=rank if family is Family.BILINEAR_LOWRANK else None,
                    action_ids=ids, context_keys=keys)
    size = theta_size(family, shapes)
    if family is Family.BILINEAR_LOWRANK:
        rng = np.random.default_rng(seed)
        scale = 0.1 / np.sqrt(rank)
        theta = np.zeros(size)
        theta[: p * rank + q * rank] = rng.uniform(-scale, scale, p * rank + q * rank)
    else:
        theta = np.zeros(size)
    return PolicyParams(family, theta, shapes, seed=seed)


def constant_action_params(action_ids, chosen_id: str, scale: float = 60.0,
                           context_dim: int = 0) -> PolicyParams:
    """Context-free params concentrating (numerically) all mass on one action id."""
    ids = tuple(action_ids)
    if chosen_id not in ids:
        raise ValueError(f"{chosen_id!r} not among action ids {ids}")
    theta = np.array([scale if i == chosen_id else 0.0 for i in ids])
    shapes = Shapes(context_dim=context_dim, action_dim=len(ids), action_ids=ids)
    return PolicyParams(Family.CONTEXT_FREE, theta, shapes)


# ---------------------------------------------------------------------------
# dataset encoding (cached on the dataset)
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class _Encoded:
    ids: np.ndarray | None        # (n, A) vocab indices, -1 at padding
    feats: np.ndarray | None      # (n, A, q) in feature mode
    ctx_idx: np.ndarray | None    # (n,) tabular context-key index
    mask: np.ndarray              # (n, A) candidate validity
    a_pos: np.ndarray             # (n,) logged action position
    contexts: np.ndarray          # (n, p) dense contexts

    def sliced(self, idx: np.ndarray) -> "_Encoded":
        pick = lambda arr: None if arr is None else arr[idx]
        return _Encoded(ids=pick(self.ids), feats=pick(self.feats),
                        ctx_idx=pick(self.ctx_idx), mask=self.mask[idx],
                        a_pos=self.a_pos[idx], contexts=self.contexts[idx])


def _encode(params: PolicyParams, dataset: LoggedDataset) -> _Encoded:
    shapes = params.shapes
    context_free = shapes.context_dim == 0 and shapes.context_keys is None
    if not context_free and shapes.context_dim != dataset.context_dim:
        raise DatasetError(f"context dim mismatch: params {shapes.context_dim}, "
                           f"dataset {dataset.context_dim}")
    key = ("enc", shapes.action_ids, shapes.context_keys, shapes.feature_mode,
           shapes.action_dim)
    got = dataset._cache.get(key)
    if got is not None:
        return got
    arrays = dataset._arrays()
    n, a_max = len(dataset), arrays["a_max"]
    mask, a_pos = arrays["mask"], arrays["action_pos"]
    ids = feats = ctx_idx = None
    if shapes.feature_mode:
        feats = np.zeros((n, a_max, shapes.action_dim))
        for i, rec in enumerate(dataset):
            for j, c in enumerate(rec.candidates):
                if c.features is None:
                    raise DatasetError(f"record {i}: candidate {c.id!r} lacks features "
                                       "required by a feature-mode policy")
                if c.features.shape != (shapes.action_dim,):
                    raise DatasetError(f"record {i}: action feature dim mismatch")
                feats[i, j] = c.features
    else:
        vocab = {a: k for k, a in enumerate(shapes.action_ids)}
        ids = np.full((n, a_max), -1, dtype=np.intp)
        for i, rec in enumerate(dataset):
            for j, c in enumerate(rec.candidates):
                k = vocab.get(c.id)
                if k is None:
                    raise DatasetError(f"record {i}: unknown action id {c.id!r}")
                ids[i, j] = k
    if shapes.context_keys is not None:
        lookup = {k: i for i, k in enumerate(shapes.context_keys)}
        ctx_idx = np.empty(n, dtype=np.intp)
        for i, rec in enumerate(dataset):
            k = lookup.get(context_key(rec.context))
            if k is None:
                raise DatasetError(f"record {i}: context unseen by this tabular policy")
            ctx_idx[i] = k
    enc = _Encoded(ids=ids, feats=feats, ctx_idx=ctx_idx, mask=mask, a_pos=a_pos,
                   contexts=dataset.contexts())
    dataset._cache[key] = enc
    return enc


def _potentials(params: PolicyParams, enc: _Encoded) -> np.ndarray:
    """(n, A) potentials phi(x, a), -inf at padding."""
    fam = params.family
    if fam is Family.TABULAR:
        (table,) = _split_theta(params)
        phi = table[enc.ctx_idx[:, None], np.where(enc.mask, enc.ids, 0)]
    elif fam is Family.CONTEXT_FREE:
        (vec,) = _split_theta(params)
        phi = vec[np.where(enc.mask, enc.ids, 0)]
    elif enc.feats is not None:
        if fam is Family.LINEAR:
            (w_mat,) = _split_theta(params)
            phi = np.einsum("ip,pq,ijq->ij", enc.contexts, w_mat, enc.feats)
        elif fam is Family.BILINEAR_FULL:
            w_mat, w_vec = _split_theta(params)
            phi = np.einsum("ip,pq,ijq->ij", enc.contexts, w_mat, enc.feats)
            phi = phi + enc.feats @ w_vec
        else:
            u, v, w_vec = _split_theta(params)
            xu = enc.contexts @ u
            phi = np.einsum("ir,ijr->ij", xu, enc.feats @ v) + enc.feats @ w_vec
    else:
        ids = np.where(enc.mask, enc.ids, 0)
        x = enc.contexts
        if fam is Family.LINEAR:
            (w_mat,) = _split_theta(params)
            phi = np.take_along_axis(x @ w_mat, ids, axis=1)
        elif fam is Family.BILINEAR_FULL:
            w_mat, w_vec = _split_theta(params)
            phi = np.take_along_axis(x @ w_mat + w_vec[None, :], ids, axis=1)
        else:
            u, v, w_vec = _split_theta(params)
            scores = (x @ u) @ v.T + w_vec[None, :]
            phi = np.take_along_axis(scores, ids, axis=1)
    if not np.all(np.isfinite(phi[enc.mask])):
        raise FloatingPointError("non-finite potential")
    return np.where(enc.mask, phi, -np.inf)


def _log_softmax(phi: np.ndarray, mask: np.ndarray) -> np.ndarray:
    m = np.max(np.where(mask, phi, -np.inf), axis=1, keepdims=True)
    z = np.where(mask, np.exp(phi - m), 0.0)
    log_norm = m + np.log(z.sum(axis=1, keepdims=True))
    return np.where(mask, phi - log_norm, -np.inf)


def params_log_prob_matrix(params: PolicyParams, dataset: LoggedDataset) -> np.ndarray:
    enc = _encode(params, dataset)
    return _log_softmax(_potentials(params, enc), enc.mask)


def log_prob_matrix(policy, dataset: LoggedDataset) -> np.ndarray:
    """(n, A_max) candidate log-probabilities under ``policy``, -inf at padding."""
    if isinstance(policy, PolicyParams):
        return params_log_prob_matrix(policy, dataset)
    if hasattr(policy, "log_prob_matrix"):
        return policy.log_prob_matrix(dataset)
    raise TypeError(f"not a policy: {policy!r}")


def logged_action_log_probs(policy, dataset: LoggedDataset) -> np.ndarray:
    """log pi(a_i | x_i) at the logged actions."""
    if hasattr(policy, "logged_action_log_probs"):
        return policy.logged_action_log_probs(dataset)
    mat = log_prob_matrix(policy, dataset)
    return np.take_along_axis(mat, dataset.action_positions()[:, None], axis=1)[:, 0]


# ---------------------------------------------------------------------------
# per-record spec operations (thin views over the batched path)
# ---------------------------------------------------------------------------

def _single(record: LoggedRecord, params: PolicyParams) -> LoggedDataset:
    afd = None
    if params.shapes.feature_mode:
        afd = params.shapes.action_dim
    return LoggedDataset((record,), Scenario.MISSING, len(record.context), afd)


def score(params: PolicyParams, record: LoggedRecord) -> ActionDistribution:
    """Log-softmax of potentials over the record's candidate set."""
    mat = params_log_prob_matrix(params, _single(record, params))
    return ActionDistribution(mat[0, : record.n_candidates].copy())


def grad_log_prob(params: PolicyParams, record: LoggedRecord, action_index: int) -> np.ndarray:
    """Analytic d/d theta of log pi(action | record)."""
    if not 0 <= action_index < record.n_candidates:
        raise IndexError("action_index out of range")
    ds = _single(record, params)
    probs = np.exp(params_log_prob_matrix(params, ds))
    coef = -probs
    coef[0, action_index] += 1.0
    return _grad_phi(params, _encode(params, ds), coef)


def sharpen(params_or_dist, record: LoggedRecord | None = None) -> int:
    """Greedy argmax over candidates; ties break to the lowest index."""
    if isinstance(params_or_dist, ActionDistribution):
        return int(np.argmax(params_or_dist.log_probs))
    return int(np.argmax(score(params_or_dist, record).log_probs))


def sample_action(params: PolicyParams, record: LoggedRecord, rng_seed: int) -> int:
    """Seeded draw from the record's action distribution."""
    probs = score(params, record).probs
    probs = probs / probs.sum()
    return int(np.random.default_rng(rng_seed).choice(record.n_candidates, p=probs))


# ---------------------------------------------------------------------------
# gradient machinery shared by the objectives
# ---------------------------------------------------------------------------

def _grad_phi(params: PolicyParams, enc: _Encoded, coef: np.ndarray) -> np.ndarray:
    """Flat gradient of sum_{i,a} coef[i,a] * phi(x_i, a)."""
    fam = params.family
    shapes = params.shapes
    p, q = shapes.context_dim, shapes.action_dim
    coef = np.where(enc.mask, coef, 0.0)
    x = enc.contexts
    if fam is Family.TABULAR:
        grad = np.zeros((len(shapes.context_keys), q))
        for j in range(coef.shape[1]):
            m = enc.mask[:, j]
            np.add.at(grad, (enc.ctx_idx[m], enc.ids[m, j]), coef[m, j])
        return grad.ravel()
    if fam is Family.CONTEXT_FREE:
        grad = np.zeros(q)
        for j in range(coef.shape[1]):
            m = enc.mask[:, j]
            np.add.at(grad, enc.ids[m, j], coef[m, j])
        return grad
    if enc.feats is not None:
        f = enc.feats
        if fam is Family.LINEAR:
            return np.einsum("ij,ip,ijq->pq", coef, x, f).ravel()
        if fam is Family.BILINEAR_FULL:
            d_w = np.einsum("ij,ip,ijq->pq", coef, x, f)
            d_b = np.einsum("ij,ijq->q", coef, f)
            return np.concatenate([d_w.ravel(), d_b])
        u, v, _ = _split_theta(params)
        xu = x @ u
        d_u = np.einsum("ij,ip,ijr->pr", coef, x, f @ v)
        d_v = np.einsum("ij,ijq,ir->qr", coef, f, xu)
        d_b = np.einsum("ij,ijq->q", coef, f)
        return np.concatenate([d_u.ravel(), d_v.ravel(), d_b])
    # indicator mode
    if fam is Family.LINEAR or fam is Family.BILINEAR_FULL:
        d_w_t = np.zeros((q, p))
        d_b = np.zeros(q)
        for j in range(coef.shape[1]):
            m = enc.mask[:, j]
            np.add.at(d_w_t, enc.ids[m, j], coef[m, j, None] * x[m])
            if fam is Family.BILINEAR_FULL:
                np.add.at(d_b, enc.ids[m, j], coef[m, j])
        if fam is Family.LINEAR:
            return d_w_t.T.ravel()
        return np.concatenate([d_w_t.T.ravel(), d_b])
    u, v, _ = _split_theta(params)
    xu = x @ u
    d_u = np.zeros_like(u)
    d_v = np.zeros_like(v)
    d_b = np.zeros(q)
    for j in range(coef.shape[1]):
        m = enc.mask[:, j]
        ids_j = enc.ids[m, j]
        d_u += x[m].T @ (coef[m, j, None] * v[ids_j])
        np.add.at(d_v, ids_j, coef[m, j, None] * xu[m])
        np.add.at(d_b, ids_j, coef[m, j])
    return np.concatenate([d_u.ravel(), d_v.ravel(), d_b])


def grad_weighted_log_probs(params: PolicyParams, dataset: LoggedDataset,
                            logged_coef: np.ndarray | None = None,
                            candidate_coef: np.ndarray | None = None) -> np.ndarray:
    """Flat gradient of sum_i c_i log pi(a_i|x_i) + sum_{i,a} D_ia log pi(a|x_i)."""
    enc = _encode(params, dataset)
    probs = np.exp(_log_softmax(_potentials(params, enc), enc.mask))
    coef = np.zeros_like(probs)
    if logged_coef is not None:
        np.add.at(coef, (np.arange(len(dataset)), enc.a_pos), logged_coef)
    if candidate_coef is not None:
        coef = coef + np.where(enc.mask, candidate_coef, 0.0)
    coef = coef - coef.sum(axis=1, keepdims=True) * probs
    return _grad_phi(params, enc, coef)


# ---------------------------------------------------------------------------
# non-parametric policy wrappers
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SharpenedPolicy:
    """Greedy argmax of a base policy, as a (deterministic) policy."""

    base: object

    def log_prob_matrix(self, dataset: LoggedDataset) -> np.ndarray:
        base = log_prob_matrix(self.base, dataset)
        out = np.full_like(base, -np.inf)
        out[np.arange(base.shape[0]), np.argmax(base, axis=1)] = 0.0
        return out


@dataclass(eq=False)
class LoggingPolicy:
    """The policy that produced the log, read back from its propensities."""

    def log_prob_matrix(self, dataset: LoggedDataset) -> np.ndarray:
        mu_all = dataset.full_propensity_matrix()
        with np.errstate(divide="ignore"):
            out = np.where(dataset.candidate_mask(), np.log(mu_all), -np.inf)
        return out

    def logged_action_log_probs(self, dataset: LoggedDataset) -> np.ndarray:
        return np.log(dataset.propensities())


@dataclass(eq=False)
class UniformPolicy:
    def log_prob_matrix(self, dataset: LoggedDataset) -> np.ndarray:
        mask = dataset.candidate_mask()
        k = mask.sum(axis=1, keepdims=True).astype(float)
        return np.where(mask, -np.log(k), -np.inf)


@dataclass(eq=False)
class FixedMarginalPolicy:
    """Context-independent probabilities by action id, renormalized per record."""

    probs: dict

    def log_prob_matrix(self, dataset: LoggedDataset) -> np.ndarray:
        n = len(dataset)
        a_max = dataset.candidate_mask().shape[1]
        out = np.full((n, a_max), -np.inf)
        for i, rec in enumerate(dataset):
            raw = np.array([float(self.probs.get(c.id, 0.0)) for c in rec.candidates])
            total = raw.sum()
            if total <= 0:
                raise ValueError(f"record {i}: no probability mass on its candidates")
            with np.errstate(divide="ignore"):
                out[i, : rec.n_candidates] = np.log(raw / total)
        return out


@dataclass(eq=False)
class ContextTablePolicy:
    """Probabilities keyed by exact context vector and action id."""

    table: dict  # context key tuple -> {action id: prob}

    def log_prob_matrix(self, dataset: LoggedDataset) -> np.ndarray:
        n = len(dataset)
        a_max = dataset.candidate_mask().shape[1]
        out = np.full((n, a_max), -np.inf)
        for i, rec in enumerate(dataset):
            row = self.table.get(context_key(rec.context))
            if row is None:
                raise DatasetError(f"record {i}: context missing from policy table")
            raw = np.array([float(row.get(c.id, 0.0)) for c in rec.candidates])
            total = raw.sum()
            if total <= 0:
                raise ValueError(f"record {i}: no probability mass on its candidates")
            with np.errstate(divide="ignore"):
                out[i, : rec.n_candidates] = np.log(raw / total)
        return out


# ---------------------------------------------------------------------------
# checkpoint files: header line (family, shapes, seed) + flat parameter line
# ---------------------------------------------------------------------------

def save_params(params: PolicyParams, path) -> None:
    header = {
        "family": params.family.value,
        "context_dim": params.shapes.context_dim,
        "action_dim": params.shapes.action_dim,
        "rank": params.shapes.rank,
        "action_ids": list(params.shapes.action_ids) if params.shapes.action_ids else None,
        "context_keys": ([list(k) for k in params.shapes.context_keys]
                         if params.shapes.context_keys else None),
        "seed": params.seed,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header) + "\n")
        fh.write(json.dumps([float(v) for v in params.theta]) + "\n")


def load_params(path) -> PolicyParams:
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        theta = np.asarray(json.loads(fh.readline()), dtype=float)
    shapes = Shapes(
        context_dim=int(header["context_dim"]),
        action_dim=int(header["action_dim"]),
        rank=header.get("rank"),
        action_ids=tuple(header["action_ids"]) if header.get("action_ids") else None,
        context_keys=(tuple(tuple(float(v) for v in k) for k in header["context_keys"])
                      if header.get("context_keys") else None),
    )
    return PolicyParams(Family(header["family"]), theta, shapes, seed=int(header.get("seed", 0)))
