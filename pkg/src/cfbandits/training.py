"""Seeded minibatch SGD over any objective, plus reward-model fitting."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import DatasetError, LoggedDataset, LoggedRecord, Scenario
from .estimators import RewardModel
from .objectives import ObjectiveKind, ObjectiveSpec, eval_objective
from .policies import (Family, PolicyParams, context_key, init_params,
                       log_prob_matrix, logged_action_log_probs)

_HOLDOUT_SALT = 9601
_EPOCH_SALT = 7301


@dataclass(eq=False)
class TrainConfig:
    """Optimizer settings; defaults favor small, reproducible desk-scale runs.

    ``batch_size=None`` means full-batch updates. All shuffling and splitting
    derives from ``seed`` alone.
    """

    learning_rate: float = 0.5
    decay: str = "inverse-sqrt"   # or "constant"
    batch_size: int | None = None
    max_epochs: int = 200
    seed: int = 0
    l2: float = 0.0
    tol: float = 1e-6
    patience: int = 5
    holdout_fraction: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must be in [0, 1)")
        if self.decay not in ("inverse-sqrt", "constant"):
            raise ValueError(f"unknown decay {self.decay!r}")

    def rate_at(self, epoch: int) -> float:
        if self.decay == "constant":
            return self.learning_rate
        return self.learning_rate / np.sqrt(1.0 + epoch)


@dataclass(eq=False)
class TrainTrace:
    """Per-epoch diagnostics from one training run."""

    objective: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    iml_loss: list = field(default_factory=list)
    holdout_gap: list = field(default_factory=list)
    converged: bool = False
    diverged: bool = False

    @property
    def epochs(self) -> int:
        return len(self.objective)

    def csv_rows(self):
        yield ["epoch", "objective", "grad_norm", "iml_loss", "holdout_gap"]
        for i in range(self.epochs):
            yield [i, self.objective[i], self.grad_norm[i], self.iml_loss[i],
                   self.holdout_gap[i]]


def _iml_loss_of(dataset: LoggedDataset, params: PolicyParams) -> float:
    if dataset.scenario is Scenario.MISSING:
        kind = ObjectiveKind.IML_MISS
    elif dataset.scenario is Scenario.FULL:
        kind = ObjectiveKind.IML_FULL
    else:
        kind = ObjectiveKind.IML_PART
    value, _ = eval_objective(ObjectiveSpec(kind), dataset, params)
    return value


def _holdout_gap(holdout: LoggedDataset | None, params: PolicyParams) -> float:
    if holdout is None:
        return float("nan")
    try:
        mu = holdout.propensities()
    except DatasetError:
        return float("nan")
    log_pi = logged_action_log_probs(params, holdout)
    return float(np.mean(1.0 - np.exp(log_pi) / mu))


def train(spec: ObjectiveSpec, dataset: LoggedDataset, family: Family | str | PolicyParams,
          config: TrainConfig | None = None, rank: int | None = None
          ) -> tuple[PolicyParams, TrainTrace]:
    """Maximize ``spec`` (or minimize, for loss-type kinds) over a policy family.

    Deterministic given the config seed. Returns the trained parameters and a
    per-epoch trace; on a non-finite objective the last finite parameters are
    returned with ``trace.diverged`` set.
    """
    config = config or TrainConfig()
    spec.check_scenario(dataset)
    if isinstance(family, PolicyParams):
        params = family.copy()
    else:
        params = init_params(family, dataset, rank=rank, seed=config.seed)

    holdout = None
    train_ds = dataset
    if config.holdout_fraction > 0:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, _HOLDOUT_SALT]))
        perm = rng.permutation(len(dataset))
        n_hold = int(round(config.holdout_fraction * len(dataset)))
        n_hold = min(n_hold, len(dataset) - 1)
        if n_hold > 0:
            holdout = dataset.subset(perm[:n_hold])
            train_ds = dataset.subset(perm[n_hold:])

    sense = 1.0 if spec.sense == "max" else -1.0
    l2 = config.l2 if config.l2 > 0 else spec.l2
    n = len(train_ds)
    batch = n if config.batch_size is None else min(config.batch_size, n)
    if batch < n:
        eval_objective(spec, train_ds, params)  # warm caches so batches slice them

    trace = TrainTrace()
    last_good = params.theta.copy()
    still = 0
    for epoch in range(config.max_epochs):
        lr = config.rate_at(epoch)
        if batch >= n:
            batches = [train_ds]
        else:
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, _EPOCH_SALT, epoch]))
            perm = rng.permutation(n)
            batches = [train_ds.subset(perm[s:s + batch]) for s in range(0, n, batch)]
        bad = False
        try:
            for bds in batches:
                _, grad = eval_objective(spec, bds, params)
                with np.errstate(over="ignore", invalid="ignore"):
                    step = sense * grad - l2 * params.theta
                    params.theta = params.theta + lr * step
                if not np.all(np.isfinite(params.theta)):
                    bad = True
                    break
            if not bad:
                value, grad = eval_objective(spec, train_ds, params)
                bad = not np.isfinite(value)
        except FloatingPointError:
            bad = True
        if bad:
            params.theta = last_good
            trace.diverged = True
            break
        last_good = params.theta.copy()
        trace.objective.append(float(value))
        trace.grad_norm.append(float(np.linalg.norm(grad)))
        trace.iml_loss.append(_iml_loss_of(train_ds, params))
        trace.holdout_gap.append(_holdout_gap(holdout, params))
        if epoch > 0:
            prev = trace.objective[-2]
            rel = abs(trace.objective[-1] - prev) / max(1.0, abs(prev))
            still = still + 1 if rel < config.tol else 0
            if still >= config.patience:
                trace.converged = True
                break
    return params, trace


# ---------------------------------------------------------------------------
# reward models (ridge / cell means) and the greedy baseline policy
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class TabularRewardModel(RewardModel):
    """Per-cell reward means with action-marginal and global fallbacks."""

    cell_means: dict
    action_means: dict
    global_mean: float
    use_context: bool

    def predict(self, record: LoggedRecord) -> np.ndarray:
        key = context_key(record.context) if self.use_context else None
        out = np.empty(record.n_candidates)
        for j, cand in enumerate(record.candidates):
            v = self.cell_means.get((key, cand.id)) if self.use_context else None
            if v is None:
                v = self.action_means.get(cand.id, self.global_mean)
            out[j] = v
        return out


@dataclass(eq=False)
class LinearRewardModel(RewardModel):
    """Ridge regression of reward on joint context-action features."""

    beta: np.ndarray
    include_action_term: bool
    action_ids: tuple | None   # None -> candidates carry feature vectors

    def _features(self, context: np.ndarray, cand) -> np.ndarray:
        if self.action_ids is None:
            a = cand.features
        else:
            a = np.zeros(len(self.action_ids))
            a[self.action_ids.index(cand.id)] = 1.0
        joint = np.outer(context, a).ravel()
        if self.include_action_term:
            return np.concatenate([joint, a])
        return joint

    def predict(self, record: LoggedRecord) -> np.ndarray:
        return np.array([float(self._features(record.context, c) @ self.beta)
                         for c in record.candidates])


def fit_reward_model(dataset: LoggedDataset, family: Family | str,
                     l2: float = 1e-6) -> RewardModel:
    """Least-squares fit of reward on (context, action) features.

    Tabular families use exact cell means; linear families use ridge with a
    small default penalty so singular designs stay solvable.
    """
    family = Family(family)
    if family in (Family.TABULAR, Family.CONTEXT_FREE):
        use_context = family is Family.TABULAR
        sums: dict = {}
        counts: dict = {}
        a_sums: dict = {}
        a_counts: dict = {}
        total, n = 0.0, 0
        for rec in dataset:
            key = context_key(rec.context) if use_context else None
            cell = (key, rec.action_id)
            sums[cell] = sums.get(cell, 0.0) + rec.reward
            counts[cell] = counts.get(cell, 0) + 1
            a_sums[rec.action_id] = a_sums.get(rec.action_id, 0.0) + rec.reward
            a_counts[rec.action_id] = a_counts.get(rec.action_id, 0) + 1
            total += rec.reward
            n += 1
        return TabularRewardModel(
            cell_means={c: sums[c] / counts[c] for c in sums},
            action_means={a: a_sums[a] / a_counts[a] for a in a_sums},
            global_mean=total / n if n else 0.0,
            use_context=use_context,
        )
    if family in (Family.LINEAR, Family.BILINEAR_FULL):
        ids = None
        if dataset.action_feature_dim is None:
            ids = tuple(sorted({c.id for rec in dataset for c in rec.candidates}))
        model = LinearRewardModel(beta=np.zeros(1),
                                  include_action_term=family is Family.BILINEAR_FULL,
                                  action_ids=ids)
        rows = np.stack([model._features(rec.context, rec.candidates[rec.action_index])
                         for rec in dataset])
        y = dataset.rewards()
        gram = rows.T @ rows + l2 * np.eye(rows.shape[1])
        model.beta = np.linalg.solve(gram, rows.T @ y)
        return model
    raise ValueError(f"reward models support linear-in-parameter families only, "
                     f"not {family.value}")


@dataclass(eq=False)
class GreedyRewardPolicy:
    """Deterministic policy choosing the reward model's best candidate."""

    reward_model: RewardModel

    def log_prob_matrix(self, dataset: LoggedDataset) -> np.ndarray:
        preds = self.reward_model.predict_matrix(dataset)
        mask = dataset.candidate_mask()
        preds = np.where(mask, preds, -np.inf)
        out = np.full(preds.shape, -np.inf)
        out[np.arange(preds.shape[0]), np.argmax(preds, axis=1)] = 0.0
        return out
