"""Logged bandit data model, line-delimited serialization, and exact tabular oracles."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterator, Sequence

import numpy as np

# Propensities below this are rejected at load time instead of clamped, so that
# pathological logs surface as errors rather than silently bounded weights.
MIN_PROPENSITY = 1e-12

PROB_SUM_TOL = 1e-9


class Scenario(str, Enum):
    """How much of the logging policy was recorded alongside each action."""

    FULL = "FULL"          # probabilities of every candidate are logged
    PARTIAL = "PARTIAL"    # only the probability of the taken action is logged
    MISSING = "MISSING"    # no probabilities available


class DatasetError(ValueError):
    """Malformed dataset file or record invariant violation."""


@dataclass(frozen=True)
class Candidate:
    """One eligible action: an id plus an optional feature vector."""

    id: str
    features: np.ndarray | None = None

    def __post_init__(self):
        if self.features is not None:
            object.__setattr__(self, "features", np.asarray(self.features, dtype=float))


@dataclass(eq=False)
class LoggedRecord:
    """One logged interaction: context, candidate set, taken action, propensity, reward.

    ``extras`` carries side-channel keys (e.g. a hidden confounder under ``"h"``,
    or a resampling ``"weight"``) that learners never read.
    """

    context: np.ndarray
    candidates: tuple[Candidate, ...]
    action_index: int
    reward: float
    propensity: float | None = None
    full_propensities: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.context = np.asarray(self.context, dtype=float)
        self.candidates = tuple(self.candidates)
        if self.full_propensities is not None:
            self.full_propensities = np.asarray(self.full_propensities, dtype=float)
        if self.propensity is None and self.full_propensities is not None:
            self.propensity = float(self.full_propensities[self.action_index])

    @property
    def n_candidates(self) -> int:
        return len(self.candidates)

    @property
    def action_id(self) -> str:
        return self.candidates[self.action_index].id


def validate_record(rec: LoggedRecord, line_no: int | None = None) -> None:
    """Check every LoggedRecord invariant, raising DatasetError with the field name."""
    where = f" (line {line_no})" if line_no is not None else ""

    def fail(msg: str):
        raise DatasetError(msg + where)

    if rec.n_candidates == 0:
        fail("candidates must be nonempty")
    if not 0 <= rec.action_index < rec.n_candidates:
        fail(f"action_index {rec.action_index} out of range for {rec.n_candidates} candidates")
    if not np.isfinite(rec.reward) or rec.reward < 0:
        fail(f"reward must be a nonnegative real, got {rec.reward}")
    if not np.all(np.isfinite(rec.context)):
        fail("context has non-finite entries")
    if rec.propensity is not None:
        if not (0.0 < rec.propensity <= 1.0):
            fail("propensity must be in (0,1]")
        if rec.propensity < MIN_PROPENSITY:
            fail(f"propensity below {MIN_PROPENSITY:g} rejected")
    if rec.full_propensities is not None:
        p_all = rec.full_propensities
        if p_all.shape != (rec.n_candidates,):
            fail("full_propensities length must match candidates")
        if np.any(p_all < 0) or np.any(p_all > 1):
            fail("full_propensities entries must be in [0,1]")
        if abs(float(p_all.sum()) - 1.0) > PROB_SUM_TOL:
            fail(f"full_propensities must sum to 1, got {float(p_all.sum())!r}")
        if rec.propensity is not None and abs(float(p_all[rec.action_index]) - rec.propensity) > PROB_SUM_TOL:
            fail("full_propensities entry at action_index must equal propensity")


@dataclass(eq=False)
class LoggedDataset:
    """Immutable collection of LoggedRecords with a declared logging scenario.

    Treated as read-only after construction; safe to share across threads.
    """

    records: tuple[LoggedRecord, ...]
    scenario: Scenario
    context_dim: int
    action_feature_dim: int | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.records = tuple(self.records)
        self.scenario = Scenario(self.scenario)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[LoggedRecord]:
        return iter(self.records)

    def __getitem__(self, i: int) -> LoggedRecord:
        return self.records[i]

    @property
    def n(self) -> int:
        return len(self.records)

    def subset(self, indices: Sequence[int]) -> "LoggedDataset":
        """New dataset over the given record indices (records are shared).

        Cached dense views are carried over by row slicing, so repeated
        minibatching stays cheap.
        """
        idx = np.asarray(indices, dtype=np.intp)
        recs = tuple(self.records[int(i)] for i in idx)
        child = LoggedDataset(recs, self.scenario, self.context_dim, self.action_feature_dim)
        arrays = self._cache.get("arrays")
        if arrays is not None:
            child._cache["arrays"] = {
                key: (val[idx] if isinstance(val, np.ndarray) else val)
                for key, val in arrays.items()
            }
        for key, enc in self._cache.items():
            if isinstance(key, tuple) and key and key[0] == "enc":
                child._cache[key] = enc.sliced(idx)
        return child

    def validate(self) -> "LoggedDataset":
        if not self.records:
            raise DatasetError("empty dataset")
        for i, rec in enumerate(self.records):
            validate_record(rec, line_no=None)
            if rec.context.shape != (self.context_dim,):
                raise DatasetError(
                    f"record {i}: context dim {rec.context.shape[0]} != declared {self.context_dim}"
                )
            if self.scenario is Scenario.FULL and rec.full_propensities is None:
                raise DatasetError(f"record {i}: FULL scenario requires full_propensities")
            if self.scenario is Scenario.PARTIAL and rec.propensity is None:
                raise DatasetError(f"record {i}: PARTIAL scenario requires propensity")
        return self

    # -- dense array views (cached; cheap to reuse across estimators) --------

    def _arrays(self) -> dict:
        got = self._cache.get("arrays")
        if got is not None:
            return got
        n = len(self.records)
        a_max = max(r.n_candidates for r in self.records)
        rewards = np.array([r.reward for r in self.records], dtype=float)
        action_pos = np.array([r.action_index for r in self.records], dtype=np.intp)
        n_cands = np.array([r.n_candidates for r in self.records], dtype=np.intp)
        mask = np.arange(a_max)[None, :] < n_cands[:, None]
        contexts = np.zeros((n, self.context_dim))
        for i, r in enumerate(self.records):
            contexts[i] = r.context
        if all(r.propensity is not None for r in self.records):
            mu = np.array([r.propensity for r in self.records], dtype=float)
        else:
            mu = None
        if all(r.full_propensities is not None for r in self.records):
            mu_all = np.zeros((n, a_max))
            for i, r in enumerate(self.records):
                mu_all[i, : r.n_candidates] = r.full_propensities
        else:
            mu_all = None
        out = {
            "rewards": rewards,
            "action_pos": action_pos,
            "n_cands": n_cands,
            "mask": mask,
            "contexts": contexts,
            "mu": mu,
            "mu_all": mu_all,
            "a_max": a_max,
        }
        self._cache["arrays"] = out
        return out

    def rewards(self) -> np.ndarray:
        return self._arrays()["rewards"]

    def propensities(self) -> np.ndarray:
        mu = self._arrays()["mu"]
        if mu is None:
            raise DatasetError("propensities required but missing from dataset")
        return mu

    def full_propensity_matrix(self) -> np.ndarray:
        mu_all = self._arrays()["mu_all"]
        if mu_all is None:
            raise DatasetError("full propensities required but missing from dataset")
        return mu_all

    def contexts(self) -> np.ndarray:
        return self._arrays()["contexts"]

    def candidate_mask(self) -> np.ndarray:
        return self._arrays()["mask"]

    def action_positions(self) -> np.ndarray:
        return self._arrays()["action_pos"]


# ---------------------------------------------------------------------------
# line-delimited serialization
#
# One JSON object per line, LF-terminated, UTF-8:
#   {"x": [[idx,val],...], "cands": [{"id": str, "f": [[idx,val],...]?}],
#    "a": int, "p": float?, "p_all": [float]?, "r": float, "count": int?, ...}
# Sparse pairs use 0-based indices. Extra keys (e.g. "h", "weight") round-trip
# through record.extras.
# ---------------------------------------------------------------------------

_KNOWN_KEYS = {"x", "cands", "a", "p", "p_all", "r", "count"}


def sparse_to_dense(pairs, dim: int, line_no: int | None = None) -> np.ndarray:
    vec = np.zeros(dim)
    for pair in pairs:
        if len(pair) != 2:
            raise DatasetError(f"sparse pair must be [index, value] (line {line_no})")
        idx, val = int(pair[0]), float(pair[1])
        if not 0 <= idx < dim:
            raise DatasetError(f"sparse index {idx} out of range {dim} (line {line_no})")
        vec[idx] = val
    return vec


def dense_to_sparse(vec: np.ndarray) -> list:
    return [[int(i), float(v)] for i, v in enumerate(np.asarray(vec)) if v != 0.0]


def _max_sparse_index(pairs) -> int:
    return max((int(p[0]) for p in pairs), default=-1)


def parse_record_line(line: str, line_no: int, context_dim: int,
                      action_feature_dim: int | None) -> tuple[LoggedRecord, int]:
    """Parse one JSON line into a (record, count) pair."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"parse error at line {line_no}: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise DatasetError(f"parse error at line {line_no}: expected an object")
    for key in ("cands", "a", "r"):
        if key not in obj:
            raise DatasetError(f"missing key {key!r} (line {line_no})")
    context = sparse_to_dense(obj.get("x", []), context_dim, line_no)
    cands = []
    for c in obj["cands"]:
        feats = None
        if c.get("f") is not None:
            if action_feature_dim is None:
                raise DatasetError(f"candidate features present but no action_feature_dim (line {line_no})")
            feats = sparse_to_dense(c["f"], action_feature_dim, line_no)
        cands.append(Candidate(str(c["id"]), feats))
    p_all = obj.get("p_all")
    rec = LoggedRecord(
        context=context,
        candidates=tuple(cands),
        action_index=int(obj["a"]),
        reward=float(obj["r"]),
        propensity=(float(obj["p"]) if obj.get("p") is not None else None),
        full_propensities=(np.asarray(p_all, dtype=float) if p_all is not None else None),
        extras={k: v for k, v in obj.items() if k not in _KNOWN_KEYS},
    )
    count = int(obj.get("count", 1))
    if count < 1:
        raise DatasetError(f"count must be >= 1 (line {line_no})")
    validate_record(rec, line_no)
    return rec, count


def record_to_json(rec: LoggedRecord) -> str:
    obj: dict = {"x": dense_to_sparse(rec.context)}
    obj["cands"] = [
        {"id": c.id} if c.features is None else {"id": c.id, "f": dense_to_sparse(c.features)}
        for c in rec.candidates
    ]
    obj["a"] = int(rec.action_index)
    if rec.propensity is not None:
        obj["p"] = float(rec.propensity)
    if rec.full_propensities is not None:
        obj["p_all"] = [float(v) for v in rec.full_propensities]
    obj["r"] = float(rec.reward)
    obj.update(rec.extras)
    return json.dumps(obj)


def infer_scenario(records: Sequence[LoggedRecord]) -> Scenario:
    if all(r.full_propensities is not None for r in records):
        return Scenario.FULL
    if all(r.propensity is not None for r in records):
        return Scenario.PARTIAL
    return Scenario.MISSING


def load_dataset(path, scenario: Scenario | str = "infer", context_dim: int | None = None,
                 action_feature_dim: int | None = None) -> LoggedDataset:
    """Load and validate a line-delimited dataset file.

    Aggregated rows carrying a ``count`` key are expanded into ``count`` records.
    ``context_dim``/``action_feature_dim`` are inferred from sparse indices when
    not given; pass them explicitly if trailing dimensions are all-zero.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = [(i + 1, ln) for i, ln in enumerate(fh) if ln.strip()]
    if not lines:
        raise DatasetError("empty dataset")
    if context_dim is None or action_feature_dim is None:
        max_x, max_f, saw_f = -1, -1, False
        for line_no, ln in lines:
            try:
                obj = json.loads(ln)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"parse error at line {line_no}: {exc.msg}") from exc
            max_x = max(max_x, _max_sparse_index(obj.get("x", [])))
            for c in obj.get("cands", []):
                if c.get("f") is not None:
                    saw_f = True
                    max_f = max(max_f, _max_sparse_index(c["f"]))
        if context_dim is None:
            context_dim = max_x + 1
        if action_feature_dim is None:
            action_feature_dim = (max_f + 1) if saw_f else None

    records: list[LoggedRecord] = []
    for line_no, ln in lines:
        rec, count = parse_record_line(ln, line_no, context_dim, action_feature_dim)
        records.append(rec)
        for _ in range(count - 1):
            records.append(replace(rec, extras=dict(rec.extras)))

    inferred = infer_scenario(records)
    if scenario == "infer":
        scen = inferred
    else:
        scen = Scenario(scenario)
        if scen is Scenario.FULL and inferred is not Scenario.FULL:
            raise DatasetError("scenario FULL declared but some records lack full_propensities")
        if scen is Scenario.PARTIAL and inferred is Scenario.MISSING:
            raise DatasetError("scenario PARTIAL declared but some records lack propensity")
    return LoggedDataset(tuple(records), scen, context_dim, action_feature_dim).validate()


def save_dataset(dataset: LoggedDataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in dataset.records:
            fh.write(record_to_json(rec))
            fh.write("\n")


# ---------------------------------------------------------------------------
# exact tabular oracle
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class TabularEnvironment:
    """Finite bandit environment used as a brute-force oracle in tests.

    ``observed_groups`` optionally maps each (joint) context to the observed
    part of the context; contexts sharing a group differ only in hidden state.
    """

    context_probs: np.ndarray
    logging_policy: np.ndarray   # (n_contexts, n_actions)
    reward_table: np.ndarray     # (n_contexts, n_actions)
    r_max: float | None = None
    observed_groups: np.ndarray | None = None

    def __post_init__(self):
        self.context_probs = np.asarray(self.context_probs, dtype=float)
        self.logging_policy = np.asarray(self.logging_policy, dtype=float)
        self.reward_table = np.asarray(self.reward_table, dtype=float)
        if self.r_max is None:
            self.r_max = float(self.reward_table.max()) if self.reward_table.size else 0.0
        if self.observed_groups is not None:
            self.observed_groups = np.asarray(self.observed_groups, dtype=np.intp)
        if abs(self.context_probs.sum() - 1.0) > 1e-12:
            raise ValueError("context_probs must sum to 1 within 1e-12")
        if np.any(np.abs(self.logging_policy.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("logging_policy rows must sum to 1 within 1e-12")
        if np.any(self.reward_table < 0) or np.any(self.reward_table > self.r_max):
            raise ValueError("rewards must lie in [0, r_max]")
        if self.logging_policy.shape != self.reward_table.shape:
            raise ValueError("logging_policy and reward_table shapes differ")
        if self.context_probs.shape[0] != self.logging_policy.shape[0]:
            raise ValueError("context_probs length must match logging_policy rows")

    @property
    def n_contexts(self) -> int:
        return self.logging_policy.shape[0]

    @property
    def n_actions(self) -> int:
        return self.logging_policy.shape[1]

    def groups(self) -> np.ndarray:
        if self.observed_groups is not None:
            return self.observed_groups
        return np.arange(self.n_contexts, dtype=np.intp)


def _as_table(env: TabularEnvironment, f) -> np.ndarray:
    if callable(f):
        table = np.array([[float(f(x, a)) for a in range(env.n_actions)]
                          for x in range(env.n_contexts)])
    else:
        table = np.asarray(f, dtype=float)
    if table.shape != (env.n_contexts, env.n_actions):
        raise ValueError(f"table shape {table.shape} does not match environment "
                         f"({env.n_contexts}, {env.n_actions})")
    return table


def exact_policy_value(env: TabularEnvironment, policy) -> float:
    """Expected reward of ``policy`` ((n_contexts, n_actions) rows) by enumeration."""
    pi = _as_table(env, policy)
    if np.any(np.abs(pi.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("policy rows must sum to 1")
    return float(env.context_probs @ (pi * env.reward_table).sum(axis=1))


def exact_expectation_under_logging(env: TabularEnvironment, f) -> float:
    """Exact E over contexts and logged actions of f(x, a)."""
    table = _as_table(env, f)
    return float(env.context_probs @ (env.logging_policy * table).sum(axis=1))
