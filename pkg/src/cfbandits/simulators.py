"""Synthetic logged-bandit data: confounded tabular logs, the treatment-
assignment paradox fixture, rare-action logs, heavy-tail surrogates, and
supervised-to-bandit conversion."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.linear_model import LogisticRegression

from .data import (Candidate, LoggedDataset, LoggedRecord, Scenario,
                   TabularEnvironment)
from .policies import ContextTablePolicy, log_prob_matrix

# (stone size, treatment, patients, cures): the classic two-treatment cohort
# whose pooled cure rates reverse the per-size comparison.
KIDNEY_CELLS = (
    ("small", "surgery", 87, 81),
    ("small", "puncture", 270, 234),
    ("large", "surgery", 263, 192),
    ("large", "puncture", 80, 55),
)


@dataclass(eq=False)
class SimpsonSpec:
    """Aggregated cohort: (context, action, count, successes) cells.

    EXPECTED mode emits each cell's cure rate as a fractional reward on every
    record, making point estimates exactly reproducible; SAMPLED mode draws
    Bernoulli rewards at the cell rates.
    """

    cells: tuple = KIDNEY_CELLS
    seed: int = 0
    emit_mode: str = "EXPECTED"

    def __post_init__(self):
        if self.emit_mode not in ("EXPECTED", "SAMPLED"):
            raise ValueError("emit_mode must be EXPECTED or SAMPLED")
        for ctx, act, count, successes in self.cells:
            if count <= 0:
                raise ValueError(f"cell ({ctx},{act}) count must be positive")
            if not 0 <= successes <= count:
                raise ValueError(f"cell ({ctx},{act}) successes outside [0,count]")


def simulate_simpson(spec: SimpsonSpec | None = None,
                     observe_hidden: bool = False) -> LoggedDataset:
    """Expand the aggregated cohort into per-patient records.

    The assignment context is hidden by default (empty feature vector, the
    value kept in the ``"h"`` side channel); ``observe_hidden=True`` puts it
    into the features instead, for realizable-imitation baselines.
    """
    spec = spec or SimpsonSpec()
    rng = np.random.default_rng(spec.seed)
    contexts, actions = [], []
    for ctx, act, _, _ in spec.cells:
        if ctx not in contexts:
            contexts.append(ctx)
        if act not in actions:
            actions.append(act)
    ctx_totals = {c: sum(cnt for cc, _, cnt, _ in spec.cells if cc == c) for c in contexts}
    cands = tuple(Candidate(a) for a in actions)
    context_dim = len(contexts) if observe_hidden else 0
    records = []
    for ctx, act, count, successes in spec.cells:
        propensity = count / ctx_totals[ctx]
        rate = successes / count
        a_idx = actions.index(act)
        x = np.zeros(context_dim)
        if observe_hidden:
            x[contexts.index(ctx)] = 1.0
        if spec.emit_mode == "EXPECTED":
            rewards = np.full(count, rate)
        else:
            rewards = (rng.random(count) < rate).astype(float)
        for r in rewards:
            records.append(LoggedRecord(context=x.copy(), candidates=cands,
                                        action_index=a_idx, reward=float(r),
                                        propensity=propensity, extras={"h": ctx}))
    return LoggedDataset(tuple(records), Scenario.PARTIAL, context_dim).validate()


def kidney_stone_env() -> TabularEnvironment:
    """Exact tabular version of the cohort (contexts = stone sizes, all hidden)."""
    contexts, actions = [], []
    for ctx, act, _, _ in KIDNEY_CELLS:
        if ctx not in contexts:
            contexts.append(ctx)
        if act not in actions:
            actions.append(act)
    counts = {(c, a): cnt for c, a, cnt, _ in KIDNEY_CELLS}
    cures = {(c, a): s for c, a, _, s in KIDNEY_CELLS}
    total = sum(counts.values())
    p = np.array([sum(counts[(c, a)] for a in actions) / total for c in contexts])
    mu = np.array([[counts[(c, a)] / sum(counts[(c, b)] for b in actions) for a in actions]
                   for c in contexts])
    r = np.array([[cures[(c, a)] / counts[(c, a)] for a in actions] for c in contexts])
    return TabularEnvironment(context_probs=p, logging_policy=mu, reward_table=r,
                              r_max=1.0, observed_groups=np.zeros(len(contexts), dtype=np.intp))


def simulate_epsilon_greedy(epsilon: float, n: int, seed: int = 0) -> LoggedDataset:
    """Contextless two-action log: rare action A at probability epsilon, reward
    only when A is taken."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0,1)")
    rng = np.random.default_rng(seed)
    cands = (Candidate("A"), Candidate("C"))
    p_all = np.array([epsilon, 1.0 - epsilon])
    took_a = rng.random(n) < epsilon
    records = tuple(
        LoggedRecord(context=np.zeros(0), candidates=cands,
                     action_index=0 if a else 1, reward=1.0 if a else 0.0,
                     full_propensities=p_all)
        for a in took_a
    )
    return LoggedDataset(records, Scenario.FULL, 0)


def synth_confounded_env(n_contexts: int, n_hidden: int, n_actions: int,
                         seed: int = 0, concentration: float = 1.0,
                         reward_coupling: float = 0.0,
                         reward_style: str = "uniform",
                         r_max: float = 1.0) -> TabularEnvironment:
    """Random environment whose logging policy and rewards depend on a hidden
    state the emitted logs will not expose.

    Joint contexts enumerate (observed, hidden) pairs; ``observed_groups``
    records the observed part. ``reward_coupling`` tilts the logging policy
    toward high-reward actions through the hidden state, the regime where the
    log is worth imitating but impossible to realize from observed features.
    ``reward_style="peaked"`` gives each joint context one good arm over a low
    base rate, like label-match feedback. ``n_hidden=1`` removes the
    confounding.
    """
    if min(n_contexts, n_hidden, n_actions) < 1:
        raise ValueError("all sizes must be >= 1")
    if reward_style not in ("uniform", "peaked"):
        raise ValueError("reward_style must be 'uniform' or 'peaked'")
    rng = np.random.default_rng(seed)
    n_joint = n_contexts * n_hidden
    p = rng.dirichlet(np.full(n_joint, 2.0))
    mu = rng.dirichlet(np.full(n_actions, concentration), size=n_joint)
    if reward_style == "peaked":
        rewards = np.full((n_joint, n_actions), 0.05 * r_max)
        rewards[np.arange(n_joint), rng.integers(n_actions, size=n_joint)] = 0.8 * r_max
    else:
        rewards = rng.uniform(0.0, r_max, size=(n_joint, n_actions))
    if reward_coupling:
        mu = mu * np.exp(reward_coupling * rewards / r_max)
    mu = np.maximum(mu, 1e-6)
    mu = mu / mu.sum(axis=1, keepdims=True)
    groups = np.repeat(np.arange(n_contexts, dtype=np.intp), n_hidden)
    return TabularEnvironment(context_probs=p, logging_policy=mu, reward_table=rewards,
                              r_max=r_max, observed_groups=groups)


def action_ids(env: TabularEnvironment) -> tuple:
    return tuple(f"a{k}" for k in range(env.n_actions))


def lift_group_policy(env: TabularEnvironment, group_rows: np.ndarray) -> np.ndarray:
    """Expand per-observed-group action rows to per-joint-context rows."""
    group_rows = np.asarray(group_rows, dtype=float)
    return group_rows[env.groups()]


def group_policy(env: TabularEnvironment, rows: np.ndarray) -> ContextTablePolicy:
    """Policy over datasets sampled from ``env``: rows indexed by joint context
    (constant within groups is the caller's concern)."""
    rows = np.asarray(rows, dtype=float)
    ids = action_ids(env)
    n_groups = int(env.groups().max()) + 1
    table = {}
    for g in range(n_groups):
        key = tuple(1.0 if j == g else 0.0 for j in range(n_groups))
        joint = int(np.argmax(env.groups() == g))
        table[key] = {ids[k]: float(rows[joint, k]) for k in range(env.n_actions)}
    return ContextTablePolicy(table)


def sample_logged_dataset(env: TabularEnvironment, n: int, seed: int = 0,
                          policy: np.ndarray | None = None,
                          reward_noise: str = "bernoulli",
                          context_noise: float = 0.0,
                          scenario: Scenario = Scenario.FULL) -> LoggedDataset:
    """Draw a log from the environment, exposing only the observed context.

    ``policy`` overrides the logging policy (rows over joint contexts). The
    observed context is emitted one-hot; ``context_noise`` adds Gaussian noise
    so every record carries a distinct feature vector, as in feature-based
    logs. The joint context index rides along in the ``"h"`` side channel for
    oracles.
    """
    if reward_noise not in ("bernoulli", "expected"):
        raise ValueError("reward_noise must be 'bernoulli' or 'expected'")
    if reward_noise == "bernoulli" and env.r_max > 1.0:
        raise ValueError("bernoulli rewards require r_max <= 1")
    rng = np.random.default_rng(seed)
    mu = env.logging_policy if policy is None else np.asarray(policy, dtype=float)
    groups = env.groups()
    n_groups = int(groups.max()) + 1
    ids = action_ids(env)
    cands = tuple(Candidate(a) for a in ids)
    xs = rng.choice(env.n_contexts, size=n, p=env.context_probs)
    records = []
    for x in xs:
        row = mu[x]
        a = int(rng.choice(env.n_actions, p=row / row.sum()))
        mean_r = env.reward_table[x, a]
        r = float(rng.random() < mean_r) if reward_noise == "bernoulli" else float(mean_r)
        ctx = np.zeros(n_groups)
        ctx[groups[x]] = 1.0
        if context_noise:
            ctx = ctx + context_noise * rng.normal(size=n_groups)
        records.append(LoggedRecord(
            context=ctx, candidates=cands, action_index=a, reward=r,
            propensity=float(row[a]),
            full_propensities=row.copy() if scenario is Scenario.FULL else None,
            extras={"h": int(x)},
        ))
    return LoggedDataset(tuple(records), scenario, n_groups)


def synth_heavy_tail_log(n: int, alpha: float = 1.5, seed: int = 0,
                         reward_rate: float = 0.3, scale: float = 1.0) -> LoggedDataset:
    """Surrogate log whose importance weights against the always-first-action
    policy follow a scaled Pareto(alpha) law (propensities are the inverse
    weights; ``scale`` shifts the whole weight distribution up so fixed clip
    levels bite at desk-scale n)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if scale < 1.0:
        raise ValueError("scale must be >= 1 to keep propensities in (0,1]")
    rng = np.random.default_rng(seed)
    w = scale * (1.0 - rng.random(n)) ** (-1.0 / alpha)
    mu = 1.0 / w
    rewards = (rng.random(n) < reward_rate).astype(float)
    cands = (Candidate("a0"), Candidate("a1"))
    records = tuple(
        LoggedRecord(context=np.zeros(0), candidates=cands, action_index=0,
                     reward=float(r), propensity=float(m))
        for m, r in zip(mu, rewards)
    )
    return LoggedDataset(records, Scenario.PARTIAL, 0)


# ---------------------------------------------------------------------------
# supervised multiclass to bandit conversion
#
# Input format: one example per line, "label idx:val idx:val ..." (0-based
# sparse indices).
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class TestSet:
    """Held-out labeled examples for exact (fractional) policy accuracy."""

    features: np.ndarray
    labels: np.ndarray
    class_ids: tuple


@dataclass(eq=False)
class ConversionSpec:
    """Supervised-to-bandit conversion settings.

    The logging policy is the tempered softmax of a linear classifier trained
    on a skewed subsample: ``skew_fraction`` of the examples from the first
    half of the classes are dropped to induce covariate shift.
    """

    path: object = None
    features: np.ndarray | None = None
    labels: np.ndarray | None = None
    split: float = 0.5
    skew_fraction: float = 0.9
    temperature: float = 1.0
    repetitions: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.split < 1.0:
            raise ValueError("split must lie in (0,1)")
        if not 0.0 <= self.skew_fraction < 1.0:
            raise ValueError("skew_fraction must lie in [0,1)")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.path is None and (self.features is None or self.labels is None):
            raise ValueError("need a path or explicit features and labels")


def parse_multiclass_file(path) -> tuple[np.ndarray, np.ndarray]:
    rows, labels = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            labels.append(parts[0])
            pairs = []
            for tok in parts[1:]:
                idx, _, val = tok.partition(":")
                pairs.append((int(idx), float(val)))
            rows.append(pairs)
    if not rows:
        raise ValueError("empty multiclass file")
    dim = max((max(i for i, _ in r) + 1 if r else 0) for r in rows)
    x = np.zeros((len(rows), dim))
    for i, pairs in enumerate(rows):
        for j, v in pairs:
            x[i, j] = v
    return x, np.asarray(labels)


def save_multiclass_file(features: np.ndarray, labels, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for x, y in zip(features, labels):
            toks = [str(y)] + [f"{j}:{float(v)!r}" for j, v in enumerate(x) if v != 0.0]
            fh.write(" ".join(toks) + "\n")


def make_synthetic_multiclass(n: int, dim: int, n_classes: int, seed: int = 0,
                              separation: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian-blob multiclass data; separation controls class distinctness."""
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, separation, size=(n_classes, dim))
    y = rng.integers(0, n_classes, size=n)
    x = means[y] + rng.normal(0.0, 1.0, size=(n, dim))
    return x, y.astype(str)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def convert_multiclass(spec: ConversionSpec) -> tuple[LoggedDataset, TestSet]:
    """Turn labeled examples into a bandit log with full propensity logging.

    Half the data (per ``split``) becomes the bandit log: an action is sampled
    per example from the skew-trained classifier's tempered softmax; reward is
    1 when the action matches the true label. The rest keeps its labels for
    exact evaluation.
    """
    if spec.path is not None:
        features, labels = parse_multiclass_file(spec.path)
    else:
        features, labels = np.asarray(spec.features, float), np.asarray(spec.labels)
    classes = sorted(set(str(v) for v in labels))
    if len(classes) < 2:
        raise ValueError("need at least 2 classes")
    class_index = {c: k for k, c in enumerate(classes)}
    y = np.array([class_index[str(v)] for v in labels])

    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(len(y))
    n_train = int(round(spec.split * len(y)))
    train_idx, test_idx = perm[:n_train], perm[n_train:]
    x_train, y_train = features[train_idx], y[train_idx]

    thin = set(range(-(-len(classes) // 2)))  # first ceil(K/2) classes
    keep = np.ones(len(y_train), dtype=bool)
    for c in thin:
        rows = np.flatnonzero(y_train == c)
        drop = rows[rng.random(rows.size) < spec.skew_fraction]
        keep[drop] = False
    x_skew, y_skew = x_train[keep], y_train[keep]
    present = np.unique(y_skew)
    if present.size < len(classes):
        missing = sorted(set(range(len(classes))) - set(present.tolist()))
        raise ValueError(f"class with zero examples after skew: {missing}")

    clf = LogisticRegression(max_iter=2000)
    clf.fit(x_skew, y_skew)
    logits = clf.decision_function(x_train)
    if logits.ndim == 1:
        logits = np.column_stack([np.zeros_like(logits), logits])
    probs = _softmax(logits / spec.temperature)

    cands = tuple(Candidate(c) for c in classes)
    records = []
    for rep in range(spec.repetitions):
        draws = np.random.default_rng(np.random.SeedSequence([spec.seed, 31, rep])).random(n_train)
        picks = (probs.cumsum(axis=1) < draws[:, None]).sum(axis=1)
        for i in range(n_train):
            a = int(picks[i])
            records.append(LoggedRecord(
                context=x_train[i].copy(), candidates=cands, action_index=a,
                reward=float(a == y_train[i]), propensity=float(probs[i, a]),
                full_propensities=probs[i].copy(),
            ))
    train_ds = LoggedDataset(tuple(records), Scenario.FULL, features.shape[1])
    test = TestSet(features=features[test_idx], labels=y[test_idx],
                   class_ids=tuple(classes))
    return train_ds, test


def fractional_accuracy(policy, test: TestSet) -> float:
    """Mean probability the policy puts on the true label over the test set."""
    cands = tuple(Candidate(c) for c in test.class_ids)
    records = tuple(
        LoggedRecord(context=x, candidates=cands, action_index=int(yl), reward=0.0)
        for x, yl in zip(test.features, test.labels)
    )
    ds = LoggedDataset(records, Scenario.MISSING, test.features.shape[1])
    mat = np.exp(log_prob_matrix(policy, ds))
    return float(np.mean(mat[np.arange(len(ds)), test.labels.astype(int)]))
