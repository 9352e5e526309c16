import numpy as np
import pytest

from cfbandits.data import (Candidate, LoggedDataset, LoggedRecord, Scenario,
                            TabularEnvironment)
from cfbandits.policies import ContextTablePolicy


def random_env(rng, n_contexts=3, n_actions=3, r_max=1.0, min_prob=0.05):
    p = rng.dirichlet(np.full(n_contexts, 2.0))
    mu = rng.dirichlet(np.full(n_actions, 1.0), size=n_contexts)
    mu = np.maximum(mu, min_prob)
    mu = mu / mu.sum(axis=1, keepdims=True)
    r = rng.uniform(0.0, r_max, size=(n_contexts, n_actions))
    return TabularEnvironment(context_probs=p, logging_policy=mu, reward_table=r,
                              r_max=r_max)


def random_policy_matrix(rng, env, min_prob=0.05):
    pi = rng.dirichlet(np.ones(env.n_actions), size=env.n_contexts)
    pi = np.maximum(pi, min_prob)
    return pi / pi.sum(axis=1, keepdims=True)


def env_action_ids(env):
    return tuple(f"a{k}" for k in range(env.n_actions))


def cell_record(env, x, a, reward=None):
    """One logged record for cell (x, a), context exposed as one-hot."""
    ids = env_action_ids(env)
    ctx = np.zeros(env.n_contexts)
    ctx[x] = 1.0
    return LoggedRecord(
        context=ctx,
        candidates=tuple(Candidate(i) for i in ids),
        action_index=a,
        reward=float(env.reward_table[x, a] if reward is None else reward),
        propensity=float(env.logging_policy[x, a]),
        full_propensities=env.logging_policy[x].copy(),
    )


def cell_dataset(env, x, a, reward=None):
    return LoggedDataset((cell_record(env, x, a, reward),), Scenario.FULL,
                         env.n_contexts)


def matrix_policy(env, pi):
    """ContextTablePolicy over one-hot joint contexts from a (C, A) matrix."""
    ids = env_action_ids(env)
    table = {}
    for x in range(env.n_contexts):
        key = tuple(1.0 if j == x else 0.0 for j in range(env.n_contexts))
        table[key] = {ids[k]: float(pi[x, k]) for k in range(env.n_actions)}
    return ContextTablePolicy(table)


def enumerate_estimate(env, estimate_of_record):
    """Exact expectation of a single-record estimate under the logging policy."""
    total = 0.0
    for x in range(env.n_contexts):
        for a in range(env.n_actions):
            weight = env.context_probs[x] * env.logging_policy[x, a]
            if weight == 0.0:
                continue
            total += weight * estimate_of_record(x, a)
    return total


def random_logged_dataset(rng, n=20, n_actions=3, context_dim=4,
                          scenario=Scenario.FULL, feature_dim=None,
                          reward_scale=1.0):
    """Random dense-context dataset for gradient and identity fixtures."""
    records = []
    for _ in range(n):
        mu = rng.dirichlet(np.ones(n_actions))
        mu = np.maximum(mu, 0.02)
        mu = mu / mu.sum()
        a = int(rng.integers(n_actions))
        cands = []
        for j in range(n_actions):
            feats = rng.normal(size=feature_dim) if feature_dim else None
            cands.append(Candidate(f"a{j}", feats))
        records.append(LoggedRecord(
            context=rng.normal(size=context_dim),
            candidates=tuple(cands),
            action_index=a,
            reward=float(rng.random() * reward_scale),
            propensity=float(mu[a]) if scenario is not Scenario.MISSING else None,
            full_propensities=mu if scenario is Scenario.FULL else None,
        ))
    return LoggedDataset(tuple(records), scenario, context_dim, feature_dim)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
