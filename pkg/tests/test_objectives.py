import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from cfbandits.data import (DatasetError, LoggedDataset, Scenario,
                            exact_expectation_under_logging)
from cfbandits.estimators import CallableRewardModel
from cfbandits.objectives import (ObjectiveKind, ObjectiveSpec, eval_objective,
                                  pil_iml_value, poem_objective)
from cfbandits.policies import Family, PolicyParams, init_params
from cfbandits.training import TrainConfig, train

from conftest import cell_record, random_env, random_logged_dataset

K = ObjectiveKind


def dataset_from_env(env, rng, n=60):
    """Sampled FULL-logging dataset of cell records."""
    records = []
    for _ in range(n):
        x = int(rng.choice(env.n_contexts, p=env.context_probs))
        a = int(rng.choice(env.n_actions, p=env.logging_policy[x]))
        records.append(cell_record(env, x, a))
    return LoggedDataset(tuple(records), Scenario.FULL, env.n_contexts)


def logging_params(env, dataset):
    """Tabular params that reproduce the logging policy exactly."""
    params = init_params(Family.TABULAR, dataset)
    table = params.theta.reshape(len(params.shapes.context_keys), -1)
    for i, key in enumerate(params.shapes.context_keys):
        x = int(np.argmax(key))
        for j, aid in enumerate(params.shapes.action_ids):
            a = int(aid[1:])
            table[i, j] = np.log(env.logging_policy[x, a])
    return params


def test_objectives_vanish_at_logging_policy(rng):
    env = random_env(rng)
    ds = dataset_from_env(env, rng)
    params = logging_params(env, ds)
    for kind in (K.PIL_MU, K.IML_PART, K.IPWE_RAW):
        value, _ = eval_objective(ObjectiveSpec(kind), ds, params)
        assert value == pytest.approx(0.0, abs=1e-12)


def test_ce_decomposes_into_logging_ce_minus_pil(rng):
    for _ in range(10):
        ds = random_logged_dataset(rng, n=30, scenario=Scenario.PARTIAL)
        params = init_params(Family.LINEAR, ds)
        params.theta = rng.normal(scale=0.5, size=params.theta.shape)
        ce_pi, _ = eval_objective(ObjectiveSpec(K.CE_WEIGHTED), ds, params)
        pil, _ = eval_objective(ObjectiveSpec(K.PIL_EMPTY), ds, params)
        r = ds.rewards()
        ce_mu = float(-np.mean(r * np.log(ds.propensities())))
        assert ce_pi == pytest.approx(ce_mu - pil, abs=1e-10)


def test_pil_empty_below_improvement(rng):
    for _ in range(10):
        ds = random_logged_dataset(rng, n=25, scenario=Scenario.PARTIAL)
        params = init_params(Family.LINEAR, ds)
        params.theta = rng.normal(scale=0.6, size=params.theta.shape)
        pil, _ = eval_objective(ObjectiveSpec(K.PIL_EMPTY), ds, params)
        delta, _ = eval_objective(ObjectiveSpec(K.IPWE_RAW), ds, params)
        assert pil <= delta + 1e-12


def test_missing_imitation_shifts_to_partial_by_logging_entropy(rng):
    for _ in range(10):
        ds = random_logged_dataset(rng, n=30, scenario=Scenario.PARTIAL)
        params = init_params(Family.LINEAR, ds)
        params.theta = rng.normal(scale=0.5, size=params.theta.shape)
        miss, _ = eval_objective(ObjectiveSpec(K.IML_MISS), ds, params)
        part, _ = eval_objective(ObjectiveSpec(K.IML_PART), ds, params)
        ce_mu_one = float(-np.mean(np.log(ds.propensities())))
        assert miss - ce_mu_one == pytest.approx(part, abs=1e-10)


def test_pil_mu_dominates_pil_empty(rng):
    for _ in range(10):
        ds = random_logged_dataset(rng, n=25, scenario=Scenario.PARTIAL)
        params = init_params(Family.BILINEAR_FULL, ds)
        params.theta = rng.normal(scale=0.5, size=params.theta.shape)
        hi, _ = eval_objective(ObjectiveSpec(K.PIL_MU), ds, params)
        lo, _ = eval_objective(ObjectiveSpec(K.PIL_EMPTY), ds, params)
        assert hi >= lo - 1e-12


def test_ce_ignores_propensities(rng):
    ds = random_logged_dataset(rng, n=20, scenario=Scenario.PARTIAL)
    params = init_params(Family.LINEAR, ds)
    params.theta = rng.normal(scale=0.5, size=params.theta.shape)
    v1, g1 = eval_objective(ObjectiveSpec(K.CE_WEIGHTED), ds, params)
    from dataclasses import replace
    altered = LoggedDataset(
        tuple(replace(r, propensity=0.123, full_propensities=None) for r in ds),
        Scenario.PARTIAL, ds.context_dim)
    v2, g2 = eval_objective(ObjectiveSpec(K.CE_WEIGHTED), altered, params)
    assert v1 == v2
    np.testing.assert_array_equal(g1, g2)


def test_pil_iml_epsilon_zero_is_pil(rng):
    ds = random_logged_dataset(rng, n=20, scenario=Scenario.PARTIAL)
    params = init_params(Family.LINEAR, ds)
    params.theta = rng.normal(scale=0.5, size=params.theta.shape)
    v, g = pil_iml_value(ObjectiveSpec(K.PIL_IML, epsilon=0.0), ds, params)
    v2, g2 = eval_objective(ObjectiveSpec(K.PIL_MU), ds, params)
    assert v == v2
    np.testing.assert_array_equal(g, g2)


def test_pil_iml_missing_equals_shifted_ce_gradient(rng):
    eps = 1e-4
    ds = random_logged_dataset(rng, n=25, scenario=Scenario.MISSING)
    params = init_params(Family.LINEAR, ds)
    params.theta = rng.normal(scale=0.5, size=params.theta.shape)
    _, g = pil_iml_value(ObjectiveSpec(K.PIL_IML, epsilon=eps), ds, params)
    from dataclasses import replace
    shifted = LoggedDataset(tuple(replace(r, reward=r.reward + eps) for r in ds),
                            Scenario.MISSING, ds.context_dim)
    _, g_ce = eval_objective(ObjectiveSpec(K.CE_WEIGHTED), shifted, params)
    np.testing.assert_allclose(g, -g_ce, atol=1e-12)


def test_large_epsilon_recovers_imitation(rng):
    env = random_env(rng, n_contexts=2, n_actions=2)
    ds = dataset_from_env(env, rng, n=150)
    eps = 1e6
    config_iml = TrainConfig(learning_rate=0.5 / eps, decay="constant", max_epochs=300,
                             seed=1, tol=0.0, patience=10**9)
    pil_iml, _ = train(ObjectiveSpec(K.PIL_IML, epsilon=eps), ds, Family.TABULAR,
                       config_iml)
    config = TrainConfig(learning_rate=0.5, decay="constant", max_epochs=300, seed=1,
                         tol=0.0, patience=10**9)
    pil_only, _ = train(ObjectiveSpec(K.PIL_MU), ds, Family.TABULAR, config)

    def exact_kl(params):
        from cfbandits.policies import score
        total = 0.0
        for x in range(env.n_contexts):
            rec = cell_record(env, x, 0)
            probs = np.exp(
                np.asarray(
                    [score(params, rec).log_probs[j] for j in range(env.n_actions)]))
            mu = env.logging_policy[x]
            total += env.context_probs[x] * float(np.sum(mu * np.log(mu / probs)))
        return total

    assert exact_kl(pil_iml) <= exact_kl(pil_only) + 1e-9


def test_poem_alpha_zero_is_improvement(rng):
    ds = random_logged_dataset(rng, n=20, scenario=Scenario.PARTIAL)
    params = init_params(Family.LINEAR, ds)
    params.theta = rng.normal(scale=0.5, size=params.theta.shape)
    v, g = poem_objective(0.0, ds, params)
    v2, g2 = eval_objective(ObjectiveSpec(K.IPWE_RAW), ds, params)
    assert v == v2
    np.testing.assert_array_equal(g, g2)


def test_poem_vanishes_at_logging_policy(rng):
    env = random_env(rng)
    ds = dataset_from_env(env, rng)
    params = logging_params(env, ds)
    v, _ = poem_objective(0.7, ds, params)
    assert v == pytest.approx(0.0, abs=1e-12)


def test_poem_penalizes_dominant_weight(rng):
    ds = random_logged_dataset(rng, n=30, scenario=Scenario.PARTIAL)
    params = init_params(Family.LINEAR, ds)
    params.theta = rng.normal(scale=1.5, size=params.theta.shape)
    poem, _ = poem_objective(1.0, ds, params)
    delta, _ = eval_objective(ObjectiveSpec(K.IPWE_RAW), ds, params)
    assert poem < delta


def test_scenario_mismatch_raises(rng):
    ds = random_logged_dataset(rng, n=10, scenario=Scenario.PARTIAL)
    params = init_params(Family.LINEAR, ds)
    with pytest.raises(DatasetError, match="does not support"):
        eval_objective(ObjectiveSpec(K.IML_FULL), ds, params)
    missing = random_logged_dataset(rng, n=10, scenario=Scenario.MISSING)
    params2 = init_params(Family.LINEAR, missing)
    with pytest.raises(DatasetError, match="does not support"):
        eval_objective(ObjectiveSpec(K.PIL_MU), missing, params2)


def test_spec_validation():
    with pytest.raises(ValueError, match="epsilon"):
        ObjectiveSpec(K.PIL_IML, epsilon=-1.0)
    with pytest.raises(ValueError, match="tau"):
        ObjectiveSpec(K.IPWE_CLIPPED, tau=0.0)


# -- second-order connection between imitation loss and improvement variance --

def bounded_weight_pair(rng, max_dev=0.5, n_contexts=3, n_actions=3):
    """(env, pi) whose importance weights satisfy max|w-1| <= max_dev."""
    while True:
        env = random_env(rng, n_contexts=n_contexts, n_actions=n_actions)
        delta = rng.uniform(-0.3, 0.3, size=env.logging_policy.shape)
        pi = env.logging_policy * (1.0 + delta)
        pi = pi / pi.sum(axis=1, keepdims=True)
        w = pi / env.logging_policy
        if np.max(np.abs(w - 1.0)) <= max_dev:
            return env, pi, w


def check_variance_bound(env, w, r_max=1.0):
    dev = np.max(np.abs(w - 1.0))
    remainder_bound = dev ** 3 / (3.0 * (1.0 - dev) ** 3)
    e_iml = exact_expectation_under_logging(env, -np.log(w))
    e_sq = exact_expectation_under_logging(env, (w - 1.0) ** 2)
    assert abs(e_iml - 0.5 * e_sq) <= remainder_bound + 1e-14
    z = (w - 1.0) * env.reward_table
    var_z = (exact_expectation_under_logging(env, z ** 2)
             - exact_expectation_under_logging(env, z) ** 2)
    assert var_z <= (2.0 * e_iml + remainder_bound) * env.r_max ** 2 + 1e-14


def test_imitation_bounds_improvement_variance(rng):
    for _ in range(30):
        env, _, w = bounded_weight_pair(rng)
        check_variance_bound(env, w)


def test_log_loss_and_chi_square_argmins_agree(rng):
    # shared Bernoulli parameter across contexts: the log-loss and the
    # squared-ratio imitation objectives pick nearly the same optimum when
    # weights stay within 10% of one
    for _ in range(10):
        p_ctx = rng.dirichlet(np.ones(3))
        m = 0.5 + rng.uniform(-0.02, 0.02, size=3)

        def log_loss(s):
            return float(-(p_ctx * (m * np.log(s) + (1 - m) * np.log(1 - s))).sum())

        def chi_square(s):
            ratio_sq = (s / m - 1.0) ** 2 * m + ((1 - s) / (1 - m) - 1.0) ** 2 * (1 - m)
            return float(0.5 * (p_ctx * ratio_sq).sum())

        s1 = minimize_scalar(log_loss, bounds=(0.3, 0.7), method="bounded").x
        s2 = minimize_scalar(chi_square, bounds=(0.3, 0.7), method="bounded").x
        w_dev = max(abs(s1 / m - 1).max(), abs((1 - s1) / (1 - m) - 1).max())
        assert w_dev <= 0.1
        assert abs(s1 - s2) <= 1e-2
