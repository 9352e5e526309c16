"""Offline evaluation and learning of contextual-bandit policies from logs."""

from .data import (Candidate, DatasetError, LoggedDataset, LoggedRecord, Scenario,
                   TabularEnvironment, exact_expectation_under_logging,
                   exact_policy_value, load_dataset, save_dataset)
from .policies import (ActionDistribution, ContextTablePolicy, Family,
                       FixedMarginalPolicy, LoggingPolicy, PolicyParams,
                       SharpenedPolicy, Shapes, UniformPolicy,
                       constant_action_params, grad_log_prob, init_params,
                       load_params, log_prob_matrix, sample_action, save_params,
                       score, sharpen)
from .estimators import (CallableRewardModel, EstimateReport, RewardModel,
                         WeightVector, clipped_ipwe, clipped_pil_dr,
                         combined_offline_estimate, compute_weights, delta_ipwe,
                         dr, ipwe, paired_delta)
from .objectives import (ObjectiveKind, ObjectiveSpec, eval_objective,
                         pil_iml_value, poem_objective)
from .training import (GreedyRewardPolicy, TrainConfig, TrainTrace,
                       fit_reward_model, train)
from .diagnosis import (DiagnosisReport, ResampleWeights, diagnose,
                        entropy_increase, marginalize_logging_policy,
                        mutual_info_oracle, resample_weights)
from .bootstrap import (BootstrapConfig, BootstrapResult, clipping_rate_study,
                        subsample_ci, tail_exponent_plot)
from .simulators import (ConversionSpec, SimpsonSpec, convert_multiclass,
                         fractional_accuracy, kidney_stone_env,
                         make_synthetic_multiclass, sample_logged_dataset,
                         simulate_epsilon_greedy, simulate_simpson,
                         synth_confounded_env, synth_heavy_tail_log)

__version__ = "0.1.0"
