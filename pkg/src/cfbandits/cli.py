"""Command-line entry point: reproducible runs writing CSV plus a manifest."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bootstrap import BootstrapConfig, clipping_rate_study, subsample_ci, tail_exponent_plot
from .data import (DatasetError, LoggedDataset, Scenario, TabularEnvironment,
                   load_dataset, record_to_json, save_dataset)
from .diagnosis import diagnose, resample_weights
from .estimators import (clipped_ipwe, clipped_pil_dr, combined_offline_estimate,
                         compute_weights, delta_ipwe, dr, ipwe, paired_delta)
from .objectives import ObjectiveKind, ObjectiveSpec
from .policies import Family, load_params, save_params
from .simulators import (ConversionSpec, SimpsonSpec, convert_multiclass,
                         sample_logged_dataset, save_multiclass_file,
                         simulate_epsilon_greedy, simulate_simpson,
                         synth_confounded_env)
from .training import TrainConfig, fit_reward_model, train

_COMMON_DEFAULTS = {"seed": 0, "threads": 1, "scenario": "infer"}

# real defaults per command; argparse stores None so config-file keys can fill in
_DEFAULTS = {
    "simulate-simpson": {"mode": "EXPECTED", "observe_hidden": False, **_COMMON_DEFAULTS},
    "simulate-epsgreedy": {"epsilon": 0.01, "n": 100, **_COMMON_DEFAULTS},
    "simulate-confounded": {"contexts": 2, "hidden": 2, "actions": 3, "n": 1000,
                            "concentration": 1.0, "scenario_out": "FULL", **_COMMON_DEFAULTS},
    "convert": {"data": None, "split": 0.5, "skew": 0.9, "temperature": 1.0,
                "reps": 1, **_COMMON_DEFAULTS},
    "learn": {"data": None, "objective": "pil-iml", "family": "linear", "rank": None,
              "epsilon": 1e-4, "tau": None, "alpha": 1.0, "l2": 0.0,
              "reward_model": None, "lr": 0.5, "decay": "inverse-sqrt", "batch": None,
              "epochs": 200, "tol": 1e-6, "patience": 5, "holdout": 0.0,
              **_COMMON_DEFAULTS},
    "evaluate": {"data": None, "policy": None, "estimator": "ipwe", "tau": 500.0,
                 "rmax": 0.01, "reward_model": None, **_COMMON_DEFAULTS},
    "diagnose": {"data": None, "family": "context-free", "rank": None,
                 "threshold": 0.05, "lr": 2.0, "epochs": 600, **_COMMON_DEFAULTS},
    "resample": {"data": None, "family": "context-free", "rank": None,
                 "lr": 2.0, "epochs": 600, **_COMMON_DEFAULTS},
    "bootstrap": {"data": None, "policy": None, "statistic": "ipwe", "tau": 500.0,
                  "sizes": None, "replicates": 10000, "quantiles": "0.025,0.975",
                  "with_replacement": True, **_COMMON_DEFAULTS},
    "tailplot": {"data": None, "policy": None, **_COMMON_DEFAULTS},
    "compare": {"data": None, "policy_a": None, "policy_b": None, "tau": 500.0,
                "rmax": 0.01, "boot": 1000, **_COMMON_DEFAULTS},
}


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _write_manifest(out: Path, command: str, config: dict) -> None:
    manifest = {
        "command": command,
        "config": {k: v for k, v in config.items()},
        "versions": {"cfbandits": __version__,
                     "python": sys.version.split()[0],
                     "numpy": np.__version__},
    }
    with open(out / "manifest", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, config-file keys, and explicit flags (flags win)."""
    defaults = dict(_DEFAULTS[command])
    merged = dict(defaults)
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        if "config" in raw and "command" in raw:  # a manifest
            raw = raw["config"]
        unknown = set(raw) - set(defaults) - {"out"}
        if unknown:
            raise DatasetError(f"unknown config keys: {sorted(unknown)}")
        merged.update(raw)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    return merged


def _load(cfg: dict, key: str = "data") -> LoggedDataset:
    path = cfg.get(key)
    if not path:
        raise DatasetError(f"--{key} is required")
    return load_dataset(path, scenario=cfg.get("scenario", "infer"))


def _env_to_json(env: TabularEnvironment) -> dict:
    return {"context_probs": env.context_probs.tolist(),
            "logging_policy": env.logging_policy.tolist(),
            "reward_table": env.reward_table.tolist(),
            "r_max": env.r_max,
            "observed_groups": env.groups().tolist()}


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------

def _cmd_simulate_simpson(cfg: dict, out: Path) -> None:
    ds = simulate_simpson(SimpsonSpec(seed=cfg["seed"], emit_mode=cfg["mode"]),
                          observe_hidden=cfg["observe_hidden"])
    save_dataset(ds, out / "simpson.jsonl")


def _cmd_simulate_epsgreedy(cfg: dict, out: Path) -> None:
    ds = simulate_epsilon_greedy(cfg["epsilon"], cfg["n"], cfg["seed"])
    save_dataset(ds, out / "epsgreedy.jsonl")


def _cmd_simulate_confounded(cfg: dict, out: Path) -> None:
    env = synth_confounded_env(cfg["contexts"], cfg["hidden"], cfg["actions"],
                               seed=cfg["seed"], concentration=cfg["concentration"])
    ds = sample_logged_dataset(env, cfg["n"], seed=cfg["seed"],
                               scenario=Scenario(cfg["scenario_out"]))
    save_dataset(ds, out / "confounded.jsonl")
    with open(out / "env.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_env_to_json(env), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cmd_convert(cfg: dict, out: Path) -> None:
    spec = ConversionSpec(path=cfg["data"], split=cfg["split"],
                          skew_fraction=cfg["skew"], temperature=cfg["temperature"],
                          repetitions=cfg["reps"], seed=cfg["seed"])
    train_ds, test = convert_multiclass(spec)
    save_dataset(train_ds, out / "bandit.jsonl")
    save_multiclass_file(test.features, [test.class_ids[i] for i in test.labels],
                         out / "test.txt")


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(learning_rate=cfg.get("lr", 0.5),
                       decay=cfg.get("decay", "inverse-sqrt"),
                       batch_size=cfg.get("batch"),
                       max_epochs=cfg.get("epochs", 200),
                       seed=cfg["seed"], l2=cfg.get("l2", 0.0),
                       tol=cfg.get("tol", 1e-6),
                       patience=cfg.get("patience", 5),
                       holdout_fraction=cfg.get("holdout", 0.0))


def _objective_spec(cfg: dict, dataset: LoggedDataset) -> ObjectiveSpec:
    kind = ObjectiveKind(cfg["objective"])
    model = None
    if cfg.get("reward_model"):
        model = fit_reward_model(dataset, Family(cfg["reward_model"]))
    elif kind in (ObjectiveKind.DR_OBJ, ObjectiveKind.PIL_DR):
        model = fit_reward_model(dataset, Family.TABULAR)
    spec = ObjectiveSpec(kind, epsilon=cfg["epsilon"], alpha=cfg["alpha"],
                         l2=cfg["l2"], reward_model=model)
    if cfg.get("tau") is not None:
        spec.tau = cfg["tau"]
    return spec


def _cmd_learn(cfg: dict, out: Path) -> None:
    ds = _load(cfg)
    spec = _objective_spec(cfg, ds)
    if spec.kind is ObjectiveKind.IML_FULL and ds.scenario is Scenario.PARTIAL:
        print("warning: full propensities unavailable, falling back to taken-action "
              "imitation", file=sys.stderr)
        spec = ObjectiveSpec(ObjectiveKind.IML_PART, epsilon=spec.epsilon, l2=spec.l2)
    params, trace = train(spec, ds, Family(cfg["family"]), _train_config(cfg),
                          rank=cfg.get("rank"))
    save_params(params, out / "policy.ckpt")
    write_csv(out / "trace.csv", trace.csv_rows())


_ESTIMATORS = ("ipwe", "delta", "clipped", "dr", "pildr")


def _cmd_evaluate(cfg: dict, out: Path) -> None:
    ds = _load(cfg)
    policy = load_params(cfg["policy"])
    names = [s.strip() for s in str(cfg["estimator"]).split(",") if s.strip()]
    weights = compute_weights(ds, policy)
    model = None
    if any(nm in ("dr", "pildr") for nm in names):
        fam = Family(cfg["reward_model"]) if cfg.get("reward_model") else Family.TABULAR
        model = fit_reward_model(ds, fam)
    rows = [["estimator", "point", "gap", "ci_lo", "ci_hi", "n", "tau", "seed"]]
    for nm in names:
        if nm == "ipwe":
            rep = ipwe(ds, policy, weights=weights)
        elif nm == "delta":
            rep = delta_ipwe(ds, policy, weights=weights)
        elif nm == "clipped":
            rep = clipped_ipwe(ds, policy, cfg["tau"], weights=weights)
        elif nm == "dr":
            rep = dr(ds, policy, model, weights=weights)
        elif nm == "pildr":
            rep = clipped_pil_dr(ds, policy, model, cfg["tau"])
        else:
            raise DatasetError(f"unknown estimator {nm!r}; choose from {_ESTIMATORS}")
        rows.append(rep.csv_row(seed=cfg["seed"]))
        if cfg.get("rmax"):
            lo, hi = combined_offline_estimate(rep, cfg["rmax"])
            rows.append([f"{nm}+gap", rep.point, rep.gap, lo, hi, rep.n,
                         rep.tau, cfg["seed"]])
    write_csv(out / "reports.csv", rows)


def _cmd_diagnose(cfg: dict, out: Path) -> None:
    ds = _load(cfg)
    config = TrainConfig(learning_rate=cfg["lr"], decay="constant",
                         max_epochs=cfg["epochs"], seed=cfg["seed"],
                         tol=1e-12, patience=25)
    report = diagnose(ds, Family(cfg["family"]), config,
                      threshold=cfg["threshold"], rank=cfg.get("rank"))
    rows = [["family", "iml_loss", "perplexity", "verdict", "threshold", "seed"],
            report.csv_row(cfg["family"], seed=cfg["seed"])]
    write_csv(out / "diagnosis.csv", rows)
    save_params(report.params, out / "iml_policy.ckpt")


def _cmd_resample(cfg: dict, out: Path) -> None:
    ds = _load(cfg)
    config = TrainConfig(learning_rate=cfg["lr"], decay="constant",
                         max_epochs=cfg["epochs"], seed=cfg["seed"],
                         tol=1e-12, patience=25)
    report = diagnose(ds, Family(cfg["family"]), config, rank=cfg.get("rank"))
    rw = resample_weights(ds, report.params)
    with open(out / "resampled.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for rec, w in zip(ds, rw.weights):
            rec.extras["weight"] = float(w)
            fh.write(record_to_json(rec) + "\n")
            del rec.extras["weight"]
    rows = [["key", "weight_sum"]]
    rows.extend([str(k), v] for k, v in sorted(rw.group_sums.items(), key=lambda kv: str(kv[0])))
    rows.append(["ess", rw.ess])
    write_csv(out / "resample.csv", rows)


def _bootstrap_statistic(name: str, tau: float):
    if name == "ipwe":
        return lambda m: float(np.mean(m[:, 0] * m[:, 1]))
    if name == "delta":
        return lambda m: float(np.mean((m[:, 0] - 1.0) * m[:, 1]))
    if name == "clipped":
        return lambda m: float(np.mean((np.minimum(m[:, 0], tau) - 1.0) * m[:, 1]))
    if name == "selfnorm":
        return lambda m: float(np.mean(np.minimum(m[:, 0], tau)))
    raise DatasetError(f"unknown statistic {name!r}")


def _cmd_bootstrap(cfg: dict, out: Path) -> None:
    ds = _load(cfg)
    policy = load_params(cfg["policy"])
    w = compute_weights(ds, policy).w
    data = np.column_stack([w, ds.rewards()])
    sizes = None
    if cfg.get("sizes"):
        sizes = tuple(int(s) for s in str(cfg["sizes"]).split(","))
    quantiles = tuple(float(q) for q in str(cfg["quantiles"]).split(","))
    config = BootstrapConfig(sizes=sizes, replicates=cfg["replicates"],
                             quantiles=quantiles, seed=cfg["seed"],
                             with_replacement=cfg["with_replacement"],
                             threads=cfg["threads"])
    res = subsample_ci(_bootstrap_statistic(cfg["statistic"], cfg["tau"]), data, config)
    write_csv(out / "bootstrap.csv", res.csv_rows())


def _cmd_tailplot(cfg: dict, out: Path) -> None:
    ds = _load(cfg)
    policy = load_params(cfg["policy"])
    table = tail_exponent_plot(compute_weights(ds, policy))
    write_csv(out / "survival.csv", table.csv_rows())


def _cmd_compare(cfg: dict, out: Path) -> None:
    ds = _load(cfg)
    pol_a = load_params(cfg["policy_a"])
    pol_b = load_params(cfg["policy_b"])
    lo, hi = paired_delta(ds, pol_a, pol_b, tau=cfg["tau"], r_max=cfg["rmax"],
                          n_boot=cfg["boot"], seed=cfg["seed"])
    write_csv(out / "compare.csv", [["lo", "hi", "tau", "rmax", "seed"],
                                    [lo, hi, cfg["tau"], cfg["rmax"], cfg["seed"]]])


_BODIES = {
    "simulate-simpson": _cmd_simulate_simpson,
    "simulate-epsgreedy": _cmd_simulate_epsgreedy,
    "simulate-confounded": _cmd_simulate_confounded,
    "convert": _cmd_convert,
    "learn": _cmd_learn,
    "evaluate": _cmd_evaluate,
    "diagnose": _cmd_diagnose,
    "resample": _cmd_resample,
    "bootstrap": _cmd_bootstrap,
    "tailplot": _cmd_tailplot,
    "compare": _cmd_compare,
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON config file (or a previous manifest)")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--scenario", choices=["infer", "FULL", "PARTIAL", "MISSING"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfbandits",
                                     description="offline bandit evaluation and learning")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate synthetic logged datasets")
    sim_sub = sim.add_subparsers(dest="simulator", required=True)
    p = sim_sub.add_parser("simpson")
    p.add_argument("--mode", choices=["EXPECTED", "SAMPLED"])
    p.add_argument("--observe-hidden", action=argparse.BooleanOptionalAction,
                   dest="observe_hidden")
    _add_common(p)
    p = sim_sub.add_parser("epsgreedy")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--n", type=int)
    _add_common(p)
    p = sim_sub.add_parser("confounded")
    p.add_argument("--contexts", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--actions", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--concentration", type=float)
    p.add_argument("--scenario-out", dest="scenario_out", choices=["FULL", "PARTIAL"])
    _add_common(p)

    p = sub.add_parser("convert", help="multiclass file to bandit log")
    p.add_argument("--data")
    p.add_argument("--split", type=float)
    p.add_argument("--skew", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--reps", type=int)
    _add_common(p)

    p = sub.add_parser("learn", help="train a policy on a logged dataset")
    p.add_argument("--data")
    p.add_argument("--objective", choices=[k.value for k in ObjectiveKind])
    p.add_argument("--family", choices=[f.value for f in Family])
    p.add_argument("--rank", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--l2", type=float)
    p.add_argument("--reward-model", dest="reward_model",
                   choices=[f.value for f in Family])
    p.add_argument("--lr", type=float)
    p.add_argument("--decay", choices=["inverse-sqrt", "constant"])
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--holdout", type=float)
    _add_common(p)

    p = sub.add_parser("evaluate", help="point estimates for a policy checkpoint")
    p.add_argument("--data")
    p.add_argument("--policy")
    p.add_argument("--estimator", help=f"comma list from {_ESTIMATORS}")
    p.add_argument("--tau", type=float)
    p.add_argument("--rmax", type=float)
    p.add_argument("--reward-model", dest="reward_model",
                   choices=[f.value for f in Family])
    _add_common(p)

    p = sub.add_parser("diagnose", help="imitation fit and perplexity of the log")
    p.add_argument("--data")
    p.add_argument("--family", choices=[f.value for f in Family])
    p.add_argument("--rank", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    _add_common(p)

    p = sub.add_parser("resample", help="imitation-policy reweighting of a log")
    p.add_argument("--data")
    p.add_argument("--family", choices=[f.value for f in Family])
    p.add_argument("--rank", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    _add_common(p)

    p = sub.add_parser("bootstrap", help="subsampling-bootstrap rate fit and CI")
    p.add_argument("--data")
    p.add_argument("--policy")
    p.add_argument("--statistic", choices=["ipwe", "delta", "clipped", "selfnorm"])
    p.add_argument("--tau", type=float)
    p.add_argument("--sizes")
    p.add_argument("--replicates", type=int)
    p.add_argument("--quantiles")
    p.add_argument("--with-replacement", dest="with_replacement",
                   action=argparse.BooleanOptionalAction)
    _add_common(p)

    p = sub.add_parser("tailplot", help="importance-weight survival table")
    p.add_argument("--data")
    p.add_argument("--policy")
    _add_common(p)

    p = sub.add_parser("compare", help="paired improvement interval of two policies")
    p.add_argument("--data")
    p.add_argument("--policy-a", dest="policy_a")
    p.add_argument("--policy-b", dest="policy_b")
    p.add_argument("--tau", type=float)
    p.add_argument("--rmax", type=float)
    p.add_argument("--boot", type=int)
    _add_common(p)
    return parser


def _dispatch(argv) -> int:
    args = build_parser().parse_args(argv)
    command = args.command
    if command == "simulate":
        command = f"simulate-{args.simulator}"
    cfg = _resolve(command, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _BODIES[command](cfg, out)
    _write_manifest(out, command, cfg)
    return 0


def main(argv=None) -> int:
    try:
        return _dispatch(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    except (DatasetError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


cli_dispatch = main

if __name__ == "__main__":
    sys.exit(main())
