"""``venteval`` command line.

Every command writes its artifacts into ``--out`` together with a
``manifest.json`` (argv, resolved config and its hash, seed, input and output
digests, library versions).  ``venteval rerun`` replays a manifest and checks
that every output is byte-identical.

Cohorts on disk are directories holding ``steps.csv`` and ``static.csv``.
Models and policies are JSON files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from dataclasses import replace
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, mdp
from .policies.conservative_q import DEFAULT_ALPHA_CQL, DEFAULT_EPOCHS

# resolved setting -> (type, default); flags override --config file values
CONFIG_SCHEMA = {
    "seed": (int, None),
    "alpha": (float, 0.0),
    "beta": (float, 0.0),
    "gamma": (float, mdp.GAMMA),
    "bandwidths": (str, None),
    "lambda": (float, 1e-3),
    "n_trees": (int, 100),
    "bc_depth": (int, 12),
    "max_depth": (int, 3),
    "alpha_lr": (float, 0.05),
    "passes": (int, 20),
    "alpha_cql": (float, DEFAULT_ALPHA_CQL),
    "epochs": (int, DEFAULT_EPOCHS),
    "l2": (float, None),
    "folds": (int, 5),
    "B": (int, 1000),
    "level": (float, 0.95),
    "noise": (bool, False),
    "n_rollouts": (int, 10_000),
    "function_class": (str, "linear"),
}
STOCHASTIC = {"synth generate", "synth oracle", "select-bandwidths", "train", "simulate", "evaluate"}


class CliError(Exception):
    """Validation failure reported as a one-line error with exit status 1."""


# -- config and IO helpers ------------------------------------------------------


def _parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise CliError(f"not a boolean: {v!r}")


def read_config(path) -> dict:
    """Flat ``key = value`` file; blank lines and ``#`` comments ignored."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected key = value")
        k, v = (p.strip() for p in line.split("=", 1))
        if k not in CONFIG_SCHEMA:
            raise CliError(f"{path}:{n}: unknown config key {k!r}")
        out[k] = v
    return out


def resolve(args, keys) -> dict:
    """Settings for ``keys``: flag, else config file, else default."""
    file_cfg = read_config(args.config) if getattr(args, "config", None) else {}
    cfg = {}
    for k in keys:
        typ, default = CONFIG_SCHEMA[k]
        v = getattr(args, k, None)
        if v is None:
            v = file_cfg.get(k, default)
        if v is not None:
            try:
                v = _parse_bool(v) if typ is bool else typ(v)
            except (TypeError, ValueError) as exc:
                raise CliError(f"bad value for {k}: {v!r}") from exc
        cfg[k] = v
    return cfg


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def load_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"no such file: {path}")
    return json.loads(p.read_text())


def write_csv(df: pd.DataFrame, path):
    df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def versions() -> dict:
    out = {"python": platform.python_version(), "venteval": __version__}
    for pkg in ("numpy", "scipy", "pandas", "scikit-learn", "matplotlib"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


class Run:
    """Tracks inputs and outputs of one command and writes its manifest."""

    def __init__(self, name, args, argv):
        self.name, self.args, self.argv = name, args, list(argv)
        self.out = Path(args.out)
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.config: dict = {}
        if getattr(args, "config", None):
            self.input(args.config)

    def input(self, path) -> Path:
        p = Path(path)
        if not p.exists():
            raise CliError(f"no such file or directory: {path}")
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for q in files:
            self.inputs[str(q)] = sha256(q)
        return p

    def path(self, name) -> Path:
        p = self.out / name
        if str(p) in self.inputs or any(Path(i).resolve() == p.resolve() for i in self.inputs):
            raise CliError(f"refusing to overwrite input {p}")
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(name)
        return p

    def settings(self, keys) -> dict:
        self.config.update(resolve(self.args, keys))
        if self.name in STOCHASTIC or self.name.split()[0] in STOCHASTIC:
            if self.config.get("seed") is None:
                raise CliError("--seed is required (flag or config key)")
        return self.config

    def finish(self):
        cfg_text = json.dumps(self.config, sort_keys=True)
        manifest = {
            "command": self.name,
            "argv": self.argv,
            "cwd": os.getcwd(),
            "config": self.config,
            "config_hash": hashlib.sha256(cfg_text.encode()).hexdigest(),
            "seed": self.config.get("seed"),
            "inputs": self.inputs,
            "outputs": {n: sha256(self.out / n) for n in sorted(set(self.outputs))},
            "versions": versions(),
        }
        dump_json(manifest, self.out / "manifest.json")


# -- loaders ---------------------------------------------------------------------


def load_cohort(run: Run, directory):
    from .ingest import read_episodes, records_from_raw
    d = run.input(directory)
    steps, static = d / "steps.csv", d / "static.csv"
    if not steps.is_file() or not static.is_file():
        raise CliError(f"{directory} must contain steps.csv and static.csv")
    return records_from_raw(read_episodes(steps, static))


def load_propensity(run: Run, path):
    from .propensity import LogisticModel
    return LogisticModel.from_dict(load_json(run.input(path)))


def load_policy(run: Run, path):
    from .policies import policy_from_dict
    return policy_from_dict(load_json(run.input(path)))


def load_model(run: Run, path):
    from .transition import NweModel
    return NweModel.from_dict(load_json(run.input(path)))


def reward_params(cfg) -> mdp.RewardParams:
    return mdp.RewardParams(cfg["alpha"], cfg["beta"], gamma=cfg["gamma"])


def transitions_for(run: Run, args, cfg):
    from .ingest import build_transitions
    eps = load_cohort(run, args.data)
    prop = load_propensity(run, args.propensity) if args.propensity else None
    return build_transitions(eps, reward_params(cfg), prop), eps, prop


def bandwidths_from(run: Run, cfg):
    from .transition import CLINICAL_BANDWIDTHS, BandwidthSet
    text = cfg.get("bandwidths")
    if text is None:
        return replace(CLINICAL_BANDWIDTHS, lam=cfg["lambda"])
    if text.endswith(".json"):
        return BandwidthSet(**load_json(run.input(text)))
    return BandwidthSet.parse(text, cfg["lambda"])


# -- commands --------------------------------------------------------------------


def cmd_bins(args, argv):
    sys.stdout.write(mdp.format_bin_table())
    return 0


def cmd_synth_generate(run: Run):
    from .ingest import write_episodes
    from .synthetic import SyntheticEnv
    cfg = run.settings(["seed"])
    env = SyntheticEnv.from_config(run.input(run.args.env).read_text()) if run.args.env else SyntheticEnv()
    if run.args.n < 1:
        raise CliError("--n must be >= 1")
    eps = env.sample_cohort(run.args.n, seed=cfg["seed"], id_prefix=run.args.prefix)
    write_episodes(eps, run.path("steps.csv"), run.path("static.csv"))
    run.path("env.cfg").write_text(env.to_config())
    cfg["n"] = run.args.n


def cmd_synth_oracle(run: Run):
    from .synthetic import SyntheticEnv, true_policy_value
    cfg = run.settings(["seed", "alpha", "beta", "gamma", "n_rollouts"])
    env = SyntheticEnv.from_config(run.input(run.args.env).read_text()) if run.args.env else SyntheticEnv()
    if run.args.policy == "behavior":
        pol, prop = "behavior", None
    else:
        pol = load_policy(run, run.args.policy)
        prop = load_propensity(run, run.args.propensity) if run.args.propensity else None
    v, se = true_policy_value(env, pol, cfg["gamma"], cfg["n_rollouts"], reward_params(cfg), prop, cfg["seed"])
    dump_json({"value": v, "se": se, "n_rollouts": cfg["n_rollouts"]}, run.path("oracle.json"))


def cmd_preprocess(run: Run):
    from .ingest import preprocess, read_episodes, write_episodes
    run.settings([])

    def raw(d):
        d = run.input(d)
        return read_episodes(d / "steps.csv", d / "static.csv")

    train = raw(run.args.data)
    test = raw(run.args.test_data) if run.args.test_data else None
    tr, te, limits, report = preprocess(train, test)
    if not tr:
        raise CliError("every training episode was excluded")
    write_episodes(tr, run.path("train/steps.csv"), run.path("train/static.csv"))
    if te:
        write_episodes(te, run.path("test/steps.csv"), run.path("test/static.csv"))
    dump_json(limits.to_dict(), run.path("winsor.json"))
    dump_json(report, run.path("report.json"))


def cmd_fit_propensity(run: Run):
    from .propensity import fit_logistic, select_l2
    cfg = run.settings(["l2", "folds"])
    eps = load_cohort(run, run.args.data)
    X = np.array([e.type_features(0) for e in eps])
    y = np.array([e.static["mortality_90d"] for e in eps])
    l2 = cfg["l2"]
    report = {}
    if l2 is None:
        l2, report = select_l2(X, y, k_folds=cfg["folds"])
        cfg["l2"] = l2
    model = fit_logistic(X, y, l2=l2)
    dump_json(model.to_dict(), run.path("propensity.json"))
    dump_json({"cv_log_loss": {repr(k): v for k, v in report.items()}, "selected_l2": l2}, run.path("propensity_report.json"))


def cmd_fit_transition(run: Run):
    from .ingest import transitions_to_frame
    from .transition import fit_nwe
    cfg = run.settings(["alpha", "beta", "gamma", "bandwidths", "lambda"])
    ts, _, _ = transitions_for(run, run.args, cfg)
    model = fit_nwe(ts, bandwidths_from(run, cfg))
    dump_json(model.to_dict(), run.path("transition.json"))
    write_csv(transitions_to_frame(ts), run.path("transitions.csv"))


def cmd_select_bandwidths(run: Run):
    from .transition import select_bandwidths
    cfg = run.settings(["seed", "folds", "alpha", "beta", "gamma"])
    ts, _, _ = transitions_for(run, run.args, cfg)
    best, report = select_bandwidths(ts, k_folds=cfg["folds"], seed=cfg["seed"])
    dump_json(best.to_dict(), run.path("bandwidths.json"))
    rows = [{k: v for k, v in r.items() if k != "fold_mae"} for r in report]
    write_csv(pd.DataFrame(rows), run.path("bandwidth_cv.csv"))


def cmd_train(run: Run):
    from .policies import export_tree, train_bc, train_conservative_q, train_cqi
    algo = run.args.algo
    keys = {"bc": ["n_trees", "bc_depth"], "cqi": ["max_depth", "alpha_lr", "passes"],
            "cq": ["alpha_cql", "epochs"]}[algo]
    cfg = run.settings(["seed", "alpha", "beta", "gamma"] + keys)
    cfg["algo"] = algo
    ts, _, _ = transitions_for(run, run.args, cfg)
    if algo == "bc":
        pol = train_bc(ts, cfg["n_trees"], cfg["bc_depth"], seed=cfg["seed"])
    elif algo == "cqi":
        pol = train_cqi(ts, cfg["max_depth"], cfg["alpha_lr"], cfg["gamma"], passes=cfg["passes"], seed=cfg["seed"])
        text, dot = export_tree(pol)
        run.path("tree.txt").write_text(text)
        run.path("tree.dot").write_text(dot)
    else:
        pol = train_conservative_q(ts, cfg["alpha_cql"], cfg["gamma"], epochs=cfg["epochs"], seed=cfg["seed"])
    dump_json(pol.to_dict(), run.path("policy.json"))


def _initial(run: Run, args):
    from .simulator import initial_conditions
    eps = load_cohort(run, args.data)
    prop = load_propensity(run, args.propensity) if args.propensity else None
    return initial_conditions(eps, prop)


def cmd_simulate(run: Run):
    from .simulator import batch_simulate, diagnostics, trajectories_to_frame
    cfg = run.settings(["seed", "alpha", "beta", "gamma", "noise"])
    pol, model = load_policy(run, run.args.policy), load_model(run, run.args.model)
    s1, hz, ids = _initial(run, run.args)
    res = batch_simulate(pol, s1, hz, model, reward_params(cfg), cfg["seed"], ids, cfg["noise"])
    if not res.trajectories:
        raise CliError("every simulated trajectory failed")
    write_csv(trajectories_to_frame(res.trajectories), run.path("trajectories.csv"))
    dump_json(diagnostics(res), run.path("diagnostics.json"))


def _write_report(run: Run, label, est, trajectories=None):
    from . import plotting
    df = plotting.estimates_frame([(label, est)])
    write_csv(df, run.path("estimates.csv"))
    plotting.plot_estimates(df, run.path("estimates.png"))
    if trajectories:
        bins = np.vstack([t.bins for t in trajectories if len(t.bins)])
        dist = plotting.action_distribution_frame({label: bins})
        write_csv(dist, run.path("action_distribution.csv"))
        plotting.plot_action_distribution(dist, run.path("action_distribution.png"))


def cmd_evaluate(run: Run):
    from .ope import fqe_estimate, matching_ope, pswis_estimate
    from .simulator import trajectories_to_frame
    method = run.args.method
    keys = ["seed", "alpha", "beta", "gamma", "B", "level"]
    keys += {"wis": [], "fqe": ["function_class"], "matching": ["noise"]}[method]
    cfg = run.settings(keys)
    cfg["method"] = method
    pol = load_policy(run, run.args.policy)
    label = run.args.label or Path(run.args.policy).stem
    trajs = None
    if method == "matching":
        if not run.args.model:
            raise CliError("--model is required for matching")
        model = load_model(run, run.args.model)
        s1, hz, ids = _initial(run, run.args)
        est, metrics, res = matching_ope(pol, s1, hz, model, reward_params(cfg), cfg["seed"], ids, cfg["B"],
                                         cfg["level"], cfg["noise"])
        dump_json(metrics.to_dict(), run.path("metrics.json"))
        write_csv(trajectories_to_frame(res.trajectories), run.path("trajectories.csv"))
        trajs = res.trajectories
    else:
        ts, _, _ = transitions_for(run, run.args, cfg)
        if method == "wis":
            if not run.args.behavior:
                raise CliError("--behavior is required for wis")
            est = pswis_estimate(ts, pol, load_policy(run, run.args.behavior), cfg["gamma"], B=cfg["B"],
                                 level=cfg["level"], seed=cfg["seed"])
        else:
            est = fqe_estimate(ts, pol, cfg["gamma"], cfg["function_class"], B=cfg["B"], level=cfg["level"],
                               seed=cfg["seed"])
    dump_json(est.to_dict(), run.path("estimate.json"))
    _write_report(run, label, est, trajs)


def cmd_metrics(run: Run):
    from .ope import clinical_metrics
    from .simulator import trajectories_from_frame
    run.settings([])
    df = pd.read_csv(run.input(run.args.trajectories), dtype={"episode_id": str}, float_precision="round_trip")
    trajs = trajectories_from_frame(df)
    m = clinical_metrics(trajs)
    dump_json({**m.to_dict(), "combined_aggressive": m.combined_aggressive}, run.path("metrics.json"))


def cmd_export_tree(run: Run):
    from .policies import CqiTree, export_graph, export_text
    run.settings([])
    pol = load_policy(run, run.args.policy)
    if not isinstance(pol, CqiTree):
        raise CliError("export-tree needs a cqi policy")
    if run.args.format == "text":
        run.path("tree.txt").write_text(export_text(pol))
    else:
        run.path("tree.dot").write_text(export_graph(pol))


def cmd_rerun(args, argv):
    man = load_json(args.manifest)
    for path, digest in man["inputs"].items():
        p = Path(path) if Path(path).is_absolute() else Path(man["cwd"]) / path
        if not p.is_file() or sha256(p) != digest:
            raise CliError(f"input changed since the recorded run: {path}")
    out = Path(args.out).resolve()
    replay = list(man["argv"])
    for i, tok in enumerate(replay):
        if tok == "--out" and i + 1 < len(replay):
            replay[i + 1] = str(out)
        elif tok.startswith("--out="):
            replay[i] = f"--out={out}"
    here = os.getcwd()
    os.chdir(man["cwd"])
    try:
        status = main(replay)
    finally:
        os.chdir(here)
    if status:
        return status
    new = load_json(out / "manifest.json")["outputs"]
    diff = sorted(n for n in set(new) | set(man["outputs"]) if new.get(n) != man["outputs"].get(n))
    if diff:
        raise CliError(f"outputs differ from the manifest: {', '.join(diff)}")
    print(f"identical: {len(new)} outputs")
    return 0


# -- parser ----------------------------------------------------------------------


def _common(p, seed=True):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="flat key = value settings file")
    if seed:
        p.add_argument("--seed", type=int)


def _rewards(p):
    p.add_argument("--alpha", type=float, help="Vt_set penalty")
    p.add_argument("--beta", type=float, help="FiO2 penalty")
    p.add_argument("--gamma", type=float)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="venteval", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("bins", help="print the action binning table")

    syn = sub.add_parser("synth", help="synthetic environment").add_subparsers(dest="synth_command", required=True)
    p = syn.add_parser("generate", help="sample a behaviour cohort")
    _common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--env", help="environment config file")
    p.add_argument("--prefix", default="syn")
    p = syn.add_parser("oracle", help="Monte-Carlo value of a policy under the true dynamics")
    _common(p)
    _rewards(p)
    p.add_argument("--policy", required=True, help="policy JSON or 'behavior'")
    p.add_argument("--propensity")
    p.add_argument("--env")
    p.add_argument("--n-rollouts", dest="n_rollouts", type=int)

    p = sub.add_parser("preprocess", help="winsorize, fill and impute raw episodes")
    _common(p, seed=False)
    p.add_argument("--data", required=True)
    p.add_argument("--test-data", dest="test_data")

    p = sub.add_parser("fit-propensity", help="fit the mortality model giving z")
    _common(p, seed=False)
    p.add_argument("--data", required=True)
    p.add_argument("--l2", type=float)
    p.add_argument("--folds", type=int)

    for name, hlp in (("fit-transition", "fit the kernel transition model"),
                      ("select-bandwidths", "cross-validate the bandwidth grid")):
        p = sub.add_parser(name, help=hlp)
        _common(p, seed=name == "select-bandwidths")
        _rewards(p)
        p.add_argument("--data", required=True)
        p.add_argument("--propensity", required=True)
        if name == "fit-transition":
            p.add_argument("--bandwidths", help="h_sh,h_sr,h_sb,h_sm,h_a,h_z or a bandwidths.json")
            p.add_argument("--lambda", dest="lambda", type=float)
        else:
            p.add_argument("--folds", type=int)

    p = sub.add_parser("train", help="train a policy")
    _common(p)
    _rewards(p)
    p.add_argument("--algo", choices=("bc", "cqi", "cq"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--propensity")
    p.add_argument("--n-trees", dest="n_trees", type=int)
    p.add_argument("--bc-depth", dest="bc_depth", type=int)
    p.add_argument("--max-depth", dest="max_depth", type=int)
    p.add_argument("--alpha-lr", dest="alpha_lr", type=float)
    p.add_argument("--passes", type=int)
    p.add_argument("--alpha-cql", dest="alpha_cql", type=float)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("simulate", help="roll a policy out through the transition model")
    _common(p)
    _rewards(p)
    p.add_argument("--policy", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="cohort giving initial states and horizons")
    p.add_argument("--propensity")
    p.add_argument("--noise", action="store_const", const=True)

    p = sub.add_parser("evaluate", help="off-policy value estimate with a bootstrap interval")
    _common(p)
    _rewards(p)
    p.add_argument("--method", choices=("wis", "fqe", "matching"), required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--propensity")
    p.add_argument("--model", help="transition model (matching)")
    p.add_argument("--behavior", help="behaviour policy (wis)")
    p.add_argument("--label")
    p.add_argument("--B", dest="B", type=int)
    p.add_argument("--level", type=float)
    p.add_argument("--noise", action="store_const", const=True)
    p.add_argument("--function-class", dest="function_class", choices=("linear", "tabular"))

    p = sub.add_parser("metrics", help="clinical metrics of simulated trajectories")
    _common(p, seed=False)
    p.add_argument("--trajectories", required=True)

    p = sub.add_parser("export-tree", help="write a CQI tree as text or Graphviz DOT")
    _common(p, seed=False)
    p.add_argument("--policy", required=True)
    p.add_argument("--format", choices=("text", "graph"), default="text")

    p = sub.add_parser("rerun", help="replay a manifest and verify byte-identical outputs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    return ap


COMMANDS = {
    "synth generate": cmd_synth_generate, "synth oracle": cmd_synth_oracle, "preprocess": cmd_preprocess,
    "fit-propensity": cmd_fit_propensity, "fit-transition": cmd_fit_transition,
    "select-bandwidths": cmd_select_bandwidths, "train": cmd_train, "simulate": cmd_simulate,
    "evaluate": cmd_evaluate, "metrics": cmd_metrics, "export-tree": cmd_export_tree,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    name = args.command + (f" {args.synth_command}" if args.command == "synth" else "")
    try:
        if name == "bins":
            return cmd_bins(args, argv)
        if name == "rerun":
            return cmd_rerun(args, argv)
        run = Run(name, args, argv)
        COMMANDS[name](run)
        run.finish()
        return 0
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"venteval: error: command={name!r} type={type(exc).__name__} message={msg!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
