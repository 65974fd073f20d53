"""Command-line entry point: one subcommand per experiment.

Every run writes ``<out>/<experiment>/<seed>/report.json`` plus, where it
applies, ``history.csv`` and a ``checkpoint/`` directory. Outputs depend only
on the resolved config and the seed, so two runs are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (ExampleNet, example_loop, example_net_grad_field,
                       example_net_surrogate_grad, fano_factor, gradient_bias_stats, loop_integral,
                       loop_integrand, signflip_sweep)
from .data import (SyntheticClassSpec, dataset_checksum, load_default_target, load_pbm_target,
                   poisson_raster, synthetic_classes, train_val_split)
from .errors import ConfigError, SpikeGradError
from .estimators import (benchmark_mlp, bernoulli_chain, brute_force_grad, demonstrate_nonexchange,
                         fd_coupled, fd_uncoupled, forward_triple_grad, single_unit_equivalence,
                         smoothed_expectation, smoothed_stochad_grad)
from .network import backprop_path, load_checkpoint, output_seeds, rollout, save_checkpoint
from .neuron import DETERMINISTIC, EscapeNoise
from .rng import CounterRNG
from .tape import SpikeGradRule
from .train import (DETERMINISTIC_EVAL, LossSpec, RegularizerSpec, classification_network,
                    cross_evaluation, fluctuation_init, matching_eval, matching_network,
                    matching_rule, max_over_time_ce, train_classify, train_matching)

EXPERIMENTS = ("perceptron-equiv", "signflip", "loop-integral", "estimator-bench", "train-match",
               "train-classify", "fano", "bias-stats")


# config ---------------------------------------------------------------------

def default_config(experiment):
    ref = resources.files("spikegrad").joinpath(f"configs/{experiment}.json")
    return json.loads(ref.read_text())


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _compatible(default, value):
    if default is None or value is None:
        return True
    if isinstance(default, bool) or isinstance(value, bool):
        return isinstance(default, bool) and isinstance(value, bool)
    if isinstance(default, (int, float)):
        return isinstance(value, (int, float))
    return isinstance(value, type(default))


def resolve_config(experiment, path=None, overrides=(), seed=None):
    """Shipped defaults, then the config file, then ``--set`` pairs, then ``--seed``."""
    cfg = default_config(experiment)
    updates = []
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        updates += list(user.items())
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        updates.append((k.strip(), _parse_value(v)))
    if seed is not None:
        updates.append(("seed", seed))
    for k, v in updates:
        if k not in cfg:
            raise ConfigError(f"unknown config key {k!r} for {experiment}")
        if not _compatible(cfg[k], v):
            raise ConfigError(f"config key {k!r} expects {type(cfg[k]).__name__}, got {v!r}")
        cfg[k] = v
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    return cfg


# output ---------------------------------------------------------------------

def _clean(obj):
    """JSON-safe copy: arrays to lists, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, obj):
    Path(path).write_text(json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n")


def write_csv(path, rows, columns=None):
    if columns is None:
        columns = []
        for row in rows:
            columns += [k for k in row if k not in columns]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow(["" if row.get(c) is None else _cell(row.get(c)) for c in columns])
    Path(path).write_text(buf.getvalue())


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if math.isfinite(v) else "nan"
    return str(v)


# experiments ------------------------------------------------------------------

def _example_net(cfg):
    return ExampleNet(cfg["w"], cfg["v1"], cfg["v2"], cfg["u1"], cfg["u2"], cfg["beta_f"], cfg["beta_sg"],
                      cfg["x"])


def cmd_perceptron_equiv(cfg, out):
    u = np.linspace(cfg["u_min"], cfg["u_max"], cfg["n_u"])
    r = single_unit_equivalence(u, cfg["theta"], cfg["beta_n"], cfg["beta_sg"], cfg["x"], cfg["seed"])
    report = {"max_deviation": r["max_deviation"], "u": u, "surrogate": r["surrogate"],
              "expected": r["expected"], "smoothed": r["smoothed"], "outcome": r["outcome"]}
    return report, None


def cmd_signflip(cfg, out):
    net = _example_net(cfg)
    sg, true = example_net_surrogate_grad(net)
    w = np.linspace(cfg["w_min"], cfg["w_max"], cfg["n_w"])
    sweep_sg, sweep_true, flag, intervals = signflip_sweep(net, w)
    report = {"surrogate_dy_dw": sg, "true_dy_dw": true, "opposite_signs": bool(sg * true < 0),
              "n_disagreements": int(flag.sum()),
              "disagreement_intervals": [[float(w[a]), float(w[b])] for a, b in intervals]}
    rows = [{"w": float(wi), "surrogate": float(a), "true": float(b), "disagree": int(f)}
            for wi, a, b, f in zip(w, sweep_sg, sweep_true, flag)]
    return report, rows


def cmd_loop_integral(cfg, out):
    base = _example_net(cfg)
    loop = example_loop(base, CounterRNG(cfg["seed"]), cfg["r"], cfg["n_steps"])
    fields = {"true": (base, False)}
    for b in cfg["beta_sg_list"]:
        fields[f"sg{b:g}"] = (replace(base, beta_sg=float(b)), True)
    report = {"d1": loop.d1, "d2": loop.d2, "center": loop.center, "r": loop.r, "integrals": {}}
    rows = None
    for name, (net, surrogate) in fields.items():
        def field(points, net=net, surrogate=surrogate):
            return example_net_grad_field(net, points, surrogate)
        value, series = loop_integral(field, loop, cfg["n_min"])
        ns = sorted(series)
        rel = [abs(series[b] - series[a]) / max(abs(series[b]), 1e-300) for a, b in zip(ns, ns[1:])]
        report["integrals"][name] = {"I": value, "series": {str(n): series[n] for n in ns},
                                     "last_relative_change": rel[-1] if rel else None}
        alpha, vals = loop_integrand(field, loop, cfg["csv_steps"])
        running = np.cumsum(vals) * 2 * np.pi / cfg["csv_steps"]
        if rows is None:
            rows = [{"alpha": float(a)} for a in alpha]
        for row, v, c in zip(rows, vals, running):
            row[f"integrand_{name}"] = float(v)
            row[f"running_{name}"] = float(c)
    return report, rows


def cmd_estimator_bench(cfg, out):
    n = cfg["n_samples"]
    seed = cfg["seed"]
    programs = {"mlp": benchmark_mlp(),
                "chain": bernoulli_chain(cfg["chain_weights"], cfg["chain_beta"], cfg["chain_x"])}
    report = {}
    for name, prog in programs.items():
        rng = CounterRNG(seed).child(len(report))
        exact = brute_force_grad(prog)
        entries = {}
        for dw in cfg["dw_list"]:
            entries[f"fd_uncoupled_{dw:g}"] = fd_uncoupled(prog, dw, n, rng)[0]
            entries[f"fd_coupled_{dw:g}"] = fd_coupled(prog, dw, n, rng)[0]
        entries["smoothed_stochad"] = smoothed_stochad_grad(prog, n, rng)[0]
        entries["forward_triple"] = forward_triple_grad(prog, n, rng, enumerate_expectation=True)[0]
        res = {"exact_grad": exact, "smoothed_expectation": smoothed_expectation(prog), "estimators": {}}
        for key, rep in entries.items():
            d = rep.to_dict()
            d["mean_variance"] = float(rep.variance.mean())
            d["max_abs_error"] = float(np.max(np.abs(rep.mean - exact)))
            res["estimators"][key] = d
        sm = res["smoothed_expectation"]
        res["smoothed_relative_bias"] = float(np.linalg.norm(sm - exact) / np.linalg.norm(exact))
        dws = cfg["dw_list"]
        if len(dws) >= 2:
            v0 = res["estimators"][f"fd_uncoupled_{dws[0]:g}"]["mean_variance"]
            v1 = res["estimators"][f"fd_uncoupled_{dws[1]:g}"]["mean_variance"]
            res["fd_uncoupled_variance_ratio"] = v1 / v0
        report[name] = res
    ne = cfg["nonexchange"]
    report["nonexchange"] = demonstrate_nonexchange(ne["w1"], ne["w2"], ne["wy"], ne["x"], ne["beta"]).to_dict()
    return report, None


def _matching_setup(cfg, stochastic):
    net = matching_network(stochastic, cfg["n_in"], cfg["n_hidden"], cfg["n_out"], cfg["T"], cfg["dt"],
                           cfg["tau_mem"], cfg["tau_syn"], cfg["beta_hid"], cfg["beta_out"])
    x = poisson_raster(cfg["n_in"], cfg["T"], cfg["input_rate"], cfg["dt"], cfg["input_seed"])
    target = load_default_target() if cfg["target"] is None else load_pbm_target(cfg["target"])
    if target.shape != (cfg["T"], cfg["n_out"]):
        raise ConfigError(f"target raster is {target.shape}, expected ({cfg['T']}, {cfg['n_out']})")
    net, measured = fluctuation_init(net, cfg["sigma_u"], cfg["input_rate"], cfg["seed"], calib_input=x)
    return net, x, target, measured


def _modes(cfg):
    if cfg["mode"] not in ("stochastic", "deterministic", "both"):
        raise ConfigError("mode must be 'stochastic', 'deterministic' or 'both'")
    return ["stochastic", "deterministic"] if cfg["mode"] == "both" else [cfg["mode"]]


def cmd_train_match(cfg, out):
    report, rows = {}, []
    for mode in _modes(cfg):
        stoch = mode == "stochastic"
        net, x, target, measured = _matching_setup(cfg, stoch)
        lr = cfg["lr_stochastic"] if stoch else cfg["lr_deterministic"]
        n_trials = cfg["n_trials"] if cfg["n_trials"] is not None else (10 if stoch else 1)
        rng = CounterRNG(cfg["seed"]).child(30)
        res = train_matching(net, x, target, cfg["epochs"], matching_rule(stoch, cfg["sg_beta"]),
                             {"hid": lr[0], "out": lr[1]}, n_trials, rng, LossSpec(cfg["loss"]),
                             cfg["optimizer"], cfg["fano_window"])
        eval_rng = CounterRNG(cfg["seed"]).child(31)
        n_eval = cfg["eval_trials"] if stoch else 1
        before = matching_eval(net, x, target, eval_rng, n_eval, fano_window=cfg["fano_window"])
        after = matching_eval(res.net, x, target, eval_rng, n_eval, fano_window=cfg["fano_window"])
        report[mode] = {"calibrated_std": measured, "aborted": res.aborted, "epochs_run": len(res.history),
                        "initial": before, "final": after, "loss_ratio": after["loss"] / before["loss"],
                        "silent_loss": float(target.sum() / target.shape[1]),
                        "history_first": res.history[0], "history_last": res.history[-1]}
        rows += [{"mode": mode, **h} for h in res.history]
        (out / "checkpoint").mkdir(exist_ok=True)
        save_checkpoint(res.net, out / "checkpoint" / f"{mode}.json", {"experiment": "train-match", "mode": mode})
    return report, rows


def _classification_data(cfg):
    spec = SyntheticClassSpec(cfg["n_classes"], cfg["n_in"], cfg["T"], cfg["jitter"], cfg["n_samples"],
                              cfg["rate"], cfg["dt"], cfg["deletion"], cfg["data_seed"])
    ds = synthetic_classes(spec)
    return ds, *train_val_split(ds, cfg["val_fraction"], cfg["data_seed"])


def _classification_net(cfg, stochastic, train_x):
    net = classification_network(stochastic, cfg["n_in"], tuple(cfg["hidden"]), cfg["n_classes"], cfg["T"],
                                 cfg["dt"], cfg["tau_mem"], cfg["tau_syn"], cfg["tau_ro"], cfg["beta"],
                                 cfg["recurrent"])
    return fluctuation_init(net, cfg["sigma_u"], cfg["rate"], cfg["seed"], calib_input=train_x)


def cmd_train_classify(cfg, out):
    ds, tr, va = _classification_data(cfg)
    rule = SpikeGradRule("superspike", cfg["sg_beta"])
    reg = RegularizerSpec(cfg["theta_upper"], cfg["lam_upper"])
    report = {"dataset_checksum": dataset_checksum(ds), "n_train": len(tr), "n_val": len(va)}
    rows, nets = [], {}
    for mode in _modes(cfg):
        net, measured = _classification_net(cfg, mode == "stochastic", tr.x)
        res = train_classify(net, tr, va, cfg["epochs"], rule, cfg["lr"], cfg["batch_size"],
                             CounterRNG(cfg["seed"]).child(40), reg, cfg["fano_window"], cfg["eval_every"])
        nets[mode] = res.net
        accs = [h["train_acc"] for h in res.history if "train_acc" in h]
        first90 = next((h["epoch"] for h in res.history if h.get("train_acc", 0) > 0.9), None)
        report[mode] = {"calibrated_std": measured, "aborted": res.aborted, "final": res.history[-1],
                        "best_train_acc": max(accs) if accs else None, "first_epoch_above_90": first90}
        rows += [{"mode": mode, **h} for h in res.history]
        (out / "checkpoint").mkdir(exist_ok=True)
        save_checkpoint(res.net, out / "checkpoint" / f"{mode}.json", {"experiment": "train-classify", "mode": mode})
    noises = {"stochastic": EscapeNoise("sigmoid", cfg["beta"]), "deterministic": DETERMINISTIC_EVAL}
    for split, data in (("train", tr), ("val", va)):
        if len(data):
            report[f"cross_evaluation_{split}"] = cross_evaluation(
                nets, data.x, data.y, noises, CounterRNG(cfg["seed"]).child(41), cfg["eval_trials"])
    return report, rows


def cmd_fano(cfg, out):
    rng = CounterRNG(cfg["seed"])
    if cfg["checkpoint"] is None:
        p = cfg["rate"] * cfg["dt"] / 1000.0
        rasters = np.stack([poisson_raster(cfg["N"], cfg["T"], cfg["rate"], cfg["dt"], rng.child(50, k))
                            for k in range(cfg["trials"])])
        report = {"source": "poisson", "p": p, "binomial_prediction": 1.0 - p,
                  "fano_pooled": fano_factor(rasters.reshape(-1, cfg["N"]), cfg["window"]),
                  "fano_across_trials": fano_factor(rasters, cfg["window"]) if cfg["trials"] > 1 else None}
        return report, None
    net = load_checkpoint(cfg["checkpoint"])
    x = poisson_raster(net.n_in, net.T, cfg["rate"], net.dt, cfg["input_seed"])
    res = rollout(net, x, rng.child(51), record=False, row_keys=[(k,) for k in range(cfg["trials"])])
    report = {"source": "checkpoint", "layers": []}
    for l, S in enumerate(res.spikes):
        try:
            f = fano_factor(S, cfg["window"])
        except SpikeGradError:
            f = None
        report["layers"].append({"layer": l, "rate": float(S.mean()), "fano": f})
    return report, None


def _flat(grads):
    return np.concatenate([np.ravel(grads[k]) for k in sorted(grads)])


def _bias_snapshot(net, x, y, rule, n_trials, rng):
    grads = []
    for k in range(n_trials):
        res = rollout(net, x, rng, row_keys=[(k, i) for i in range(len(y))])
        _, d, _ = max_over_time_ce(res.output, y)
        grads.append(_flat(backprop_path(res, output_seeds(res, d), rule)))
    mean = np.mean(grads, axis=0)
    stats = gradient_bias_stats(grads, mean)
    det = net.with_noise(DETERMINISTIC)
    res = rollout(det, x, rng.child(99))
    _, d, _ = max_over_time_ce(res.output, y)
    g_det = _flat(backprop_path(res, output_seeds(res, d), rule))
    out = stats.to_dict()
    out["deterministic_cosine"] = float(g_det @ mean / (np.linalg.norm(g_det) * np.linalg.norm(mean)))
    out["deterministic_projection"] = (stats.components @ g_det).tolist()
    return out


def cmd_bias_stats(cfg, out):
    ds, tr, va = _classification_data(cfg)
    rule = SpikeGradRule("superspike", cfg["sg_beta"])
    net, _ = _classification_net(cfg, True, tr.x)
    batch = tr.subset(np.arange(min(cfg["batch_size"], len(tr))))
    rng = CounterRNG(cfg["seed"])
    report = {"before": _bias_snapshot(net, batch.x, batch.y, rule, cfg["n_trials"], rng.child(60))}
    rows = None
    if cfg["train_epochs"] > 0:
        res = train_classify(net, tr, va, cfg["train_epochs"], rule, cfg["lr"], cfg["batch_size"], rng.child(61),
                             RegularizerSpec(cfg["theta_upper"], cfg["lam_upper"]), eval_every=cfg["train_epochs"])
        report["after"] = _bias_snapshot(res.net, batch.x, batch.y, rule, cfg["n_trials"], rng.child(62))
        report["train_acc"] = res.history[-1].get("train_acc")
        rows = res.history
    return report, rows


COMMANDS = {"perceptron-equiv": cmd_perceptron_equiv, "signflip": cmd_signflip,
            "loop-integral": cmd_loop_integral, "estimator-bench": cmd_estimator_bench,
            "train-match": cmd_train_match, "train-classify": cmd_train_classify, "fano": cmd_fano,
            "bias-stats": cmd_bias_stats}


def run_experiment(experiment, cfg, out_root):
    """Run one experiment with a resolved config; returns the output directory."""
    out = Path(out_root) / experiment / str(cfg["seed"])
    out.mkdir(parents=True, exist_ok=True)
    report, rows = COMMANDS[experiment](cfg, out)
    write_json(out / "report.json", {"experiment": experiment, "seed": cfg["seed"], "version": __version__,
                                     "config": cfg, "results": report})
    if rows is not None:
        write_csv(out / "history.csv", rows)
    return out


def build_parser():
    parser = argparse.ArgumentParser(prog="spikegrad", description="Surrogate-gradient and stochastic-AD experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON file overriding the shipped defaults")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, default=Path("runs"))
        p.add_argument("--threads", type=int, help="cap on BLAS/OpenMP worker threads")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (value parsed as JSON when possible)")
        p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.experiment, args.config, args.set, args.seed)
        if args.print_config:
            print(json.dumps(cfg, sort_keys=True, indent=2))
            return 0
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                out = run_experiment(args.experiment, cfg, args.out)
        else:
            out = run_experiment(args.experiment, cfg, args.out)
    except SpikeGradError as e:
        print(f"spikegrad {args.experiment}: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
