"""Command-line front end.

Subcommands: gen-data, train, attack, transfer, diagnose
{decompose|replace|align|surface|scan}, sweep {gamma|position}, report.
Everything is driven by a flat key = value config file; see the README
for the key reference.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import data, diagnostics, harness
from .attacks import compute_guide, run_attack
from .harness import ConfigError, parse_config_file
from .network import load_model, save_model


def _load_setup(cfg, need_victims=False):
    train_ds, test_ds = harness.load_dataset(cfg)
    substitute = harness.prepare_model(cfg, cfg.substitute_arch, cfg.substitute_seed, train_ds)
    victims, names = [], []
    if need_victims:
        if not cfg.victims:
            raise ConfigError("victims: at least one victim is required")
        for v in cfg.victims:
            victims.append(harness.prepare_model(cfg, v.arch, v.seed, train_ds,
                                                 shared_h=v.shared_h, substitute=substitute))
            names.append(f"{v.arch}-{v.seed}" + ("-sharedh" if v.shared_h else ""))
    return train_ds, test_ds, substitute, victims, names


def cmd_gen_data(args):
    cfg = parse_config_file(args.config)
    ds = data.generate_synthetic(cfg.data_seed, cfg.data_n, cfg.data_classes,
                                 cfg.data_size, cfg.data_noise)
    data.save_raw(ds, args.out)
    print(f"wrote {len(ds)} examples ({cfg.data_classes} classes, "
          f"{cfg.data_size}x{cfg.data_size}) to {args.out}")


def cmd_train(args):
    cfg = parse_config_file(args.config)
    train_ds, test_ds, substitute, _, _ = _load_setup(cfg)
    acc = float(np.mean(substitute.predict(test_ds.images) == test_ds.labels))
    if args.out:
        save_model(substitute.spec, substitute.params, args.out)
        print(f"saved model to {args.out}")
    print(f"substitute {cfg.substitute_arch} seed {cfg.substitute_seed}: "
          f"train acc {substitute.params.train_accuracy:.4f}, test acc {acc:.4f}")


def cmd_attack(args):
    cfg = parse_config_file(args.config)
    _, test_ds, substitute, _, _ = _load_setup(cfg)
    subset = test_ds.slice(0, min(cfg.eval_count, len(test_ds)))
    result = run_attack(substitute, subset.images, subset.labels, cfg.attack)
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = os.path.join(cfg.output_dir, "trace.csv")
    harness.write_trace_csv(result, path)
    final_loss = float(np.mean(result.trace.loss[-1])) if result.trace.loss else float("nan")
    print(f"{cfg.attack.method}: {len(subset)} examples, {cfg.attack.steps} steps, "
          f"final substitute loss {final_loss:.4f}; trace at {path}")


def cmd_transfer(args):
    report = harness.run_experiment(args.config)
    print(f"average success rate {report.average_rate:.4f} "
          f"over {len(report.per_victim_rate)} victims; reports in the output dir")


def cmd_diagnose(args):
    cfg = parse_config_file(args.config)
    os.makedirs(cfg.output_dir, exist_ok=True)
    train_ds, test_ds, substitute, victims, names = _load_setup(cfg, need_victims=True)
    victim = victims[0]
    subset = test_ds.slice(0, min(cfg.eval_count, len(test_ds)))
    x, y = subset.images, subset.labels
    beta = cfg.attack.split
    if beta is None:
        raise ConfigError("attack.split: required for diagnostics")

    if args.what == "decompose":
        factors = diagnostics.decompose_input_gradient(substitute, x[:1], y[:1], beta)
        _, autodiff, _, _ = substitute.loss_and_input_grad(x[:1], y[:1])
        err = np.max(np.abs(factors.product - autodiff))
        print(f"three-factor product vs autodiff gradient: max abs diff {err:.3e}")
    elif args.what == "replace":
        path = os.path.join(cfg.output_dir, "replace.csv")
        with open(path, "w") as f:
            f.write("variant,victim_success_rate\n")
            for label, km, kl in [("plain", False, False), ("masks", True, False),
                                  ("logit_grad", False, True), ("both", True, True)]:
                res = diagnostics.replacement_attack(substitute, victim, x, y, cfg.attack,
                                                     replace_masks=km, replace_logit_grad=kl)
                rep = harness.transfer_eval(substitute, [victim], subset, cfg.attack, result=res)
                f.write(f"{label},{rep.average_rate:.10f}\n")
                print(f"{label:<12} victim success {rep.average_rate:.4f}")
        print(f"wrote {path}")
    elif args.what == "align":
        acfg = replace(cfg.attack, record_points=True)
        res = run_attack(substitute, x, y, acfg)
        series = diagnostics.alignment_trajectory(substitute, victim, res, x, y)
        path = os.path.join(cfg.output_dir, "alignment.csv")
        with open(path, "w") as f:
            f.write("iteration,mean_gradient_cosine\n")
            for j, c in series:
                f.write(f"{j},{c:.10f}\n")
        print(f"wrote {path} ({len(series)} iterations)")
    elif args.what == "surface":
        guide = compute_guide(substitute, x[:1], y[:1], cfg.attack)
        vnorm = float(np.linalg.norm(guide.v))
        projections = np.linspace(0.1, 2.0, 12) * vnorm
        cosines = np.array([0.5, 0.6, 0.7, 0.8, 0.9, 1.0])
        surf = diagnostics.loss_surface_sweep(substitute, victim, x[:1], y[:1],
                                              guide, projections, cosines, beta,
                                              seed=cfg.attack.seed)
        path = os.path.join(cfg.output_dir, "surface.csv")
        with open(path, "w") as f:
            f.write("projection,cosine,substitute_loss,victim_loss\n")
            for ai in range(len(projections)):
                for ci in range(len(cosines)):
                    f.write(f"{projections[ai]:.6f},{cosines[ci]:.6f},"
                            f"{surf.substitute_loss[ai, ci]:.8f},{surf.victim_loss[ai, ci]:.8f}\n")
        print(f"wrote {path}")
    elif args.what == "scan":
        gammas = [1.0, 2.0, 3.0, 5.0, 10.0]
        rows, ref = diagnostics.ilpd_vs_ila_scan(substitute, victim, x[:16], y[:16],
                                                 gammas, cfg.attack)
        path = os.path.join(cfg.output_dir, "scan.csv")
        with open(path, "w") as f:
            f.write("gamma,feature_norm,victim_loss,substitute_loss\n")
            for r in rows:
                f.write(f"{r.gamma},{r.feature_norm:.8f},{r.victim_loss:.8f},{r.substitute_loss:.8f}\n")
            f.write(f"ila,{ref.feature_norm:.8f},{ref.victim_loss:.8f},{ref.substitute_loss:.8f}\n")
        print(f"wrote {path}")


def cmd_sweep(args):
    cfg = parse_config_file(args.config)
    os.makedirs(cfg.output_dir, exist_ok=True)
    _, test_ds, substitute, victims, names = _load_setup(cfg, need_victims=True)
    subset = test_ds.slice(0, min(cfg.eval_count, len(test_ds)))
    if args.what == "gamma":
        values = [float(v) for v in (args.values.split(",") if args.values else
                                     ["1", "2", "3", "5", "10"])]
        rows = diagnostics.gamma_sweep(substitute, victims, subset, values, cfg.attack)
        label = "gamma"
    else:
        if args.values:
            values = [int(v) for v in args.values.split(",")]
        else:
            values = list(range(1, substitute.depth))
        rows = diagnostics.position_sweep(substitute, victims, subset, values, cfg.attack)
        label = "split"
    path = os.path.join(cfg.output_dir, f"sweep_{label}.csv")
    with open(path, "w") as f:
        f.write(f"{label}," + ",".join(names) + ",average\n")
        for value, per_victim, avg in rows:
            f.write(f"{value}," + ",".join(f"{r:.10f}" for r in per_victim) + f",{avg:.10f}\n")
            print(f"{label}={value}: average success {avg:.4f}")
    print(f"wrote {path}")


def cmd_report(args):
    with open(args.path) as f:
        sys.stdout.write(f.read())


def build_parser():
    p = argparse.ArgumentParser(prog="ilpdlab",
                                description="transfer-attack laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        sp = sub.add_parser(name, **kwargs)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, help="render the synthetic dataset to a raw file")
    sp.add_argument("config")
    sp.add_argument("--out", default="dataset.bin")

    sp = add("train", cmd_train, help="train (or load) the substitute model")
    sp.add_argument("config")
    sp.add_argument("--out", default=None, help="also save the model here")

    sp = add("attack", cmd_attack, help="run the configured attack, emit its trace")
    sp.add_argument("config")

    sp = add("transfer", cmd_transfer, help="full transfer evaluation, emit reports")
    sp.add_argument("config")

    sp = add("diagnose", cmd_diagnose, help="run one diagnostic study")
    sp.add_argument("what", choices=["decompose", "replace", "align", "surface", "scan"])
    sp.add_argument("config")

    sp = add("sweep", cmd_sweep, help="success-rate sweep over gamma or split position")
    sp.add_argument("what", choices=["gamma", "position"])
    sp.add_argument("config")
    sp.add_argument("--values", default=None, help="comma-separated sweep values")

    sp = add("report", cmd_report, help="print a previously written summary")
    sp.add_argument("path")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
