"""Command-line entry point: meta-training, evaluation, benchmarking,
verification and artifact inspection.

Exit-code contract: 0 success, 1 runtime failure, 2 usage/config error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import ParamVector
from .baselines import BaselineOptimizer, baseline_rollout, tune_learning_rate
from .convergence import (equivalence_test, lemma1_monitor, reconstruct_innovation,
                          square_sum_diagnostics)
from .data_io import (DataError, RunConfig, config_from_mapping, config_hash,
                      load_benchmark_dataset, parse_config, write_results)
from .metatrain import (MetaLossConfig, classifier_distribution,
                        estimate_expected_metaloss, meta_train,
                        quadratic_mix_distribution)
from .objectives import effective_beta, estimate_beta, make_quadratic
from .operators import InnovationEngine, load_checkpoint, save_checkpoint
from .rules import (CyclicRule, FullGradientRule, LearnedInnovation,
                    StepsizeSchedule, Trajectory, rollout)

log = logging.getLogger("cl2o")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_VERIFICATION = 3


class UsageError(Exception):
    pass


class VerificationFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# Argument parsing


def _add_shared_flags(p):
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--baselines", default=None, help="comma-separated list")
    p.add_argument("--unsafe-stepsize", action="store_true", default=None)
    p.add_argument("--activation", choices=["tanh", "sigmoid", "relu"], default=None)
    p.add_argument("--init", choices=["uniform", "gaussian"], default=None)
    p.add_argument("--family", choices=["quadratic-mix", "classifier"], default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="cl2o", description=__doc__)
    parser.add_argument("--version", action="version", version=f"cl2o {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("train", "meta-train the innovation parameters"),
        ("evaluate", "held-out outer-loss evaluation of a checkpoint"),
        ("bench", "paired benchmark against hand-crafted optimizers"),
        ("verify", "run the convergence monitors"),
        ("inspect", "describe a checkpoint, trajectory or manifest"),
    ]:
        p = sub.add_parser(name, help=helptext)
        _add_shared_flags(p)
        if name in ("verify", "inspect"):
            p.add_argument("artifact", nargs="?", default=None,
                           help="trajectory/checkpoint/manifest file")
    return parser


_FLAG_TO_KEY = {
    "seed": "seed", "epochs": "epochs", "horizon": "horizon", "jobs": "jobs",
    "data_dir": "data_dir", "out": "out_dir", "baselines": "baselines",
    "unsafe_stepsize": "unsafe_stepsize", "activation": "activation",
    "init": "init", "family": "family",
}


def load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else config_from_mapping({})
    overrides = {}
    for flag, key in _FLAG_TO_KEY.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return replace(cfg, **overrides)


# ---------------------------------------------------------------------------
# Pipeline assembly


def _build_quadratic_pipeline(cfg: RunConfig):
    dist = quadratic_mix_distribution(
        dim=cfg.dim, condition_number=cfg.condition_number,
        episodes=cfg.episodes, eta_scale=cfg.eta_scale)
    engine = InnovationEngine(cfg.dim, mode="full", state_dim=cfg.state_dim,
                              depth=cfg.depth, gamma=cfg.contraction,
                              omega_hidden=cfg.omega_hidden)
    return dist, engine, {}


def _build_classifier_pipeline(cfg: RunConfig):
    train, evald, source = load_benchmark_dataset(
        cfg.data_dir, cfg.train_limit, cfg.eval_limit, seed=cfg.seed)
    split = int(cfg.train_fraction * train.size)
    meta_ds = _slice_dataset(train, 0, split)
    bench_ds = _slice_dataset(train, split, train.size)
    schedule = StepsizeSchedule(cfg.eta0, cfg.schedule_p)
    dist = classifier_distribution(
        meta_ds, activation=cfg.activation, minibatch_size=min(cfg.minibatch_size, split),
        schedule=schedule, episodes=cfg.episodes, init=cfg.init,
        init_scale=cfg.init_scale, init_std=cfg.gaussian_std)
    probe = dist.objective_sampler(np.random.default_rng([cfg.seed, 987]))
    engine = InnovationEngine(probe.dim, mode="batch", state_dim=cfg.state_dim,
                              depth=cfg.depth, gamma=cfg.contraction,
                              omega_hidden=cfg.omega_hidden)
    extras = {"dataset_source": source, "meta_dataset_hash": meta_ds.content_hash,
              "bench_dataset_hash": bench_ds.content_hash,
              "eval_dataset_hash": evald.content_hash,
              "classifier_dim": probe.dim}
    return dist, engine, extras, (meta_ds, bench_ds, evald)


def build_pipeline(cfg: RunConfig):
    if cfg.family == "quadratic-mix":
        dist, engine, extras = _build_quadratic_pipeline(cfg)
        return dist, engine, extras, None
    if cfg.family == "classifier":
        return _build_classifier_pipeline(cfg)
    raise UsageError(f"unknown task family '{cfg.family}'")


def _slice_dataset(ds, a, b):
    from .data_io import _make_dataset
    return _make_dataset(ds.images[a:b], ds.labels[a:b], f"{ds.name}[{a}:{b}]")


def write_manifest(path, cfg: RunConfig, extras):
    payload = {f"config.{k}": v for k, v in cfg.to_dict().items()}
    payload["config_hash"] = config_hash(cfg)
    payload["version"] = __version__
    payload.update(extras)
    write_results(payload, path, format="keyvalue")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dist, engine, extras, _ = build_pipeline(cfg)
    loss_cfg = MetaLossConfig.default(T=cfg.horizon, gamma_decay=cfg.gamma_decay,
                                      alpha=cfg.alpha_weight)
    theta0 = engine.init_params(cfg.seed)
    theta, report = meta_train(
        engine, theta0, dist, loss_cfg, outer_lr=cfg.outer_lr, epochs=cfg.epochs,
        seed=cfg.seed, jobs=max(1, cfg.jobs), checkpoint_dir=out / "checkpoints",
        full_unroll=cfg.full_unroll)
    save_checkpoint(out / "checkpoint.ckpt", theta, meta=engine.describe())
    rows = [(e.epoch, e.mean_metaloss, e.grad_norm, e.wall_time, int(e.skipped))
            for e in report.epochs]
    write_results((["epoch", "mean_metaloss", "grad_norm", "wall_time", "skipped"],
                   rows), out / "epochs.csv", format="csv")
    write_manifest(out / "manifest.txt", cfg, {**extras, "command": "train",
                                               "theta_dim": theta.dim})
    log.info("trained %d epochs; final mean outer loss %s", cfg.epochs,
             report.epochs[-1].mean_metaloss if report.epochs else "n/a")
    print(f"checkpoint written to {out / 'checkpoint.ckpt'}")
    return EXIT_OK


def _load_theta(cfg, engine):
    if not cfg_checkpoint_path(cfg):
        raise UsageError("this command needs --checkpoint")
    path = Path(cfg_checkpoint_path(cfg))
    if not path.exists():
        raise UsageError(f"checkpoint {path} does not exist")
    theta, meta = load_checkpoint(path)
    if theta.dim != sum(np.prod(s) for s in engine.segment_shapes().values()):
        raise UsageError("checkpoint dimension does not match the configured engine")
    return theta, meta


def cfg_checkpoint_path(cfg):
    return getattr(cfg, "_checkpoint", None)


def cmd_evaluate(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dist, engine, extras, _ = build_pipeline(cfg)
    theta, _ = _load_theta(cfg, engine)
    loss_cfg = MetaLossConfig.default(T=cfg.horizon, gamma_decay=cfg.gamma_decay,
                                      alpha=cfg.alpha_weight)
    seeds = [[cfg.seed, 100_000 + i] for i in range(dist.episodes)]
    mean, values = estimate_expected_metaloss(engine, theta, dist, loss_cfg,
                                              episode_seeds=seeds)
    write_results((["episode", "metaloss"], list(enumerate(values))),
                  out / "eval.csv", format="csv")
    write_results({"mean_metaloss": mean, "episodes": len(values),
                   "std_metaloss": float(np.std(values))},
                  out / "eval.txt", format="keyvalue")
    print(f"held-out outer loss {mean:.6g} over {len(values)} episodes")
    return EXIT_OK


def _accuracy_at(obj, xs, t, eval_ds):
    clf = obj.meta["classifier"]
    t = min(t, xs.shape[0] - 1)
    return clf.accuracy(xs[t], eval_ds.images, eval_ds.labels)


def cmd_bench(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dist, engine, extras, datasets = build_pipeline(cfg)
    theta, _ = _load_theta(cfg, engine)
    kinds = [k for k in cfg.baselines.split(",") if k]
    T = cfg.bench_horizon
    checkpoints = (20, 100)

    if cfg.family == "classifier":
        _, bench_ds, eval_ds = datasets
    rows, curve_rows = [], []
    runs = {}
    for idx in range(cfg.bench_seeds):
        rng = np.random.default_rng([cfg.seed, 500_000 + idx])
        if cfg.family == "classifier":
            from .metatrain import classifier_distribution as _cd
            bench_dist = _cd(bench_ds, activation=cfg.activation,
                             minibatch_size=min(cfg.minibatch_size, bench_ds.size),
                             schedule=StepsizeSchedule(cfg.eta0, cfg.schedule_p),
                             episodes=1, init=cfg.init, init_scale=cfg.init_scale,
                             init_std=cfg.gaussian_std)
            obj, x0 = bench_dist.sample(rng)
            rule = CyclicRule(StepsizeSchedule(cfg.eta0, cfg.schedule_p),
                              LearnedInnovation(engine, theta))
        else:
            obj, x0 = dist.sample(rng)
            rule = dist.build_rule(obj, LearnedInnovation(engine, theta))
        traj = rollout(rule, obj, x0, T, unsafe=cfg.unsafe_stepsize)
        runs.setdefault("learned", []).append((obj, traj))
        for kind in kinds:
            lr = _tuned_lr(cfg, kind, obj, x0)
            opt = BaselineOptimizer(kind=kind, lr=lr,
                                    schedule=None, steps_per_epoch=None)
            btraj = baseline_rollout(opt, obj, x0, T,
                                     use_components=cfg.family == "classifier")
            runs.setdefault(kind, []).append((obj, btraj))

    for name, pairs in runs.items():
        losses = np.array([[float(obj.eval(traj.xs[min(t, traj.xs.shape[0] - 1)]))
                            for t in checkpoints] for obj, traj in pairs])
        divergences = sum(int(traj.diverged) for _, traj in pairs)
        if cfg.family == "classifier":
            accs = np.array([[_accuracy_at(obj, traj.xs, t, eval_ds)
                              for t in checkpoints] for obj, traj in pairs])
        else:
            accs = np.full_like(losses, np.nan)
        for j, t in enumerate(checkpoints):
            rows.append((name, t, losses[:, j].mean(), losses[:, j].std(),
                         accs[:, j].mean(), accs[:, j].std(), divergences))
        horizon = min(tr.xs.shape[0] for _, tr in pairs)
        series = np.array([[float(obj.eval(tr.xs[t])) for t in range(horizon)]
                           for obj, tr in pairs])
        for t in range(horizon):
            curve_rows.append((name, t, series[:, t].mean(), series[:, t].std()))

    write_results((["optimizer", "step", "loss_mean", "loss_std",
                    "acc_mean", "acc_std", "divergences"], rows),
                  out / "bench.csv", format="csv")
    write_results((["optimizer", "t", "loss_mean", "loss_std"], curve_rows),
                  out / "curves.csv", format="csv")
    write_manifest(out / "manifest.txt", cfg, {**extras, "command": "bench",
                                               "bench_seeds": cfg.bench_seeds})
    for row in rows:
        acc = "" if np.isnan(row[4]) else f" acc {row[4]:.3f}±{row[5]:.3f}"
        print(f"{row[0]:>12s} t={row[1]:<4d} loss {row[2]:.6g}±{row[3]:.3g}{acc}")
    return EXIT_OK


_TUNE_CACHE = {}


def _tuned_lr(cfg, kind, obj, x0):
    key = (kind, cfg.family, cfg.activation, cfg.init)
    if key not in _TUNE_CACHE:
        _TUNE_CACHE[key] = tune_learning_rate(
            kind, obj, budget=cfg.tune_budget, seeds=(0, 1, 2),
            init_sampler=lambda rng, ref=x0: ref,
            use_components=cfg.family == "classifier")
    return _TUNE_CACHE[key]


def cmd_verify(cfg: RunConfig, artifact=None) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checks, constants = {}, {}

    if artifact:
        traj = Trajectory.load(artifact)
        rep = square_sum_diagnostics(traj)
        checks.update(rep.checks)
        constants.update(rep.flat())
    else:
        checks, constants = _verify_suite(cfg)

    report = {**{f"check.{k}": v for k, v in checks.items()}, **constants}
    ok = all(checks.values())
    report["verified"] = ok
    write_results(report, out / "verify.txt", format="keyvalue")
    for name, good in sorted(checks.items()):
        print(f"[{'ok' if good else 'FAIL'}] {name}")
    return EXIT_OK if ok else EXIT_VERIFICATION


def _verify_suite(cfg: RunConfig):
    checks, constants = {}, {}
    rng = np.random.default_rng(cfg.seed)
    obj = make_quadratic(cfg.dim, cfg.condition_number, seed=cfg.seed)
    beta = effective_beta(obj)
    eta = cfg.eta_scale / beta
    x0 = rng.normal(size=cfg.dim)

    gd = FullGradientRule(eta)
    traj = rollout(gd, obj, x0, 2000, unsafe=cfg.unsafe_stepsize)
    rep = square_sum_diagnostics(traj)
    checks["gd_not_diverged"] = not traj.diverged
    checks["gd_grad_tail_small"] = rep.checks["grad_tail_small"]
    constants["gd_grad_energy"] = rep.grad_energy
    if not traj.diverged and eta < 1.0 / beta:
        mon = lemma1_monitor(traj, beta, eta, f_min=obj.lower_bound)
        checks["gd_energy_bound"] = mon.holds
        constants["gd_bound_lhs"], constants["gd_bound_rhs"] = mon.lhs, mon.rhs
    elif traj.diverged:
        checks["gd_energy_bound"] = False

    # Reconstruction completeness: momentum methods replayed as
    # gradient-plus-innovation must reproduce their own trajectories.
    from .baselines import BaselineOptimizer as BO
    eta_safe = 0.9 / beta
    for kind, hyper in (("heavy-ball", {"lr": 1.0 / beta, "momentum": 0.5}),
                        ("nag", {"lr": 1.0 / beta, "momentum": 0.5})):
        src = baseline_rollout(BO(kind=kind, **hyper), obj, x0, 1000)
        recon = reconstruct_innovation(src, eta_safe)
        dev = equivalence_test(src, recon, obj, eta_safe)
        checks[f"replay_{kind}"] = dev <= 1e-10
        constants[f"replay_{kind}_deviation"] = dev

    if cfg_checkpoint_path(cfg):
        dist, engine, _, _ = build_pipeline(cfg)
        theta, _ = _load_theta(cfg, engine)
        for k in range(3):
            obj_k, x0_k = dist.sample(np.random.default_rng([cfg.seed, 900 + k]))
            rule = dist.build_rule(obj_k, LearnedInnovation(engine, theta))
            traj_k = rollout(rule, obj_k, x0_k, 2000, unsafe=cfg.unsafe_stepsize)
            rep_k = square_sum_diagnostics(traj_k)
            checks[f"learned_{k}_not_diverged"] = not traj_k.diverged
            checks[f"learned_{k}_grad_tail_small"] = rep_k.checks["grad_tail_small"]
    return checks, constants


def cmd_inspect(cfg: RunConfig, artifact=None) -> int:
    path = Path(artifact or cfg_checkpoint_path(cfg) or "")
    if not path or not path.exists():
        raise UsageError("inspect needs an existing artifact path or --checkpoint")
    blob = path.read_bytes()[:7]
    if blob[:4] == b"CL2O" and len(blob) >= 7 and blob[6] == 2:
        theta, meta = load_checkpoint(path)
        print(f"checkpoint {path}: {theta.dim} parameters, "
              f"{len(theta.layout)} segments")
        for key, value in sorted(meta.items()):
            print(f"  {key} = {value}")
        for name, (a, b) in theta.layout.items():
            print(f"  segment {name}: [{a}, {b})")
    elif blob[:4] == b"CL2O":
        traj = Trajectory.load(path)
        print(f"trajectory {path}: kind={traj.kind} steps={traj.steps} "
              f"diverged={traj.diverged}")
        print(f"  grad energy {traj.grad_energy[-1]:.6g}  "
              f"update energy {traj.update_energy[-1]:.6g}")
    else:
        print(path.read_text().rstrip())
    return EXIT_OK


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    try:
        cfg = load_config(args)
        cfg._checkpoint = args.checkpoint
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
        if args.command == "bench":
            return cmd_bench(cfg)
        if args.command == "verify":
            return cmd_verify(cfg, getattr(args, "artifact", None))
        if args.command == "inspect":
            return cmd_inspect(cfg, getattr(args, "artifact", None))
        raise UsageError(f"unknown command {args.command}")
    except (UsageError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except VerificationFailure as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFICATION
    except Exception as exc:  # runtime failure
        log.exception("runtime failure: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
