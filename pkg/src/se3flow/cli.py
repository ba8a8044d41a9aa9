"""Command-line surface: dataset generation, training, sampling,
equivariance and gradient checks, and step-count benchmarking."""

from __future__ import annotations

import csv
import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import autodiff as ad
from . import config as cfgmod
from . import flow, lie, policy, serialization, tasks
from .autodiff import Tape, Tensor
from .exceptions import InvalidArgumentError, NumericalError
from .ipa import InvariantTransformer, IpaConfig, TokenSet

EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


@click.group()
def main():
    """SE(3) flow-matching policy toolkit."""


@main.command("gen-data")
@click.option("--task", "task_kind", required=True, type=click.Choice(["eight-gaussians", "two-moons", "se3-reach"]))
@click.option("--n", required=True, type=int)
@click.option("--seed", default=0, type=int)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--noise", default=0.0, type=float)
@click.option("--n-actions", default=8, type=int)
@click.option("--range-lo", default=-0.5, type=float)
@click.option("--range-hi", default=0.5, type=float)
def gen_data(task_kind, n, seed, out, noise, n_actions, range_lo, range_hi):
    """Generate a JSONL dataset for one of the synthetic tasks."""
    try:
        if task_kind == "eight-gaussians":
            serialization.write_points(out, tasks.gen_eight_gaussians(n, seed))
        elif task_kind == "two-moons":
            serialization.write_points(out, tasks.gen_two_moons(n, seed, noise or 0.05))
        else:
            spec = tasks.TaskSpec(
                kind="se3-reach",
                n_demos=n,
                seed=seed,
                noise=noise,
                n_actions=n_actions,
                trans_range=((range_lo, range_hi),) * 3,
            )
            serialization.write_demos(out, tasks.gen_se3_reach(spec))
    except InvalidArgumentError as e:
        raise click.UsageError(str(e))
    click.echo(f"wrote {n} scenes to {out}")


def _load_config(path) -> cfgmod.RunConfig:
    try:
        return cfgmod.load_run_config(path)
    except (InvalidArgumentError, FileNotFoundError) as e:
        raise click.UsageError(f"bad config: {e}")


def _model_tensors(model) -> list[tuple[str, np.ndarray]]:
    return [(p.name, p.value) for p in model.parameters()]


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", default=None, type=int, help="Overrides the config seed.")
def train_cmd(config_path, data_path, out, seed):
    """Train a policy; writes a checkpoint and loss.csv next to it."""
    cfg = _load_config(config_path)
    if seed is not None:
        cfg.train.seed = seed
    model = cfgmod.build_model(cfg)
    rows = []

    def log(epoch, step, loss):
        rows.append((epoch, step, loss))

    try:
        if cfg.task.kind in ("eight-gaussians", "two-moons"):
            points = serialization.read_points(data_path)
            policy.train_euclid(model, points, cfg.train, steps=cfg.train_steps, log_fn=log)
        else:
            demos = serialization.read_demos(data_path)
            policy.train(model, demos, cfg.train, log_fn=log)
    except NumericalError as e:
        click.echo(f"training failed: {e}", err=True)
        sys.exit(EXIT_RUNTIME)
    serialization.save_checkpoint(out, cfgmod.run_config_to_dict(cfg), _model_tensors(model))
    loss_path = Path(out).with_name("loss.csv")
    with open(loss_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "loss"])
        for epoch, step, loss in rows:
            writer.writerow([epoch, step, _fmt(loss)])
    click.echo(f"wrote checkpoint {out} and {loss_path}")


def _load_model(ckpt_path):
    try:
        doc, tensors = serialization.load_checkpoint(ckpt_path)
        cfg = cfgmod.run_config_from_dict(doc)
        model = cfgmod.build_model(cfg)
        serialization.load_parameters(model, tensors)
    except (InvalidArgumentError, FileNotFoundError) as e:
        click.echo(f"cannot load checkpoint: {e}", err=True)
        sys.exit(EXIT_RUNTIME)
    return cfg, model


@main.command("sample")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--scene", default=None, type=int, help="Only this scene index.")
@click.option("--steps", "k", default=None, type=int)
@click.option("--schedule", default=None, type=click.Choice(["linear", "exponential"]))
@click.option("--seed", default=0, type=int)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--n-samples", default=1000, type=int, help="Euclidean tasks: points to draw.")
def sample_cmd(ckpt, data_path, scene, k, schedule, seed, out, n_samples):
    """Generate action sequences (or points) from a trained checkpoint."""
    cfg, model = _load_model(ckpt)
    k = k or cfg.k_sample
    schedule = schedule or cfg.schedule
    if cfg.task.kind in ("eight-gaussians", "two-moons"):
        rng = np.random.default_rng(seed)
        start = time.perf_counter()
        pts = policy.sample_euclid(model, n_samples, k, schedule, rng=rng)
        elapsed = time.perf_counter() - start
        serialization.write_points(out, pts)
        click.echo(f"latency per batch: {_fmt(elapsed)} s")
        return
    if data_path is None:
        raise click.UsageError("--data is required for pose tasks")
    demos = serialization.read_demos(data_path)
    if scene is not None:
        demos = [demos[scene]]
    latencies = []
    with open(out, "w") as fh:
        for i, demo in enumerate(demos):
            rng = np.random.default_rng([seed, i])
            start = time.perf_counter()
            actions = policy.generate_actions(
                model,
                demo.observation,
                k,
                schedule,
                rng=rng,
                prior_translation_scale=cfg.train.prior_translation_scale,
            )
            latencies.append(time.perf_counter() - start)
            fh.write(json.dumps({"actions": [lie.pose_to_floats(a) for a in actions]}) + "\n")
    click.echo(f"mean latency per sequence: {_fmt(np.mean(latencies))} s")


@main.command("check-equivariance")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--trials", default=20, type=int)
@click.option("--tol", default=1e-4, type=float)
@click.option("--seed", default=0, type=int)
@click.option("--steps", "k", default=10, type=int)
def check_equivariance_cmd(ckpt, trials, tol, seed, k):
    """Probe SE(3) equivariance of action generation on random scenes."""
    if trials < 1:
        raise click.UsageError("--trials must be at least 1")
    cfg, model = _load_model(ckpt)
    if cfg.task.kind != "se3-reach":
        click.echo("equivariance check applies to pose tasks", err=True)
        sys.exit(EXIT_USAGE)
    spec = tasks.TaskSpec(
        kind="se3-reach", n_demos=trials, seed=seed, n_actions=cfg.task.n_actions,
        trans_range=cfg.task.trans_range, grasp_offset=cfg.task.grasp_offset,
    )
    demos = tasks.gen_se3_reach(spec)
    rng = np.random.default_rng([seed, 1])
    worst_t = worst_r = 0.0
    for i, demo in enumerate(demos):
        delta = flow.sample_prior_pose(rng, 2.0)
        report = policy.check_equivariance(
            model, demo.observation, delta, seed=int(rng.integers(1 << 30)), k=k,
            prior_translation_scale=cfg.train.prior_translation_scale,
        )
        worst_t = max(worst_t, report.max_translation_deviation)
        worst_r = max(worst_r, report.max_rotation_deviation_rad)
    click.echo(f"max translation deviation: {_fmt(worst_t)}")
    click.echo(f"max rotation deviation (rad): {_fmt(worst_r)}")
    if max(worst_t, worst_r) >= tol:
        click.echo("FAIL")
        sys.exit(EXIT_RUNTIME)
    click.echo("PASS")


@main.command("grad-check")
@click.option("--tol", default=1e-4, type=float)
@click.option("--seed", default=0, type=int)
@click.option("--probes", default=40, type=int, help="Probed entries per parameter.")
def grad_check_cmd(tol, seed, probes):
    """Finite-difference gradient check over all layer types and the
    assembled model."""
    from .gradcheck_suite import run_all_grad_checks

    reports = run_all_grad_checks(seed=seed, tol=tol, probes_per_param=probes)
    ok = True
    for name, rep in reports.items():
        status = "PASS" if rep.passed else "FAIL"
        click.echo(f"{name}: {status} (max rel error {_fmt(rep.max_rel_error)}, {rep.n_probes} probes)")
        ok = ok and rep.passed
    sys.exit(0 if ok else EXIT_RUNTIME)


@main.command("bench-steps")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--steps", default="2,5,10,20,100")
@click.option("--schedule", default="linear", type=click.Choice(["linear", "exponential"]))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", default=0, type=int)
def bench_steps_cmd(ckpt, data_path, steps, schedule, out, seed):
    """Evaluate the task metric and latency at several step counts."""
    cfg, model = _load_model(ckpt)
    try:
        step_counts = [int(s) for s in steps.split(",") if s.strip()]
    except ValueError:
        raise click.UsageError("--steps must be a comma-separated list of integers")
    rows = []
    if cfg.task.kind in ("eight-gaussians", "two-moons"):
        points = serialization.read_points(data_path)
        n = min(len(points), 1000)
        modes = tasks.eight_gaussian_modes()
        for k in step_counts:
            rng = np.random.default_rng(seed)
            start = time.perf_counter()
            samples = policy.sample_euclid(model, n, k, schedule, rng=rng)
            latency = (time.perf_counter() - start) / n
            cov = tasks.mode_coverage(samples, modes, 3.0 * tasks.EIGHT_GAUSSIANS_STD)
            rows.append((k, schedule, cov.fraction_within_radius, latency))
    else:
        demos = serialization.read_demos(data_path)
        for k in step_counts:
            metrics = policy.evaluate(
                model, demos, k, schedule, seed=seed,
                prior_translation_scale=cfg.train.prior_translation_scale,
            )
            rows.append((k, schedule, metrics.mean_translation_error, metrics.mean_latency_s))
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["steps", "schedule", "metric", "latency"])
        for k, sched, metric, latency in rows:
            writer.writerow([k, sched, _fmt(metric), _fmt(latency)])
    click.echo(f"wrote {out}")


if __name__ == "__main__":
    main()
