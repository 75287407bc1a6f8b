"""Named experiments: build objects from an :class:`ExperimentSpec`, run every
sweep point as an independent run and write CSV artifacts.

Output layout of one experiment directory::

    resolved.cfg        fully defaulted config (re-runnable as is)
    summary.csv         one row per run, columns RUN_COLUMNS (or SAMPLE_COLUMNS)
    MANIFEST            "<run_id> <status>" per run
    traces/<id>.csv     per-step trace (distillation runs)
    params/<id>.csv     final parameter vector
    restore/<id>.csv    step,distance (restore runs)
    samples/<id>.csv    chain samples (chain-check)
    plots/*.svg         written by the report module

Every run in a sweep gets its own generator seeded from ``run.seed``, so sweep
points see common random numbers and results do not depend on ``--jobs``.
"""

from __future__ import annotations

import csv
import io
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import ConfigError, ExperimentSpec, dump_config
from .ddim import SigmaMode, sample_chain
from .distillation import Estimator
from .mlp import load_denoiser
from .optimize import (Problem, distill, grad_variance, initial_params, mode_excess,
                       restore_experiment, _safe_logp)
from .prior import (ConditionalPrior, MixtureComponent, OracleModel, sample_prior, single_gaussian,
                    two_condition_2d)
from .renderer import GRID, make_poses, prior_from_scene, render, scene_library
from .schedule import TimestepPolicy, build_schedule

RUN_COLUMNS = ("run_id", "experiment", "axis", "value", "estimator", "seed", "steps",
               "final_mode_excess", "final_logp", "mean_variance", "start_distance",
               "final_distance", "grid_mse")
SAMPLE_COLUMNS = ("run_id", "condition", "n", "stride", "sigma", "max_dev", "mean_err", "cov_err")
TRAIN_COLUMNS = ("steps", "final_loss", "heldout_mse", "oracle_mse", "gap")


# -- builders -----------------------------------------------------------------------

def _parse_components(text: str) -> dict:
    """``"y1: 2,0 / 0.25 / 0.5; y1: ...; y2: ..."``; sdev and weight are optional."""
    comps: dict = {}
    for entry in text.split(";"):
        entry = entry.strip()
        if not entry:
            continue
        label, sep, body = entry.partition(":")
        if not sep:
            raise ConfigError(f"component {entry!r} lacks a 'label:' prefix")
        parts = [p.strip() for p in body.split("/")]
        mean = tuple(float(v) for v in parts[0].split(","))
        sdev = float(parts[1]) if len(parts) > 1 else 0.0
        weight = float(parts[2]) if len(parts) > 2 else None
        comps.setdefault(label.strip(), []).append((mean, sdev, weight))
    out = {}
    for label, items in comps.items():
        n = len(items)
        out[label] = [MixtureComponent(m, s, 1.0 / n if w is None else w) for m, s, w in items]
    return out


def _parse_weights(text: str) -> dict:
    out = {}
    for entry in text.split(","):
        if entry.strip():
            label, _, val = entry.partition(":")
            out[label.strip()] = float(val)
    return out


def build_prior(spec: ExperimentSpec) -> ConditionalPrior:
    p = spec.section("prior")
    name = p["name"]
    if name == "two-condition-2d":
        return two_condition_2d(p["sdev"])
    if name == "mixture-s0.1":
        return ConditionalPrior({"y": [MixtureComponent((2.0, 0.0), 0.1, 0.5),
                                       MixtureComponent((-2.0, 0.0), 0.1, 0.5)]})
    if name == "delta-2d":
        return single_gaussian(p["mean"], 0.0)
    if name == "single-gaussian":
        return single_gaussian(p["mean"], p["sdev"])
    if name == "custom":
        if not p["components"]:
            raise ConfigError("prior 'custom' needs prior.components")
        return ConditionalPrior(_parse_components(p["components"]), _parse_weights(p["condition_weights"]))
    raise ConfigError(f"unknown prior {name!r}")


def build_policy(spec: ExperimentSpec) -> TimestepPolicy:
    ts = spec.section("timesteps")
    return TimestepPolicy(ts["lo"], ts["hi"], ts["anneal_at"], ts["lo2"], ts["hi2"])


def build_estimator(spec: ExperimentSpec, name: str) -> Estimator:
    e = spec.section("estimator")
    return Estimator(name, e["w"], e["c"], e["inv_mode"], e["neg_mode"], e["neg_label"],
                     e["sigma_vsd"], e["weight_mode"], e["lambda_mode"])


def build_problem(spec: ExperimentSpec, estimator_name: str) -> Problem:
    sched = build_schedule(spec.get("schedule", "kind"), spec.get("schedule", "T"))
    est = build_estimator(spec, estimator_name)
    cond = spec.get("prior", "cond")
    rend = spec.section("renderer")
    if rend["kind"] == "identity":
        prior = build_prior(spec)
        if spec.get("model", "kind") == "oracle":
            model = OracleModel(prior, sched)
        elif spec.get("model", "kind") == "mlp":
            model = load_denoiser(spec.get("model", "file"), sched)
        else:
            raise ConfigError(f"unknown model kind {spec.get('model', 'kind')!r}")
        return Problem(est, [model], [prior], cond)
    if rend["kind"] != "projection":
        raise ConfigError(f"unknown renderer {rend['kind']!r}")
    if rend["grid"] != GRID:
        raise ConfigError(f"the scene library is defined on a {GRID}x{GRID} grid, got grid = {rend['grid']}")
    if spec.get("model", "kind") != "oracle":
        raise ConfigError("the projection renderer needs per-pose oracle models")
    poses = make_poses(GRID, rend["poses"], rend["bins"])
    scenes = {"y": scene_library(rend["scene"]).ravel()}
    if rend["scene2"]:
        scenes["y2"] = scene_library(rend["scene2"]).ravel()
    if cond not in scenes:
        raise ConfigError(f"condition {cond!r} has no scene; expected one of {sorted(scenes)}")
    priors = prior_from_scene(scenes, poses, spec.get("prior", "sdev"))
    models = [OracleModel(p, sched) for p in priors]
    return Problem(est, models, priors, cond, poses, scenes[cond])


# -- runs ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunPlan:
    index: int
    run_id: str
    estimator: str
    axis: str
    value: str
    spec: ExperimentSpec


def plan_runs(spec: ExperimentSpec) -> list:
    axis, target, values = spec.sweep()
    points = [("", spec)] if target is None else [(v, spec.with_value(*target, v)) for v in values]
    plans = []
    if spec.name == "chain-check":
        for v, sp in points:
            rid = f"{len(plans):03d}_chain" + (f"_{axis}-{v}" if target else "")
            plans.append(RunPlan(len(plans), rid, "", axis if target else "", v, sp))
        return plans
    for est in spec.get("experiment", "estimators"):
        for v, sp in points:
            perturbs = sp.get("restore", "perturb") if spec.name == "restore" else (None,)
            for pert in perturbs:
                rid = f"{len(plans):03d}_{est}"
                if target is not None:
                    rid += f"_{axis}-{v}"
                if pert is not None:
                    rid += f"_perturb-{pert:g}"
                if pert is None:
                    plans.append(RunPlan(len(plans), rid, est, axis if target else "", v, sp))
                else:
                    plans.append(RunPlan(len(plans), rid, est, axis if target else "perturb",
                                         v if target else f"{pert:g}",
                                         sp.with_value("restore", "perturb", (pert,))))
    return plans


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def grid_text(grid) -> str:
    """Same layout as :func:`write_grid_csv`: one row per grid row, no header."""
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in np.asarray(grid))


def _final_metrics(problem: Problem, theta) -> tuple[float, float]:
    if problem.poses is None:
        return mode_excess(theta, problem.cond, problem.priors[0]), _safe_logp(theta, problem.cond, problem.priors[0])
    excess = [mode_excess(render(theta, k, problem.poses), problem.cond, problem.priors[k])
              for k in range(problem.poses.K)]
    return float(np.mean(excess)), math.nan


def _run_distill(plan: RunPlan, rng) -> tuple[dict, dict]:
    sp = plan.spec
    problem = build_problem(sp, plan.estimator)
    run = sp.section("run")
    dim = problem.poses.n_params if problem.poses is not None else problem.priors[0].dim
    theta0 = initial_params(run["init"], dim, rng, scale=run["init_scale"], given=run["init_vector"],
                            prior=problem.priors[0], cond=problem.cond)
    opt = sp.section("optimizer")
    policy = build_policy(sp)
    trace = distill(problem, theta0, opt["steps"], rng, lr=opt["lr"], betas=(opt["beta1"], opt["beta2"]),
                    adam_eps=opt["eps"], weight_decay=opt["weight_decay"], policy=policy,
                    batch=opt["batch"], snapshot_every=run["snapshot_every"])
    theta = trace.params
    excess, logp = _final_metrics(problem, theta)
    var, _ = grad_variance(problem, theta, sp.get("experiment", "variance_samples"), rng, policy=policy)
    grid_mse = None
    files = {f"traces/{plan.run_id}.csv": trace.to_csv(), f"params/{plan.run_id}.csv": trace.params_csv()}
    if problem.theta_star is not None:
        grid_mse = float(np.mean((theta - problem.theta_star) ** 2))
        files[f"grids/{plan.run_id}.csv"] = grid_text(theta.reshape(GRID, GRID))
    row = {"final_mode_excess": excess, "final_logp": logp, "mean_variance": float(var.mean()),
           "grid_mse": grid_mse, "steps": opt["steps"]}
    return row, files


def _run_restore(plan: RunPlan, rng) -> tuple[dict, dict]:
    sp = plan.spec
    problem = build_problem(sp, plan.estimator)
    if problem.poses is not None:
        raise ConfigError("restore runs use the identity renderer")
    prior = problem.priors[0]
    means, _, _ = prior.arrays(problem.cond)
    if len(means) != 1:
        raise ConfigError("restore needs a single-component condition (the clean point)")
    r = sp.section("restore")
    sched = problem.models[0].sched
    t_noise = max(1, int(round(r["t_frac"] * sched.T)))
    dists = restore_experiment(problem, means[0], r["perturb"][0], t_noise, r["steps"], rng,
                               lr=sp.get("optimizer", "lr"))
    files = {f"restore/{plan.run_id}.csv": _csv_text(("step", "distance"), enumerate(dists.tolist()))}
    row = {"start_distance": float(dists[0]), "final_distance": float(dists[-1]), "steps": r["steps"]}
    return row, files


def _mixture_moments(prior: ConditionalPrior, cond):
    means, sdevs, logw = prior.arrays(cond)
    w = np.exp(logw)
    w = w / w.sum()
    mean = w @ means
    dev = means - mean
    cov = (w[:, None] * dev).T @ dev + np.sum(w * sdevs**2) * np.eye(means.shape[1])
    return mean, cov


def run_sampling(spec: ExperimentSpec, rng, run_id: str = "chain") -> tuple[list, dict]:
    """Chain-sample the configured prior; returns the summary row and artifact files."""
    problem = build_problem(spec, "sds")
    s = spec.section("sample")
    sigma = SigmaMode.parse(s["sigma"])
    model, prior, cond = problem.models[0], problem.priors[0], problem.cond
    x = sample_chain(model, cond, s["stride"], sigma, s["cfg_w"], rng, s["n"])
    means, _, _ = prior.arrays(cond)
    nearest = np.min(np.max(np.abs(x[:, None, :] - means[None]), axis=-1), axis=1)
    mean, cov = _mixture_moments(prior, cond)
    row = [run_id, cond, s["n"], s["stride"], str(sigma), float(nearest.max()),
           float(np.max(np.abs(x.mean(axis=0) - mean))),
           float(np.max(np.abs(np.cov(x, rowvar=False) - cov))) if s["n"] > 1 else math.nan]
    header = tuple(f"x{i}" for i in range(x.shape[1]))
    return row, {f"samples/{run_id}.csv": _csv_text(header, x.tolist())}


def execute_run(plan: RunPlan):
    """Run one plan; never raises. Returns ``(plan, row | None, files, status)``."""
    rng = np.random.default_rng(plan.spec.get("run", "seed"))
    try:
        if plan.spec.name == "chain-check":
            row, files = run_sampling(plan.spec, rng, plan.run_id)
            return plan, row, files, "complete"
        if plan.spec.name == "restore":
            row, files = _run_restore(plan, rng)
        else:
            row, files = _run_distill(plan, rng)
    except Exception as exc:  # recorded in the MANIFEST, reported by the caller
        msg = "".join(traceback.format_exception_only(type(exc), exc)).strip().replace("\n", " ")
        return plan, None, {}, f"failed: {msg}"
    full = {"run_id": plan.run_id, "experiment": plan.spec.name, "axis": plan.axis, "value": plan.value,
            "estimator": plan.estimator, "seed": plan.spec.get("run", "seed")}
    full.update(row)
    return plan, [full.get(c) for c in RUN_COLUMNS], files, "complete"


def run_experiment(spec: ExperimentSpec, jobs: int = 1) -> tuple[dict, list]:
    """Execute all runs; returns ``(files, manifest)`` with ``files`` mapping
    relative paths to text. Results are ordered by run index whatever ``jobs`` is."""
    plans = plan_runs(spec)
    if jobs > 1 and len(plans) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(execute_run, plans))
    else:
        results = [execute_run(p) for p in plans]
    results.sort(key=lambda r: r[0].index)
    files = {"resolved.cfg": dump_config(spec)}
    rows, manifest = [], []
    for plan, row, run_files, status in results:
        files.update(run_files)
        manifest.append((plan.run_id, status))
        if row is not None:
            rows.append(row)
    header = SAMPLE_COLUMNS if spec.name == "chain-check" else RUN_COLUMNS
    files["summary.csv"] = _csv_text(header, rows)
    files["MANIFEST"] = "".join(f"{rid} {status}\n" for rid, status in manifest)
    return files, manifest


def run_training(spec: ExperimentSpec) -> dict:
    """Train an MLP denoiser on the configured prior; returns artifact files.

    The held-out set draws conditions, samples, t and eps afresh from a
    generator seeded one past ``run.seed``; both the network and the exact
    oracle are scored on it, so ``gap`` isolates the fitting error.
    """
    from .mlp import denoiser_bytes, init_denoiser, train_denoiser

    tr = spec.section("train")
    seed = spec.get("run", "seed")
    sched = build_schedule(spec.get("schedule", "kind"), spec.get("schedule", "T"))
    prior = build_prior(spec)
    rng = np.random.default_rng(seed)
    model = init_denoiser(rng, prior.dim, sched, prior.conditions, tr["widths"], tr["p_uncond"])
    if tr["steps"] > 0:
        model, losses = train_denoiser(model, prior, rng, tr["steps"], tr["batch"], tr["lr"])
    else:
        losses = np.empty(0)
    heldout, oracle = heldout_mse(model, prior, np.random.default_rng(seed + 1), tr["eval_samples"])
    final = float(np.mean(losses[-min(500, losses.size):])) if losses.size else math.nan
    return {
        tr["out_file"]: denoiser_bytes(model),
        "loss.csv": _csv_text(("step", "loss"), enumerate(losses.tolist())),
        "summary.csv": _csv_text(TRAIN_COLUMNS, [(tr["steps"], final, heldout, oracle, heldout - oracle)]),
        "resolved.cfg": dump_config(spec),
    }


def heldout_mse(model, prior: ConditionalPrior, rng, n: int) -> tuple[float, float]:
    """Per-coordinate eps MSE of ``model`` and of the exact oracle on one fresh draw."""
    sched = model.sched
    oracle = OracleModel(prior, sched)
    labels = list(prior.conditions)
    q = np.array([prior.condition_weights[y] for y in labels])
    ci = rng.choice(len(labels), size=n, p=q)
    t = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal((n, prior.dim))
    err_m = err_o = 0.0
    for j, label in enumerate(labels):
        sel = np.nonzero(ci == j)[0]
        if not sel.size:
            continue
        x = sample_prior(rng, label, prior, n=sel.size)
        for tt in np.unique(t[sel]):
            rows = sel[t[sel] == tt]
            sub = np.nonzero(t[sel] == tt)[0]
            z = sched.sqrt_ab[tt] * x[sub] + sched.sqrt_bb[tt] * eps[rows]
            err_m += float(np.sum((model.eps(z, int(tt), label) - eps[rows]) ** 2))
            err_o += float(np.sum((oracle.eps(z, int(tt), label) - eps[rows]) ** 2))
    total = n * prior.dim
    return err_m / total, err_o / total
