"""The distillation loop, Adam, and the diagnostics built on top of it."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .distillation import TERM_NAMES, Estimator, GradientTerms
from .models import EpsilonModel
from .prior import ConditionalPrior, log_density, sample_prior
from .renderer import render, vjp
from .schedule import TimestepPolicy, sample_timestep

TRACE_COLUMNS = ("step", "t", "pose", "norm_recon", "norm_cls", "norm_inv", "norm_total",
                 "cos_recon", "cos_cls", "cos_inv", "metric_mode_excess", "metric_logp")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


# -- Adam ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def zeros(cls, dim_or_shape, **hyper) -> "AdamState":
        return cls(np.zeros(dim_or_shape), np.zeros(dim_or_shape), **hyper)


def adam_update(state: AdamState, grad, params) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam step (decoupled weight decay when configured)."""
    grad = np.asarray(grad, dtype=np.float64)
    params = np.asarray(params, dtype=np.float64)
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError(f"shape mismatch: grad {grad.shape}, params {params.shape}, moments {state.m.shape}")
    k = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**k)
    v_hat = v / (1.0 - state.beta2**k)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if state.weight_decay:
        new = new - state.lr * state.weight_decay * params
    return replace(state, m=m, v=v, step=k), new


# -- metrics ------------------------------------------------------------------------

def mode_excess(x, cond, prior: ConditionalPrior) -> float:
    """Distance to the nearest mode of ``cond`` in units of that component's sdev.

    Point-mass components contribute their raw distance.
    """
    means, sdevs, _ = prior.arrays(cond)
    dist = np.linalg.norm(np.asarray(x, dtype=np.float64) - means, axis=-1)
    scale = np.where(sdevs > 0, sdevs, 1.0)
    return float(np.min(dist / scale))


def _safe_logp(x, cond, prior: ConditionalPrior) -> float:
    if prior.has_delta(cond):
        return math.nan
    return float(log_density(x, cond, prior))


def _cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return None
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


# -- trace --------------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    t: int
    pose: int | None
    norms: dict
    cosines: dict
    mode_excess: float
    logp: float
    snapshot: bool = False

    def row(self) -> list:
        def fmt(v):
            if v is None or (isinstance(v, float) and math.isnan(v)):
                return ""
            return repr(float(v)) if isinstance(v, float) else str(v)
        return ([self.step, self.t, "" if self.pose is None else self.pose]
                + [fmt(self.norms[n]) for n in (*TERM_NAMES, "total")]
                + [fmt(self.cosines[n]) for n in TERM_NAMES]
                + [fmt(self.mode_excess), fmt(self.logp)])


@dataclass
class RunTrace:
    records: list
    params: np.ndarray
    snapshots: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for rec in self.records:
            writer.writerow(rec.row())
        return buf.getvalue()

    def params_csv(self) -> str:
        return "".join(f"{float(v)!r}\n" for v in np.ravel(self.params))


def record_step(step: int, terms: GradientTerms, pose, x, cond, prior) -> StepRecord:
    norms = {n: float(np.linalg.norm(getattr(terms, n))) for n in TERM_NAMES}
    norms["total"] = float(np.linalg.norm(terms.total))
    cosines = {n: (None if n in terms.absent else _cosine(terms.contribution(n), terms.total))
               for n in TERM_NAMES}
    return StepRecord(step, terms.t, pose, norms, cosines,
                      mode_excess(x, cond, prior), _safe_logp(x, cond, prior))


def cosine_trace(trace: RunTrace) -> dict:
    """Per-step ``cos(term contribution, total)``; ``None`` where a side has zero norm."""
    if not trace.records:
        raise ValueError("empty trace")
    return {n: [rec.cosines[n] for rec in trace.records] for n in TERM_NAMES}


# -- problem assembly ---------------------------------------------------------------

@dataclass
class Problem:
    """Everything a run needs, resolved: one model and prior per pose (or one for identity)."""

    estimator: Estimator
    models: list
    priors: list
    cond: str
    poses: object = None
    theta_star: np.ndarray | None = None

    def __post_init__(self):
        for m in self.models:
            self.estimator.validate(m.conditions)

    @property
    def n_poses(self) -> int:
        return 0 if self.poses is None else self.poses.K

    def pick_pose(self, rng):
        if self.poses is None:
            return None
        return int(rng.integers(self.poses.K))

    def model_for(self, pose) -> EpsilonModel:
        return self.models[0 if pose is None else pose]

    def prior_for(self, pose) -> ConditionalPrior:
        return self.priors[0 if pose is None else pose]


def distill(problem: Problem, theta0, steps: int, rng: np.random.Generator, *,
            lr: float = 0.01, betas=(0.9, 0.999), adam_eps: float = 1e-8, weight_decay: float = 0.0,
            policy: TimestepPolicy | None = None, fixed_t: int | None = None, batch: int = 1,
            snapshot_every: int = 0, record: bool = True) -> RunTrace:
    """Single-sample (or ``batch``-averaged) stochastic distillation with Adam.

    Per step: draw t (or use ``fixed_t``), then ``eps``, then a pose for each
    batch element; render, evaluate the estimator, pull back through the
    renderer and take one Adam step.
    """
    if steps < 1 and record:
        raise ValueError("steps must be >= 1")
    policy = policy or TimestepPolicy()
    theta = np.array(theta0, dtype=np.float64)
    state = AdamState.zeros(theta.shape, lr=lr, beta1=betas[0], beta2=betas[1], eps=adam_eps,
                            weight_decay=weight_decay)
    sched = problem.models[0].sched
    records, snapshots = [], {}
    est = problem.estimator
    for k in range(steps):
        if fixed_t is None:
            t = sample_timestep(rng, k, steps, policy, sched)
        else:
            t = int(fixed_t)
        grad = np.zeros_like(theta)
        for _ in range(batch):
            pose = problem.pick_pose(rng)
            x = render(theta, pose, problem.poses)
            eps = rng.standard_normal(x.shape)
            terms = est(x, problem.cond, t, eps, problem.model_for(pose))
            grad += vjp(pose, terms.total, problem.poses)
        grad /= batch
        if record:
            records.append(record_step(k, terms, pose, x, problem.cond, problem.prior_for(pose)))
        state, theta = adam_update(state, grad, theta)
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(k, "non-finite parameters")
        if snapshot_every and (k + 1) % snapshot_every == 0:
            snapshots[k + 1] = theta.copy()
            if record:
                records[-1].snapshot = True
    return RunTrace(records, theta, snapshots)


def grad_variance(problem: Problem, theta, M: int, rng: np.random.Generator, t: int | None = None,
                  policy: TimestepPolicy | None = None) -> tuple[np.ndarray, float]:
    """Unbiased per-coordinate variance (and its trace) of the parameter-space estimator.

    With ``t`` given the timestep is held fixed; otherwise it is redrawn from the
    policy's pre-anneal range per sample. Noise and pose are always redrawn.
    """
    if M < 2:
        raise ValueError("need M >= 2 samples")
    theta = np.asarray(theta, dtype=np.float64)
    sched = problem.models[0].sched
    policy = policy or TimestepPolicy()
    if t is not None and problem.poses is None:
        x = render(theta, None, None)
        eps = rng.standard_normal((M,) + x.shape)
        xs = np.broadcast_to(x, eps.shape)
        samples = problem.estimator(xs, problem.cond, t, eps, problem.models[0]).total
    else:
        samples = []
        for _ in range(M):
            tt = sample_timestep(rng, 0, 1, policy, sched) if t is None else t
            pose = problem.pick_pose(rng)
            x = render(theta, pose, problem.poses)
            eps = rng.standard_normal(x.shape)
            terms = problem.estimator(x, problem.cond, tt, eps, problem.model_for(pose))
            samples.append(vjp(pose, terms.total, problem.poses))
        samples = np.array(samples)
    var = samples.var(axis=0, ddof=1)
    return var, float(var.sum())


def restore_experiment(problem: Problem, x_clean, perturb_scale: float, t_noise: int, steps: int,
                       rng: np.random.Generator, lr: float = 0.01) -> np.ndarray:
    """Distances ``||theta_k - x_clean||`` for k = 0..steps of a fixed-t run.

    The start point is ``x_clean + perturb_scale * n / ||n||`` with ``n ~ N(0, I)``
    drawn first from ``rng``, so the initial distance is exactly ``perturb_scale``.
    """
    x_clean = np.asarray(x_clean, dtype=np.float64)
    n = rng.standard_normal(x_clean.shape)
    theta = x_clean + perturb_scale * n / np.linalg.norm(n)
    dists = [float(np.linalg.norm(theta - x_clean))]
    state = AdamState.zeros(theta.shape, lr=lr)
    for _ in range(steps):
        pose = problem.pick_pose(rng)
        x = render(theta, pose, problem.poses)
        eps = rng.standard_normal(x.shape)
        terms = problem.estimator(x, problem.cond, t_noise, eps, problem.model_for(pose))
        state, theta = adam_update(state, vjp(pose, terms.total, problem.poses), theta)
        dists.append(float(np.linalg.norm(theta - x_clean)))
    return np.array(dists)


def initial_params(mode: str, dim: int, rng: np.random.Generator, *, scale: float = 1.0,
                   given=None, prior: ConditionalPrior | None = None, cond=None) -> np.ndarray:
    if mode == "zeros":
        return np.zeros(dim)
    if mode == "noise":
        return scale * rng.standard_normal(dim)
    if mode == "prior-sample":
        if prior is None:
            raise ValueError("prior-sample init needs a prior")
        return np.asarray(sample_prior(rng, cond, prior), dtype=np.float64)
    if mode == "given":
        vec = np.asarray(given, dtype=np.float64).ravel()
        if vec.shape != (dim,):
            raise ValueError(f"given init has {vec.size} entries, expected {dim}")
        return vec.copy()
    raise ValueError(f"unknown init mode {mode!r}")
