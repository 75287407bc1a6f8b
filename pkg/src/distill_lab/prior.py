"""Analytic Gaussian-mixture priors with closed-form noise prediction.

Every component is isotropic, ``N(mu, s^2 I)``. Under forward noising at
timestep t its marginal stays Gaussian with mean ``sqrt(ab) * mu`` and
variance ``v = ab * s^2 + (1 - ab)``, so the exact noise prediction of the
mixture is::

    eps(z) = sqrt(1 - ab) * sum_i r_i(z) * (z - sqrt(ab) * mu_i) / v_i

with posterior responsibilities ``r_i``. Components with ``s = 0`` are point
masses; the formula stays exact for them because ``v = 1 - ab``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .models import EpsilonModel
from .schedule import NoiseSchedule, NoisyState


@dataclass(frozen=True)
class MixtureComponent:
    mean: tuple
    sdev: float = 0.0
    weight: float = 1.0

    def __post_init__(self):
        if not self.weight > 0:
            raise ValueError(f"component weight must be positive, got {self.weight}")
        if not self.sdev >= 0:
            raise ValueError(f"component sdev must be >= 0, got {self.sdev}")
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))


@dataclass(frozen=True)
class ConditionalPrior:
    """Per-condition mixtures; ``cond=None`` is the pooled unconditional mixture."""

    components: dict
    condition_weights: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.components:
            raise ValueError("prior needs at least one condition")
        comps = {str(k): tuple(v) for k, v in self.components.items()}
        dims = {len(c.mean) for cs in comps.values() for c in cs}
        if len(dims) != 1:
            raise ValueError(f"all component means must share one dimension, got {sorted(dims)}")
        for label, cs in comps.items():
            if not cs:
                raise ValueError(f"condition {label!r} has no components")
            total = sum(c.weight for c in cs)
            if abs(total - 1.0) > 1e-12:
                raise ValueError(f"component weights of {label!r} sum to {total}, not 1")
        q = self.condition_weights or {k: 1.0 / len(comps) for k in comps}
        q = {str(k): float(v) for k, v in q.items()}
        if set(q) != set(comps):
            raise ValueError("condition weights must cover exactly the prior's conditions")
        if any(v <= 0 for v in q.values()) or abs(sum(q.values()) - 1.0) > 1e-12:
            raise ValueError(f"condition weights must be positive and sum to 1, got {q}")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "condition_weights", q)

    @property
    def conditions(self) -> tuple:
        return tuple(self.components)

    @property
    def dim(self) -> int:
        first = next(iter(self.components.values()))[0]
        return len(first.mean)

    def arrays(self, cond=None):
        """Return ``(means (K, D), sdevs (K,), log_weights (K,))`` for a condition or the pool."""
        if cond is None:
            items = [(q_w, c) for label, q_w in self.condition_weights.items()
                     for c in self.components[label]]
            comps = [c for _, c in items]
            weights = np.array([q_w * c.weight for q_w, c in items])
        else:
            if cond not in self.components:
                raise KeyError(f"unknown condition {cond!r}; known: {list(self.components)}")
            comps = self.components[cond]
            weights = np.array([c.weight for c in comps])
        means = np.array([c.mean for c in comps], dtype=np.float64)
        sdevs = np.array([c.sdev for c in comps], dtype=np.float64)
        return means, sdevs, np.log(weights)

    def has_delta(self, cond=None) -> bool:
        _, sdevs, _ = self.arrays(cond)
        return bool(np.any(sdevs == 0))

    def to_dict(self) -> dict:
        return {
            "conditions": {
                label: [{"mean": list(c.mean), "sdev": c.sdev, "weight": c.weight} for c in cs]
                for label, cs in self.components.items()
            },
            "condition_weights": dict(self.condition_weights),
        }


def single_gaussian(mean, sdev: float, label: str = "y") -> ConditionalPrior:
    return ConditionalPrior({label: [MixtureComponent(tuple(mean), sdev)]})


def two_condition_2d(sdev: float = 0.25, offset: float = 2.0) -> ConditionalPrior:
    """The standard benchmark: ``y1`` at (+offset, 0) and ``y2`` at (-offset, 0)."""
    return ConditionalPrior({
        "y1": [MixtureComponent((offset, 0.0), sdev)],
        "y2": [MixtureComponent((-offset, 0.0), sdev)],
    })


def _posterior(prior: ConditionalPrior, z, t: int, cond, sched: NoiseSchedule):
    """Responsibilities and per-component (eps, x0) predictions at timestep t."""
    t = sched.check_t(t)
    if t == 0:
        raise ValueError("noise prediction is undefined at t = 0")
    means, sdevs, logw = prior.arrays(cond)
    a, b = sched.sqrt_ab[t], sched.sqrt_bb[t]
    ab, bb = sched.alpha_bar[t], sched.beta_bar[t]
    var = ab * sdevs**2 + bb  # (K,)
    if isinstance(z, NoisyState):
        if z.t != t:
            raise ValueError(f"state is at t={z.t}, prediction requested at t={t}")
        signal = np.asarray(z.signal, dtype=np.float64)
        noise = np.asarray(z.noise, dtype=np.float64)
        dx = signal[..., None, :] - means  # (..., K, D)
        dev = a * dx + b * noise[..., None, :]
        # eps_i = (a b / v_i)(signal - mu_i) + (bb / v_i) noise; bb / v_i == 1 exactly for s_i = 0
        eps_i = (a * b / var)[:, None] * dx + (bb / var)[:, None] * noise[..., None, :]
    else:
        zz = np.asarray(z, dtype=np.float64)
        dev = zz[..., None, :] - a * means
        eps_i = (b / var)[:, None] * dev
    if dev.shape[-1] != prior.dim:
        raise ValueError(f"expected dimension {prior.dim}, got {dev.shape[-1]}")
    dim = prior.dim
    logr = logw - 0.5 * np.sum(dev**2, axis=-1) / var - 0.5 * dim * np.log(var)
    logr = logr - logsumexp(logr, axis=-1, keepdims=True)
    resp = np.exp(logr)
    # posterior mean of x0 under component i; exactly mu_i for point masses
    x0_i = means + (a * sdevs**2 / var)[:, None] * dev
    return resp, eps_i, x0_i


def epsilon_oracle(z, t: int, cond, prior: ConditionalPrior, sched: NoiseSchedule) -> np.ndarray:
    """Exact noise prediction of the noised mixture at ``z`` (array or :class:`NoisyState`)."""
    resp, eps_i, _ = _posterior(prior, z, t, cond, sched)
    return np.sum(resp[..., None] * eps_i, axis=-2)


def responsibilities(z, t: int, cond, prior: ConditionalPrior, sched: NoiseSchedule) -> np.ndarray:
    return _posterior(prior, z, t, cond, sched)[0]


def noised_log_density(z, t: int, cond, prior: ConditionalPrior, sched: NoiseSchedule) -> np.ndarray:
    """``log p_t(z)`` of the forward-noised mixture (t = 0 allowed for non-delta priors)."""
    t = sched.check_t(t)
    means, sdevs, logw = prior.arrays(cond)
    var = sched.alpha_bar[t] * sdevs**2 + sched.beta_bar[t]
    if np.any(var == 0):
        raise ValueError("density undefined: point-mass component at t = 0")
    zz = np.asarray(z, dtype=np.float64)
    dev = zz[..., None, :] - sched.sqrt_ab[t] * means
    dim = means.shape[1]
    terms = logw - 0.5 * np.sum(dev**2, axis=-1) / var - 0.5 * dim * np.log(2 * np.pi * var)
    return logsumexp(terms, axis=-1)


def log_density(x, cond, prior: ConditionalPrior) -> np.ndarray:
    """Log density of the clean mixture; point-mass components are rejected."""
    if prior.has_delta(cond):
        raise ValueError("log density undefined for priors with point-mass components")
    means, sdevs, logw = prior.arrays(cond)
    xx = np.asarray(x, dtype=np.float64)
    dev = xx[..., None, :] - means
    var = sdevs**2
    dim = means.shape[1]
    terms = logw - 0.5 * np.sum(dev**2, axis=-1) / var - 0.5 * dim * np.log(2 * np.pi * var)
    return logsumexp(terms, axis=-1)


def sample_prior(rng: np.random.Generator, cond, prior: ConditionalPrior, n: int | None = None,
                 return_index: bool = False):
    """Ancestral samples: pick a component by weight, then add ``s * N(0, I)``."""
    means, sdevs, logw = prior.arrays(cond)
    size = 1 if n is None else int(n)
    weights = np.exp(logw)
    idx = rng.choice(len(weights), size=size, p=weights / weights.sum())
    noise = rng.standard_normal((size, means.shape[1]))
    x = means[idx] + sdevs[idx, None] * noise
    if n is None:
        x, idx = x[0], idx[0]
    return (x, idx) if return_index else x


class OracleModel(EpsilonModel):
    """:class:`EpsilonModel` backed by :func:`epsilon_oracle`."""

    def __init__(self, prior: ConditionalPrior, sched: NoiseSchedule):
        self.prior = prior
        self.sched = sched
        self.conditions = prior.conditions

    def eps(self, z, t, cond=None):
        return epsilon_oracle(z, t, self.check_cond(cond), self.prior, self.sched)

    def denoise(self, z, t, cond=None):
        resp, eps_i, x0_i = _posterior(self.prior, z, t, self.check_cond(cond), self.sched)
        r = resp[..., None]
        return np.sum(r * x0_i, axis=-2), np.sum(r * eps_i, axis=-2)
