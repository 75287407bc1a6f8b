"""Discrete noise schedules, forward noising and timestep sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KINDS = ("ddpm-linear", "cosine", "linear-alpha-bar")
LOSS_WEIGHT_MODES = ("one-minus-alpha-bar", "constant")

LINEAR_ALPHA_BAR_FLOOR = 1e-6


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed cumulative signal coefficients over ``T + 1`` timesteps.

    ``alpha_bar[0] == 1`` (clean data) and ``alpha_bar`` decreases strictly in t.
    The square-root tables are stored once so every module reads identical
    floating-point values.
    """

    kind: str
    T: int
    alpha_bar: np.ndarray
    beta_bar: np.ndarray = field(repr=False)
    sqrt_ab: np.ndarray = field(repr=False)
    sqrt_bb: np.ndarray = field(repr=False)

    def check_t(self, t: int, allow_zero: bool = True) -> int:
        t = int(t)
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")
        return t


def _from_alpha_bar(kind: str, T: int, alpha_bar: np.ndarray) -> NoiseSchedule:
    alpha_bar = np.asarray(alpha_bar, dtype=np.float64).copy()
    alpha_bar[0] = 1.0
    beta_bar = 1.0 - alpha_bar
    for arr in (alpha_bar, beta_bar):
        arr.setflags(write=False)
    sqrt_ab = np.sqrt(alpha_bar)
    sqrt_bb = np.sqrt(beta_bar)
    sqrt_ab.setflags(write=False)
    sqrt_bb.setflags(write=False)
    return NoiseSchedule(kind, T, alpha_bar, beta_bar, sqrt_ab, sqrt_bb)


def build_schedule(kind: str = "ddpm-linear", T: int = 1000) -> NoiseSchedule:
    """Build one of the supported schedule tables.

    ``ddpm-linear`` uses per-step variances linearly spaced in [1e-4, 0.02];
    ``cosine`` is the squared-cosine profile with offset 0.008;
    ``linear-alpha-bar`` sets ``alpha_bar[t] = 1 - t/T`` floored at 1e-6.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {KINDS}")
    if int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T!r}")
    T = int(T)
    steps = np.arange(T + 1, dtype=np.float64)
    if kind == "ddpm-linear":
        betas = np.linspace(1e-4, 0.02, T, dtype=np.float64)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    elif kind == "cosine":
        offset = 0.008
        f = np.cos((steps / T + offset) / (1 + offset) * np.pi / 2) ** 2
        ratio = f[1:] / f[:-1]
        betas = np.clip(1.0 - ratio, 0.0, 0.999)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    else:
        alpha_bar = np.clip(1.0 - steps / T, LINEAR_ALPHA_BAR_FLOOR, 1.0)
    sched = _from_alpha_bar(kind, T, alpha_bar)
    if not np.all(np.diff(sched.alpha_bar) < 0):
        raise ValueError(f"{kind} schedule with T={T} is not strictly decreasing")
    return sched


def forward_noise(x, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """Return ``sqrt(alpha_bar[t]) * x + sqrt(1 - alpha_bar[t]) * eps``."""
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ValueError(f"shape mismatch: x {x.shape} vs eps {eps.shape}")
    t = sched.check_t(t)
    return sched.sqrt_ab[t] * x + sched.sqrt_bb[t] * eps


def earlier_timestep(t: int, c: int) -> int:
    """The interval partner ``t - c`` clamped to 1 (``t`` itself when ``c == 0``)."""
    if c < 0:
        raise ValueError(f"interval c must be >= 0, got {c}")
    if c == 0:
        return int(t)
    return max(int(t) - int(c), 1)


def lambda_weight(t: int, c: int, sched: NoiseSchedule) -> float:
    """Interval weight ``sqrt(snr_inv[t - c] / snr_inv[t])`` with ``snr_inv = beta/alpha``.

    The earlier timestep is clamped to 1, so any ``t - c < 1`` behaves like ``t - c = 1``.
    """
    t = sched.check_t(t)
    if t == 0:
        raise ValueError("lambda_weight is undefined at t = 0")
    tp = earlier_timestep(t, c)
    if tp == t:
        return 1.0
    ratio_prev = sched.beta_bar[tp] / sched.alpha_bar[tp]
    ratio_now = sched.beta_bar[t] / sched.alpha_bar[t]
    return float(np.sqrt(ratio_prev / ratio_now))


def loss_weight(t: int, sched: NoiseSchedule, mode: str = "one-minus-alpha-bar") -> float:
    if mode not in LOSS_WEIGHT_MODES:
        raise ValueError(f"unknown loss weight mode {mode!r}")
    t = sched.check_t(t, allow_zero=False)
    if mode == "constant":
        return 1.0
    return float(sched.beta_bar[t])


@dataclass(frozen=True)
class TimestepPolicy:
    """Uniform timestep range that narrows after ``anneal_at_frac`` of the run."""

    lo_frac: float = 0.02
    hi_frac: float = 0.98
    anneal_at_frac: float = 0.2
    lo_frac2: float = 0.02
    hi_frac2: float = 0.50

    def __post_init__(self):
        for lo, hi in ((self.lo_frac, self.hi_frac), (self.lo_frac2, self.hi_frac2)):
            if not (0 < lo <= hi <= 1):
                raise ValueError(f"invalid timestep fractions ({lo}, {hi})")
        if not 0 <= self.anneal_at_frac <= 1:
            raise ValueError(f"anneal_at_frac must lie in [0, 1], got {self.anneal_at_frac}")

    def bounds(self, step: int, total_steps: int, T: int) -> tuple[int, int]:
        if total_steps < 1 or not 0 <= step < total_steps:
            raise ValueError(f"step {step} invalid for total_steps={total_steps}")
        if step < self.anneal_at_frac * total_steps:
            lo, hi = self.lo_frac, self.hi_frac
        else:
            lo, hi = self.lo_frac2, self.hi_frac2
        lo_t, hi_t = int(round(lo * T)), int(round(hi * T))
        lo_t = max(lo_t, 1)
        if lo_t > hi_t:
            raise ValueError(f"empty timestep range [{lo_t}, {hi_t}]")
        return lo_t, hi_t


def sample_timestep(rng: np.random.Generator, step: int, total_steps: int,
                    policy: TimestepPolicy, sched: NoiseSchedule) -> int:
    lo, hi = policy.bounds(step, total_steps, sched.T)
    return int(rng.integers(lo, hi + 1))


@dataclass(frozen=True)
class NoisyState:
    """A noised sample kept in factored form ``sqrt_ab[t] * signal + sqrt_bb[t] * noise``.

    Models that can exploit the factorisation (the analytic oracle) avoid the
    cancellation in ``z - sqrt_ab * mu``; everything else reads ``.z``.
    """

    signal: np.ndarray
    noise: np.ndarray
    t: int
    sched: NoiseSchedule = field(repr=False)

    @property
    def z(self) -> np.ndarray:
        return forward_noise(self.signal, self.t, self.noise, self.sched)


def as_array(z) -> np.ndarray:
    if isinstance(z, NoisyState):
        return z.z
    return np.asarray(z, dtype=np.float64)
