"""DDIM prediction and stepping: x0 prediction, the generalised step, the
interval residual, the invariant score term, guidance and chain sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import EpsilonModel
from .schedule import NoiseSchedule, NoisyState, as_array, earlier_timestep

INV_MODES = ("ddim-hop", "renoise")


@dataclass(frozen=True)
class SigmaMode:
    """Stochasticity of a DDIM step: ``zero``, ``full`` or ``eta`` interpolation."""

    kind: str = "zero"
    eta: float = 0.0

    def __post_init__(self):
        if self.kind not in ("zero", "full", "eta"):
            raise ValueError(f"unknown sigma mode {self.kind!r}")
        if self.kind == "eta" and not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")

    @classmethod
    def parse(cls, text: str) -> "SigmaMode":
        """Parse ``zero``, ``full`` or ``eta:<value>``."""
        text = text.strip()
        if text.startswith("eta"):
            _, _, val = text.partition(":")
            return cls("eta", float(val or 1.0))
        return cls(text)

    def __str__(self):
        return f"eta:{self.eta:g}" if self.kind == "eta" else self.kind

    def value(self, t: int, t_prev: int, sched: NoiseSchedule) -> float:
        if self.kind == "zero":
            return 0.0
        if self.kind == "full":
            return float(sched.sqrt_bb[t_prev])
        ab, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t_prev]
        return float(self.eta * np.sqrt((1 - ab_prev) / (1 - ab)) * np.sqrt(1 - ab / ab_prev))


ZERO = SigmaMode("zero")
FULL = SigmaMode("full")


def predict_x0(z, t: int, eps_hat, sched: NoiseSchedule) -> np.ndarray:
    """Clean-data prediction ``(z - sqrt(1 - ab) eps_hat) / sqrt(ab)``."""
    t = sched.check_t(t, allow_zero=False)
    if sched.alpha_bar[t] < 1e-12:
        raise ValueError(f"alpha_bar[{t}] = {sched.alpha_bar[t]:.3g} is below the x0-prediction floor")
    return (as_array(z) - sched.sqrt_bb[t] * np.asarray(eps_hat)) / sched.sqrt_ab[t]


def cfg_combine(eps_cond, eps_uncond, w: float) -> np.ndarray:
    """Classifier-free guidance ``(1 + w) eps_cond - w eps_uncond``."""
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"shape mismatch: {eps_cond.shape} vs {eps_uncond.shape}")
    return (1.0 + w) * eps_cond - w * eps_uncond


def _denoise(model: EpsilonModel, z, t: int, cond, cfg_w):
    if cfg_w is None:
        return model.denoise(z, t, cond)
    eps_hat = cfg_combine(model.eps(z, t, cond), model.eps(z, t, None), cfg_w)
    return predict_x0(z, t, eps_hat, model.sched), eps_hat


def _split_noise(sigma: SigmaMode, t: int, t_prev: int, sched: NoiseSchedule) -> tuple[float, float]:
    """``(sigma, 1 - ab[t_prev] - sigma^2)``; the remainder is exactly 0 for ``full``."""
    sig = sigma.value(t, t_prev, sched)
    if sigma.kind == "full":
        return sig, 0.0
    rest = sched.beta_bar[t_prev] - sig**2
    if rest < -1e-15:
        raise ValueError(f"sigma^2 = {sig**2:.6g} exceeds 1 - alpha_bar[t_prev] = {sched.beta_bar[t_prev]:.6g}")
    return sig, max(rest, 0.0)


def ddim_step(z, t: int, t_prev: int, sigma: SigmaMode, model: EpsilonModel, cond=None,
              rng: np.random.Generator | None = None, cfg_w: float | None = None,
              return_state: bool = False):
    """One generalised DDIM step from ``t`` to ``t_prev``.

    ``z_prev = sqrt(ab') x0 + sqrt(1 - ab' - sigma^2) eps_hat + sigma * xi``. With
    ``sigma = 0`` no random numbers are drawn. With ``return_state`` the result
    is ``(NoisyState, xi)``, keeping the step factored as signal ``x0`` and a
    unit-variance noise, with ``xi`` the fresh draw (zeros when unused).
    """
    sched = model.sched
    t, t_prev = int(t), int(t_prev)
    if not 0 <= t_prev < t <= sched.T:
        raise ValueError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    sig, rest = _split_noise(sigma, t, t_prev, sched)
    x0, eps_hat = _denoise(model, z, t, cond, cfg_w)
    if sig == 0.0:
        xi = np.zeros_like(eps_hat)
        noise = eps_hat
    else:
        if rng is None:
            raise ValueError("a stochastic DDIM step needs a random generator")
        xi = rng.standard_normal(eps_hat.shape)
        b_prev = sched.sqrt_bb[t_prev]
        noise = (np.sqrt(rest) / b_prev) * eps_hat + (sig / b_prev) * xi
    state = NoisyState(x0, noise, t_prev, sched)
    if return_state:
        return state, xi
    if sig == 0.0 or t_prev == 0:
        return sched.sqrt_ab[t_prev] * x0 + np.sqrt(rest) * eps_hat
    return sched.sqrt_ab[t_prev] * x0 + np.sqrt(rest) * eps_hat + sig * xi


@dataclass
class Residual:
    delta: np.ndarray
    xi: np.ndarray
    t_prev: int
    sigma: float


def residual_term(z, t: int, c: int, sigma: SigmaMode, model: EpsilonModel, cond=None,
                  rng: np.random.Generator | None = None) -> Residual:
    """Interval residual between predictions at ``t - c`` and ``t``.

    ``delta = eps(z_{t-c}) - sqrt(1 - rho^2) eps(z_t) - rho * xi`` where
    ``rho = sigma / sqrt(1 - ab[t-c])`` is the step noise relative to the noise
    level of ``z_{t-c}``, so that::

        x0(t - c) = x0(t) - sqrt(1 - ab[t-c]) / sqrt(ab[t-c]) * delta

    ``sigma = zero`` gives the invariant term; ``sigma = full, c = 1`` gives
    ``eps(z_{t-1}) - xi``, the reconstruction term evaluated at ``t - 1``.
    """
    sched = model.sched
    t, c = int(t), int(c)
    t_prev = t - c
    if c < 1 or t_prev < 1:
        raise ValueError(f"interval underflow: t={t}, c={c}")
    state, xi = ddim_step(z, t, t_prev, sigma, model, cond, rng, return_state=True)
    eps_now = model.eps(z, t, cond)
    eps_prev = model.eps(state, t_prev, cond)
    sig, rest = _split_noise(sigma, t, t_prev, sched)
    b_prev = sched.sqrt_bb[t_prev]
    keep = np.sqrt(rest) / b_prev
    if sig == 0.0:
        delta = eps_prev - eps_now
    else:
        delta = eps_prev - keep * eps_now - (sig / b_prev) * xi
    return Residual(delta, xi, t_prev, sig)


def invariant_term(z, t: int, c: int, model: EpsilonModel, cond=None, mode: str = "renoise",
                   x=None, eps=None) -> np.ndarray:
    """``eps(z_{t-c}; cond, t-c) - eps(z_t; cond, t)`` with ``t - c`` clamped to 1.

    ``ddim-hop`` builds ``z_{t-c}`` by one deterministic DDIM step from ``z_t``;
    ``renoise`` noises the clean sample ``x`` again at ``t - c`` with the same
    ``eps`` that produced ``z_t``.
    """
    if mode not in INV_MODES:
        raise ValueError(f"unknown invariant-term mode {mode!r}")
    t = int(t)
    t_prev = earlier_timestep(t, c)
    if t_prev == t:
        return np.zeros_like(as_array(z))
    if mode == "ddim-hop":
        z_prev, _ = ddim_step(z, t, t_prev, ZERO, model, cond, return_state=True)
    else:
        if x is None or eps is None:
            raise ValueError("renoise mode needs the clean sample x and its noise eps")
        z_prev = NoisyState(np.asarray(x, dtype=np.float64), np.asarray(eps, dtype=np.float64),
                            t_prev, model.sched)
    return model.eps(z_prev, t_prev, cond) - model.eps(z, t, cond)


def timestep_ladder(T: int, stride: int) -> list:
    """Descending ladder ``T, T - stride, ...`` ending with an explicit 0."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    ladder = list(range(int(T), 0, -int(stride)))
    ladder.append(0)
    return ladder


def sample_chain(model: EpsilonModel, cond=None, stride: int = 20, sigma: SigmaMode = ZERO,
                 cfg_w: float | None = None, rng: np.random.Generator | None = None,
                 n: int = 1) -> np.ndarray:
    """Run ``n`` DDIM chains from ``z_T ~ N(0, I)``; returns ``(n, D)`` x0 predictions."""
    if rng is None:
        raise ValueError("sample_chain needs a random generator for z_T")
    sched = model.sched
    dim = _model_dim(model)
    z = rng.standard_normal((int(n), dim))
    ladder = timestep_ladder(sched.T, stride)
    x0 = None
    for t, t_prev in zip(ladder[:-1], ladder[1:]):
        if t_prev == 0:
            x0, _ = _denoise(model, z, t, cond, cfg_w)
            break
        z = ddim_step(z, t, t_prev, sigma, model, cond, rng, cfg_w)
    return x0


def _model_dim(model: EpsilonModel) -> int:
    if hasattr(model, "prior"):
        return model.prior.dim
    return int(model.dim)
