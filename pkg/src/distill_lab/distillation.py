"""Per-step score-distillation gradient estimators in data space.

Each estimator noises ``x`` with a caller-supplied ``eps``, queries the noise
model forward-only and returns a :class:`GradientTerms` with the pieces that
make up the update direction. None of them differentiates through the model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ddim import INV_MODES, cfg_combine, invariant_term
from .models import EpsilonModel
from .schedule import NoisyState, lambda_weight, loss_weight

ESTIMATORS = ("sds", "recon-only", "cfg-only", "isd", "nfsd", "vsd-approx")
NEG_MODES = ("shifted-time", "junk-component")
TERM_NAMES = ("recon", "cls", "inv")


@dataclass
class GradientTerms:
    """Components of one distillation direction.

    ``total`` is always ``weights['wt'] * (recon + weights['w'] * cls + weights['lam'] * inv)``
    with absent components stored as zero vectors and listed in ``absent``.
    """

    recon: np.ndarray
    cls: np.ndarray
    inv: np.ndarray
    total: np.ndarray
    weights: dict
    t: int
    c: int = 0
    absent: frozenset = frozenset()
    meta: dict = field(default_factory=dict)

    def contribution(self, name: str) -> np.ndarray:
        """The weighted share of one term in ``total``."""
        coef = {"recon": 1.0, "cls": self.weights["w"], "inv": self.weights["lam"]}[name]
        return self.weights["wt"] * coef * getattr(self, name)


def _assemble(recon, cls, inv, wt, w, lam, t, c=0, absent=(), **meta) -> GradientTerms:
    zeros = None
    parts = {"recon": recon, "cls": cls, "inv": inv}
    for name in TERM_NAMES:
        if parts[name] is None:
            if name not in absent:
                raise ValueError(f"term {name} missing but not flagged absent")
            if zeros is None:
                zeros = np.zeros_like(next(p for p in parts.values() if p is not None))
            parts[name] = zeros
    total = wt * (parts["recon"] + w * parts["cls"] + lam * parts["inv"])
    return GradientTerms(parts["recon"], parts["cls"], parts["inv"], total,
                         {"wt": wt, "w": w, "lam": lam}, int(t), int(c), frozenset(absent), meta)


def _state(x, t, eps, model):
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ValueError(f"shape mismatch: x {x.shape} vs eps {eps.shape}")
    model.sched.check_t(t, allow_zero=False)
    return NoisyState(x, eps, int(t), model.sched)


def sds_grad(x, cond, t, eps, model: EpsilonModel, w: float = 100.0,
             weight_mode: str = "one-minus-alpha-bar") -> GradientTerms:
    """``w(t) * (eps(z; y) + w * (eps(z; y) - eps(z; null)) - eps)``."""
    z = _state(x, t, eps, model)
    eps_c = model.eps(z, t, cond)
    eps_u = model.eps(z, t, None)
    wt = loss_weight(t, model.sched, weight_mode)
    return _assemble(eps_c - z.noise, eps_c - eps_u, None, wt, w, 0.0, t, absent=("inv",))


def recon_only_grad(x, cond, t, eps, model: EpsilonModel,
                    weight_mode: str = "one-minus-alpha-bar") -> GradientTerms:
    z = _state(x, t, eps, model)
    eps_c = model.eps(z, t, cond)
    wt = loss_weight(t, model.sched, weight_mode)
    return _assemble(eps_c - z.noise, None, None, wt, 0.0, 0.0, t, absent=("cls", "inv"))


def cfg_only_grad(x, cond, t, eps, model: EpsilonModel,
                  weight_mode: str = "one-minus-alpha-bar") -> GradientTerms:
    z = _state(x, t, eps, model)
    cls = model.eps(z, t, cond) - model.eps(z, t, None)
    wt = loss_weight(t, model.sched, weight_mode)
    return _assemble(None, cls, None, wt, 1.0, 0.0, t, absent=("recon", "inv"))


def isd_grad(x, cond, t, eps, model: EpsilonModel, w: float = 7.5, c: int = 20,
             inv_mode: str = "renoise", weight_mode: str = "one-minus-alpha-bar",
             lambda_mode: str = "snr-ratio") -> GradientTerms:
    """``w(t) * (lambda(t) * delta_inv + w * delta_cls)``.

    ``lambda_mode='constant'`` replaces the interval weight by 1 (ablation).
    """
    z = _state(x, t, eps, model)
    eps_c = model.eps(z, t, cond)
    eps_u = model.eps(z, t, None)
    inv = invariant_term(z, t, c, model, cond, inv_mode, x=z.signal, eps=z.noise)
    if lambda_mode == "snr-ratio":
        lam = lambda_weight(t, c, model.sched)
    elif lambda_mode == "constant":
        lam = 1.0
    else:
        raise ValueError(f"unknown lambda mode {lambda_mode!r}")
    wt = loss_weight(t, model.sched, weight_mode)
    return _assemble(None, eps_c - eps_u, inv, wt, w, lam, t, c, absent=("recon",))


def nfsd_grad(x, cond, t, eps, model: EpsilonModel, w: float = 7.5, c: int = 20,
              neg_mode: str = "shifted-time", neg_label: str = "neg",
              threshold_frac: float = 0.2,
              weight_mode: str = "one-minus-alpha-bar") -> GradientTerms:
    """``w(t) * (delta_D + w * delta_cls)`` without the denoising term.

    Above ``threshold_frac * T``, ``delta_D = eps(z; null) - eps(z; y_neg)``. The
    negative prediction is either a dedicated junk condition of the prior or the
    shifted-time stand-in ``eps(z_{t+c}; y, t + c)`` with ``z_{t+c}`` re-noised
    from ``x`` with the same ``eps``. At or below the threshold, ``delta_D`` is the
    unconditional prediction alone; that branch is this library's choice and
    is flagged in ``meta``.
    """
    if neg_mode not in NEG_MODES:
        raise ValueError(f"unknown negative mode {neg_mode!r}")
    sched = model.sched
    z = _state(x, t, eps, model)
    eps_c = model.eps(z, t, cond)
    eps_u = model.eps(z, t, None)
    branch = "negative"
    if t > threshold_frac * sched.T:
        if neg_mode == "junk-component":
            if neg_label not in model.conditions:
                raise KeyError(f"junk-component mode needs condition {neg_label!r} in the prior")
            eps_neg = model.eps(z, t, neg_label)
        else:
            t_up = int(t) + int(c)
            if t_up > sched.T:
                raise ValueError(f"shifted-time negative needs t + c <= T, got {t_up}")
            eps_neg = model.eps(NoisyState(z.signal, z.noise, t_up, sched), t_up, cond)
        delta_d = eps_u - eps_neg
    else:
        delta_d = eps_u
        branch = "low-t-unconditional"
    wt = loss_weight(t, sched, weight_mode)
    return _assemble(delta_d, eps_c - eps_u, None, wt, w, 0.0, t, c, absent=("inv",),
                     branch=branch)


def vsd_approx_grad(x, cond, t, eps, model: EpsilonModel, w: float = 7.5, sigma_vsd: float = 0.5,
                    weight_mode: str = "one-minus-alpha-bar") -> GradientTerms:
    """VSD with the auxiliary prediction replaced by ``sqrt(1 - s^2) eps(z; y) + s * eps``."""
    if not 0.0 <= sigma_vsd <= 1.0:
        raise ValueError(f"sigma_vsd must lie in [0, 1], got {sigma_vsd}")
    z = _state(x, t, eps, model)
    eps_c = model.eps(z, t, cond)
    eps_u = model.eps(z, t, None)
    if sigma_vsd == 1.0:
        eps_aux = z.noise
    else:
        eps_aux = np.sqrt(1.0 - sigma_vsd**2) * eps_c + sigma_vsd * z.noise
    wt = loss_weight(t, model.sched, weight_mode)
    # cfg_combine(eps_c, eps_u, w) - eps_aux == (eps_c - eps_aux) + w * (eps_c - eps_u)
    terms = _assemble(eps_c - eps_aux, eps_c - eps_u, None, wt, w, 0.0, t, absent=("inv",))
    terms.meta["guided"] = cfg_combine(eps_c, eps_u, w)
    return terms


@dataclass(frozen=True)
class Estimator:
    """A named estimator with its hyperparameters, validated against a model's conditions."""

    name: str = "isd"
    w: float = 7.5
    c: int = 20
    inv_mode: str = "renoise"
    neg_mode: str = "shifted-time"
    neg_label: str = "neg"
    sigma_vsd: float = 0.5
    weight_mode: str = "one-minus-alpha-bar"
    lambda_mode: str = "snr-ratio"

    def __post_init__(self):
        if self.name not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.name!r}; expected one of {ESTIMATORS}")
        if self.inv_mode not in INV_MODES:
            raise ValueError(f"unknown inv_mode {self.inv_mode!r}")
        if self.neg_mode not in NEG_MODES:
            raise ValueError(f"unknown neg_mode {self.neg_mode!r}")
        if self.c < 0:
            raise ValueError(f"interval c must be >= 0, got {self.c}")

    def validate(self, conditions) -> None:
        if self.name == "nfsd" and self.neg_mode == "junk-component" and self.neg_label not in conditions:
            raise ValueError(f"nfsd junk-component mode needs condition {self.neg_label!r} in the prior")

    def __call__(self, x, cond, t, eps, model: EpsilonModel) -> GradientTerms:
        wm = self.weight_mode
        if self.name == "sds":
            return sds_grad(x, cond, t, eps, model, self.w, wm)
        if self.name == "recon-only":
            return recon_only_grad(x, cond, t, eps, model, wm)
        if self.name == "cfg-only":
            return cfg_only_grad(x, cond, t, eps, model, wm)
        if self.name == "isd":
            return isd_grad(x, cond, t, eps, model, self.w, self.c, self.inv_mode, wm, self.lambda_mode)
        if self.name == "nfsd":
            return nfsd_grad(x, cond, t, eps, model, self.w, self.c, self.neg_mode, self.neg_label,
                             weight_mode=wm)
        return vsd_approx_grad(x, cond, t, eps, model, self.w, self.sigma_vsd, wm)


