"""A small two-hidden-layer noise-prediction network with a hand-written backward pass.

Inputs are the noised vector, sinusoidal features of ``t / T`` and a one-hot
condition vector (all zeros for the null condition). Hidden layers use SiLU.
Initialisation: weights ``N(0, 1 / fan_in)``, biases 0, and the rows of the
first layer that read the condition one-hot start at exactly 0, so a model
trained only on null conditions predicts identically for every label.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .models import EpsilonModel
from .optimize import AdamState, DivergenceError, adam_update
from .prior import ConditionalPrior, sample_prior
from .schedule import NoiseSchedule, as_array

MAGIC = b"MLPD"
VERSION = 1


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


@dataclass
class MlpDenoiser(EpsilonModel):
    dim: int
    widths: tuple
    labels: tuple
    sched: NoiseSchedule
    p_uncond: float = 0.1
    n_freq: int = 8
    params: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.labels = tuple(str(y) for y in self.labels)
        self.conditions = self.labels
        if self.params is None:
            self.params = np.zeros(self.n_params)
        if self.params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {self.params.shape}")

    @property
    def in_dim(self) -> int:
        return self.dim + 2 * self.n_freq + len(self.labels)

    def layer_shapes(self) -> list:
        sizes = [self.in_dim, *self.widths, self.dim]
        return [(a, b) for a, b in zip(sizes[:-1], sizes[1:])]

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in self.layer_shapes())

    def unpack(self, params=None) -> list:
        """``[(W, b), ...]`` views into the flat parameter vector."""
        params = self.params if params is None else params
        layers, pos = [], 0
        for a, b in self.layer_shapes():
            W = params[pos:pos + a * b].reshape(a, b)
            pos += a * b
            layers.append((W, params[pos:pos + b]))
            pos += b
        return layers

    # -- features -----------------------------------------------------------------

    def features(self, z, t, cond_idx) -> np.ndarray:
        """Stack ``[z, sin/cos time features, condition one-hot]`` row-wise.

        ``t`` and ``cond_idx`` broadcast over the batch; ``cond_idx = -1`` is null.
        """
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        n = z.shape[0]
        u = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)) / self.sched.T
        freqs = np.pi * 2.0 ** np.arange(self.n_freq)
        ang = u[:, None] * freqs
        onehot = np.zeros((n, len(self.labels)))
        idx = np.broadcast_to(np.asarray(cond_idx), (n,))
        rows = np.nonzero(idx >= 0)[0]
        onehot[rows, idx[rows]] = 1.0
        return np.concatenate([z, np.sin(ang), np.cos(ang), onehot], axis=1)

    def cond_index(self, cond) -> int:
        if cond is None:
            return -1
        self.check_cond(cond)
        return self.labels.index(cond)

    # -- forward / backward -------------------------------------------------------

    def forward(self, X, params=None):
        cache = []
        h = X
        layers = self.unpack(params)
        for i, (W, b) in enumerate(layers):
            a = h @ W + b
            cache.append((h, a))
            h = a if i == len(layers) - 1 else a * _sigmoid(a)
        return h, cache

    def backward(self, dout, cache, params=None) -> np.ndarray:
        layers = self.unpack(params)
        grads = []
        g = dout
        for i in range(len(layers) - 1, -1, -1):
            h_in, a = cache[i]
            if i != len(layers) - 1:
                s = _sigmoid(a)
                g = g * s * (1.0 + a * (1.0 - s))
            grads.append((h_in.T @ g, g.sum(axis=0)))
            g = g @ layers[i][0].T
        flat = []
        for dW, db in reversed(grads):
            flat.extend([dW.ravel(), db])
        return np.concatenate(flat)

    def loss_and_grad(self, X, target, params=None):
        out, cache = self.forward(X, params)
        diff = out - target
        loss = float(np.mean(diff**2))
        return loss, self.backward(2.0 * diff / diff.size, cache, params)

    def eps(self, z, t, cond=None):
        zz = as_array(z)
        t = self.sched.check_t(t, allow_zero=False)
        out, _ = self.forward(self.features(zz, t, self.cond_index(cond)))
        return out.reshape(zz.shape)


def init_denoiser(rng: np.random.Generator, dim: int, sched: NoiseSchedule, labels,
                  widths=(64, 64), p_uncond: float = 0.1, n_freq: int = 8) -> MlpDenoiser:
    widths = tuple(int(w) for w in widths)
    if not widths or min(widths) < 1:
        raise ValueError(f"hidden widths must all be >= 1, got {widths}")
    if not 0.0 <= p_uncond <= 1.0:
        raise ValueError(f"p_uncond must lie in [0, 1], got {p_uncond}")
    model = MlpDenoiser(dim, widths, tuple(labels), sched, p_uncond, n_freq)
    params = np.zeros(model.n_params)
    pos = 0
    n_cond = len(model.labels)
    for i, (a, b) in enumerate(model.layer_shapes()):
        W = rng.standard_normal((a, b)) / np.sqrt(a)
        if i == 0 and n_cond:
            W[a - n_cond:] = 0.0
        params[pos:pos + a * b] = W.ravel()
        pos += a * b + b
    model.params = params
    return model


def train_denoiser(model: MlpDenoiser, prior: ConditionalPrior, rng: np.random.Generator,
                   steps: int = 20000, batch: int = 128, lr: float = 1e-3) -> tuple[MlpDenoiser, np.ndarray]:
    """Fit the epsilon-prediction objective with condition dropout; returns per-step losses.

    Each example draws its condition from the prior's condition weights, a
    sample from that condition, ``t ~ U{1..T}`` and ``eps ~ N(0, I)``; with
    probability ``p_uncond`` the condition is replaced by null.
    """
    sched = model.sched
    labels = list(prior.conditions)
    missing = set(labels) - set(model.labels)
    if missing:
        raise ValueError(f"model lacks conditions {sorted(missing)}")
    q = np.array([prior.condition_weights[y] for y in labels])
    state = AdamState.zeros(model.params.shape, lr=lr)
    params = model.params.copy()
    losses = np.empty(steps)
    for k in range(steps):
        ci = rng.choice(len(labels), size=batch, p=q)
        x = np.empty((batch, model.dim))
        for j, label in enumerate(labels):
            sel = np.nonzero(ci == j)[0]
            if sel.size:
                x[sel] = sample_prior(rng, label, prior, n=sel.size)
        t = rng.integers(1, sched.T + 1, size=batch)
        eps = rng.standard_normal((batch, model.dim))
        z = sched.sqrt_ab[t][:, None] * x + sched.sqrt_bb[t][:, None] * eps
        idx = np.array([model.labels.index(labels[j]) for j in ci])
        idx[rng.random(batch) < model.p_uncond] = -1
        loss, grad = model.loss_and_grad(model.features(z, t, idx), eps, params)
        if not np.isfinite(loss):
            raise DivergenceError(k, f"training loss became {loss}")
        losses[k] = loss
        state, params = adam_update(state, grad, params)
    model.params = params
    return model, losses


def oracle_eps_mse(prior: ConditionalPrior, sched: NoiseSchedule, cond=None) -> float:
    """Per-coordinate epsilon MSE of the exact predictor for a single isotropic Gaussian,
    averaged over ``t ~ U{1..T}``: ``mean_t ab_t s^2 / (ab_t s^2 + 1 - ab_t)``."""
    _, sdevs, _ = prior.arrays(cond)
    if sdevs.size != 1:
        raise ValueError("closed-form baseline needs a single-component prior")
    s2 = sdevs[0] ** 2
    ab = sched.alpha_bar[1:]
    return float(np.mean(ab * s2 / (ab * s2 + 1.0 - ab)))


def denoiser_bytes(model: MlpDenoiser) -> bytes:
    """Little-endian binary: magic, u32 version, i64 dim / #widths / widths / n_freq /
    T, f64 p_uncond, i64 label-bytes + UTF-8 comma-joined labels, i64 #params, f64 params."""
    labels = ",".join(model.labels).encode("utf-8")
    return b"".join([
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<qq", model.dim, len(model.widths)),
        struct.pack(f"<{len(model.widths)}q", *model.widths),
        struct.pack("<qq", model.n_freq, model.sched.T),
        struct.pack("<d", model.p_uncond),
        struct.pack("<q", len(labels)),
        labels,
        struct.pack("<q", model.n_params),
        np.asarray(model.params, dtype="<f8").tobytes(),
    ])


def save_denoiser(model: MlpDenoiser, path) -> None:
    with open(path, "wb") as fh:
        fh.write(denoiser_bytes(model))


def load_denoiser(path, sched: NoiseSchedule) -> MlpDenoiser:
    with open(path, "rb") as fh:
        return denoiser_from_bytes(fh.read(), sched, str(path))


def denoiser_from_bytes(data: bytes, sched: NoiseSchedule, source: str = "<bytes>") -> MlpDenoiser:
    path = source
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a denoiser file")
    pos = 4

    def take(fmt):
        nonlocal pos
        try:
            vals = struct.unpack_from(fmt, data, pos)
        except struct.error:
            raise ValueError(f"{path}: truncated file") from None
        pos += struct.calcsize(fmt)
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    dim, n_w = take("<qq")
    widths = take(f"<{n_w}q")
    n_freq, T = take("<qq")
    if T != sched.T:
        raise ValueError(f"{path}: trained with T={T}, schedule has T={sched.T}")
    (p_uncond,) = take("<d")
    (n_lab,) = take("<q")
    labels = data[pos:pos + n_lab].decode("utf-8")
    pos += n_lab
    (n_params,) = take("<q")
    if len(data) - pos != 8 * n_params:
        raise ValueError(f"{path}: expected {n_params} parameters, found {(len(data) - pos) / 8:g}")
    params = np.frombuffer(data, dtype="<f8", count=n_params, offset=pos).astype(np.float64)
    return MlpDenoiser(dim, widths, tuple(labels.split(",")) if labels else (), sched,
                       p_uncond, n_freq, params)
