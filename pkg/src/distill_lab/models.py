"""The noise-prediction interface shared by the analytic oracle and the MLP."""

from __future__ import annotations

import numpy as np

from .schedule import NoiseSchedule, as_array


class EpsilonModel:
    """Forward-only noise predictor ``eps(z_t; cond, t)``.

    Subclasses implement :meth:`eps`. ``cond=None`` selects the unconditional
    (null-prompt) prediction. No estimator ever asks a model for parameter
    derivatives, so the interface exposes forward evaluation only.
    """

    sched: NoiseSchedule
    conditions: tuple

    def eps(self, z, t: int, cond=None) -> np.ndarray:
        raise NotImplementedError

    def denoise(self, z, t: int, cond=None) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(x0_hat, eps_hat)`` at timestep ``t``."""
        eps_hat = self.eps(z, t, cond)
        t = int(t)
        x0 = (as_array(z) - self.sched.sqrt_bb[t] * eps_hat) / self.sched.sqrt_ab[t]
        return x0, eps_hat

    def check_cond(self, cond):
        if cond is not None and cond not in self.conditions:
            raise KeyError(f"unknown condition {cond!r}; known: {list(self.conditions)}")
        return cond
