"""Linear beta schedule and the closed-form forward (noising) process."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ValidationError


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Schedule tables indexed by timestep ``t`` in 1..T (array slot ``t - 1``)."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_1: float
    beta_T: float

    @property
    def T(self) -> int:
        return len(self.beta)

    def alpha_bar_at(self, t):
        """alpha_bar for integer or tensor timesteps; t = 0 means no noise."""
        table = torch.as_tensor(np.concatenate([[1.0], self.alpha_bar]))
        t = torch.as_tensor(t, dtype=torch.long)
        if (t < 0).any() or (t > self.T).any():
            raise ValidationError(f"timestep out of range [0, {self.T}]")
        return table[t]

    def to_dict(self):
        return {"T": self.T, "beta_1": self.beta_1, "beta_T": self.beta_T, "kind": "linear"}


def build_linear_schedule(T=1000, beta_1=1e-4, beta_T=0.02) -> NoiseSchedule:
    if T < 1:
        raise ValidationError("T must be positive")
    if not (0 < beta_1 < 1 and 0 < beta_T < 1):
        raise ValidationError("betas must lie in (0, 1)")
    if T > 1 and not beta_1 < beta_T:
        raise ValidationError("beta_1 must be smaller than beta_T")
    if T == 1 and beta_1 != beta_T:
        raise ValidationError("a single-step schedule needs beta_1 == beta_T")
    beta = np.linspace(beta_1, beta_T, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(beta, alpha, alpha_bar, float(beta_1), float(beta_T))


def _broadcast(coef, x):
    coef = coef.to(x.dtype)
    return coef.reshape(coef.shape + (1,) * (x.dim() - coef.dim()))


def q_sample(x0, t, eps, schedule: NoiseSchedule, alpha_bar=None):
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.

    ``t`` is an int or a per-sample tensor. ``alpha_bar`` overrides the
    schedule lookup (used for the no-noise limit alpha_bar = 1).
    """
    x0 = torch.as_tensor(x0)
    eps = torch.as_tensor(eps)
    if x0.shape != eps.shape:
        raise ValidationError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    if alpha_bar is None:
        t = torch.as_tensor(t)
        if t.dim() == 0:
            if not 1 <= int(t) <= schedule.T:
                raise ValidationError(f"timestep {int(t)} outside 1..{schedule.T}")
        elif t.shape[0] != x0.shape[0]:
            raise ValidationError("one timestep per sample expected")
        alpha_bar = schedule.alpha_bar_at(t)
    alpha_bar = torch.as_tensor(alpha_bar, dtype=torch.float64)
    if alpha_bar.dim() == 0:
        return (alpha_bar.sqrt().item() * x0) + ((1.0 - alpha_bar).sqrt().item() * eps)
    return _broadcast(alpha_bar.sqrt(), x0) * x0 + _broadcast((1.0 - alpha_bar).sqrt(), x0) * eps
