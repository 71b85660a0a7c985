"""Bridged forward process, effective-noise target, clean-latent reconstruction and losses.

Every function accepts numpy arrays or torch tensors. Latents are either a single
``(C, L)`` array with a scalar step, or a batch ``(B, C, L)`` with a scalar step or
a length-B integer array of steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
import torch

from .schedule import NoiseSchedule, c_in, c_tgt


@dataclass
class BridgedSample:
    z_t_d: Any
    eps_eff: Any
    t: Any
    eps: Any
    eps_a: Any


@dataclass
class LossBreakdown:
    """Scalar loss terms; fields are floats or 0-d tensors when built from tensors."""

    bridge_loss: Any
    z0_l1: Any
    lambda_z0: float
    total: Any

    def as_floats(self) -> dict:
        def f(x):
            return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)

        return {"bridge_loss": f(self.bridge_loss), "z0_l1": f(self.z0_l1), "lambda_z0": f(self.lambda_z0), "total": f(self.total)}


def _check_shapes(*arrays):
    shape = tuple(arrays[0].shape)
    for a in arrays[1:]:
        if tuple(a.shape) != shape:
            raise ValueError(f"shape mismatch: {shape} vs {tuple(a.shape)}")


def _coef(values, like):
    """Broadcast per-sample coefficients against a latent of the same kind as ``like``."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return float(values)
    if values.shape[0] != like.shape[0] or like.ndim != 3:
        raise ValueError(f"{values.shape[0]} step indices for latent batch of shape {tuple(like.shape)}")
    values = values.reshape(-1, 1, 1)
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(values, dtype=like.dtype, device=like.device)
    return values


def _sqrt_ab(schedule: NoiseSchedule, t, like, low: int):
    idx = schedule.check_step(t, low=low)
    ab = schedule.alpha_bar[idx]
    return _coef(np.sqrt(ab), like), _coef(np.sqrt(1.0 - ab), like)


def adversarial_init(z_c, eps_a):
    """Protected starting state z_c + eps_a."""
    _check_shapes(z_c, eps_a)
    return z_c + eps_a


def forward_diffuse(z0, t, eps, schedule: NoiseSchedule):
    """sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps, for 0 <= t <= T."""
    _check_shapes(z0, eps)
    a, b = _sqrt_ab(schedule, t, z0, low=0)
    return a * z0 + b * eps


def make_bridged_sample(z_c, eps_a, t, eps, schedule: NoiseSchedule) -> BridgedSample:
    _check_shapes(z_c, eps_a, eps)
    a, b = _sqrt_ab(schedule, t, z_c, low=1)
    k_in = _coef(c_in(schedule, t), z_c)
    k_tgt = _coef(c_tgt(schedule, t), z_c)
    z_t_d = a * z_c + b * eps + k_in * eps_a
    eps_eff = eps + k_tgt * eps_a
    return BridgedSample(z_t_d=z_t_d, eps_eff=eps_eff, t=t, eps=eps, eps_a=eps_a)


def reconstruct_z0(z_t_d, eps_pred, eps_a, t, schedule: NoiseSchedule):
    """Clean-latent estimate from a bridged latent and a predicted effective noise.

    The perturbation term is kept even though its coefficient cancels under the
    schedule's c_in / c_tgt; a non-vanishing coefficient means a broken schedule.
    """
    _check_shapes(z_t_d, eps_pred, eps_a)
    a, b = _sqrt_ab(schedule, t, z_t_d, low=1)
    residual = np.asarray(c_in(schedule, t)) - np.sqrt(1.0 - schedule.alpha_bar[schedule.check_step(t)]) * np.asarray(
        c_tgt(schedule, t)
    )
    if np.max(np.abs(residual)) >= 1e-10:
        raise ArithmeticError(f"perturbation coefficient {residual} does not vanish")
    return (z_t_d - b * eps_pred - _coef(residual, z_t_d) * eps_a) / a


def bridge_loss(eps_pred, eps_eff):
    """Mean squared error over all elements."""
    _check_shapes(eps_pred, eps_eff)
    return ((eps_pred - eps_eff) ** 2).mean()


def total_loss(eps_pred, sample: BridgedSample, z_c, lambda_z0: float, schedule: NoiseSchedule) -> LossBreakdown:
    if lambda_z0 < 0:
        raise ValueError(f"lambda_z0 must be non-negative, got {lambda_z0}")
    mse = bridge_loss(eps_pred, sample.eps_eff)
    z0_hat = reconstruct_z0(sample.z_t_d, eps_pred, sample.eps_a, sample.t, schedule)
    _check_shapes(z0_hat, z_c)
    l1 = abs(z0_hat - z_c).mean()
    return LossBreakdown(bridge_loss=mse, z0_l1=l1, lambda_z0=float(lambda_z0), total=mse + lambda_z0 * l1)
