"""Deterministic DDIM purification of protected latents."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import denoiser
from .guidance import rms_match
from .schedule import NoiseSchedule


class PurificationError(RuntimeError):
    pass


@dataclass
class PurifyConfig:
    num_inference_steps: int = 10
    terminal_step: int | None = None
    seed: int = 0
    guidance_enabled: bool = False
    gamma: float = 0.1

    def resolve_terminal(self, schedule: NoiseSchedule) -> int:
        t_star = schedule.num_steps if self.terminal_step is None else int(self.terminal_step)
        if not 1 <= t_star <= schedule.num_steps:
            raise ValueError(f"terminal_step {t_star} outside [1, {schedule.num_steps}]")
        if not 1 <= self.num_inference_steps <= t_star:
            raise ValueError(f"num_inference_steps must be in [1, {t_star}]")
        return t_star


def step_schedule(num_steps: int, terminal_step: int) -> list[int]:
    """``num_steps + 1`` uniformly spaced integer steps from ``terminal_step`` down to 0."""
    if not 1 <= num_steps <= terminal_step:
        raise ValueError(f"need 1 <= num_steps <= terminal_step, got {num_steps}, {terminal_step}")
    steps = np.round(np.linspace(terminal_step, 0, num_steps + 1)).astype(int).tolist()
    assert all(a > b for a, b in zip(steps, steps[1:]))
    return steps


def init_terminal(z_a, schedule: NoiseSchedule, seed: int, terminal_step: int | None = None) -> torch.Tensor:
    """sqrt(alpha_bar_T) z_a + sqrt(1 - alpha_bar_T) eps with eps from a seeded standard normal."""
    t = schedule.num_steps if terminal_step is None else schedule.check_step(terminal_step).item()
    z_a = torch.as_tensor(np.asarray(z_a), dtype=torch.float64)
    eps = torch.as_tensor(np.random.default_rng(seed).standard_normal(tuple(z_a.shape)))
    ab = float(schedule.alpha_bar[t])
    return np.sqrt(ab) * z_a + np.sqrt(1.0 - ab) * eps


def _predict(model, z_t: torch.Tensor, t: int, guidance, gamma: float) -> torch.Tensor:
    if isinstance(model, denoiser.Denoiser):
        g = None
        if model.config.guidance_enabled and guidance is not None:
            zs = z_t.numpy()
            if zs.ndim == 2:
                g = rms_match(guidance, zs, gamma)
            else:
                gs = np.broadcast_to(guidance, (len(zs), zs.shape[-1]))
                g = np.stack([rms_match(gi, zi, gamma) for gi, zi in zip(gs, zs)])
        with torch.no_grad():
            return denoiser.forward(model, z_t, t, g).to(torch.float64)
    return torch.as_tensor(model(z_t, t), dtype=torch.float64)


def ddim_step(z_t, t: int, t_prev: int, model, guidance, schedule: NoiseSchedule, gamma: float = 0.1):
    """One deterministic (eta = 0) DDIM update; returns ``(z_t_prev, z0_hat)``.

    ``model`` is a :class:`~diffbridge.denoiser.Denoiser` or any callable ``(z_t, t) -> eps``.
    For ``t_prev == 0`` the clean estimate itself is returned as the next state.
    """
    if not t > t_prev >= 0:
        raise ValueError(f"need t > t_prev >= 0, got {t}, {t_prev}")
    schedule.check_step(t)
    z_t = torch.as_tensor(z_t, dtype=torch.float64)
    eps_hat = _predict(model, z_t, t, guidance, gamma)
    ab_t = float(schedule.alpha_bar[t])
    z0_hat = (z_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    if t_prev == 0:
        z_prev = z0_hat
    else:
        ab_prev = float(schedule.alpha_bar[t_prev])
        z_prev = np.sqrt(ab_prev) * z0_hat + np.sqrt(1.0 - ab_prev) * eps_hat
    if not (torch.isfinite(z_prev).all() and torch.isfinite(z0_hat).all()):
        raise PurificationError(f"non-finite state in DDIM step t={t} -> t_prev={t_prev}")
    return z_prev, z0_hat


def purify(z_a, model, config: PurifyConfig, schedule: NoiseSchedule, guidance=None, data_scale: float = 1.0) -> np.ndarray:
    """Map protected latent(s) to purified latent(s).

    ``guidance`` holds unscaled guidance values (frames,) or (B, frames); it is
    RMS-matched to the current state at every step. Latents are multiplied by
    ``data_scale`` on the way in and divided on the way out.
    """
    t_star = config.resolve_terminal(schedule)
    if guidance is not None and not config.guidance_enabled:
        guidance = None
    z = init_terminal(np.asarray(z_a, dtype=np.float64) * data_scale, schedule, config.seed, t_star)
    steps = step_schedule(config.num_inference_steps, t_star)
    for t, t_prev in zip(steps, steps[1:]):
        z, _ = ddim_step(z, t, t_prev, model, guidance, schedule, config.gamma)
    return (z / data_scale).numpy()


class OracleDenoiser:
    """Analytic noise predictor that knows the clean latent.

    Returns the exact noise that explains ``z_t`` given ``z0``; DDIM driven by it
    lands on ``z0`` for any step grid.
    """

    def __init__(self, z0, schedule: NoiseSchedule):
        self.z0 = torch.as_tensor(np.asarray(z0), dtype=torch.float64)
        self.schedule = schedule

    def __call__(self, z_t, t: int):
        ab = float(self.schedule.alpha_bar[t])
        return (torch.as_tensor(z_t, dtype=torch.float64) - np.sqrt(ab) * self.z0) / np.sqrt(1.0 - ab)
