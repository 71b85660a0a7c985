"""Cosine noise schedule and the bridge scaling coefficients.

alpha_bar is kept in float64 no matter what precision the network runs at;
the coefficient ratios blow up near t = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_OFFSET = 0.008
DEFAULT_MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed cumulative signal retention over steps 0..T.

    Args:
        num_steps: terminal step T.
        alpha_bar: array of length T + 1, non-increasing, alpha_bar[0] ~ 1.
    """

    num_steps: int
    alpha_bar: np.ndarray
    offset: float = DEFAULT_OFFSET
    max_beta: float = DEFAULT_MAX_BETA
    horizon: float = 1.0
    _c_in: np.ndarray = field(init=False, repr=False, compare=False)
    _c_tgt: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ab = np.array(self.alpha_bar, dtype=np.float64)
        if self.num_steps < 1 or ab.shape != (self.num_steps + 1,):
            raise ValueError(
                f"alpha_bar must have num_steps + 1 = {self.num_steps + 1} entries, got {ab.shape}"
            )
        if not np.all(np.isfinite(ab)):
            raise ValueError("alpha_bar contains non-finite values")
        if np.any(np.diff(ab) > 0):
            raise ValueError("alpha_bar must be non-increasing")
        if not (0.0 < ab[-1] and ab[0] <= 1.0):
            raise ValueError("alpha_bar must lie in (0, 1]")
        ab_T = ab[-1]
        if ab_T >= 1.0:
            raise ValueError("alpha_bar[T] = 1 makes the bridge coefficients undefined")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

        # entry 0 is unused (t = 0 is outside the bridge domain)
        a = ab[1:]
        c_in = np.concatenate([[np.nan], ab_T * (1.0 - a) / (np.sqrt(a) * (1.0 - ab_T))])
        c_tgt = np.concatenate([[np.nan], ab_T * np.sqrt(1.0 - a) / ((1.0 - ab_T) * np.sqrt(a))])
        residual = c_in[1:] - np.sqrt(1.0 - a) * c_tgt[1:]
        if np.max(np.abs(residual)) >= 1e-10:
            raise ArithmeticError("c_in - sqrt(1 - alpha_bar) * c_tgt does not vanish")
        c_in.setflags(write=False)
        c_tgt.setflags(write=False)
        object.__setattr__(self, "_c_in", c_in)
        object.__setattr__(self, "_c_tgt", c_tgt)

    @property
    def alpha_bar_T(self) -> float:
        return float(self.alpha_bar[-1])

    def check_step(self, t, low: int = 1) -> np.ndarray:
        """Validate a step index (scalar or integer array) and return it as an int array."""
        arr = np.asarray(t)
        if arr.dtype.kind not in "iu":
            if not np.all(np.equal(np.mod(arr, 1), 0)):
                raise ValueError(f"step index must be an integer, got {t!r}")
            arr = arr.astype(np.int64)
        if np.any(arr < low) or np.any(arr > self.num_steps):
            raise ValueError(f"step index {t!r} outside [{low}, {self.num_steps}]")
        return arr


def cosine_alpha_bar(num_steps: int, offset: float = DEFAULT_OFFSET, horizon: float = 1.0) -> np.ndarray:
    """Unclamped f(t) / f(0) with f(t) = cos^2(((horizon * t / T + s) / (1 + s)) * pi / 2)."""
    steps = np.arange(num_steps + 1, dtype=np.float64)
    f = np.cos(((horizon * steps / num_steps + offset) / (1.0 + offset)) * math.pi / 2) ** 2
    return f / f[0]


def make_cosine_schedule(
    num_steps: int,
    offset: float = DEFAULT_OFFSET,
    max_beta: float = DEFAULT_MAX_BETA,
    horizon: float = 1.0,
) -> NoiseSchedule:
    """Squared-cosine schedule with per-step beta clamped at ``max_beta``.

    ``horizon`` in (0, 1] truncates the cosine curve so that step T sits at that
    fraction of the full noising path; 1.0 is the canonical schedule that ends
    near pure noise.
    """
    if isinstance(num_steps, bool) or int(num_steps) != num_steps or num_steps < 1:
        raise ValueError(f"num_steps must be a positive integer, got {num_steps!r}")
    if not 0.0 < horizon <= 1.0:
        raise ValueError(f"horizon must be in (0, 1], got {horizon}")
    if not 0.0 < max_beta < 1.0:
        raise ValueError(f"max_beta must be in (0, 1), got {max_beta}")
    num_steps = int(num_steps)
    raw = cosine_alpha_bar(num_steps, offset, horizon)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = raw[1:] / raw[:-1]
    ratio = np.clip(np.nan_to_num(ratio, nan=0.0), 1.0 - max_beta, 1.0)
    alpha_bar = np.concatenate([[raw[0]], raw[0] * np.cumprod(ratio)])
    return NoiseSchedule(num_steps, alpha_bar, offset=offset, max_beta=max_beta, horizon=horizon)


def c_in(schedule: NoiseSchedule, t):
    """Coefficient of the perturbation in the bridged latent.

    Returns a float for scalar ``t`` and an array for array ``t``.
    """
    idx = schedule.check_step(t)
    out = schedule._c_in[idx]
    return float(out) if out.ndim == 0 else out


def c_tgt(schedule: NoiseSchedule, t):
    """Coefficient of the perturbation in the effective-noise target."""
    idx = schedule.check_step(t)
    out = schedule._c_tgt[idx]
    return float(out) if out.ndim == 0 else out
