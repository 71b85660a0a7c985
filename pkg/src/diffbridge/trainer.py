"""Training loop for the bridge denoiser: AdamW, cosine learning-rate decay, global-norm clipping."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import bridge, denoiser
from .guidance import rms_match
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class PairedSample:
    """Clean latent, perturbation residual and optional unscaled guidance values."""

    z_c: np.ndarray
    eps_a: np.ndarray
    guidance: np.ndarray | None = None
    speaker_id: str = ""
    utt_id: str = ""

    def __post_init__(self):
        self.z_c = np.asarray(self.z_c, dtype=np.float32)
        self.eps_a = np.asarray(self.eps_a, dtype=np.float32)
        if self.z_c.shape != self.eps_a.shape or self.z_c.ndim != 2:
            raise ValueError(f"z_c {self.z_c.shape} and eps_a {self.eps_a.shape} must be equal 2-D shapes")
        if self.guidance is not None:
            self.guidance = np.asarray(self.guidance, dtype=np.float64)
            if self.guidance.shape != (self.z_c.shape[1],):
                raise ValueError("guidance length must equal the number of latent frames")


@dataclass
class TrainConfig:
    batch_size: int = 16
    num_epochs: int = 100
    base_lr: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip_norm: float = 1.0
    lambda_z0: float = 0.01
    seed: int = 0
    guidance_enabled: bool = False
    gamma: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    data_scale: float | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.num_epochs < 1:
            raise ValueError("batch_size and num_epochs must be positive")
        for name in ("base_lr", "weight_decay", "lambda_z0", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")
        if self.data_scale is not None and self.data_scale <= 0:
            raise ValueError("data_scale must be positive")


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    checkpoint_path: str | None = None
    wall_clock: float = 0.0
    data_scale: float = 1.0
    total_steps: int = 0
    model: denoiser.Denoiser | None = field(default=None, repr=False)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def global_norm(grads) -> float:
    return math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))


def clip_gradients(grads: list, max_norm: float) -> list:
    """Scale all gradients by max_norm / g when the global L2 norm g exceeds max_norm."""
    g = global_norm(grads)
    if g <= max_norm:
        return list(grads)
    scale = max_norm / g
    return [x * scale for x in grads]


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    @torch.no_grad()
    def step(self, grads) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            p.mul_(1.0 - self.lr * self.weight_decay)
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            denom = (v.sqrt() / math.sqrt(bc2)).add_(self.eps)
            p.addcdiv_(m, denom, value=-self.lr / bc1)


def estimate_data_scale(samples) -> float:
    """1 / RMS of the clean latents, so the network sees roughly unit-variance inputs."""
    sq = sum(float(np.sum(s.z_c.astype(np.float64) ** 2)) for s in samples)
    n = sum(s.z_c.size for s in samples)
    r = math.sqrt(sq / n)
    return 1.0 / r if r > 0 else 1.0


def _check_dataset(samples):
    if not samples:
        raise ValueError("dataset is empty")
    shape = samples[0].z_c.shape
    for i, s in enumerate(samples):
        if s.z_c.shape != shape:
            raise ValueError(f"sample {i} has shape {s.z_c.shape}, expected {shape}")


def matched_guidance(samples, z_t_d: torch.Tensor, gamma: float) -> torch.Tensor | None:
    """RMS-match each sample's guidance to its bridged latent; missing guidance -> zeros."""
    rows = []
    for s, z in zip(samples, z_t_d.detach().numpy()):
        if s.guidance is None:
            rows.append(np.zeros(z.shape[-1]))
        else:
            rows.append(rms_match(s.guidance, z, gamma))
    return torch.as_tensor(np.stack(rows), dtype=z_t_d.dtype)


def _batch_terms(model, samples, t, eps, schedule, cfg: TrainConfig, scale: float):
    z_c = torch.as_tensor(np.stack([s.z_c for s in samples]) * scale)
    eps_a = torch.as_tensor(np.stack([s.eps_a for s in samples]) * scale)
    eps = torch.as_tensor(eps)
    sample = bridge.make_bridged_sample(z_c, eps_a, t, eps, schedule)
    guidance = matched_guidance(samples, sample.z_t_d, cfg.gamma) if model.config.guidance_enabled else None
    eps_pred = denoiser.forward(model, sample.z_t_d, torch.as_tensor(t), guidance)
    return bridge.total_loss(eps_pred, sample, z_c, cfg.lambda_z0, schedule)


def _draw(rng: np.random.Generator, n: int, shape, schedule: NoiseSchedule):
    t = rng.integers(1, schedule.num_steps + 1, size=n)
    eps = rng.standard_normal((n, *shape), dtype=np.float32)
    return t, eps


def train(
    dataset,
    config: TrainConfig,
    denoiser_config: denoiser.DenoiserConfig,
    schedule: NoiseSchedule,
    out_dir=None,
    log_path=None,
) -> TrainReport:
    """Optimize a freshly initialized denoiser on ``dataset`` (a list of PairedSample).

    Every random draw (init, shuffling, steps, Gaussian noise) derives from ``config.seed``.
    Writes ``checkpoint.vbck`` under ``out_dir`` and one JSON record per step to ``log_path``.
    """
    _check_dataset(dataset)
    if denoiser_config.guidance_enabled != config.guidance_enabled:
        raise ValueError("guidance_enabled differs between train and denoiser config")
    if denoiser_config.latent_channels != dataset[0].z_c.shape[0]:
        raise ValueError("denoiser latent_channels does not match the dataset")
    torch.manual_seed(config.seed)
    started = time.perf_counter()
    scale = config.data_scale if config.data_scale is not None else estimate_data_scale(dataset)
    model = denoiser.init_params(denoiser_config, config.seed)
    params = list(model.parameters())
    opt = AdamW(
        params,
        lr=config.base_lr,
        betas=(config.beta1, config.beta2),
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )
    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    steps_per_epoch = -(-n // config.batch_size)
    total_steps = steps_per_epoch * config.num_epochs
    shape = dataset[0].z_c.shape
    report = TrainReport(data_scale=scale, total_steps=total_steps)
    log_file = open(log_path, "w") if log_path else None
    step = 0
    try:
        for epoch in range(config.num_epochs):
            order = rng.permutation(n)
            sums = np.zeros(3)
            for b in range(steps_per_epoch):
                idx = order[b * config.batch_size : (b + 1) * config.batch_size]
                batch = [dataset[i] for i in idx]
                t, eps = _draw(rng, len(batch), shape, schedule)
                bad = [int(i) for i, s in zip(idx, batch) if not (np.isfinite(s.z_c).all() and np.isfinite(s.eps_a).all())]
                if bad:
                    raise TrainingError(f"non-finite input at step {step} (samples {bad})")
                terms = _batch_terms(model, batch, t, eps, schedule, config, scale)
                if not torch.isfinite(terms.total):
                    raise TrainingError(f"non-finite loss at step {step} (samples {idx.tolist()})")
                grads = torch.autograd.grad(terms.total, params)
                grads = clip_gradients(grads, config.grad_clip_norm)
                lr = cosine_lr(step, total_steps, config.base_lr)
                opt.lr = lr
                opt.step(grads)
                vals = terms.as_floats()
                sums += [vals["bridge_loss"] * len(batch), vals["z0_l1"] * len(batch), vals["total"] * len(batch)]
                if log_file:
                    log_file.write(json.dumps({"step": step, "lr": lr, **{k: vals[k] for k in ("bridge_loss", "z0_l1", "total")}}) + "\n")
                step += 1
            mean = sums / n
            report.epochs.append(
                {"epoch": epoch, "bridge_loss": mean[0], "z0_l1": mean[1], "lambda_z0": config.lambda_z0, "total": mean[2]}
            )
            log.debug("epoch %d total %.5f", epoch, mean[2])
    finally:
        if log_file:
            log_file.close()
    report.wall_clock = time.perf_counter() - started
    report.model = model
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "checkpoint.vbck"
        meta = {
            "data_scale": scale,
            "gamma": config.gamma,
            "schedule": {
                "num_steps": schedule.num_steps,
                "offset": schedule.offset,
                "max_beta": schedule.max_beta,
                "horizon": schedule.horizon,
            },
        }
        denoiser.save_checkpoint(path, model, meta)
        report.checkpoint_path = str(path)
    return report


@torch.no_grad()
def evaluate_loss(model, samples, schedule: NoiseSchedule, config: TrainConfig, scale: float, seed: int = 1234, batch_size: int = 32):
    """Mean loss terms over ``samples`` with fixed (t, eps) draws from ``seed``.

    The draws depend only on ``seed`` and the sample shapes, so two models can be
    compared on identical bridged inputs.
    """
    _check_dataset(samples)
    rng = np.random.default_rng(seed)
    sums = np.zeros(3)
    for b in range(0, len(samples), batch_size):
        batch = samples[b : b + batch_size]
        t, eps = _draw(rng, len(batch), batch[0].z_c.shape, schedule)
        vals = _batch_terms(model, batch, t, eps, schedule, config, scale).as_floats()
        sums += [vals["bridge_loss"] * len(batch), vals["z0_l1"] * len(batch), vals["total"] * len(batch)]
    mean = sums / len(samples)
    return {"bridge_loss": mean[0], "z0_l1": mean[1], "lambda_z0": config.lambda_z0, "total": mean[2]}
