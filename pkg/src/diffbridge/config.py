"""Experiment configuration: one YAML file of sections, validated before anything runs."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .codec import CodecSpec
from .denoiser import DenoiserConfig
from .purifier import PurifyConfig
from .schedule import make_cosine_schedule
from .synthkit import PERTURBATION_KINDS, PerturbationSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleSection:
    num_steps: int = 200
    offset: float = 0.008
    max_beta: float = 0.999
    horizon: float = 0.15


@dataclass
class CodecSection:
    sample_rate: int = 16000
    frame_size: int = 64
    kept_coefficients: int = 32


@dataclass
class DatasetSection:
    dir: str | None = None
    num_speakers: int = 20
    utts_per_speaker: int = 20
    duration_s: float = 0.5
    split_ratio: float = 0.5
    kinds: list = field(default_factory=lambda: list(PERTURBATION_KINDS))
    strength: float = 0.5


@dataclass
class DenoiserSection:
    base_width: int = 32
    num_levels: int = 3
    time_embed_dim: int = 64
    dilations: list = field(default_factory=lambda: [1, 2])
    kernel_size: int = 3


@dataclass
class TrainSection:
    batch_size: int = 16
    num_epochs: int = 150
    base_lr: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip_norm: float = 1.0
    lambda_z0: float = 0.01
    guidance_enabled: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class PurifySection:
    num_inference_steps: int = 10
    terminal_step: int | None = None


@dataclass
class GuidanceSection:
    gamma: float = 0.1


@dataclass
class EvalSection:
    num_enroll: int = 5
    embed_bands: int = 24
    calibration: str | None = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    codec: CodecSection = field(default_factory=CodecSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    train: TrainSection = field(default_factory=TrainSection)
    purify: PurifySection = field(default_factory=PurifySection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- builders -------------------------------------------------------------------

    def make_schedule(self):
        s = self.schedule
        return make_cosine_schedule(s.num_steps, offset=s.offset, max_beta=s.max_beta, horizon=s.horizon)

    def make_codec(self) -> CodecSpec:
        c = self.codec
        return CodecSpec(frame_size=c.frame_size, kept_coefficients=c.kept_coefficients, sample_rate=c.sample_rate)

    def make_perturbations(self) -> list:
        return [PerturbationSpec(kind, self.dataset.strength, self.seed) for kind in self.dataset.kinds]

    def make_denoiser_config(self) -> DenoiserConfig:
        d = self.denoiser
        return DenoiserConfig(
            latent_channels=self.codec.kept_coefficients,
            base_width=d.base_width,
            num_levels=d.num_levels,
            time_embed_dim=d.time_embed_dim,
            guidance_enabled=self.train.guidance_enabled,
            dilations=tuple(d.dilations),
            kernel_size=d.kernel_size,
        )

    def make_train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            batch_size=t.batch_size,
            num_epochs=t.num_epochs,
            base_lr=t.base_lr,
            weight_decay=t.weight_decay,
            grad_clip_norm=t.grad_clip_norm,
            lambda_z0=t.lambda_z0,
            seed=self.seed,
            guidance_enabled=t.guidance_enabled,
            gamma=self.guidance.gamma,
            beta1=t.beta1,
            beta2=t.beta2,
            adam_eps=t.adam_eps,
        )

    def make_purify_config(self) -> PurifyConfig:
        return PurifyConfig(
            num_inference_steps=self.purify.num_inference_steps,
            terminal_step=self.purify.terminal_step,
            seed=self.seed,
            guidance_enabled=self.train.guidance_enabled,
            gamma=self.guidance.gamma,
        )

    def validate(self) -> None:
        """Build every component once so bad values fail before a pipeline starts."""
        try:
            sched = self.make_schedule()
            self.make_codec()
            self.make_perturbations()
            self.make_denoiser_config()
            self.make_train_config()
            self.make_purify_config().resolve_terminal(sched)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        d = self.dataset
        if d.num_speakers < 2 or d.utts_per_speaker < 1 or d.duration_s <= 0:
            raise ConfigError("dataset needs >= 2 speakers, >= 1 utterance each and a positive duration")
        if not d.kinds:
            raise ConfigError("dataset.kinds must not be empty")
        if self.eval.num_enroll < 1 or self.eval.num_enroll >= d.utts_per_speaker:
            raise ConfigError("eval.num_enroll must be in [1, utts_per_speaker)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), {} if value is None else value, f"{where}.{name}" if where else name)
        else:
            kwargs[name] = _coerce(value, current, f"{where}.{name}" if where else name)
    return cls(**kwargs)


def _coerce(value, default, where):
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return value
    return value


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data or {}, "")
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}".replace("\n", " ")) from None
    return config_from_dict(data or {})


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
