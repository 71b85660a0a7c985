"""Synthetic speakers, utterances and latent-domain protection surrogates."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from . import codec as codec_mod
from .codec import CodecSpec, Waveform
from .guidance import AlignmentMap, write_alignment_file

PERTURBATION_KINDS = ("bandnoise", "fixed-direction", "sinusoidal-comb")
NUM_PHONEMES = 8


@dataclass(frozen=True)
class SyntheticSpeaker:
    speaker_id: str
    harmonic_profile: tuple
    f0_range: tuple

    def __post_init__(self):
        amps = sum(a for _, a in self.harmonic_profile)
        if amps > 1.0 + 1e-12:
            raise ValueError(f"{self.speaker_id}: partial amplitudes sum to {amps} > 1")


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str = "bandnoise"
    strength: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}; expected one of {PERTURBATION_KINDS}")
        if not self.strength > 0:
            raise ValueError("perturbation strength must be positive")


def _seed_from(*parts) -> int:
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def partial_grid(sample_rate: int = 16000, frame_size: int = 64, max_freq: float = 3800.0, spacing: int = 2) -> np.ndarray:
    """Shared partial inventory.

    Every frequency has a whole number of periods per codec frame; ``spacing``
    keeps every n-th such frequency, starting at twice the frame rate.
    """
    step = sample_rate / frame_size
    return np.arange(2, int(max_freq // step) + 1, spacing) * step


def make_speakers(num_speakers: int, seed: int = 0, sample_rate: int = 16000, max_freq: float = 3800.0) -> list:
    """Speakers picking 4-6 partials from the shared inventory, each with a 20 Hz pitch range."""
    rng = np.random.default_rng(seed)
    if max_freq >= sample_rate / 2:
        raise ValueError("max_freq must be below Nyquist")
    grid = partial_grid(sample_rate, max_freq=max_freq)
    speakers = []
    for i in range(num_speakers):
        k = int(rng.integers(4, 7))
        freqs = np.sort(rng.choice(grid, size=k, replace=False))
        amps = rng.dirichlet(np.ones(k)) * 0.5
        lo = float(rng.uniform(90.0, 220.0))
        profile = tuple((float(f), float(a)) for f, a in zip(freqs, amps))
        speakers.append(SyntheticSpeaker(f"spk{i:03d}", profile, (lo, lo + 20.0)))
    return speakers


def utterance_alignment(duration: float, seed: int) -> AlignmentMap:
    """Phoneme-like segments of 60-150 ms separated by 0-40 ms gaps."""
    rng = np.random.default_rng(_seed_from("align", seed))
    segments = []
    t = float(rng.uniform(0.0, 0.03))
    while True:
        length = float(rng.uniform(0.06, 0.15))
        if t + length > duration:
            break
        segments.append((round(t, 6), round(t + length, 6), int(rng.integers(1, NUM_PHONEMES + 1))))
        t += length + float(rng.uniform(0.0, 0.04))
    return AlignmentMap(segments, duration)


def _envelope(alignment: AlignmentMap, n: int, sample_rate: int, ramp: float = 0.01) -> np.ndarray:
    time = np.arange(n) / sample_rate
    env = np.zeros(n)
    for start, end, pid in alignment.segments:
        gain = 0.5 + 0.5 * pid / NUM_PHONEMES
        rise = np.clip((time - start) / ramp, 0.0, 1.0)
        fall = np.clip((end - time) / ramp, 0.0, 1.0)
        env = np.maximum(env, gain * np.minimum(rise, fall))
    return env


def gen_utterance(speaker: SyntheticSpeaker, duration_s: float, seed: int, sample_rate: int = 16000) -> Waveform:
    """Speaker partials plus a weak pitched component, phoneme-enveloped, with a noise floor."""
    rng = np.random.default_rng(_seed_from("utt", speaker.speaker_id, seed))
    n = int(round(duration_s * sample_rate))
    time = np.arange(n) / sample_rate
    alignment = utterance_alignment(duration_s, _seed_from(speaker.speaker_id, seed))
    env = _envelope(alignment, n, sample_rate)
    x = np.zeros(n)
    for f, a in speaker.harmonic_profile:
        x += a * np.sin(2 * math.pi * f * time + rng.uniform(0, 2 * math.pi))
    f0 = rng.uniform(*speaker.f0_range)
    for h in range(1, 4):
        x += 0.05 / h * np.sin(2 * math.pi * h * f0 * time + rng.uniform(0, 2 * math.pi))
    x = x * env + 0.003 * rng.standard_normal(n)
    return Waveform(sample_rate, np.clip(x, -1.0, 1.0))


def utterance_alignment_for(speaker: SyntheticSpeaker, duration_s: float, seed: int) -> AlignmentMap:
    """The alignment that :func:`gen_utterance` used for the same speaker and seed."""
    return utterance_alignment(duration_s, _seed_from(speaker.speaker_id, seed))


def _direction(kind: str, shape, rng: np.random.Generator, key_rng: np.random.Generator) -> np.ndarray:
    c, n = shape
    if kind == "bandnoise":
        # random band of latent rows (1/8 of the rows up to all of them); along frames
        # anything from white to a slow drift
        width = int(rng.integers(max(1, c // 8), c + 1))
        lo = int(rng.integers(0, c - width + 1))
        sigma = float(np.exp(rng.uniform(np.log(0.25), np.log(32.0))))
        noise = rng.standard_normal((width, n))
        d = np.zeros(shape)
        d[lo : lo + width] = gaussian_filter1d(noise, sigma, axis=1, mode="wrap") if sigma > 0.5 else noise
    elif kind == "fixed-direction":
        d = key_rng.standard_normal((c, n))
    else:
        rows = np.arange(int(rng.integers(0, 3)), c, 3)
        period = float(rng.uniform(4.0, 16.0))
        phase = rng.uniform(0, 2 * math.pi, size=(len(rows), 1))
        d = np.zeros(shape)
        d[rows] = np.sin(2 * math.pi * np.arange(n)[None, :] / period + phase)
    return d


def protect(z_c: np.ndarray, spec: PerturbationSpec, key: str = "", utt_key: str = ""):
    """Return ``(z_a, eps_a)`` with ||eps_a|| / ||z_c|| = spec.strength.

    ``key`` identifies the speaker: the fixed-direction kind uses one direction per
    key. ``utt_key`` seeds the per-utterance randomness of the other kinds.
    """
    z_c = np.asarray(z_c, dtype=np.float64)
    norm = np.linalg.norm(z_c)
    rng = np.random.default_rng(_seed_from("protect", spec.kind, spec.seed, key, utt_key))
    key_rng = np.random.default_rng(_seed_from("direction", spec.seed, key))
    d = _direction(spec.kind, z_c.shape, rng, key_rng)
    eps_a = d * (spec.strength * norm / np.linalg.norm(d)) if norm > 0 else np.zeros_like(z_c)
    return z_c + eps_a, eps_a


@dataclass
class ManifestEntry:
    speaker_id: str
    utt_id: str
    clean_path: str
    protected_path: str
    alignment_path: str


def write_manifest(path, entries) -> None:
    lines = ["\t".join([e.speaker_id, e.utt_id, e.clean_path, e.protected_path, e.alignment_path]) for e in entries]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_manifest(path) -> list:
    entries = []
    base = Path(path).parent
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields")
        spk, utt, *paths = parts
        paths = [str(p if Path(p).is_absolute() else base / p) for p in paths]
        entries.append(ManifestEntry(spk, utt, *paths))
    return entries


def residual_path(entry: ManifestEntry) -> Path:
    return Path(entry.protected_path).parent.parent / "residual" / (Path(entry.protected_path).name)


def build_dataset(
    num_speakers: int,
    utts_per_speaker: int,
    spec,
    codec: CodecSpec,
    split_ratio: float,
    out_dir,
    seed: int = 0,
    duration_s: float = 0.5,
):
    """Generate speakers, utterances and protected latents on disk.

    ``spec`` is a PerturbationSpec or a sequence of them, assigned to each
    speaker's utterances in turn. The first ``round(num_speakers * split_ratio)``
    speakers form the training split, the rest the test split. Returns the paths
    of the train and test manifests (paths inside are relative to ``out_dir``).
    """
    specs = [spec] if isinstance(spec, PerturbationSpec) else list(spec)
    if not specs:
        raise ValueError("need at least one perturbation spec")
    if not 0.0 < split_ratio < 1.0:
        raise ValueError("split_ratio must be in (0, 1)")
    n_train = int(round(num_speakers * split_ratio))
    if not 0 < n_train < num_speakers:
        raise ValueError("split leaves one side without speakers")
    out = Path(out_dir)
    for sub in ("clean", "protected", "residual", "align"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    speakers = make_speakers(num_speakers, seed, codec.sample_rate)
    splits = {"train": [], "test": []}
    for si, spk in enumerate(speakers):
        split = "train" if si < n_train else "test"
        for j in range(utts_per_speaker):
            utt_id = f"{spk.speaker_id}_u{j:03d}"
            useed = _seed_from(seed, utt_id)
            wav = gen_utterance(spk, duration_s, useed, codec.sample_rate)
            z_c = codec_mod.encode(codec, wav).astype(np.float32)
            _, eps_a = protect(z_c, specs[j % len(specs)], key=spk.speaker_id, utt_key=utt_id)
            z_a = (z_c + eps_a.astype(np.float32)).astype(np.float32)
            rel = {k: f"{k}/{utt_id}.vblt" for k in ("clean", "protected", "residual")}
            codec_mod.write_latent_file(out / rel["clean"], z_c)
            codec_mod.write_latent_file(out / rel["protected"], z_a)
            codec_mod.write_latent_file(out / rel["residual"], z_a - z_c)
            align_rel = f"align/{utt_id}.txt"
            write_alignment_file(out / align_rel, utterance_alignment_for(spk, duration_s, useed))
            splits[split].append(ManifestEntry(spk.speaker_id, utt_id, rel["clean"], rel["protected"], align_rel))
    paths = {}
    for split, entries in splits.items():
        paths[split] = out / f"{split}.tsv"
        write_manifest(paths[split], entries)
    train_spk = {e.speaker_id for e in splits["train"]}
    test_spk = {e.speaker_id for e in splits["test"]}
    assert not train_spk & test_spk
    return paths["train"], paths["test"]
