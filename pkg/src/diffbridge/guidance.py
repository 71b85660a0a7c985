"""Phoneme guidance track: alignment rasterization, acoustic prior, RMS matching.

Alignments come from text files produced offline (one ``start<TAB>end<TAB>phoneme_id``
line per segment). A missing or empty alignment yields the zero guidance channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import Waveform


class AlignmentError(ValueError):
    pass


@dataclass
class AlignmentMap:
    segments: list = field(default_factory=list)
    duration: float = 0.0

    def __post_init__(self):
        segs = [(float(s), float(e), int(p)) for s, e, p in self.segments]
        prev_end = 0.0
        for i, (start, end, pid) in enumerate(segs):
            if start < 0 or end < 0:
                raise AlignmentError(f"segment {i}: negative time")
            if end <= start:
                raise AlignmentError(f"segment {i}: end {end} <= start {start}")
            if pid < 0:
                raise AlignmentError(f"segment {i}: negative phoneme id")
            if start < prev_end:
                raise AlignmentError(f"segment {i}: overlaps or precedes the previous segment")
            prev_end = end
        if segs and prev_end > self.duration:
            self.duration = prev_end
        self.segments = segs

    @property
    def max_id(self) -> int:
        return max((p for _, _, p in self.segments), default=0)


@dataclass
class GuidanceTrack:
    values: np.ndarray
    gamma: float = 0.1
    present: bool = True

    @classmethod
    def absent(cls, num_frames: int, gamma: float = 0.1) -> "GuidanceTrack":
        return cls(np.zeros(num_frames), gamma=gamma, present=False)


def rasterize(alignment: AlignmentMap, num_frames: int, frame_rate: float) -> np.ndarray:
    """Phoneme id active at each frame centre, scaled by id / max_id; 0 outside segments."""
    out = np.zeros(num_frames)
    max_id = alignment.max_id
    if not alignment.segments or max_id == 0:
        return out
    centres = (np.arange(num_frames) + 0.5) / frame_rate
    for start, end, pid in alignment.segments:
        out[(centres >= start) & (centres < end)] = pid / max_id
    return out


def _standardize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    std = x.std()
    if std < 1e-8:
        return np.zeros_like(x)
    return (x - x.mean()) / std


def build_guidance(raster: np.ndarray, acoustic_prior: np.ndarray) -> np.ndarray:
    raster = np.asarray(raster, dtype=np.float64)
    acoustic_prior = np.asarray(acoustic_prior, dtype=np.float64)
    if raster.shape != acoustic_prior.shape:
        raise ValueError(f"raster {raster.shape} and prior {acoustic_prior.shape} differ in length")
    return np.tanh(_standardize(raster) + _standardize(acoustic_prior))


def rms(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.mean(x * x)))


def rms_match(y: np.ndarray, reference, gamma: float) -> np.ndarray:
    """Rescale ``y`` so that RMS(y) = gamma * RMS(reference)."""
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    y = np.asarray(y, dtype=np.float64)
    r = rms(y)
    if r < 1e-8:
        return np.zeros_like(y)
    return y * (gamma * rms(reference) / r)


def acoustic_prior(waveform: Waveform, frame_size: int, num_frames: int | None = None) -> np.ndarray:
    """Per-frame log-RMS energy over non-overlapping ``frame_size`` windows."""
    x = waveform.samples
    n = num_frames if num_frames is not None else max(1, -(-len(x) // frame_size))
    padded = np.zeros(n * frame_size)
    m = min(len(x), len(padded))
    padded[:m] = x[:m]
    frames = padded.reshape(n, frame_size)
    return np.log(np.sqrt(np.mean(frames**2, axis=1)) + 1e-5)


def guidance_from_alignment(
    alignment: AlignmentMap | None,
    waveform: Waveform,
    frame_size: int,
    num_frames: int,
    gamma: float = 0.1,
) -> GuidanceTrack:
    """Unscaled guidance (pre RMS match) for a waveform; absent alignment -> zero track."""
    if alignment is None or not alignment.segments:
        return GuidanceTrack.absent(num_frames, gamma)
    raster = rasterize(alignment, num_frames, waveform.sample_rate / frame_size)
    prior = acoustic_prior(waveform, frame_size, num_frames)
    return GuidanceTrack(build_guidance(raster, prior), gamma=gamma, present=True)


def load_alignment_file(path) -> AlignmentMap:
    segments = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise AlignmentError(f"{path}:{lineno}: expected 3 tab-separated fields")
        try:
            start, end, pid = float(parts[0]), float(parts[1]), int(parts[2])
        except ValueError as exc:
            raise AlignmentError(f"{path}:{lineno}: {exc}") from None
        segments.append((start, end, pid))
    try:
        return AlignmentMap(segments)
    except AlignmentError as exc:
        raise AlignmentError(f"{path}: {exc}") from None


def write_alignment_file(path, alignment: AlignmentMap) -> None:
    lines = [f"{s!r}\t{e!r}\t{p}" for s, e, p in alignment.segments]
    Path(path).write_text("".join(line + "\n" for line in lines))
