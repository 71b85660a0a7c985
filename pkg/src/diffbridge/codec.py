"""Linear orthonormal waveform <-> latent codec and the latent / waveform file formats.

The codec frames the waveform into non-overlapping windows of W samples and keeps
the first C coefficients of an orthonormal DCT-II basis per frame. Being linear,
a waveform perturbation maps to an exactly computable latent residual.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct
from scipy.io import wavfile

LATENT_MAGIC = b"VBLT"
LATENT_VERSION = 1
_LATENT_HEADER = struct.Struct("<4sBII")


class LatentFormatError(ValueError):
    pass


@dataclass
class Waveform:
    sample_rate: int
    samples: np.ndarray

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def dct_basis(frame_size: int) -> np.ndarray:
    """W x W orthonormal DCT-II matrix; row k is the k-th basis function."""
    return dct(np.eye(frame_size), type=2, axis=0, norm="ortho")


@dataclass(frozen=True)
class CodecSpec:
    frame_size: int = 64
    kept_coefficients: int = 32
    sample_rate: int = 16000
    basis: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.frame_size < 1:
            raise ValueError("frame_size must be positive")
        if not 1 <= self.kept_coefficients <= self.frame_size:
            raise ValueError(f"kept_coefficients must be in [1, {self.frame_size}]")
        basis = dct_basis(self.frame_size) if self.basis is None else np.asarray(self.basis, dtype=np.float64)
        if basis.shape != (self.frame_size, self.frame_size):
            raise ValueError("basis must be W x W")
        if not np.allclose(basis.T @ basis, np.eye(self.frame_size), atol=1e-9, rtol=0):
            raise ValueError("basis is not orthonormal")
        basis.setflags(write=False)
        object.__setattr__(self, "basis", basis)

    def num_frames(self, num_samples: int) -> int:
        return max(1, -(-num_samples // self.frame_size))


def encode(spec: CodecSpec, waveform: Waveform) -> np.ndarray:
    """Project W-sample frames (zero-padded tail) onto the first C basis rows -> (C, L)."""
    x = waveform.samples
    n_frames = spec.num_frames(len(x))
    padded = np.zeros(n_frames * spec.frame_size)
    padded[: len(x)] = x
    frames = padded.reshape(n_frames, spec.frame_size)
    return spec.basis[: spec.kept_coefficients] @ frames.T


def decode(spec: CodecSpec, latent: np.ndarray) -> Waveform:
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim != 2 or latent.shape[0] != spec.kept_coefficients:
        raise ValueError(f"expected latent with {spec.kept_coefficients} rows, got {latent.shape}")
    frames = spec.basis[: spec.kept_coefficients].T @ latent
    return Waveform(spec.sample_rate, frames.T.reshape(-1))


def write_latent_file(path, latent: np.ndarray) -> None:
    latent = np.asarray(latent)
    if latent.ndim != 2:
        raise ValueError(f"latent must be 2-D, got shape {latent.shape}")
    data = latent.astype("<f4")
    if not np.all(np.isfinite(data)):
        raise LatentFormatError("refusing to write non-finite latent")
    c, n = data.shape
    with open(path, "wb") as f:
        f.write(_LATENT_HEADER.pack(LATENT_MAGIC, LATENT_VERSION, c, n))
        f.write(data.tobytes(order="C"))


def read_latent_file(path) -> np.ndarray:
    """Read a latent written by :func:`write_latent_file` as float32 (C, L)."""
    raw = Path(path).read_bytes()
    if len(raw) < _LATENT_HEADER.size:
        raise LatentFormatError(f"{path}: truncated header")
    magic, version, c, n = _LATENT_HEADER.unpack_from(raw)
    if magic != LATENT_MAGIC:
        raise LatentFormatError(f"{path}: bad magic {magic!r}")
    if version != LATENT_VERSION:
        raise LatentFormatError(f"{path}: unsupported version {version}")
    expected = _LATENT_HEADER.size + 4 * c * n
    if len(raw) != expected:
        raise LatentFormatError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=_LATENT_HEADER.size).reshape(c, n).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise LatentFormatError(f"{path}: non-finite values in payload")
    return data


def write_wav(path, waveform: Waveform, subtype: str = "float") -> None:
    """Mono RIFF/WAVE, either 32-bit float or 16-bit PCM."""
    x = np.clip(waveform.samples, -1.0, 1.0)
    if subtype == "pcm16":
        data = np.round(x * 32767).astype(np.int16)
    elif subtype == "float":
        data = x.astype(np.float32)
    else:
        raise ValueError(f"unknown wav subtype {subtype!r}")
    wavfile.write(str(path), waveform.sample_rate, data)


def read_wav(path) -> Waveform:
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32767.0
    elif data.dtype.kind == "f":
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample type {data.dtype}")
    return Waveform(rate, samples)
