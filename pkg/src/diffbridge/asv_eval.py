"""Speaker-verification scoring: stub embedder, centroid cosine scores, EER calibration, ARR."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import Waveform

EMBED_MAGIC = b"VBEM"


class EmbeddingFormatError(ValueError):
    pass


@dataclass
class SpeakerCentroid:
    speaker_id: str
    centroid: np.ndarray
    count: int = 1


@dataclass
class TrialRecord:
    speaker_id: str
    s_prot: float
    s_pur: float


@dataclass
class EerResult:
    eer: float
    tau: float
    thresholds: np.ndarray = field(repr=False, default=None)
    far_curve: np.ndarray = field(repr=False, default=None)
    frr_curve: np.ndarray = field(repr=False, default=None)

    def __str__(self) -> str:
        return format_eer(self)


def format_eer(result: EerResult) -> str:
    return f"EER={result.eer:.4g}, τ={result.tau:.4g}"


# -- stub embedder -------------------------------------------------------------------


def mel_filterbank(n_bands: int, n_fft: int, sample_rate: int, fmin: float = 50.0, fmax: float | None = None) -> np.ndarray:
    """Triangular filters equally spaced on the mel scale, shape (n_bands, n_fft // 2 + 1)."""
    fmax = fmax or sample_rate / 2
    mel = lambda f: 2595.0 * np.log10(1.0 + f / 700.0)  # noqa: E731
    inv = lambda m: 700.0 * (10 ** (m / 2595.0) - 1.0)  # noqa: E731
    edges = inv(np.linspace(mel(fmin), mel(fmax), n_bands + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    fb = np.zeros((n_bands, len(freqs)))
    for i in range(n_bands):
        lo, mid, hi = edges[i : i + 3]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[i] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def log_band_energies(
    waveform: Waveform, n_bands: int = 24, n_fft: int = 512, hop: int = 256, fmax: float = 4000.0, floor: float = 1e-3
) -> np.ndarray:
    """Log mel energies per frame; ``floor`` is relative to the utterance's mean band energy."""
    x = waveform.samples
    if len(x) < n_fft:
        x = np.pad(x, (0, n_fft - len(x)))
    n_frames = 1 + (len(x) - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    spec = np.abs(np.fft.rfft(x[idx] * np.hanning(n_fft), axis=1)) ** 2
    energies = spec @ mel_filterbank(n_bands, n_fft, waveform.sample_rate, fmax=fmax).T
    return np.log(energies + floor * energies.mean() + 1e-12)


def embed(waveform: Waveform, n_bands: int = 24) -> np.ndarray:
    """Unit-norm embedding from per-band mean and std of log mel energies.

    Each half is centred across bands first, which removes overall loudness and
    keeps the spectral shape.
    """
    e = log_band_energies(waveform, n_bands)
    mean = e.mean(axis=0)
    std = e.std(axis=0)
    v = np.concatenate([mean - mean.mean(), std - std.mean()])
    norm = np.linalg.norm(v)
    if norm == 0:
        v = np.zeros_like(v)
        v[0] = 1.0
        return v
    return v / norm


# -- scoring -------------------------------------------------------------------------


def cosine_score(e, c) -> float:
    e = np.asarray(e, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    denom = np.linalg.norm(e) * np.linalg.norm(c)
    if denom == 0:
        raise ValueError("cosine score of a zero vector")
    return float(np.clip(e @ c / denom, -1.0, 1.0))


def make_centroid(speaker_id: str, embeddings) -> SpeakerCentroid:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or len(embeddings) == 0:
        raise ValueError("need at least one enrollment embedding")
    mean = embeddings.mean(axis=0)
    return SpeakerCentroid(speaker_id, mean / np.linalg.norm(mean), count=len(embeddings))


def score_sets(embeddings_by_speaker: dict, num_enroll: int):
    """Genuine and impostor scores for a labelled set.

    The first ``num_enroll`` embeddings of each speaker form its centroid; every
    remaining embedding is scored against its own centroid (genuine) and against
    all other centroids (impostor).
    """
    centroids = {}
    tests = {}
    for spk, embs in embeddings_by_speaker.items():
        if len(embs) <= num_enroll:
            raise ValueError(f"speaker {spk}: {len(embs)} utterances, need more than {num_enroll}")
        centroids[spk] = make_centroid(spk, embs[:num_enroll])
        tests[spk] = embs[num_enroll:]
    genuine, impostor = [], []
    for spk, embs in tests.items():
        for e in embs:
            for other, c in centroids.items():
                (genuine if other == spk else impostor).append(cosine_score(e, c.centroid))
    return np.array(genuine), np.array(impostor)


def candidate_thresholds(scores) -> np.ndarray:
    u = np.unique(np.asarray(scores, dtype=np.float64))
    return np.sort(np.concatenate([u, (u[1:] + u[:-1]) / 2]))


def compute_eer(genuine_scores, impostor_scores) -> EerResult:
    """Sweep thresholds at every distinct score and midpoint.

    FAR(tau) is the share of impostor scores >= tau, FRR(tau) the share of genuine
    scores < tau. Picks the smallest tau minimizing |FAR - FRR| and reports
    EER = (FAR + FRR) / 2 there.
    """
    gen = np.sort(np.asarray(genuine_scores, dtype=np.float64))
    imp = np.sort(np.asarray(impostor_scores, dtype=np.float64))
    if gen.size == 0 or imp.size == 0:
        raise ValueError("compute_eer needs non-empty genuine and impostor scores")
    taus = candidate_thresholds(np.concatenate([gen, imp]))
    far = (imp.size - np.searchsorted(imp, taus, side="left")) / imp.size
    frr = np.searchsorted(gen, taus, side="left") / gen.size
    gap = np.abs(far - frr)
    i = int(np.flatnonzero(gap == gap.min())[0])
    return EerResult(
        eer=float((far[i] + frr[i]) / 2), tau=float(taus[i]), thresholds=taus, far_curve=far, frr_curve=frr
    )


def compute_arr(trials, tau: float) -> float | None:
    """Share of below-threshold protected trials that pass after purification.

    Returns None when no protected trial falls below ``tau``.
    """
    trials = list(trials)
    if not trials:
        raise ValueError("compute_arr needs at least one trial")
    rejected = [tr for tr in trials if tr.s_prot < tau]
    if not rejected:
        return None
    return sum(tr.s_pur >= tau for tr in rejected) / len(rejected)


def calibrate(dev_genuine, dev_impostor, path=None) -> EerResult:
    """EER threshold on a development set; written to ``path`` when given."""
    result = compute_eer(dev_genuine, dev_impostor)
    if path is not None:
        write_calibration(path, result)
    return result


def check_disjoint(dev_ids, test_ids) -> None:
    overlap = set(dev_ids) & set(test_ids)
    if overlap:
        raise ValueError(f"development and test sets share {len(overlap)} utterance ids, e.g. {sorted(overlap)[:3]}")


def write_calibration(path, result: EerResult) -> None:
    Path(path).write_text(f"eer={result.eer!r} tau={result.tau!r}\n")


def read_calibration(path) -> EerResult:
    text = Path(path).read_text().split()
    try:
        fields = dict(item.split("=", 1) for item in text)
        eer, tau = float(fields["eer"]), float(fields["tau"])
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{path}: malformed calibration file ({exc})") from None
    if not (math.isfinite(eer) and math.isfinite(tau)):
        raise ValueError(f"{path}: non-finite calibration values")
    return EerResult(eer=eer, tau=tau)


def write_embedding_file(path, embedding) -> None:
    data = np.asarray(embedding).astype("<f4")
    if data.ndim != 1:
        raise ValueError("embedding must be 1-D")
    Path(path).write_bytes(EMBED_MAGIC + struct.pack("<I", data.size) + data.tobytes())


def read_embedding_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != EMBED_MAGIC:
        raise EmbeddingFormatError(f"{path}: bad header")
    (d,) = struct.unpack_from("<I", raw, 4)
    if len(raw) != 8 + 4 * d:
        raise EmbeddingFormatError(f"{path}: expected {d} values")
    data = np.frombuffer(raw, dtype="<f4", offset=8).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise EmbeddingFormatError(f"{path}: non-finite values")
    return data
