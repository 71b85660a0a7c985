"""Fast invariant checks shared by ``diffbridge selfcheck`` and the test-suite."""

from __future__ import annotations

import itertools
import tempfile
import time
from pathlib import Path

import numpy as np
import torch

from . import asv_eval, bridge, codec, denoiser, purifier, synthkit
from .schedule import NoiseSchedule, c_in, c_tgt, make_cosine_schedule

TINY_DENOISER = denoiser.DenoiserConfig(
    latent_channels=2, base_width=4, num_levels=2, time_embed_dim=8, dilations=(1, 2)
)


def identity_errors(schedule: NoiseSchedule, trials: int = 1000, shape=(4, 6), seed: int = 0) -> dict:
    """Worst-case errors of the three bridge identities over random draws.

    ``coefficient``: relative error of c_in = sqrt(1 - alpha_bar) c_tgt over every step.
    ``endpoint``: |z_T bridge - forward_diffuse(z_c + eps_a, T, eps)|.
    ``reconstruction``: relative error of z0_hat vs z_c when the predictor returns eps_eff.
    """
    T = schedule.num_steps
    steps = np.arange(1, T + 1)
    lhs = c_in(schedule, steps)
    rhs = np.sqrt(1.0 - schedule.alpha_bar[steps]) * c_tgt(schedule, steps)
    coef = float(np.max(np.abs(lhs - rhs) / np.abs(rhs)))

    rng = np.random.default_rng(seed)
    endpoint = recon = 0.0
    for _ in range(trials):
        z_c, eps_a, eps = (rng.standard_normal(shape) * rng.uniform(0.1, 10.0) for _ in range(3))
        t = int(rng.integers(1, T + 1))
        zT = bridge.make_bridged_sample(z_c, eps_a, T, eps, schedule).z_t_d
        ref = bridge.forward_diffuse(z_c + eps_a, T, eps, schedule)
        endpoint = max(endpoint, float(np.max(np.abs(zT - ref))))
        s = bridge.make_bridged_sample(z_c, eps_a, t, eps, schedule)
        z0 = bridge.reconstruct_z0(s.z_t_d, s.eps_eff, eps_a, t, schedule)
        recon = max(recon, float(np.linalg.norm(z0 - z_c) / np.linalg.norm(z_c)))
    return {"coefficient": coef, "endpoint": endpoint, "reconstruction": recon}


def gradient_check(config: denoiser.DenoiserConfig = TINY_DENOISER, seed: int = 0, frames: int = 8, h: float = 1e-5) -> float:
    """Max relative error between central differences and autograd over every parameter entry.

    The objective is <u, f(z, t)> for fixed random z and u, in float64. FiLM shift
    weights start at zero, so all parameters are perturbed away from init first
    to make every path carry signal.
    """
    model = denoiser.init_params(config, seed, dtype=torch.float64)
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=g, dtype=torch.float64))
    z = torch.randn(2, config.latent_channels, frames, generator=g, dtype=torch.float64)
    u = torch.randn(2, config.latent_channels, frames, generator=g, dtype=torch.float64)
    t = torch.tensor([3, 17])
    guide = torch.randn(2, frames, generator=g, dtype=torch.float64) if config.guidance_enabled else None
    grads, _ = denoiser.backward(model, z, t, guide, u)

    def objective() -> float:
        with torch.no_grad():
            return float((denoiser.forward(model, z, t, guide) * u).sum())

    worst = 0.0
    for name, p in model.named_parameters():
        flat = p.data.view(-1)
        ad = grads[name].reshape(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            up = objective()
            flat[i] = orig - h
            down = objective()
            flat[i] = orig
            fd = (up - down) / (2 * h)
            a = float(ad[i])
            worst = max(worst, abs(fd - a) / max(abs(fd), abs(a), 1e-6))
    return worst


def brute_force_eer(genuine, impostor):
    """Reference EER by direct counting at every candidate threshold."""
    gen = [float(x) for x in genuine]
    imp = [float(x) for x in impostor]
    values = sorted(set(gen + imp))
    taus = sorted(set(values + [(a + b) / 2 for a, b in zip(values, values[1:])]))
    best = None
    for tau in taus:
        far = sum(s >= tau for s in imp) / len(imp)
        frr = sum(s < tau for s in gen) / len(gen)
        gap = abs(far - frr)
        if best is None or gap < best[0]:
            best = (gap, (far + frr) / 2, tau)
    return best[1], best[2]


def brute_force_arr(trials, tau):
    hits = total = 0
    for tr in trials:
        if tr.s_prot < tau:
            total += 1
            hits += tr.s_pur >= tau
    return None if total == 0 else hits / total


def eer_oracle_mismatches(num_sets: int = 500, seed: int = 0) -> int:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(num_sets):
        ng, ni = rng.integers(1, 30, size=2)
        # coarse rounding forces ties between and within the two sets
        gen = np.round(rng.normal(0.6, 0.2, ng), int(rng.integers(1, 4)))
        imp = np.round(rng.normal(0.3, 0.2, ni), int(rng.integers(1, 4)))
        got = asv_eval.compute_eer(gen, imp)
        eer, tau = brute_force_eer(gen, imp)
        bad += (got.eer, got.tau) != (eer, tau)
    return bad


def arr_oracle_mismatches(num_sets: int = 500, seed: int = 0) -> int:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(num_sets):
        n = int(rng.integers(1, 40))
        trials = [
            asv_eval.TrialRecord(f"s{i % 3}", float(a), float(b))
            for i, (a, b) in enumerate(np.round(rng.uniform(0, 1, size=(n, 2)), 2))
        ]
        tau = float(np.round(rng.uniform(0, 1), 2))
        bad += asv_eval.compute_arr(trials, tau) != brute_force_arr(trials, tau)
    return bad


def codec_roundtrip_error(frame_size: int = 64, num_frames: int = 50, seed: int = 0) -> float:
    spec = codec.CodecSpec(frame_size=frame_size, kept_coefficients=frame_size)
    x = np.random.default_rng(seed).uniform(-1, 1, frame_size * num_frames)
    wf = codec.Waveform(spec.sample_rate, x)
    return float(np.max(np.abs(codec.decode(spec, codec.encode(spec, wf)).samples - x)))


def file_formats_roundtrip(seed: int = 0) -> bool:
    rng = np.random.default_rng(seed)
    lat = rng.standard_normal((32, 17)).astype(np.float32)
    emb = rng.standard_normal(48).astype(np.float32)
    with tempfile.TemporaryDirectory() as d:
        codec.write_latent_file(Path(d) / "a.vblt", lat)
        asv_eval.write_embedding_file(Path(d) / "a.vbem", emb)
        lat2 = codec.read_latent_file(Path(d) / "a.vblt")
        emb2 = asv_eval.read_embedding_file(Path(d) / "a.vbem")
    return lat.tobytes() == lat2.tobytes() and emb.tobytes() == emb2.tobytes()


def oracle_recovery_error(schedule: NoiseSchedule, num_steps: int, seed: int = 0, shape=(8, 20)) -> float:
    """Max |purify(z0) - z0| under the analytic predictor (no perturbation)."""
    z0 = np.random.default_rng(seed).standard_normal(shape)
    cfg = purifier.PurifyConfig(num_inference_steps=num_steps, seed=seed)
    out = purifier.purify(z0, purifier.OracleDenoiser(z0, schedule), cfg, schedule)
    return float(np.max(np.abs(out - z0)))


def dataset_statistics(train_manifest, test_manifest, spec: codec.CodecSpec, num_enroll: int, n_bands: int = 24) -> dict:
    """Separability and protection strength of a generated dataset under the stub embedder.

    ``min_speaker_gap`` is the smallest per-speaker difference between the mean genuine
    and mean impostor cosine on the development (train) split. ``protected_below_tau`` is
    the share of held-out protected utterances scoring below the calibrated threshold.
    """

    def embed(path):
        return asv_eval.embed(codec.decode(spec, codec.read_latent_file(path).astype(np.float64)), n_bands)

    def by_speaker(entries, attr):
        out = {}
        for e in entries:
            out.setdefault(e.speaker_id, []).append(embed(getattr(e, attr)))
        return out

    dev = by_speaker(synthkit.read_manifest(train_manifest), "clean_path")
    centroids = {s: asv_eval.make_centroid(s, v[:num_enroll]).centroid for s, v in dev.items()}
    gaps, genuine, impostor = [], [], []
    for spk, embs in dev.items():
        gen = [asv_eval.cosine_score(e, centroids[spk]) for e in embs[num_enroll:]]
        imp = [asv_eval.cosine_score(e, c) for e in embs[num_enroll:] for o, c in centroids.items() if o != spk]
        gaps.append(np.mean(gen) - np.mean(imp))
        genuine += gen
        impostor += imp
    tau = asv_eval.compute_eer(genuine, impostor).tau

    test = synthkit.read_manifest(test_manifest)
    clean = by_speaker(test, "clean_path")
    protected = by_speaker(test, "protected_path")
    below = []
    for spk, embs in protected.items():
        c = asv_eval.make_centroid(spk, clean[spk][:num_enroll]).centroid
        below += [asv_eval.cosine_score(e, c) < tau for e in embs[num_enroll:]]
    return {"min_speaker_gap": float(min(gaps)), "tau": tau, "protected_below_tau": float(np.mean(below))}


def run_all(ctx=None) -> list:
    """``(name, passed, detail)`` for each check, on reduced sizes."""
    schedule = ctx.config.make_schedule() if ctx is not None else make_cosine_schedule(200)
    full = make_cosine_schedule(schedule.num_steps)
    results = []

    def record(name, fn):
        start = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), f"{detail} ({time.perf_counter() - start:.2f}s)"))

    def identities():
        errs = [identity_errors(s, trials=200) for s in (schedule, full)]
        worst = {k: max(e[k] for e in errs) for k in errs[0]}
        ok = worst["coefficient"] < 1e-12 and worst["endpoint"] < 1e-9 and worst["reconstruction"] < 1e-6
        return ok, ", ".join(f"{k}={v:.2e}" for k, v in worst.items())

    def roundtrip():
        err = codec_roundtrip_error()
        return err <= 1e-6 and file_formats_roundtrip(), f"max error {err:.2e}"

    def gradients():
        err = gradient_check()
        return err < 1e-4, f"max relative error {err:.2e}"

    def oracles():
        bad = eer_oracle_mismatches(100) + arr_oracle_mismatches(100)
        return bad == 0, f"{bad} mismatches"

    def ddim():
        errs = [oracle_recovery_error(s, k) for s, k in itertools.product((schedule, full), (1, 5, 10))]
        return max(errs) < 1e-5, f"max error {max(errs):.2e}"

    record("schedule identities", identities)
    record("codec round-trip", roundtrip)
    record("gradient check", gradients)
    record("oracle EER/ARR", oracles)
    record("DDIM oracle recovery", ddim)

    if ctx is not None and ctx.manifest("train").exists() and ctx.manifest("test").exists():

        def dataset():
            st = dataset_statistics(
                ctx.manifest("train"), ctx.manifest("test"), ctx.config.make_codec(), ctx.config.eval.num_enroll, ctx.config.eval.embed_bands
            )
            ok = st["min_speaker_gap"] >= 0.1 and st["protected_below_tau"] >= 0.7
            return ok, f"min genuine-impostor gap {st['min_speaker_gap']:.3f}, protected below tau {st['protected_below_tau']:.2f}"

        record("dataset separability and protection", dataset)
    return results
