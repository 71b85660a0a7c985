"""Command-line entry point: ``diffbridge {gen,train,purify,eval,selfcheck}``.

Layout under ``--out``::

    data/      manifests, clean / protected / residual latents, alignments   (gen)
    train/     checkpoint.vbck, train_log.jsonl, train_report.json          (train)
    purify/    latents/*.vblt, wav/*.wav, trials.tsv                        (purify)
    eval/      calibration.txt, metrics.jsonl, summary.txt                  (eval)
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import asv_eval, codec, denoiser, guidance, purifier, synthkit, trainer
from .config import ConfigError, ExperimentConfig, dump_config, load_config

log = logging.getLogger("diffbridge")

EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4
EXIT_CHECK_FAILED = 5


class UsageError(Exception):
    pass


class MissingInput(Exception):
    pass


@dataclass
class Context:
    config: ExperimentConfig
    out: Path

    @property
    def data_dir(self) -> Path:
        d = self.config.dataset.dir
        if d is None:
            return self.out / "data"
        return Path(d) if Path(d).is_absolute() else self.out / d

    def manifest(self, split: str) -> Path:
        return self.data_dir / f"{split}.tsv"

    @property
    def checkpoint(self) -> Path:
        return self.out / "train" / "checkpoint.vbck"


def _require(path: Path) -> Path:
    if not Path(path).exists():
        raise MissingInput(f"missing input {path}")
    return Path(path)


def _read_latent(path) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".wav":
        raise UsageError(f"{p}: waveform inputs need the codec; use latent files here")
    return codec.read_latent_file(_require(p))


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _guidance_values(ctx: Context, entry, latent: np.ndarray) -> np.ndarray | None:
    """Unscaled guidance for a latent: alignment file plus the decoded waveform's energy."""
    align_path = Path(entry.alignment_path)
    alignment = guidance.load_alignment_file(align_path) if align_path.exists() else None
    spec = ctx.config.make_codec()
    wav = codec.decode(spec, latent)
    track = guidance.guidance_from_alignment(alignment, wav, spec.frame_size, latent.shape[1], ctx.config.guidance.gamma)
    return track.values if track.present else None


def load_pairs(ctx: Context, split: str, with_guidance: bool) -> list:
    samples = []
    for e in synthkit.read_manifest(_require(ctx.manifest(split))):
        z_c = _read_latent(e.clean_path)
        eps_a = _read_latent(synthkit.residual_path(e))
        g = _guidance_values(ctx, e, z_c.astype(np.float64)) if with_guidance else None
        samples.append(trainer.PairedSample(z_c, eps_a, g, e.speaker_id, e.utt_id))
    if not samples:
        raise UsageError(f"{ctx.manifest(split)} lists no utterances")
    return samples


# -- commands -------------------------------------------------------------------------


def cmd_gen(ctx: Context) -> dict:
    cfg = ctx.config
    d = cfg.dataset
    train_path, test_path = synthkit.build_dataset(
        d.num_speakers,
        d.utts_per_speaker,
        cfg.make_perturbations(),
        cfg.make_codec(),
        d.split_ratio,
        ctx.data_dir,
        seed=cfg.seed,
        duration_s=d.duration_s,
    )
    return {"train_manifest": str(train_path), "test_manifest": str(test_path)}


def cmd_train(ctx: Context) -> dict:
    cfg = ctx.config
    guided = cfg.train.guidance_enabled
    train_set = load_pairs(ctx, "train", guided)
    val_set = load_pairs(ctx, "test", guided)
    schedule = cfg.make_schedule()
    tcfg = cfg.make_train_config()
    out = ctx.out / "train"
    out.mkdir(parents=True, exist_ok=True)
    report = trainer.train(train_set, tcfg, cfg.make_denoiser_config(), schedule, out_dir=out, log_path=out / "train_log.jsonl")
    val = trainer.evaluate_loss(report.model, val_set, schedule, tcfg, report.data_scale, seed=cfg.seed + 1)
    summary = {
        "checkpoint": str(report.checkpoint_path),
        "checkpoint_sha256": _sha256(report.checkpoint_path),
        "data_scale": report.data_scale,
        "total_steps": report.total_steps,
        "epochs": report.epochs,
        "val_bridge_loss": val["bridge_loss"],
        "val_total": val["total"],
        "wall_clock_s": report.wall_clock,
    }
    (out / "train_report.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


def cmd_purify(ctx: Context, manifest: Path | None = None, checkpoint: Path | None = None) -> dict:
    cfg = ctx.config
    entries = synthkit.read_manifest(_require(manifest or ctx.manifest("test")))
    if not entries:
        raise UsageError("input manifest lists no utterances")
    model, meta = denoiser.load_checkpoint(_require(checkpoint or ctx.checkpoint))
    schedule = cfg.make_schedule()
    stored = meta.get("schedule", {})
    if stored and (stored.get("num_steps"), stored.get("horizon")) != (schedule.num_steps, schedule.horizon):
        raise UsageError(f"checkpoint was trained with schedule {stored}, config asks for a different one")
    pcfg = cfg.make_purify_config()
    if model.config.guidance_enabled != pcfg.guidance_enabled:
        raise UsageError("checkpoint guidance setting differs from train.guidance_enabled")
    spec = cfg.make_codec()
    out = ctx.out / "purify"
    (out / "latents").mkdir(parents=True, exist_ok=True)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    scale = float(meta.get("data_scale", 1.0))
    seen = defaultdict(int)
    trials = []
    for e in entries:
        z_a = _read_latent(e.protected_path).astype(np.float64)
        g = _guidance_values(ctx, e, z_a) if pcfg.guidance_enabled else None
        z_pur = purifier.purify(z_a, model, pcfg, schedule, guidance=g, data_scale=scale)
        lat_path = out / "latents" / f"{e.utt_id}.vblt"
        codec.write_latent_file(lat_path, z_pur)
        codec.write_wav(out / "wav" / f"{e.utt_id}.wav", codec.decode(spec, z_pur))
        if seen[e.speaker_id] >= cfg.eval.num_enroll:
            trials.append((e.speaker_id, os.path.relpath(e.protected_path, out), os.path.relpath(lat_path, out)))
        seen[e.speaker_id] += 1
    (out / "trials.tsv").write_text("".join("\t".join(t) + "\n" for t in trials))
    return {"purified": len(entries), "trials": len(trials), "trial_manifest": str(out / "trials.tsv")}


def read_trial_manifest(path) -> list:
    rows = []
    base = Path(path).parent
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise UsageError(f"{path}:{lineno}: expected speaker_id, protected_path, purified_path")
        spk, *paths = parts
        rows.append((spk, *[str(p if Path(p).is_absolute() else base / p) for p in paths]))
    return rows


def _embed_latent(ctx: Context, path) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".wav":
        wav = codec.read_wav(_require(p))
    else:
        wav = codec.decode(ctx.config.make_codec(), _read_latent(p).astype(np.float64))
    return asv_eval.embed(wav, ctx.config.eval.embed_bands)


def _embeddings_by_speaker(ctx: Context, entries) -> dict:
    by_spk = defaultdict(list)
    for e in entries:
        by_spk[e.speaker_id].append(_embed_latent(ctx, e.clean_path))
    return dict(by_spk)


def cmd_eval(ctx: Context, trial_manifest: Path | None = None, calibration: Path | None = None) -> dict:
    cfg = ctx.config
    n_enroll = cfg.eval.num_enroll
    trial_rows = read_trial_manifest(_require(trial_manifest or ctx.out / "purify" / "trials.tsv"))
    if not trial_rows:
        raise UsageError("trial manifest is empty")
    dev_entries = synthkit.read_manifest(_require(ctx.manifest("train")))
    test_entries = synthkit.read_manifest(_require(ctx.manifest("test")))
    asv_eval.check_disjoint([e.utt_id for e in dev_entries], [e.utt_id for e in test_entries])

    out = ctx.out / "eval"
    out.mkdir(parents=True, exist_ok=True)
    calibration = calibration or (Path(cfg.eval.calibration) if cfg.eval.calibration else None)
    if calibration is not None and Path(calibration).exists():
        cal = asv_eval.read_calibration(calibration)
    else:
        genuine, impostor = asv_eval.score_sets(_embeddings_by_speaker(ctx, dev_entries), n_enroll)
        cal = asv_eval.calibrate(genuine, impostor, calibration or out / "calibration.txt")
    if calibration is not None and calibration != out / "calibration.txt":
        asv_eval.write_calibration(out / "calibration.txt", cal)

    by_spk = defaultdict(list)
    for e in test_entries:
        by_spk[e.speaker_id].append(e)
    centroids = {
        spk: asv_eval.make_centroid(spk, [_embed_latent(ctx, e.clean_path) for e in es[:n_enroll]])
        for spk, es in by_spk.items()
    }
    clean_of = {str(Path(e.protected_path).resolve()): e.clean_path for e in test_entries}
    records, trials, l2_prot, l2_pur = [], [], [], []
    for spk, prot_path, pur_path in trial_rows:
        if spk not in centroids:
            raise UsageError(f"trial speaker {spk} has no enrollment utterances in the test manifest")
        c = centroids[spk].centroid
        s_prot = asv_eval.cosine_score(_embed_latent(ctx, prot_path), c)
        s_pur = asv_eval.cosine_score(_embed_latent(ctx, pur_path), c)
        trials.append(asv_eval.TrialRecord(spk, s_prot, s_pur))
        rec = {"speaker_id": spk, "protected": Path(prot_path).name, "s_prot": s_prot, "s_pur": s_pur}
        clean_path = clean_of.get(str(Path(prot_path).resolve()))
        if clean_path is not None and Path(prot_path).suffix != ".wav" and Path(pur_path).suffix != ".wav":
            z_c = _read_latent(clean_path).astype(np.float64)
            l2_prot.append(float(np.linalg.norm(_read_latent(prot_path) - z_c)))
            l2_pur.append(float(np.linalg.norm(_read_latent(pur_path) - z_c)))
        records.append(rec)
    arr = asv_eval.compute_arr(trials, cal.tau)
    metrics = {
        "eer": cal.eer,
        "tau": cal.tau,
        "arr": arr,
        "num_trials": len(trials),
        "num_rejected_protected": sum(t.s_prot < cal.tau for t in trials),
        "mean_latent_l2_protected": float(np.mean(l2_prot)) if l2_prot else None,
        "mean_latent_l2_purified": float(np.mean(l2_pur)) if l2_pur else None,
    }
    with open(out / "metrics.jsonl", "w") as f:
        for rec in records:
            f.write(json.dumps({"type": "trial", **rec}, sort_keys=True) + "\n")
        f.write(json.dumps({"type": "metrics", **metrics}, sort_keys=True) + "\n")
    summary = _summary(metrics)
    (out / "summary.txt").write_text(summary + "\n")
    return metrics


def _summary(m: dict) -> str:
    arr = "undefined (no protected trial below threshold)" if m["arr"] is None else f"{m['arr']:.4f}"
    lines = [
        f"{asv_eval.format_eer(asv_eval.EerResult(m['eer'], m['tau']))}",
        f"ARR={arr} over {m['num_rejected_protected']} rejected of {m['num_trials']} protected trials",
    ]
    if m["mean_latent_l2_protected"] is not None:
        lines.append(
            f"mean latent L2 to clean: protected {m['mean_latent_l2_protected']:.4f}, "
            f"purified {m['mean_latent_l2_purified']:.4f}"
        )
    return "\n".join(lines)


def cmd_selfcheck(ctx: Context) -> dict:
    from . import selfcheck

    results = selfcheck.run_all(ctx)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return {"passed": all(ok for _, ok, _ in results), "checks": len(results)}


# -- entry point ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffbridge", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=["gen", "train", "purify", "eval", "selfcheck"])
    p.add_argument("--config", type=Path, help="experiment YAML file (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, default=Path("run"), help="experiment output directory")
    p.add_argument("--manifest", type=Path, help="purify: input manifest (default: <data>/test.tsv)")
    p.add_argument("--trials", type=Path, help="eval: trial manifest (default: <out>/purify/trials.tsv)")
    p.add_argument("--checkpoint", type=Path, help="purify: checkpoint (default: <out>/train/checkpoint.vbck)")
    p.add_argument("--calibration", type=Path, help="eval: frozen calibration file to reuse or create")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _fail(code: int, kind: str, msg: str) -> int:
    print(f"error kind={kind} code={code} msg={json.dumps(str(msg))}", file=sys.stderr)
    return code


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        cfg = load_config(_require(args.config)) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        cfg.validate()
        ctx = Context(cfg, args.out)
        ctx.out.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, ctx.out / f"config.{args.command}.yaml")
        if args.command == "gen":
            result = cmd_gen(ctx)
        elif args.command == "train":
            result = cmd_train(ctx)
        elif args.command == "purify":
            result = cmd_purify(ctx, args.manifest, args.checkpoint)
        elif args.command == "eval":
            result = cmd_eval(ctx, args.trials, args.calibration)
            print(_summary(result))
        else:
            result = cmd_selfcheck(ctx)
            if not result["passed"]:
                return _fail(EXIT_CHECK_FAILED, "selfcheck", "one or more checks failed")
    except (ConfigError, UsageError) as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except (MissingInput, FileNotFoundError) as exc:
        return _fail(EXIT_MISSING, "missing", exc)
    except (trainer.TrainingError, purifier.PurificationError, ArithmeticError) as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)
    except (codec.LatentFormatError, denoiser.CheckpointError, guidance.AlignmentError, ValueError) as exc:
        return _fail(EXIT_USAGE, "invalid-input", exc)
    if args.command != "eval":
        print(json.dumps({k: v for k, v in result.items() if k != "epochs"}, sort_keys=True))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
