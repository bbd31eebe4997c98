"""Command-line entry point: synth, train-codec, train-sep, separate, eval, selftest.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path


from . import TRACKS, __version__
from .errors import ToksepError, ValidationError

log = logging.getLogger("toksep")

STEM_FILES = tuple(f"{t}.wav" for t in TRACKS)
MANIFEST = "run_manifest.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


# --------------------------------------------------------------------------
# helpers


def prepare_out_dir(path, force: bool, allow_existing: bool = False) -> Path:
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not allow_existing:
        if not force:
            raise ValidationError(f"output directory {path} already exists and is not empty (use --force)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_rvq_weights(text: str) -> list[float]:
    try:
        weights = [float(w) for w in text.split(",") if w.strip()]
    except ValueError as exc:
        raise ValidationError(f"--rvq-weights must be comma-separated numbers: {text}") from exc
    if not weights or min(weights) <= 0:
        raise ValidationError("--rvq-weights must all be > 0")
    return weights


def build_config(args, extra: dict | None = None, base: dict | None = None):
    from .config import load_config
    from .seeding import seed_from_env

    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = parse_value(v)
    overrides.update({k: v for k, v in (extra or {}).items() if v is not None})
    cfg = load_config(getattr(args, "config", None), overrides, base)
    seed = seed_from_env(getattr(args, "seed", None) if getattr(args, "seed", None) is not None else cfg.seed)
    if seed != cfg.seed or getattr(args, "seed", None) is not None or "TOKSEP_SEED" in os.environ:
        cfg.seed = cfg.codec.seed = cfg.train.seed = cfg.generation.seed = int(seed)
    return cfg


def write_manifest(out_dir, command: str, config: dict | None = None, seeds: dict | None = None, digests: dict | None = None, **extra) -> Path:
    doc = {
        "tool": "toksep",
        "tool_version": __version__,
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "seeds": seeds or {},
        "digests": digests or {},
        "created_unix": time.time(),
        **extra,
    }
    path = Path(out_dir) / MANIFEST
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))
    return path


def list_clip_dirs(data_dir) -> list[Path]:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise ValidationError(f"dataset directory not found: {data_dir}")
    clips = sorted(p for p in data_dir.iterdir() if p.is_dir() and (p / "mixture.wav").exists())
    if not clips:
        raise ValidationError(f"no clips (subdirectories with mixture.wav) in {data_dir}")
    return clips


def read_stems(clip_dir, required=True):
    from .dsp import read_wav

    clip_dir = Path(clip_dir)
    missing = [t for t, f in zip(TRACKS, STEM_FILES) if not (clip_dir / f).exists()]
    if missing and required:
        raise ValidationError(f"missing stems in {clip_dir}: {', '.join(missing)}")
    return [read_wav(clip_dir / f) for f in STEM_FILES]


def load_dataset(data_dir):
    from .dsp import read_wav

    return [(read_wav(c / "mixture.wav"), read_stems(c)) for c in list_clip_dirs(data_dir)]


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from .dsp import write_wav
    from .synth import synthesize_clip, ToySourceSpec
    from .seeding import seed_from_env

    if args.clips < 1:
        raise ValidationError("--clips must be >= 1")
    if not args.seconds > 0:
        raise ValidationError("--seconds must be > 0")
    seed = seed_from_env(args.seed)
    out = prepare_out_dir(args.out, args.force)
    for i in range(args.clips):
        mix, stems = synthesize_clip(ToySourceSpec(seed=seed, clip_id=args.first_id + i), args.seconds, args.sample_rate)
        d = out / f"clip_{args.first_id + i:05d}"
        d.mkdir()
        write_wav(d / "mixture.wav", mix)
        for f, s in zip(STEM_FILES, stems):
            write_wav(d / f, s)
    write_manifest(out, "synth", {"clips": args.clips, "seconds": args.seconds, "sample_rate_hz": args.sample_rate, "first_id": args.first_id}, {"seed": seed})
    print(f"wrote {args.clips * 5} WAV files to {out}")
    return 0


def cmd_train_codec(args) -> int:
    from .codec import codec_config_dict, train_codec

    cfg = build_config(args, {"codec.epochs": args.epochs})
    data = load_dataset(args.data)
    signals = [a for mix, stems in data for a in [mix, *stems]]
    val = None
    if args.val_data:
        val = [a for mix, stems in load_dataset(args.val_data) for a in [mix, *stems]]
    out = prepare_out_dir(args.out, args.force)
    model, hist = train_codec(signals, cfg.codec, val=val, out_dir=out)
    summary = {k: v for k, v in hist.items() if k != "steps"}
    write_manifest(out, "train-codec", {"codec": codec_config_dict(cfg.codec)}, {"seed": cfg.codec.seed}, {"codec": model.digest()}, history=summary)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_train_sep(args) -> int:
    from .checkpoint import module_digest
    from .codec import load_codec
    from .plotting import plot_loss_curve
    from .train import train_separator

    extra = {"train.max_steps": args.steps, "train.epochs": args.epochs}
    if args.rvq_weights:
        extra["train.rvq_loss_weights"] = parse_rvq_weights(args.rvq_weights)
    codec = load_codec(args.codec)
    base = None
    if args.resume:
        from .checkpoint import read_manifest

        base = read_manifest(args.resume)["config"]
    cfg = build_config(args, extra, base)
    cfg.codec = codec.cfg
    same_dir = args.resume and Path(args.resume).resolve() == Path(args.out).resolve()
    out = prepare_out_dir(args.out, args.force, allow_existing=bool(same_dir))
    data = load_dataset(args.data)

    def progress(rec):
        if rec["step"] % max(1, args.log_every) == 0:
            log.info("step %d lr %.3g loss %.4f", rec["step"], rec["lr"], rec["loss"])

    result = train_separator(data, codec, cfg, out_dir=out, resume=args.resume, progress=progress)
    plot_loss_curve(result.history, out / "loss_curve.png")
    write_manifest(
        out,
        "train-sep",
        result.model.cfg.to_dict(),
        {"seed": cfg.seed, "train": cfg.train.seed},
        {"codec": result.codec_digest, "separator": module_digest(result.model)},
        rvq_loss_weights=cfg.train.loss_weights(cfg.lm.rvq_layers),
        steps=len(result.history),
        seconds=result.seconds,
    )
    last = result.history[-1] if result.history else None
    print(json.dumps({"steps": len(result.history), "final_loss": last and last["loss"], "out": str(out)}))
    return 0


def cmd_separate(args) -> int:
    from .codec import load_codec, write_token_dump
    from .config import GenerationConfig
    from .dsp import read_wav, resample, write_wav
    from .infer import separate_detailed
    from .model import load_separator
    from .seqlayout import deinterleave
    from .seeding import seed_from_env

    codec = load_codec(args.codec)
    model, manifest, _ = load_separator(args.model)
    gen = GenerationConfig(**{**model.cfg.generation.__dict__})
    if args.mode:
        gen.mode = args.mode
    if args.temperature is not None:
        gen.temperature = args.temperature
    if args.top_k is not None:
        gen.top_k = args.top_k
    if args.no_enforce_length:
        gen.enforce_length = False
    gen.seed = seed_from_env(gen.seed if args.seed is None else args.seed)
    gen.__post_init__()
    mixture = read_wav(args.mixture)
    if mixture.sample_rate_hz != codec.cfg.sample_rate_hz:
        mixture = resample(mixture, codec.cfg.sample_rate_hz)
    out = prepare_out_dir(args.out, args.force)
    result = separate_detailed(mixture, codec, model, gen)
    for f, s in zip(STEM_FILES, result.stems):
        write_wav(out / f, s)
    if args.tokens:
        for w, res in enumerate(result.windows):
            for t in res.tracks:
                a, s = deinterleave(t, codec.cfg.frame_rate_hz, codec.cfg.codebook_size)
                suffix = "" if len(result.windows) == 1 else f".w{w:03d}"
                write_token_dump(out / f"{t.track}{suffix}.acoustic.tok", a, codec.cfg.codebook_size)
                write_token_dump(out / f"{t.track}{suffix}.semantic.tok", s, codec.cfg.codebook_size)
    if args.plot:
        from .plotting import plot_spectrograms

        plot_spectrograms(mixture, result.stems, out / "spectrograms.png")
    write_manifest(
        out,
        "separate",
        model.cfg.to_dict(),
        {"generation": gen.seed},
        {"codec": codec.digest(), "separator_checkpoint": manifest.get("digest")},
        generation=gen.__dict__,
        windows=len(result.windows),
    )
    print(f"wrote {', '.join(STEM_FILES)} to {out}")
    return 0


def cmd_eval(args) -> int:
    from .codec import load_codec, read_token_dump
    from .dsp import read_wav
    from .infer import evaluate, no_separation_baseline, write_report
    from .plotting import plot_metrics, plot_spectrograms
    from .seqlayout import interleave

    codec = load_codec(args.codec)
    ref_dir, est_dir = Path(args.ref), Path(args.est)
    missing = [t for t, f in zip(TRACKS, STEM_FILES) if not (ref_dir / f).exists()]
    if missing:
        raise ValidationError(f"missing stems in {ref_dir}: {', '.join(missing)}")
    missing = [t for t, f in zip(TRACKS, STEM_FILES) if not (est_dir / f).exists()]
    if missing:
        raise ValidationError(f"missing stems in {est_dir}: {', '.join(missing)}")
    refs = read_stems(ref_dir)
    ests = read_stems(est_dir)
    mix_path = Path(args.mixture) if args.mixture else ref_dir / "mixture.wav"
    ref_tokens = est_tokens = None
    if all((est_dir / f"{t}.acoustic.tok").exists() and (est_dir / f"{t}.semantic.tok").exists() for t in TRACKS):
        est_tokens, ref_tokens = [], []
        for t, r in zip(TRACKS, refs):
            a = read_token_dump(est_dir / f"{t}.acoustic.tok", "acoustic", codec.cfg.frame_rate_hz)
            s = read_token_dump(est_dir / f"{t}.semantic.tok", "semantic", codec.cfg.frame_rate_hz)
            est_tokens.append(interleave(a, s).tokens)
            ref_tokens.append(interleave(*codec.encode(r)).tokens)
    report = {"estimate": evaluate(refs, ests, codec, ref_tokens, est_tokens)}
    if mix_path.exists():
        mixture = read_wav(mix_path)
        report["baseline"] = no_separation_baseline(refs, mixture, codec)
    out = prepare_out_dir(args.out, args.force)
    write_report(report, out)
    plot_metrics(report, out / "metrics.png")
    if mix_path.exists():
        plot_spectrograms(mixture, ests, out / "spectrograms.png", references=refs)
    write_manifest(out, "eval", None, {}, {"codec": codec.digest()}, ref=str(ref_dir), est=str(est_dir))
    print(json.dumps(report, indent=2))
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest() else 2


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="toksep", description="Token-based four-stem music source separation (desk scale).")
    p.add_argument("--version", action="version", version=f"toksep {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic four-stem dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--clips", type=int, default=200)
    s.add_argument("--seconds", type=float, default=4.0)
    s.add_argument("--sample-rate", type=int, default=48000)
    s.add_argument("--first-id", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    def common(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, e.g. train.lr=1e-3")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--force", action="store_true")

    s = sub.add_parser("train-codec", help="train the desk codec")
    s.add_argument("--data", required=True)
    s.add_argument("--val-data")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    common(s)
    s.set_defaults(func=cmd_train_codec)

    s = sub.add_parser("train-sep", help="train the conditional encoder and LM")
    s.add_argument("--data", required=True)
    s.add_argument("--codec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--rvq-weights", help="comma-separated per-layer loss weights, e.g. 8,4,3,2,2,2,2,2")
    s.add_argument("--resume", help="separator checkpoint directory to continue from")
    s.add_argument("--log-every", type=int, default=25)
    common(s)
    s.set_defaults(func=cmd_train_sep)

    s = sub.add_parser("separate", help="separate one mixture into four stems")
    s.add_argument("mixture")
    s.add_argument("--codec", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=["greedy", "sampled"])
    s.add_argument("--temperature", type=float)
    s.add_argument("--top-k", type=int)
    s.add_argument("--no-enforce-length", action="store_true")
    s.add_argument("--tokens", action="store_true", help="also write per-track token dumps")
    s.add_argument("--plot", action="store_true", help="write spectrograms.png")
    s.add_argument("--seed", type=int)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_separate)

    s = sub.add_parser("eval", help="score estimates against references")
    s.add_argument("--ref", required=True)
    s.add_argument("--est", required=True)
    s.add_argument("--codec", required=True)
    s.add_argument("--mixture", help="mixture WAV for the no-separation baseline (default REF/mixture.wav)")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("selftest", help="run the fast invariant suite")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return int(args.func(args) or 0)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ToksepError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
