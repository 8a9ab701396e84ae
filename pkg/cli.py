"""
pcodec: corpus generation, training, encode/decode with partition edits, evaluation.

Every subcommand prints its resolved configuration as JSON before running.
Failures exit with the code attached to the raised error (see errors.py);
argparse usage errors exit with 2.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from augment import CorpusConfig, NoiseMixParams, Task, build_corpus, make_pair
from bitstream import StreamHeader, drop_partitions, pack, unpack
from codec import PRESETS, Codec, decode, encode, scale_partition, swap_partition, trimmed
from dsp import read_wav, write_wav
from errors import CodecError, ConfigError, FormatError
from evaluation import SWEEP_FACTORS, run_evaluation
from trainer import TrainConfig, run_training

logger = logging.getLogger("pcodec")


def _print_config(command: str, config: dict):
    print(json.dumps({"command": command, **config}, indent=2, sort_keys=True))


def _mkdir(path: Path):
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {path}: {e}") from e


def _corpus_config(args) -> CorpusConfig:
    if getattr(args, "corpus", None):
        return CorpusConfig.load(args.corpus)
    return CorpusConfig(seed=args.seed, count=args.count, duration_s=args.duration)


# === SUBCOMMANDS ===

def cmd_presets(args) -> int:
    names = [args.name] if args.name else sorted(PRESETS)
    for name in names:
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    _print_config("presets", {name: PRESETS[name].to_dict() for name in names})
    return 0


def cmd_corpus(args) -> int:
    """Materialize the clean corpus as WAVs plus a manifest; optional pair annotations."""
    config = _corpus_config(args)
    out = Path(args.out)
    _print_config("corpus", {"corpus": config.to_dict(), "out": str(out), "task": args.task, "pairs": args.pairs})
    _mkdir(out)

    corpus = build_corpus(config)
    names = []
    for i, w in enumerate(corpus):
        name = f"clean_{i:04d}.wav"
        write_wav(out / name, w)
        names.append(name)
    manifest = CorpusConfig(seed=config.seed, count=len(names), duration_s=config.duration_s, wav_paths=tuple(names))
    (out / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")

    if args.task and args.pairs:
        task = Task(args.task)
        lines = [json.dumps(make_pair(task, corpus, config.seed, i).annotation(), sort_keys=True)
                 for i in range(args.pairs)]
        (out / "pairs.jsonl").write_text("".join(line + "\n" for line in lines))
    print(f"✅ Wrote {len(names)} clean items to {out}")
    return 0


def cmd_augment(args) -> int:
    """Write training pairs to WAV for listening, with one annotation line per pair."""
    config = _corpus_config(args)
    task, out = Task(args.task), Path(args.out)
    noise = NoiseMixParams(args.gain_mean_db, args.gain_std_db)
    _print_config("augment", {"corpus": config.to_dict(), "task": task.value, "pairs": args.pairs,
                              "noise": {"gain_mean_db": noise.gain_mean_db, "gain_std_db": noise.gain_std_db},
                              "out": str(out)})
    _mkdir(out)

    corpus = build_corpus(config)
    lines = []
    for i in range(args.pairs):
        pair = make_pair(task, corpus, config.seed, i, noise)
        for role in ("input_a", "target_a", "input_b", "target_b", "transplanted"):
            write_wav(out / f"pair_{i:04d}_{role}.wav", getattr(pair, role))
        lines.append(json.dumps(pair.annotation(), sort_keys=True))
    (out / "pairs.jsonl").write_text("".join(line + "\n" for line in lines))
    print(f"✅ Wrote {args.pairs} {task.value} pairs to {out}")
    return 0


def cmd_train(args) -> int:
    config = TrainConfig.load(args.config) if args.config else TrainConfig(preset=args.preset)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["phase1_steps"] = args.steps
    if args.adversarial_steps is not None:
        overrides.update(phase2_steps=args.adversarial_steps, adversarial=args.adversarial_steps > 0)
    config = replace(config, **overrides)
    _print_config("train", {"train": config.to_dict(), "codec": config.codec_config().to_dict(),
                            "out": args.out, "resume": args.resume})
    path = run_training(config, args.out, args.resume)
    print(f"✅ Checkpoint: {path}")
    return 0


def cmd_encode(args) -> int:
    codec = Codec.load(args.checkpoint)
    _print_config("encode", {"input": args.input, "checkpoint": args.checkpoint, "out": args.out,
                             "codec": codec.config.to_dict()})
    x = read_wav(args.input)
    z = encode(x, codec)
    data = pack(codec.to_codes(z), StreamHeader.from_config(codec.config, len(x)))
    try:
        Path(args.out).write_bytes(data)
    except OSError as e:
        raise ConfigError(f"cannot write {args.out}: {e}") from e
    print(f"✅ {len(x)} samples -> {len(data)} bytes ({z.num_frames} frames)")
    return 0


def _read_stream(path: str, codec: Codec, drop: list[str]):
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    if drop:
        data = drop_partitions(data, drop)
    header, codes = unpack(data)
    expected = StreamHeader.from_config(codec.config, header.original_length)
    layout = [(e.name, e.dim, e.divisor, e.n_q, e.bits) for e in header.partitions]
    if header.frame_samples != expected.frame_samples or layout != [
            (e.name, e.dim, e.divisor, e.n_q, e.bits) for e in expected.partitions]:
        raise FormatError(f"{path}: stream layout does not match the checkpoint's codec config")
    original_length = min(header.original_length, codes.num_frames * header.frame_samples)
    return codec.from_codes(codes, original_length)


def _parse_weight(text: str) -> tuple[str, float]:
    name, sep, value = text.partition("=")
    try:
        if not sep:
            raise ValueError
        return name, float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected PARTITION=WEIGHT, got {text!r}")


def cmd_decode(args) -> int:
    codec = Codec.load(args.checkpoint)
    edits = {"drop": args.drop, "weight": dict(args.weight), "swap_from": args.swap_from,
             "allow_amplify": args.allow_amplify}
    _print_config("decode", {"input": args.input, "checkpoint": args.checkpoint, "out": args.out, "edits": edits})

    z = _read_stream(args.input, codec, args.drop)
    if args.swap_from:
        other_path, name = args.swap_from
        z, _ = swap_partition(z, _read_stream(other_path, codec, []), name)
    for name, w in args.weight:
        z = scale_partition(z, name, w, args.allow_amplify)
    w = trimmed(decode(z, codec), z.original_length)
    write_wav(args.out, w)
    print(f"✅ Decoded {len(w)} samples to {args.out}")
    return 0


def cmd_eval(args) -> int:
    codec = Codec.load(args.checkpoint)
    factors = tuple(args.factors) if args.factors else SWEEP_FACTORS
    _print_config("eval", {"kind": args.kind, "checkpoint": args.checkpoint, "out": args.out, "count": args.count,
                           "seed": args.seed, "factors": list(factors), "plot": args.plot,
                           "duration": args.duration, "allow_amplify": args.allow_amplify})
    for path in run_evaluation(args.kind, codec, args.out, args.count, args.seed, factors, args.plot,
                               args.duration, args.allow_amplify):
        print(f"📄 {path}")
    return 0


# === PARSER ===

def _factor_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcodec", description="Partitioned streaming neural audio codec")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("presets", help="print shipped codec presets")
    p.add_argument("--name")
    p.set_defaults(func=cmd_presets)

    for name, func, help_text in (("corpus", cmd_corpus, "write the clean corpus as WAVs"),
                                  ("augment", cmd_augment, "write augmented training pairs as WAVs")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--corpus", help="corpus manifest (JSON); overrides --count/--duration")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--count", type=int, default=16)
        p.add_argument("--duration", type=float, default=1.92)
        p.add_argument("--out", required=True)
        p.add_argument("--task", choices=[t.value for t in Task], required=name == "augment")
        p.add_argument("--pairs", type=int, default=0 if name == "corpus" else 4)
        if name == "augment":
            p.add_argument("--gain-mean-db", type=float, default=NoiseMixParams.gain_mean_db)
            p.add_argument("--gain-std-db", type=float, default=NoiseMixParams.gain_std_db)
        p.set_defaults(func=func)

    p = sub.add_parser("train", help="train a codec")
    p.add_argument("--config", help="training config (JSON)")
    p.add_argument("--preset", choices=sorted(PRESETS), default="noise-toy")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="reconstruction-phase steps")
    p.add_argument("--adversarial-steps", type=int, help="adversarial-phase steps (enables the phase when > 0)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="WAV -> .pcdc")
    p.add_argument("input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help=".pcdc -> WAV, with optional partition edits")
    p.add_argument("input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--drop", action="append", default=[], metavar="PARTITION")
    p.add_argument("--weight", action="append", default=[], type=_parse_weight, metavar="PARTITION=W")
    p.add_argument("--swap-from", nargs=2, metavar=("OTHER_PCDC", "PARTITION"))
    p.add_argument("--allow-amplify", action="store_true", help="accept weights above 1")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="evaluation harnesses on a held-out synthetic set")
    p.add_argument("kind", choices=["denoise", "swap", "sweep"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--factors", type=_factor_list)
    p.add_argument("--duration", type=float, default=1.92, help="held-out item length in seconds")
    p.add_argument("--allow-amplify", action="store_true", help="accept sweep factors above 1")
    p.add_argument("--plot", action="store_true", help="also write PNG plots")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(levelname)s:%(name)s: %(message)s'
    )
    # Reduce noise from third-party libraries
    logging.getLogger('matplotlib').setLevel(logging.WARNING)
    logging.getLogger('numba').setLevel(logging.WARNING)

    try:
        return args.func(args)
    except CodecError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
