"""Command-line interface.

Subcommands: train, evaluate, separate, make-dataset, plot-spec.
Every flag overrides its config-file key; datasets are either a
directory in the mix_clean/s1/s2 layout or ``synth:SEED:COUNT[:SECONDS]``
for on-the-fly synthetic mixtures.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import dsp
from .data import SynthConfig, SyntheticDataset, load_manifest, read_wav, write_dataset, write_wav
from .pipeline import (
    MetricsLog,
    configs_from_mapping,
    evaluate,
    export_spectrogram_image,
    load_checkpoint,
    parse_config_file,
    train,
)
from .separation import MASK_TYPES, separate


def _resolve_dataset(spec: str):
    if spec.startswith("synth:"):
        parts = spec.split(":")
        if len(parts) not in (3, 4):
            raise ValueError(f"expected synth:SEED:COUNT[:SECONDS], got {spec!r}")
        seed, count = int(parts[1]), int(parts[2])
        duration = float(parts[3]) if len(parts) == 4 else SynthConfig.duration_s
        return SyntheticDataset(seed, count, SynthConfig(duration_s=duration))
    return load_manifest(spec)


def _cmd_train(args) -> int:
    mapping = parse_config_file(args.config) if args.config else {}
    if args.seed is not None:
        mapping["seed"] = str(args.seed)
    if args.steps is not None:
        mapping["steps"] = str(args.steps)
    train_cfg, model_cfg, extra = configs_from_mapping(mapping)
    data_spec = args.data or extra.get("data")
    if not data_spec:
        raise ValueError("no dataset: pass --data or put data=... in the config")
    dataset = _resolve_dataset(data_spec)
    out = args.out or "run"
    log = MetricsLog(Path(out) / "metrics.log" if out else None, echo=args.verbose)
    try:
        _, _, history = train(train_cfg, model_cfg, dataset, out_dir=out, log=log)
    finally:
        log.close()
    final_loss = history[-1][1]
    print(f"trained {len(history)} steps (final loss {final_loss:.6f}); checkpoints in {out}")
    return 0


def _cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build_model()
    dataset = _resolve_dataset(args.data)
    masks = tuple(m.strip() for m in args.masks.split(",") if m.strip())
    for m in masks:
        if m not in MASK_TYPES:
            raise ValueError(f"unknown mask type {m!r}; choose from {MASK_TYPES}")
    summary = evaluate(
        model, dataset, mask_types=masks,
        include_oracle=args.oracle, max_examples=args.max_examples,
    )
    for line in summary.lines():
        print(line)
    for key, value in sorted(summary.kv().items()):
        print(f"{key}={value:.4f}")
    return 0


def _cmd_separate(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build_model()
    mixture = read_wav(args.input)
    refs = None
    if args.refs:
        refs = [read_wav(p.strip()) for p in args.refs.split(",") if p.strip()]
    estimates = separate(mixture, model, mask_type=args.mask, reference_sources=refs)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    for i, wav in enumerate(estimates):
        path = out_dir / f"{stem}_source{i + 1}.wav"
        write_wav(path, wav)
        print(path)
    if refs is None:
        print("note: chunk identities aligned by slot similarity (no references given)")
    return 0


def _cmd_make_dataset(args) -> int:
    dataset = SyntheticDataset(args.seed, args.count, SynthConfig(duration_s=args.duration))
    write_dataset(dataset, args.out)
    print(f"wrote {args.count} examples under {args.out}")
    return 0


def _cmd_plot_spec(args) -> int:
    wav = read_wav(args.input)
    grid = dsp.compress(dsp.stft(wav).magnitude)
    export_spectrogram_image(grid, args.out)
    print(args.out)
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        model = ckpt.build_model()
        chunk = dsp.chunk(wav).chunks[0]
        comp = dsp.compress(dsp.stft(chunk).magnitude).values[:-1]
        preds = model.forward(comp[None]).data[0]
        base = Path(args.out)
        for i in range(preds.shape[0]):
            path = base.with_name(f"{base.stem}_pred{i + 1}{base.suffix or '.pgm'}")
            export_spectrogram_image(np.maximum(preds[i], 0.0), path)
            print(path)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slotsep",
        description="Train, evaluate, and run the slot-based source separator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--steps", type=int, help="overrides the config step count")
    p.add_argument("--data", help="dataset dir or synth:SEED:COUNT[:SECONDS]")
    p.add_argument("--out", help="output directory (checkpoints, metrics.log)")
    p.add_argument("--verbose", action="store_true", help="echo the metrics log to stderr")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="matched SI-SNR/SI-SNRi of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset dir or synth:SEED:COUNT[:SECONDS]")
    p.add_argument("--masks", default="ibm,wiener")
    p.add_argument("--oracle", action=argparse.BooleanOptionalAction, default=True,
                   help="include the oracle-masking rows (default on)")
    p.add_argument("--max-examples", type=int, default=None)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("separate", help="separate one mixture WAV into sources")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True, help="mixture WAV (16 kHz mono PCM16)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mask", default="wiener", choices=MASK_TYPES)
    p.add_argument("--refs", help="comma-separated reference WAVs for chunk alignment")
    p.set_defaults(func=_cmd_separate)

    p = sub.add_parser("make-dataset", help="write a synthetic dataset to disk")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--duration", type=float, default=SynthConfig.duration_s)
    p.set_defaults(func=_cmd_make_dataset)

    p = sub.add_parser("plot-spec", help="export a spectrogram as a PGM image")
    p.add_argument("--in", dest="input", required=True, help="input WAV")
    p.add_argument("--out", required=True, help="output .pgm path")
    p.add_argument("--ckpt", help="also export the model's predicted source spectrograms")
    p.set_defaults(func=_cmd_plot_spec)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
