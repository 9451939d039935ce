"""Operator surface: dataset synthesis, training, evaluation, inference,
attention export.

All commands read an optional JSON run config with sections "model",
"frontend", "train", and "synth"; unknown sections or keys are rejected and
every flag overrides its config key. The effective configuration is echoed
to the run directory. Exit codes: 0 ok, 2 usage, 3 data error, 4 numeric
abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .datasets import SynthConfig, build_dataset, read_manifest
from .dsp import FrontendConfig, load_wav_8k, waveform_to_mel
from .errors import (CheckpointError, ConfigError, InputError, MetricError,
                     NumericError, UsageError, VadForgeError)
from .metrics import (attention_report, evaluate_dataset, roc_curve,
                      write_attention_csv, write_attention_json, write_roc_csv)
from .model import ModelConfig, predict_sequence, smooth
from .training import TrainConfig, prepare_features, train

_SECTIONS = {
    "model": ModelConfig,
    "frontend": FrontendConfig,
    "train": TrainConfig,
    "synth": SynthConfig,
}


def _section_defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        v = f.default
        if v is dataclasses.MISSING:
            v = f.default_factory()
        out[f.name] = dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v
    return out


def load_run_config(path=None) -> dict:
    """Defaults merged with the config file; unknown keys are rejected."""
    cfg = {name: _section_defaults(cls) for name, cls in _SECTIONS.items()}
    if path is None:
        return cfg
    with open(path, "r", encoding="utf-8") as f:
        user = json.load(f)
    if not isinstance(user, dict):
        raise UsageError(f"{path}: run config must be a JSON object")
    for section, values in user.items():
        if section not in cfg:
            raise UsageError(
                f"{path}: unknown config section {section!r} "
                f"(known: {sorted(cfg)})")
        if not isinstance(values, dict):
            raise UsageError(f"{path}: section {section!r} must be an object")
        for key, value in values.items():
            if key not in cfg[section]:
                raise UsageError(
                    f"{path}: unknown key {section}.{key} "
                    f"(known: {sorted(cfg[section])})")
            if key == "spec_augment" and isinstance(value, dict):
                for sub in value:
                    if sub not in cfg[section][key]:
                        raise UsageError(
                            f"{path}: unknown key {section}.{key}.{sub}")
                cfg[section][key] = {**cfg[section][key], **value}
            else:
                cfg[section][key] = value
    return cfg


def _override(cfg: dict, section: str, key: str, value) -> None:
    if value is not None:
        cfg[section][key] = value


def echo_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w", encoding="utf-8") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_run_config(args.config)
    _override(cfg, "synth", "seed", args.seed)
    _override(cfg, "synth", "duration_s", args.duration)
    _override(cfg, "synth", "test_duration_s", args.test_duration)
    _override(cfg, "synth", "speech_dir", args.speech_dir)
    _override(cfg, "synth", "noise_dir", args.noise_dir)
    synth_cfg = SynthConfig(**cfg["synth"])
    out = Path(args.out)
    echo_config(cfg, out)
    records = build_dataset(out, args.n_train, args.n_val, args.n_test, synth_cfg)
    print(f"wrote {len(records)} examples to {out} "
          f"(train={args.n_train} val={args.n_val} test={args.n_test})")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    _override(cfg, "train", "seed", args.seed)
    _override(cfg, "train", "epochs", args.epochs)
    _override(cfg, "train", "batch_size", args.batch_size)
    _override(cfg, "train", "lr", args.lr)
    _override(cfg, "train", "crop_frames", args.crop_frames)
    train_cfg = TrainConfig(**cfg["train"])
    model_cfg = ModelConfig(**cfg["model"])
    frontend = FrontendConfig(**cfg["frontend"])
    out = Path(args.out)
    echo_config(cfg, out)
    result = train(args.manifest, train_cfg, model_cfg, frontend,
                   out_dir=out, log=print)
    print(f"model parameters: {result.model.parameter_count()}")
    print(f"best val AUC {result.best_val_auc:.4f} at epoch {result.best_epoch}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    manifest = Path(args.manifest)
    records = read_manifest(manifest)
    splits = sorted({r["split"] for r in records}) if args.split == "all" \
        else [args.split]
    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent
    out_dir.mkdir(parents=True, exist_ok=True)

    window = args.smooth_window if args.smooth_window is not None \
        else model.config.smoothing_window
    print(f"{'split':<8}{'n':>5}{'AUC%':>9}{'EER%':>9}"
          f"{'AUC%/utt':>10}{'EER%/utt':>10}")
    for split in splits:
        recs = [r for r in records if r["split"] == split]
        if not recs:
            raise InputError(f"{manifest}: no examples in split {split!r}")
        data = prepare_features(recs, manifest.parent, model.frontend)
        pairs = []
        for mel, labels in data:
            probs = predict_sequence(model, mel, args.segment_frames)
            pairs.append((smooth(probs, window), labels))
        res = evaluate_dataset(pairs)
        mu = res["mean_per_utterance"] or {"auc": float("nan"), "eer": float("nan")}
        print(f"{split:<8}{len(recs):>5}"
              f"{100 * res['pooled']['auc']:>9.2f}"
              f"{100 * res['pooled']['eer']:>9.2f}"
              f"{100 * mu['auc']:>10.2f}{100 * mu['eer']:>10.2f}")
        scores = np.concatenate([p for p, _ in pairs])
        labels = np.concatenate([l for _, l in pairs])
        fpr, tpr, thr = roc_curve(scores, labels)
        name = "roc.csv" if len(splits) == 1 else f"roc_{split}.csv"
        write_roc_csv(out_dir / name, fpr, tpr, thr)
    return 0


def cmd_infer(args) -> int:
    model = load_checkpoint(args.checkpoint)
    wav = load_wav_8k(args.wav, log=lambda msg: print(msg, file=sys.stderr))
    mel = waveform_to_mel(wav, model.frontend)
    probs = predict_sequence(model, mel.values, args.segment_frames)
    window = args.smooth_window if args.smooth_window is not None \
        else model.config.smoothing_window
    probs = smooth(probs, window)
    labels = (probs >= args.threshold).astype(int)
    with open(args.out, "w", encoding="utf-8") as f:
        for p, lab in zip(probs, labels):
            f.write(f"{p:.6f}\t{lab}\n")
    print(f"wrote {len(probs)} frames to {args.out}")
    return 0


def cmd_attn(args) -> int:
    model = load_checkpoint(args.checkpoint)
    wav = load_wav_8k(args.wav, log=lambda msg: print(msg, file=sys.stderr))
    mel = waveform_to_mel(wav, model.frontend)
    try:
        frames = [int(tok) for tok in args.frames.split(",") if tok.strip()]
    except ValueError as e:
        raise UsageError(f"--frames must be comma-separated integers: {e}") from e
    if not frames:
        raise UsageError("--frames lists no frame indices")
    labels = None
    if args.labels:
        from .datasets import read_labels
        labels = read_labels(args.labels)
    report = attention_report(model, mel.values, frames, labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_attention_csv(out / "attention.csv", report)
    write_attention_json(out / "attention.json", report)
    print(f"wrote attention rows for frames {frames} to {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vadforge",
        description="Voice-activity-detection lab: synthesize scenes, train "
                    "the frame classifier, evaluate, and inspect attention.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a labeled noisy-reverberant dataset")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-val", type=int, default=20)
    p.add_argument("--n-test", type=int, default=40)
    p.add_argument("--seed", type=int, help="master seed (overrides synth.seed)")
    p.add_argument("--duration", type=float, help="scene seconds (synth.duration_s)")
    p.add_argument("--test-duration", type=float,
                   help="test-split scene seconds (synth.test_duration_s)")
    p.add_argument("--speech-dir", help="external clean-speech WAV pool")
    p.add_argument("--noise-dir", help="external noise WAV pool")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train from a dataset manifest")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--crop-frames", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="AUC/EER table and ROC export")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--smooth-window", type=int)
    p.add_argument("--segment-frames", type=int, default=0)
    p.add_argument("--split", default="test", help="split name or 'all'")
    p.add_argument("--out", help="directory for roc.csv (default: checkpoint dir)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="per-frame probabilities for a WAV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--out", required=True, help="output text file (one frame per line)")
    p.add_argument("--segment-frames", type=int, default=0,
                   help="0 = whole sequence; N > 0 = sequential N-frame chunks")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--smooth-window", type=int)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("attn", help="export attention rows for chosen frames")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--frames", required=True, help="comma-separated frame indices")
    p.add_argument("--labels", help="optional label file for the WAV")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_attn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 4
    except (InputError, MetricError, CheckpointError, FileNotFoundError,
            json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except VadForgeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
