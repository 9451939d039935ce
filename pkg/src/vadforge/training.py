"""Training loop: SGD with weight decay, fused BCE, SpecAugment, fixed crops.

Every source of randomness is derived from the master seed: the epoch
shuffle uses (seed, epoch) and each training slot uses
(seed, epoch, batch, slot), so the run is reproducible regardless of how
work is scheduled. Validation AUC picks the retained checkpoint.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .datasets import load_example, read_manifest
from .dsp import FrontendConfig, silence_feature_value, waveform_to_mel
from .errors import ConfigError, InputError, NumericError
from .metrics import auc, eer
from .model import ModelConfig, VadModel
from .tensor import Tensor


@dataclass
class SpecAugmentConfig:
    freq_masks: int = 2
    freq_width: int = 20
    time_masks: int = 2
    time_width: int = 30

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainConfig:
    lr: float = 0.0003
    weight_decay: float = 1e-5
    momentum: float = 0.0
    batch_size: int = 128
    crop_frames: int = 256
    epochs: int = 50
    seed: int = 0
    patience: int = 10
    spec_augment: SpecAugmentConfig = field(default_factory=SpecAugmentConfig)

    def __post_init__(self):
        if isinstance(self.spec_augment, dict):
            self.spec_augment = SpecAugmentConfig(**self.spec_augment)
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1 or self.crop_frames < 1 or self.epochs < 1:
            raise ConfigError("batch_size, crop_frames, and epochs must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def bce_from_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean BCE on the tape, computed in the fused stable logit form."""
    return T.bce_with_logits(logits, labels)


def bce_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy of probabilities (reporting helper)."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise InputError(f"probs {p.shape} and labels {y.shape} differ in shape")
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class SGD:
    """w <- w - lr * (grad + weight_decay * w), optional momentum buffer."""

    def __init__(self, params, lr: float, weight_decay: float = 0.0,
                 momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self._buffers = [None] * len(self.params)

    def step(self) -> None:
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                if self._buffers[i] is None:
                    self._buffers[i] = g.copy()
                else:
                    self._buffers[i] = self.momentum * self._buffers[i] + g
                g = self._buffers[i]
            p.data = p.data - self.lr * g

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def sgd_step(params, lr: float, weight_decay: float = 0.0) -> None:
    """One functional update without momentum state."""
    SGD(params, lr, weight_decay).step()


# ---------------------------------------------------------------------------
# data augmentation / cropping
# ---------------------------------------------------------------------------

def spec_augment(mel: np.ndarray, rng: np.random.Generator,
                 cfg: SpecAugmentConfig) -> np.ndarray:
    """Mask random time and frequency bands with the utterance mean.

    Mask widths are drawn uniformly from [0, width]; widths larger than the
    axis are clamped. ``mel`` is [frames, bands] and is not modified.
    """
    out = np.array(mel, copy=True)
    fill = out.mean()
    n_frames, n_bands = out.shape
    for _ in range(cfg.freq_masks):
        width = int(min(rng.integers(0, cfg.freq_width + 1), n_bands))
        if width == 0:
            continue
        start = int(rng.integers(0, n_bands - width + 1))
        out[:, start:start + width] = fill
    for _ in range(cfg.time_masks):
        width = int(min(rng.integers(0, cfg.time_width + 1), n_frames))
        if width == 0:
            continue
        start = int(rng.integers(0, n_frames - width + 1))
        out[start:start + width, :] = fill
    return out


def crop_random(mel: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
                n: int = 256, pad_value: float = 0.0
                ) -> tuple[np.ndarray, np.ndarray, bool]:
    """Contiguous n-frame window at a uniform random start.

    Shorter inputs are padded at the end with ``pad_value`` features and
    label 0; the returned flag marks padded crops.
    """
    length = len(labels)
    if length >= n:
        start = int(rng.integers(0, length - n + 1))
        return mel[start:start + n].copy(), labels[start:start + n].copy(), False
    pad = n - length
    mel_out = np.concatenate(
        [mel, np.full((pad, mel.shape[1]), pad_value, dtype=mel.dtype)])
    lab_out = np.concatenate([labels, np.zeros(pad, dtype=labels.dtype)])
    return mel_out, lab_out, True


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint_path: Path | None
    metrics: list[dict]
    best_val_auc: float
    best_epoch: int
    model: VadModel


def _pooled_scores(model: VadModel, examples) -> tuple[np.ndarray, np.ndarray]:
    scores, labels = [], []
    for mel, lab in examples:
        probs, _ = model.predict(mel)
        scores.append(probs)
        labels.append(lab)
    return np.concatenate(scores), np.concatenate(labels)


def prepare_features(records: list[dict], manifest_dir,
                     frontend: FrontendConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    """Load audio, compute log-mel with the given frontend, pair with labels."""
    out = []
    for rec in records:
        wav, labels = load_example(rec, manifest_dir)
        mel = waveform_to_mel(wav, frontend)
        if mel.n_frames != len(labels):
            raise InputError(
                f"{rec['id']}: {len(labels)} labels but {mel.n_frames} frames")
        out.append((mel.values, labels))
    return out


def fit_feature_stats(records: list[dict], manifest_dir,
                      frontend: FrontendConfig) -> FrontendConfig:
    """Corpus mean/std over raw training log-mels, frozen into the config."""
    raw = FrontendConfig(**{**frontend.to_dict(),
                            "feature_mean": None, "feature_std": None})
    total, total_sq, count = 0.0, 0.0, 0
    for rec in records:
        wav, _ = load_example(rec, manifest_dir)
        v = waveform_to_mel(wav, raw).values.astype(np.float64)
        total += v.sum()
        total_sq += (v * v).sum()
        count += v.size
    mean = total / count
    std = math.sqrt(max(total_sq / count - mean * mean, 1e-12))
    cfg = FrontendConfig(**raw.to_dict())
    cfg.feature_mean = float(mean)
    cfg.feature_std = float(std)
    return cfg


def train(manifest_path, cfg: TrainConfig,
          model_config: ModelConfig | None = None,
          frontend: FrontendConfig | None = None,
          out_dir=None, log=None) -> TrainResult:
    """Full training run over a dataset manifest.

    Per epoch: shuffle, crop, SpecAugment, forward, fused BCE, backward,
    SGD step; validation AUC/EER logged per epoch; best-validation
    checkpoint retained; early stop after ``patience`` epochs without
    improvement. Raises :class:`NumericError` on a non-finite loss.
    """
    manifest_path = Path(manifest_path)
    manifest_dir = manifest_path.parent
    records = read_manifest(manifest_path)
    if not records:
        raise InputError(f"{manifest_path}: empty manifest")
    train_recs = [r for r in records if r["split"] == "train"]
    val_recs = [r for r in records if r["split"] == "val"]
    if not train_recs or not val_recs:
        raise InputError(
            f"{manifest_path}: need train and val splits, got "
            f"{sorted({r['split'] for r in records})}")

    frontend = frontend or FrontendConfig()
    if frontend.normalize and frontend.feature_mean is None:
        frontend = fit_feature_stats(train_recs, manifest_dir, frontend)
    pad_value = silence_feature_value(frontend)

    train_data = prepare_features(train_recs, manifest_dir, frontend)
    val_data = prepare_features(val_recs, manifest_dir, frontend)

    model = VadModel(model_config or ModelConfig(), frontend, seed=cfg.seed)
    opt = SGD(model.parameters(), cfg.lr, cfg.weight_decay, cfg.momentum)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.vadf" if out_dir is not None else None

    metrics_rows: list[dict] = []
    best_auc = -1.0
    best_epoch = -1
    stale = 0
    t0 = time.monotonic()

    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 3, epoch]).permutation(len(train_data))
        losses = []
        model.train()
        for b_idx, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = order[start:start + cfg.batch_size]
            inv = 1.0 / len(batch)
            for slot, ex_idx in enumerate(batch):
                rng = np.random.default_rng([cfg.seed, 5, epoch, b_idx, slot])
                mel, labels = train_data[ex_idx]
                mel_c, lab_c, _ = crop_random(mel, labels, rng,
                                              cfg.crop_frames, pad_value)
                mel_c = spec_augment(mel_c, rng, cfg.spec_augment)
                logits, _ = model.forward_logits(mel_c, rng=rng)
                loss = bce_from_logits(logits, lab_c.astype(mel_c.dtype))
                loss_val = loss.item()
                if not math.isfinite(loss_val):
                    batch_id = f"epoch{epoch}-batch{b_idx}-{train_recs[ex_idx]['id']}"
                    if out_dir is not None:
                        (out_dir / "nan_dump.json").write_text(json.dumps({
                            "batch_id": batch_id, "epoch": epoch,
                            "batch": b_idx, "example": train_recs[ex_idx]["id"],
                        }, indent=2))
                    raise NumericError(
                        f"non-finite loss at {batch_id}", batch_id=batch_id)
                losses.append(loss_val)
                T.backward(T.scale(loss, inv))
            opt.step()
            opt.zero_grad()

        scores, labels = _pooled_scores(model, val_data)
        val_auc = auc(scores, labels)
        val_eer = eer(scores, labels)
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_auc": val_auc,
            "val_eer": val_eer,
            "wall_seconds": time.monotonic() - t0,
        }
        metrics_rows.append(row)
        if log is not None:
            log(f"epoch {epoch:3d}  loss {row['train_loss']:.4f}  "
                f"val_auc {val_auc:.4f}  val_eer {val_eer:.4f}")

        if val_auc > best_auc:
            best_auc = val_auc
            best_epoch = epoch
            stale = 0
            if ckpt_path is not None:
                save_checkpoint(model, ckpt_path)
        else:
            stale += 1
            if stale > cfg.patience:
                break

    if out_dir is not None:
        write_metrics_csv(out_dir / "metrics.csv", metrics_rows)
    return TrainResult(checkpoint_path=ckpt_path, metrics=metrics_rows,
                       best_val_auc=best_auc, best_epoch=best_epoch, model=model)


def write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(
            f, fieldnames=["epoch", "train_loss", "val_auc", "val_eer",
                           "wall_seconds"])
        writer.writeheader()
        writer.writerows(rows)
