"""The frame classifier: CNN embedder + multi-head self-attention encoder.

The log-mel input [L, F] is treated as a one-channel [1, F, L] grid and
passed through four conv/batchnorm/PReLU/max-pool blocks that halve the
frequency axis each time while preserving the time axis. The surviving
[C, F', L] grid is flattened per frame to [L, F'*C], projected to width d,
optionally offset by sinusoidal positions, run through the self-attention
encoder, and reduced to one logit per frame. The model is length-generic:
the same weights work for any L >= 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import nn
from . import tensor as T
from .dsp import FrontendConfig
from .errors import ConfigError
from .tensor import Tensor


@dataclass
class ModelConfig:
    n_mels: int = 256            # F
    conv_layers: int = 4
    channels: int = 32           # C
    d: int = 256
    d_ff: int = 512
    heads: int = 16
    dropout: float = 0.1
    encoder_layers: int = 1
    positional_encoding: bool = True
    smoothing_window: int = 5

    def __post_init__(self):
        if self.n_mels % (1 << self.conv_layers):
            raise ConfigError(
                f"n_mels={self.n_mels} is not divisible by "
                f"2^{self.conv_layers} pooling stages")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.smoothing_window < 1 or self.smoothing_window % 2 == 0:
            raise ConfigError(
                f"smoothing_window must be odd and >= 1, got {self.smoothing_window}")

    @property
    def f_prime(self) -> int:
        return self.n_mels >> self.conv_layers

    @property
    def flatten_width(self) -> int:
        return self.f_prime * self.channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class AttentionMap:
    """Head-averaged attention [L, L]; rows are probability distributions."""
    values: np.ndarray
    per_head: np.ndarray | None = None


def average_attention(per_head: np.ndarray) -> np.ndarray:
    """Arithmetic mean of the per-head maps [H, L, L] -> [L, L]."""
    return np.asarray(per_head).mean(axis=0)


def sinusoidal_positions(length: int, width: int) -> np.ndarray:
    """Standard fixed sin/cos position table [length, width]."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    half = (width + 1) // 2
    denom = np.power(10000.0, 2.0 * np.arange(half) / width)[None, :]
    pe = np.zeros((length, width))
    pe[:, 0::2] = np.sin(pos / denom)
    pe[:, 1::2] = np.cos(pos / denom)[:, : width // 2]
    return pe


def smooth(probs: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average with edge truncation."""
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"smoothing window must be odd and >= 1, got {window}")
    p = np.asarray(probs, dtype=np.float64)
    if window == 1 or len(p) == 0:
        return p.copy()
    h = window // 2
    c = np.concatenate([[0.0], np.cumsum(p)])
    n = len(p)
    idx = np.arange(n)
    lo = np.maximum(idx - h, 0)
    hi = np.minimum(idx + h, n - 1)
    return (c[hi + 1] - c[lo]) / (hi - lo + 1)


class _ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, rng)
        self.bn = nn.BatchNorm2d(out_ch)
        self.act = nn.PReLU(out_ch, channel_axis=0)
        self.pool = nn.MaxPool2d((2, 1))

    def forward(self, x: Tensor) -> Tensor:
        return self.pool(self.act(self.bn(self.conv(x))))


class _AttentionHead(nn.Module):
    """One head's query/key/value projections (no biases)."""

    def __init__(self, d: int, d_head: int, rng: np.random.Generator):
        super().__init__()
        self.wq = Tensor(nn.kaiming_uniform((d, d_head), d, rng), requires_grad=True)
        self.wk = Tensor(nn.kaiming_uniform((d, d_head), d, rng), requires_grad=True)
        self.wv = Tensor(nn.kaiming_uniform((d, d_head), d, rng), requires_grad=True)


class _EncoderLayer(nn.Module):
    """Multi-head self-attention, then a position-wise feed-forward block,
    each followed by a residual connection and layer norm."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        d, d_head = cfg.d, cfg.d // cfg.heads
        self.scale = 1.0 / math.sqrt(d)  # scaled by the full model width
        self.heads = nn.ModuleList(
            _AttentionHead(d, d_head, rng) for _ in range(cfg.heads))
        self.wo = Tensor(nn.kaiming_uniform((d, d), d, rng), requires_grad=True)
        self.ln1 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, cfg.d_ff, rng)
        self.ff_act = nn.PReLU(cfg.d_ff, channel_axis=1)
        self.ff2 = nn.Linear(cfg.d_ff, d, rng)
        self.ln2 = nn.LayerNorm(d)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: Tensor, rng: np.random.Generator | None = None,
                capture: bool = False) -> tuple[Tensor, np.ndarray | None]:
        outputs = []
        maps = [] if capture else None
        for head in self.heads:
            q = T.matmul(x, head.wq)
            k = T.matmul(x, head.wk)
            v = T.matmul(x, head.wv)
            logits = T.scale(T.matmul(q, T.transpose(k, (1, 0))), self.scale)
            attn = T.softmax(logits)
            if capture:
                maps.append(attn.numpy())
            attn = self.drop(attn, rng)
            outputs.append(T.matmul(attn, v))
        mh = T.matmul(T.concat(outputs, axis=-1), self.wo)
        x = self.ln1(T.add(x, self.drop(mh, rng)))
        ff = self.ff2(self.ff_act(self.ff1(x)))
        x = self.ln2(T.add(x, self.drop(ff, rng)))
        return x, (np.stack(maps) if capture else None)


class VadModel(nn.Module):
    """Frame-wise speech-presence estimator."""

    def __init__(self, config: ModelConfig | None = None,
                 frontend: FrontendConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config or ModelConfig()
        self.frontend = frontend or FrontendConfig()
        self.init_seed = seed
        rng = np.random.default_rng([seed, 17])

        chans = [1] + [self.config.channels] * self.config.conv_layers
        self.blocks = nn.ModuleList(
            _ConvBlock(chans[i], chans[i + 1], rng)
            for i in range(self.config.conv_layers))
        self.embed_fc = nn.Linear(self.config.flatten_width, self.config.d, rng)
        self.encoder = nn.ModuleList(
            _EncoderLayer(self.config, rng)
            for _ in range(self.config.encoder_layers))
        # zero init keeps the untrained output at exactly sigmoid(0) = 0.5
        self.head = nn.Linear(self.config.d, 1, rng, zero_init=True)

    # ------------------------------------------------------------------
    # forward pieces
    # ------------------------------------------------------------------

    def cnn_embed(self, mel: Tensor) -> Tensor:
        """[L, F] log-mel -> [L, d] frame-wise embeddings."""
        if mel.data.ndim != 2 or mel.shape[1] != self.config.n_mels:
            raise ConfigError(
                f"expected mel input [L, {self.config.n_mels}], got {mel.shape}")
        length = mel.shape[0]
        grid = T.reshape(T.transpose(mel, (1, 0)),
                         (1, self.config.n_mels, length))
        for block in self.blocks:
            grid = block(grid)
        # [C, F', L] -> [L, C*F'] per-frame flatten
        flat = T.reshape(T.transpose(grid, (2, 0, 1)),
                         (length, self.config.flatten_width))
        return self.embed_fc(flat)

    def encoder_forward(self, emb: Tensor,
                        rng: np.random.Generator | None = None,
                        capture_attention: bool = False
                        ) -> tuple[Tensor, AttentionMap | None]:
        """Run the self-attention stack; optionally capture the final layer's maps."""
        x = emb
        if self.config.positional_encoding:
            pe = sinusoidal_positions(emb.shape[0], self.config.d)
            x = T.add(x, T.tensor(pe))
        att = None
        for i, layer in enumerate(self.encoder):
            want = capture_attention and i == len(self.encoder) - 1
            x, per_head = layer(x, rng, capture=want)
            if want and per_head is not None:
                att = AttentionMap(values=average_attention(per_head),
                                   per_head=per_head)
        return x, att

    def forward_logits(self, mel_values: np.ndarray,
                       rng: np.random.Generator | None = None,
                       capture_attention: bool = False
                       ) -> tuple[Tensor, AttentionMap | None]:
        mel = T.tensor(np.asarray(mel_values))
        emb = self.cnn_embed(mel)
        enc, att = self.encoder_forward(emb, rng, capture_attention)
        logits = T.reshape(self.head(enc), (mel.shape[0],))
        return logits, att

    def predict(self, mel_values: np.ndarray, capture_attention: bool = False
                ) -> tuple[np.ndarray, AttentionMap | None]:
        """Eval-mode probabilities in (0, 1) for every frame; no tape recorded."""
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                logits, att = self.forward_logits(
                    mel_values, capture_attention=capture_attention)
                probs = T.sigmoid(logits).numpy()
        finally:
            self.train(was_training)
        lo = np.finfo(probs.dtype).tiny
        hi = np.nextafter(probs.dtype.type(1.0), probs.dtype.type(0.0))
        return np.clip(probs, lo, hi), att

    def attention_for(self, mel_values: np.ndarray) -> AttentionMap:
        _, att = self.predict(mel_values, capture_attention=True)
        return att


def predict_sequence(model: VadModel, mel_values: np.ndarray,
                     segment_frames: int = 0) -> np.ndarray:
    """Frame probabilities for a whole utterance.

    ``segment_frames == 0`` runs the entire sequence in one pass; a positive
    value processes consecutive chunks of that many frames (the fallback for
    very long inputs), which can differ from the whole-sequence result near
    chunk boundaries.
    """
    mel_values = np.asarray(mel_values)
    if segment_frames <= 0 or mel_values.shape[0] <= segment_frames:
        probs, _ = model.predict(mel_values)
        return probs
    chunks = []
    for start in range(0, mel_values.shape[0], segment_frames):
        probs, _ = model.predict(mel_values[start:start + segment_frames])
        chunks.append(probs)
    return np.concatenate(chunks)
