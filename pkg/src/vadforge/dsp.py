"""Waveform-to-feature frontend: STFT, mel filterbank, log-mel, WAV I/O.

The analysis chain is fixed by :class:`FrontendConfig` and embedded in every
checkpoint so training and inference always agree: 8 kHz input, 1024-sample
Hann frames with hop 512, one-sided 513-bin spectrum, 256 triangular mel
filters on the HTK scale spanning 0..4000 Hz, power spectrum, natural log
with floor 1e-6, optional corpus standardization.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, asdict

import numpy as np

from .errors import InputError

SAMPLE_RATE = 8000
FRAME_LEN = 1024
HOP = 512
N_MELS = 256
N_BINS = FRAME_LEN // 2 + 1  # 513
LOG_FLOOR = 1e-6


@dataclass
class Waveform:
    """Mono audio samples in [-1, 1] with their sample rate."""
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if not np.all(np.isfinite(self.samples)):
            raise InputError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class MelFrames:
    """Per-utterance log-mel feature matrix, shape [L, n_mels]."""
    values: np.ndarray
    frame_len: int = FRAME_LEN
    hop: int = HOP

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


@dataclass
class FrontendConfig:
    sample_rate: int = SAMPLE_RATE
    frame_len: int = FRAME_LEN
    hop: int = HOP
    n_mels: int = N_MELS
    mel_scale: str = "htk"
    log_floor: float = LOG_FLOOR
    normalize: bool = True
    feature_mean: float | None = None
    feature_std: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FrontendConfig":
        return cls(**d)


def num_frames(n_samples: int, frame_len: int = FRAME_LEN, hop: int = HOP) -> int:
    """L = 1 + floor((T - frame_len) / hop) for T >= frame_len."""
    if n_samples < frame_len:
        raise InputError(
            f"input of {n_samples} samples is shorter than one analysis "
            f"frame ({frame_len} samples minimum)")
    return 1 + (n_samples - frame_len) // hop


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window (sums to n/2)."""
    return (0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)).astype(np.float64)


def stft(w: Waveform, frame_len: int = FRAME_LEN, hop: int = HOP) -> np.ndarray:
    """One-sided complex spectrogram [L, frame_len//2 + 1].

    Frame l covers samples [l*hop, l*hop + frame_len).
    """
    x = np.asarray(w.samples, dtype=np.float64)
    n_fr = num_frames(len(x), frame_len, hop)
    frames = np.lib.stride_tricks.sliding_window_view(x, frame_len)[::hop][:n_fr]
    return np.fft.rfft(frames * hann_window(frame_len), n=frame_len, axis=-1)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = FRAME_LEN,
                   sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters [n_mels, n_fft//2 + 1], HTK mel scale.

    Filter centers are equally spaced on the mel axis from 0 Hz to the
    Nyquist frequency; each triangle spans its two neighboring centers
    (edges extrapolated by one spacing at both ends). All weights are
    nonnegative and every bin up to Nyquist is covered.
    """
    nyquist = sample_rate / 2.0
    centers_mel = np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), n_mels)
    spacing = centers_mel[1] - centers_mel[0]
    edges_mel = np.concatenate([[centers_mel[0] - spacing], centers_mel,
                                [centers_mel[-1] + spacing]])
    edges_hz = mel_to_hz(edges_mel)

    bin_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    weights = np.zeros((n_mels, len(bin_freqs)))
    for i in range(n_mels):
        left, center, right = edges_hz[i], edges_hz[i + 1], edges_hz[i + 2]
        up = (bin_freqs - left) / (center - left)
        down = (right - bin_freqs) / (right - center)
        weights[i] = np.maximum(0.0, np.minimum(up, down))
    return weights


_FB_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def _filterbank_cached(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    key = (n_mels, n_fft, sample_rate)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(n_mels, n_fft, sample_rate)
    return _FB_CACHE[key]


def log_mel(spec: np.ndarray, config: FrontendConfig | None = None) -> MelFrames:
    """Power spectrum -> mel projection -> ln(x + floor) -> optional standardization."""
    cfg = config or FrontendConfig()
    fb = _filterbank_cached(cfg.n_mels, cfg.frame_len, cfg.sample_rate)
    power = np.abs(spec) ** 2
    mel = power @ fb.T
    out = np.log(mel + cfg.log_floor)
    if cfg.normalize and cfg.feature_mean is not None and cfg.feature_std is not None:
        out = (out - cfg.feature_mean) / cfg.feature_std
    return MelFrames(out.astype(np.float32), frame_len=cfg.frame_len, hop=cfg.hop)


def waveform_to_mel(w: Waveform, config: FrontendConfig | None = None) -> MelFrames:
    cfg = config or FrontendConfig()
    if w.sample_rate != cfg.sample_rate:
        raise InputError(
            f"waveform sample rate {w.sample_rate} Hz does not match the "
            f"frontend rate {cfg.sample_rate} Hz; resample first")
    return log_mel(stft(w, cfg.frame_len, cfg.hop), cfg)


def silence_feature_value(config: FrontendConfig | None = None) -> float:
    """Log-mel value of digital silence under the given config."""
    cfg = config or FrontendConfig()
    v = float(np.log(cfg.log_floor))
    if cfg.normalize and cfg.feature_mean is not None and cfg.feature_std is not None:
        v = (v - cfg.feature_mean) / cfg.feature_std
    return v


# ---------------------------------------------------------------------------
# WAV I/O and resampling
# ---------------------------------------------------------------------------

def read_wav(path) -> Waveform:
    """Read a 16-bit PCM mono WAV file; samples normalized by 1/32768."""
    with wave.open(str(path), "rb") as f:
        if f.getsampwidth() != 2:
            raise InputError(
                f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()}-bit")
        if f.getnchannels() != 1:
            raise InputError(f"{path}: expected mono, got {f.getnchannels()} channels")
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    return Waveform(samples, sample_rate=rate)


def write_wav(path, w: Waveform) -> None:
    """Write 16-bit PCM mono WAV."""
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


def _lowpass_taps(cutoff: float, n_taps: int = 101) -> np.ndarray:
    """Hamming-windowed sinc low-pass; cutoff as a fraction of the sample rate."""
    m = np.arange(n_taps) - (n_taps - 1) / 2.0
    h = 2.0 * cutoff * np.sinc(2.0 * cutoff * m)
    h *= np.hamming(n_taps)
    return h / h.sum()


def resample_16k_to_8k(samples: np.ndarray) -> np.ndarray:
    """Polyphase 2:1 decimation (anti-alias low-pass, then drop every other sample)."""
    x = np.asarray(samples, dtype=np.float64)
    filtered = np.convolve(x, _lowpass_taps(0.23), mode="same")
    return filtered[::2].astype(np.float32)


def load_wav_8k(path, log=None) -> Waveform:
    """Read a WAV and deliver it at 8 kHz; 16 kHz inputs are auto-resampled."""
    w = read_wav(path)
    if w.sample_rate == SAMPLE_RATE:
        return w
    if w.sample_rate == 2 * SAMPLE_RATE:
        if log is not None:
            log(f"{path}: resampling 16 kHz -> 8 kHz")
        return Waveform(resample_16k_to_8k(w.samples), sample_rate=SAMPLE_RATE)
    raise InputError(
        f"{path}: unsupported sample rate {w.sample_rate} Hz "
        f"(supported: 8000, 16000)")
