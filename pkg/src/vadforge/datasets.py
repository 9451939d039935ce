"""Dataset synthesis and on-disk formats.

Provides a built-in synthetic desk-scale corpus (harmonic voices with
glides and pauses as "speech", shaped noise with transient bursts as
"noise") so the whole pipeline runs without external downloads, plus
ingestion of user-supplied WAV pools. Speaker and noise identities are
split disjointly across train/val/test before any scene is generated.

On disk: 16-bit PCM WAV at 8 kHz, one ASCII line of '0'/'1' per label
file, and a JSON-lines manifest with one record per example.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .acoustics import synthesize_scene
from .dsp import Waveform, load_wav_8k, write_wav
from .errors import InputError

SPLITS = ("train", "val", "test")


def worker_count() -> int:
    """Worker parallelism cap from VADFORGE_THREADS (default: serial)."""
    raw = os.environ.get("VADFORGE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# label / manifest file formats
# ---------------------------------------------------------------------------

def write_labels(path, labels: np.ndarray) -> None:
    with open(path, "w", encoding="ascii") as f:
        f.write("".join("1" if v else "0" for v in labels))
        f.write("\n")


def read_labels(path) -> np.ndarray:
    with open(path, "r", encoding="ascii") as f:
        line = f.readline().strip()
    if not set(line) <= {"0", "1"}:
        raise InputError(f"{path}: label file must contain only '0'/'1'")
    return np.frombuffer(line.encode("ascii"), dtype=np.uint8).astype(np.int8) - ord("0")


def write_manifest(path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True))
            f.write("\n")


def read_manifest(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def load_example(record: dict, manifest_dir) -> tuple[Waveform, np.ndarray]:
    """Resolve a manifest record into audio and per-frame labels."""
    base = Path(manifest_dir)
    wav = load_wav_8k(base / record["wav_path"])
    labels = read_labels(base / record["label_path"])
    return wav, labels


# ---------------------------------------------------------------------------
# built-in synthetic corpus
# ---------------------------------------------------------------------------

@dataclass
class Voice:
    """A synthetic speaker identity."""
    ident: str
    f0: float
    rolloff: float
    n_harmonics: int
    vibrato_hz: float


@dataclass
class NoiseKind:
    """A synthetic noise identity."""
    ident: str
    tilt: float          # spectral slope, 0 = white
    burst_rate: float    # transient bursts per second
    burst_gain: float


def _identity_rng(seed: int, tag: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, tag, index])


def make_voices(n: int, seed: int) -> list[Voice]:
    voices = []
    for i in range(n):
        rng = _identity_rng(seed, 11, i)
        voices.append(Voice(
            ident=f"voice-{i:03d}",
            f0=float(rng.uniform(90.0, 280.0)),
            rolloff=float(rng.uniform(0.55, 0.85)),
            n_harmonics=int(rng.integers(6, 14)),
            vibrato_hz=float(rng.uniform(3.0, 7.0)),
        ))
    return voices


def make_noise_kinds(n: int, seed: int) -> list[NoiseKind]:
    kinds = []
    for i in range(n):
        rng = _identity_rng(seed, 13, i)
        kinds.append(NoiseKind(
            ident=f"noise-{i:03d}",
            tilt=float(rng.uniform(0.0, 1.2)),
            burst_rate=float(rng.uniform(0.0, 2.0)),
            burst_gain=float(rng.uniform(2.0, 5.0)),
        ))
    return kinds


def synth_speech(voice: Voice, duration_s: float, rng: np.random.Generator,
                 fs: int = 8000) -> Waveform:
    """Harmonic voiced segments with pitch glides, separated by pauses."""
    total = int(duration_s * fs)
    out = np.zeros(total, dtype=np.float64)
    t = int(rng.uniform(0.05, 0.3) * fs)
    while t < total:
        seg = int(rng.uniform(0.25, 0.8) * fs)
        seg = min(seg, total - t)
        if seg < int(0.05 * fs):
            break
        f_start = voice.f0 * rng.uniform(0.9, 1.15)
        f_end = f_start * rng.uniform(0.85, 1.2)
        freq = np.linspace(f_start, f_end, seg)
        tt = np.arange(seg) / fs
        freq = freq * (1.0 + 0.01 * np.sin(2 * np.pi * voice.vibrato_hz * tt))
        phase = 2.0 * np.pi * np.cumsum(freq) / fs
        sig = np.zeros(seg)
        max_harm = min(voice.n_harmonics, int(3800.0 / max(f_end, f_start)))
        for k in range(1, max(2, max_harm + 1)):
            sig += (voice.rolloff ** (k - 1)) * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
        env = np.ones(seg)
        ramp = min(seg // 4, int(0.02 * fs))
        if ramp > 0:
            env[:ramp] = np.linspace(0.0, 1.0, ramp)
            env[-ramp:] = np.linspace(1.0, 0.0, ramp)
        amp = rng.uniform(0.25, 0.55) / np.max(np.abs(sig) + 1e-9)
        out[t:t + seg] = amp * sig * env
        t += seg + int(rng.uniform(0.15, 0.6) * fs)
    return Waveform(out.astype(np.float32), fs)


def synth_noise(kind: NoiseKind, duration_s: float, rng: np.random.Generator,
                fs: int = 8000) -> Waveform:
    """Spectrally tilted noise bed plus optional transient bursts."""
    total = int(duration_s * fs)
    white = rng.standard_normal(total)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(total, d=1.0 / fs)
    shaping = (1.0 + freqs) ** (-kind.tilt / 2.0)
    bed = np.fft.irfft(spec * shaping, total)
    bed /= np.sqrt(np.mean(bed ** 2)) + 1e-12

    n_bursts = rng.poisson(kind.burst_rate * duration_s)
    for _ in range(n_bursts):
        pos = int(rng.integers(0, max(1, total - fs // 10)))
        width = int(rng.uniform(0.005, 0.05) * fs)
        burst = rng.standard_normal(width) * kind.burst_gain
        burst *= np.hanning(width)
        bed[pos:pos + width] += burst[:max(0, min(width, total - pos))]

    bed *= 0.1  # leave headroom; SNR mixing rescales anyway
    return Waveform(bed.astype(np.float32), fs)


# ---------------------------------------------------------------------------
# dataset builder
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    seed: int = 0
    duration_s: float = 8.0
    test_duration_s: float | None = None
    target_ratio: float = 0.5
    label_threshold_db: float = -40.0
    reverberant_noise: bool = False
    n_voices: int = 24
    n_noise_kinds: int = 24
    speech_dir: str | None = None
    noise_dir: str | None = None

    def to_dict(self) -> dict:
        from dataclasses import asdict
        return asdict(self)


def _split_pool(items: list, rng: np.random.Generator) -> dict[str, list]:
    """Random disjoint train/val/test partition (each split non-empty)."""
    if len(items) < 3:
        raise InputError("need at least 3 identities to split disjointly")
    order = list(rng.permutation(len(items)))
    n = len(items)
    n_val = max(1, n // 6)
    n_test = max(1, n // 6)
    n_train = n - n_val - n_test
    picked = [items[i] for i in order]
    return {
        "train": picked[:n_train],
        "val": picked[n_train:n_train + n_val],
        "test": picked[n_train + n_val:],
    }


def _list_wavs(directory) -> list[Path]:
    files = sorted(Path(directory).glob("*.wav"))
    if not files:
        raise InputError(f"no .wav files found in {directory}")
    return files


def build_dataset(out_dir, n_train: int, n_val: int, n_test: int,
                  config: SynthConfig) -> list[dict]:
    """Synthesize a labeled corpus and write WAVs, labels, and the manifest.

    Fully determined by (config.seed, counts): each example owns an RNG
    stream derived from (seed, example index), so results do not depend on
    worker scheduling.
    """
    out = Path(out_dir)
    for split in SPLITS:
        (out / split).mkdir(parents=True, exist_ok=True)

    pool_rng = np.random.default_rng([config.seed, 7])
    external = config.speech_dir is not None
    if external:
        if config.noise_dir is None:
            raise InputError("speech_dir given without noise_dir")
        speech_pool = _split_pool(_list_wavs(config.speech_dir), pool_rng)
        noise_pool = _split_pool(_list_wavs(config.noise_dir), pool_rng)
    else:
        speech_pool = _split_pool(make_voices(config.n_voices, config.seed), pool_rng)
        noise_pool = _split_pool(make_noise_kinds(config.n_noise_kinds, config.seed),
                                 pool_rng)

    counts = {"train": n_train, "val": n_val, "test": n_test}
    jobs = []
    index = 0
    for split in SPLITS:
        for j in range(counts[split]):
            jobs.append((index, split, j))
            index += 1

    def make_one(job):
        idx, split, j = job
        rng = np.random.default_rng([config.seed, 29, idx])
        duration = config.duration_s
        if split == "test" and config.test_duration_s is not None:
            duration = config.test_duration_s
        voice = speech_pool[split][int(rng.integers(0, len(speech_pool[split])))]
        kind = noise_pool[split][int(rng.integers(0, len(noise_pool[split])))]
        if external:
            clean = load_wav_8k(voice)
            noise = load_wav_8k(kind)
            clean_id, noise_id = str(voice), str(kind)
        else:
            clean = synth_speech(voice, duration, rng)
            noise = synth_noise(kind, duration, rng)
            clean_id, noise_id = voice.ident, kind.ident
        example = synthesize_scene(
            clean, noise, rng,
            target_ratio=config.target_ratio,
            th_db=config.label_threshold_db,
            reverberant_noise=config.reverberant_noise,
            clean_id=clean_id, noise_id=noise_id)
        return idx, split, j, example

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(make_one, jobs))
    else:
        results = [make_one(job) for job in jobs]

    records = []
    for idx, split, j, example in results:
        ex_id = f"{split}-{j:05d}"
        wav_rel = f"{split}/{ex_id}.wav"
        label_rel = f"{split}/{ex_id}.labels"
        write_wav(out / wav_rel, example.mixture)
        write_labels(out / label_rel, example.labels)
        records.append({
            "id": ex_id,
            "wav_path": wav_rel,
            "label_path": label_rel,
            "room_spec": example.metadata["room_spec"],
            "snr_db": example.metadata["snr_db"],
            "split": split,
            "meta": {k: v for k, v in example.metadata.items()
                     if k not in ("room_spec", "snr_db")},
        })
    write_manifest(out / "manifest.jsonl", records)
    return records
