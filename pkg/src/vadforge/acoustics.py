"""Noisy-reverberant scene synthesis: rooms, impulse responses, mixing, labels.

A scene is built from a clean speech waveform and a noise waveform: the
speech is balanced with inserted silence, labeled per STFT frame by an
energy threshold on the clean signal, convolved with a simulated room
impulse response, and mixed with noise at a target SNR. Labels always
describe the clean (non-reverberant) speech.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .dsp import HOP, Waveform, num_frames, stft
from .errors import InputError

SPEED_OF_SOUND = 343.0
WALL_MARGIN = 0.1
MIC_HEIGHT = 1.5
DEFAULT_LABEL_THRESHOLD_DB = -40.0


@dataclass
class RoomSpec:
    """Randomized acoustic scene parameters."""
    room_dims: tuple[float, float, float]
    t60: float
    mic_pos: tuple[float, float, float]
    source_angle_deg: float
    source_distance: float
    snr_db: float

    @property
    def source_pos(self) -> tuple[float, float, float]:
        theta = math.radians(self.source_angle_deg)
        return (self.mic_pos[0] + self.source_distance * math.cos(theta),
                self.mic_pos[1] + self.source_distance * math.sin(theta),
                self.mic_pos[2])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RoomSpec":
        d = dict(d)
        d["room_dims"] = tuple(d["room_dims"])
        d["mic_pos"] = tuple(d["mic_pos"])
        return cls(**d)


@dataclass
class Rir:
    """Impulse response taps at 8 kHz plus the direct-path delay."""
    taps: np.ndarray
    direct_delay_samples: int


@dataclass
class MixInfo:
    noise_gain: float
    peak_scale: float


@dataclass
class LabeledExample:
    mixture: Waveform
    labels: np.ndarray
    metadata: dict = field(default_factory=dict)


def sample_room(rng: np.random.Generator) -> RoomSpec:
    """Draw a room per the training distribution.

    Room x,y ~ U[4,8] m, z ~ U[2.5,3] m; T60 ~ U[0.15,0.6] s; mic at the
    room center jittered by U[-0.5,0.5] in x and y, height 1.5 m; source at
    distance 1+U[-0.5,0.5] m and angle U[0,180] degrees around the mic in
    the horizontal plane, at least 0.1 m from every wall (redrawn when the
    draw lands outside); SNR ~ U[-3,20] dB.
    """
    x = rng.uniform(4.0, 8.0)
    y = rng.uniform(4.0, 8.0)
    z = rng.uniform(2.5, 3.0)
    t60 = rng.uniform(0.15, 0.6)
    mic = (x / 2.0 + rng.uniform(-0.5, 0.5),
           y / 2.0 + rng.uniform(-0.5, 0.5),
           MIC_HEIGHT)
    snr = rng.uniform(-3.0, 20.0)
    for _ in range(100):
        theta = rng.uniform(0.0, 180.0)
        dist = 1.0 + rng.uniform(-0.5, 0.5)
        spec = RoomSpec((x, y, z), t60, mic, theta, dist, snr)
        sx, sy, sz = spec.source_pos
        if (WALL_MARGIN <= sx <= x - WALL_MARGIN
                and WALL_MARGIN <= sy <= y - WALL_MARGIN
                and WALL_MARGIN <= sz <= z - WALL_MARGIN):
            return spec
    raise InputError("could not place a source inside the room in 100 attempts")


def _sabine_reflection(spec: RoomSpec) -> float:
    """Uniform wall reflection coefficient inverted from T60 via Sabine.

    The sign is negative (pressure-release convention): with integer-sample
    tap placement, many same-sign images share a tap at late times and
    would add coherently, inflating the decay; the alternating sign keeps
    in-bin sums incoherent so the Schroeder decay tracks the target T60.
    """
    x, y, z = spec.room_dims
    volume = x * y * z
    surface = 2.0 * (x * y + x * z + y * z)
    absorption = 0.161 * volume / (surface * spec.t60)
    absorption = min(absorption, 0.9999)
    return -math.sqrt(1.0 - absorption)


def simulate_rir(spec: RoomSpec, fs: int = 8000,
                 reflection_override: float | None = None) -> Rir:
    """Image-source impulse response for the given room.

    Uniform wall reflection coefficient inverted from T60 via Sabine's
    formula; image orders chosen so reflection paths cover at least
    c * T60 meters; taps placed at integer sample delays with 1/distance
    amplitude (direct tap exactly 1/d at round(d/c*fs)).
    """
    room = np.asarray(spec.room_dims, dtype=np.float64)
    mic = np.asarray(spec.mic_pos, dtype=np.float64)
    src = np.asarray(spec.source_pos, dtype=np.float64)
    d_direct = float(np.linalg.norm(src - mic))
    if d_direct < 1e-9:
        raise InputError("source and microphone coincide")

    beta = _sabine_reflection(spec) if reflection_override is None \
        else float(reflection_override)
    direct_delay = int(round(d_direct / SPEED_OF_SOUND * fs))
    n_taps = int(math.ceil(spec.t60 * fs)) + direct_delay + 1

    if beta == 0.0:
        orders = np.zeros(3, dtype=int)
    else:
        max_path = SPEED_OF_SOUND * spec.t60 + d_direct
        orders = np.ceil(max_path / (2.0 * room)).astype(int)

    ax = [np.arange(-n, n + 1) for n in orders]
    r = np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1).reshape(-1, 3)
    p = np.stack(np.meshgrid([0, 1], [0, 1], [0, 1], indexing="ij"),
                 axis=-1).reshape(-1, 3)

    # image positions for every (r, p) pair: (1-2p) * (src + 2*r*room),
    # which pairs with the |r+p| / |r| wall-bounce exponents below
    img = ((1 - 2 * p)[None, :, :]
           * (src[None, None, :] + 2.0 * r[:, None, :] * room[None, None, :]))
    dist = np.linalg.norm(img - mic[None, None, :], axis=-1)
    n_reflections = (np.abs(r[:, None, :] + p[None, :, :])
                     + np.abs(r[:, None, :])).sum(axis=-1)
    amp = np.power(beta, n_reflections) / dist

    idx = np.round(dist / SPEED_OF_SOUND * fs).astype(int)
    keep = (idx < n_taps) & (amp != 0.0)
    taps = np.zeros(n_taps)
    np.add.at(taps, idx[keep], amp[keep])
    return Rir(taps=taps.astype(np.float32), direct_delay_samples=direct_delay)


def estimate_t60(rir: Rir, fs: int = 8000) -> float:
    """T60 from Schroeder backward integration (line fit between -5 and -25 dB)."""
    energy = rir.taps.astype(np.float64) ** 2
    edc = np.cumsum(energy[::-1])[::-1]
    if edc[0] <= 0.0:
        raise InputError("impulse response has zero energy")
    with np.errstate(divide="ignore"):
        edc_db = 10.0 * np.log10(edc / edc[0])
    t5 = int(np.argmax(edc_db <= -5.0))
    t25 = int(np.argmax(edc_db <= -25.0))
    if edc_db[t25] > -25.0 or t25 <= t5:
        raise InputError("decay range too short for a T60 estimate")
    return 3.0 * (t25 - t5) / fs


def fft_convolve(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Linear convolution via FFT (full length)."""
    n = len(x) + len(h) - 1
    nfft = 1 << (n - 1).bit_length()
    y = np.fft.irfft(np.fft.rfft(x, nfft) * np.fft.rfft(h, nfft), nfft)
    return y[:n]


def mix_at_snr(reverb_speech: Waveform, noise: Waveform,
               snr_db: float) -> tuple[Waveform, MixInfo]:
    """Scale noise so the speech/noise energy ratio hits ``snr_db`` exactly.

    Noise shorter than the speech is tiled, longer noise is cropped. If the
    sum would clip, the whole mixture is scaled so its peak is 0.99; the
    scale is reported in the returned :class:`MixInfo`.
    """
    s = np.asarray(reverb_speech.samples, dtype=np.float64)
    n = np.asarray(noise.samples, dtype=np.float64)
    if len(n) < len(s):
        n = np.tile(n, int(math.ceil(len(s) / len(n))))
    n = n[:len(s)]

    e_s = float(np.sum(s * s))
    e_n = float(np.sum(n * n))
    if e_s <= 0.0:
        raise InputError("speech has zero energy; cannot set an SNR")
    if e_n <= 0.0:
        raise InputError("noise has zero energy; cannot set an SNR")

    gain = math.sqrt(e_s / (e_n * 10.0 ** (snr_db / 10.0)))
    mixed = s + gain * n
    peak = float(np.max(np.abs(mixed)))
    peak_scale = 1.0
    if peak > 0.99:
        peak_scale = 0.99 / peak
        mixed = mixed * peak_scale
    return (Waveform(mixed.astype(np.float32), reverb_speech.sample_rate),
            MixInfo(noise_gain=gain, peak_scale=peak_scale))


def energy_vad_labels(clean: Waveform,
                      th_db: float = DEFAULT_LABEL_THRESHOLD_DB) -> np.ndarray:
    """Per-frame speech/silence bits from clean-signal frame energy.

    A frame is speech when its energy in dB is within ``th_db`` (negative)
    of the loudest frame of the utterance. All-silent input yields all
    zeros.
    """
    spec = stft(clean)
    energy = np.sum(np.abs(spec) ** 2, axis=1)
    if energy.max() <= 0.0:
        return np.zeros(len(energy), dtype=np.int8)
    with np.errstate(divide="ignore"):
        level_db = 10.0 * np.log10(energy)
    return (level_db >= level_db.max() + th_db).astype(np.int8)


def balance_silence(speech: Waveform, labels: np.ndarray,
                    rng: np.random.Generator, target_ratio: float = 0.5,
                    th_db: float = DEFAULT_LABEL_THRESHOLD_DB
                    ) -> tuple[Waveform, np.ndarray]:
    """Insert zero segments at random frame boundaries until the speech-frame
    fraction is at most ``target_ratio`` (+0.05 tolerance).

    Segments are whole multiples of the hop; labels are recomputed from the
    padded signal so audio and labels always agree.
    """
    if not 0.0 < target_ratio < 1.0:
        raise InputError(f"target_ratio must be in (0,1), got {target_ratio}")
    labels = np.asarray(labels, dtype=np.int8)
    ratio = float(labels.mean()) if len(labels) else 0.0
    if ratio <= target_ratio + 0.05:
        return speech, labels

    samples = np.asarray(speech.samples, dtype=np.float32)
    for _ in range(50):
        speech_frames = int(labels.sum())
        total = len(labels)
        deficit = int(math.ceil(speech_frames / target_ratio)) - total
        if deficit <= 0:
            break
        n_chunks = int(min(4, max(1, deficit // 16 + 1)))
        sizes = [deficit // n_chunks] * n_chunks
        sizes[-1] += deficit - sum(sizes)
        for size in sizes:
            if size <= 0:
                continue
            boundary = int(rng.integers(0, total + 1)) * HOP
            boundary = min(boundary, len(samples))
            samples = np.concatenate([samples[:boundary],
                                      np.zeros(size * HOP, dtype=np.float32),
                                      samples[boundary:]])
            total += size
        padded = Waveform(samples, speech.sample_rate)
        labels = energy_vad_labels(padded, th_db)
        if float(labels.mean()) <= target_ratio:
            break
    return Waveform(samples, speech.sample_rate), labels


def synthesize_scene(clean: Waveform, noise: Waveform,
                     rng: np.random.Generator,
                     room: RoomSpec | None = None,
                     target_ratio: float = 0.5,
                     th_db: float = DEFAULT_LABEL_THRESHOLD_DB,
                     balance: bool = True,
                     reverberant_noise: bool = False,
                     reflection_override: float | None = None,
                     noise_gain_override: float | None = None,
                     clean_id: str = "", noise_id: str = "") -> LabeledExample:
    """Compose one supervised noisy-reverberant example.

    Labels are computed on the (balanced) clean speech before reverberation;
    the mixture is the reverberated speech plus scaled noise, truncated at
    the clean-signal length so the frame count matches the labels. Noise is
    added dry by default (``reverberant_noise`` convolves it with the same
    impulse response).
    """
    if room is None:
        room = sample_room(rng)
    labels = energy_vad_labels(clean, th_db)
    if balance:
        clean, labels = balance_silence(clean, labels, rng, target_ratio, th_db)

    rir = simulate_rir(room, fs=clean.sample_rate,
                       reflection_override=reflection_override)
    reverb = fft_convolve(clean.samples.astype(np.float64),
                          rir.taps.astype(np.float64))[:len(clean)]
    reverb_w = Waveform(reverb.astype(np.float32), clean.sample_rate)

    n = np.asarray(noise.samples, dtype=np.float64)
    if len(n) < len(clean):
        n = np.tile(n, int(math.ceil(len(clean) / len(n))))
    n = n[:len(clean)]
    noise_w = Waveform(n.astype(np.float32), clean.sample_rate)
    if reverberant_noise:
        n_rev = fft_convolve(n, rir.taps.astype(np.float64))[:len(clean)]
        noise_w = Waveform(n_rev.astype(np.float32), clean.sample_rate)

    if noise_gain_override is not None:
        mixed = reverb + noise_gain_override * noise_w.samples.astype(np.float64)
        peak = float(np.max(np.abs(mixed))) if len(mixed) else 0.0
        peak_scale = 0.99 / peak if peak > 0.99 else 1.0
        mixture = Waveform((mixed * peak_scale).astype(np.float32),
                           clean.sample_rate)
        info = MixInfo(noise_gain=noise_gain_override, peak_scale=peak_scale)
    else:
        mixture, info = mix_at_snr(reverb_w, noise_w, room.snr_db)

    assert len(labels) == num_frames(len(mixture))
    metadata = {
        "room_spec": room.to_dict(),
        "snr_db": room.snr_db,
        "noise_gain": info.noise_gain,
        "peak_scale": info.peak_scale,
        "direct_delay_samples": rir.direct_delay_samples,
        "clean_id": clean_id,
        "noise_id": noise_id,
        "label_threshold_db": th_db,
    }
    return LabeledExample(mixture=mixture, labels=labels, metadata=metadata)
