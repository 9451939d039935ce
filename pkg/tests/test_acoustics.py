"""Scene-synthesis checks: room distribution bounds, image-source geometry,
Schroeder decay, exact SNR mixing, frame-aligned energy labels, balancing."""

import math

import numpy as np
import pytest

from vadforge.acoustics import (LabeledExample, RoomSpec, balance_silence,
                                energy_vad_labels, estimate_t60, fft_convolve,
                                mix_at_snr, sample_room, simulate_rir,
                                synthesize_scene)
from vadforge.dsp import HOP, Waveform, num_frames
from vadforge.errors import InputError


def tone(n, amp=0.4, freq=440.0, fs=8000):
    t = np.arange(n) / fs
    return (amp * np.sin(2 * np.pi * freq * t)).astype(np.float32)


TEST_ROOM = RoomSpec(room_dims=(6.0, 5.0, 2.8), t60=0.4,
                     mic_pos=(3.0, 2.5, 1.5), source_angle_deg=0.0,
                     source_distance=1.0, snr_db=10.0)


class TestSampleRoom:
    def test_bounds_over_many_draws(self):
        rng = np.random.default_rng(0)
        specs = [sample_room(rng) for _ in range(10_000)]
        x = np.array([s.room_dims[0] for s in specs])
        y = np.array([s.room_dims[1] for s in specs])
        z = np.array([s.room_dims[2] for s in specs])
        t60 = np.array([s.t60 for s in specs])
        snr = np.array([s.snr_db for s in specs])
        theta = np.array([s.source_angle_deg for s in specs])
        dist = np.array([s.source_distance for s in specs])
        assert 4.0 <= x.min() and x.max() <= 8.0
        assert 4.0 <= y.min() and y.max() <= 8.0
        assert 2.5 <= z.min() and z.max() <= 3.0
        assert 0.15 <= t60.min() and t60.max() <= 0.6
        assert -3.0 <= snr.min() and snr.max() <= 20.0
        assert 0.0 <= theta.min() and theta.max() <= 180.0
        assert 0.5 <= dist.min() and dist.max() <= 1.5
        for s in specs[:500]:
            mx, my, mz = s.mic_pos
            assert abs(mx - s.room_dims[0] / 2) <= 0.5
            assert abs(my - s.room_dims[1] / 2) <= 0.5
            assert mz == 1.5
            sx, sy, sz = s.source_pos
            assert 0.0 < sx < s.room_dims[0]
            assert 0.0 < sy < s.room_dims[1]

    def test_deterministic(self):
        a = sample_room(np.random.default_rng(42))
        b = sample_room(np.random.default_rng(42))
        assert a == b

    def test_t60_mean(self):
        rng = np.random.default_rng(7)
        t60s = np.array([sample_room(rng).t60 for _ in range(100_000)])
        assert abs(t60s.mean() - 0.375) < 0.01


class TestSimulateRir:
    def test_free_field_single_tap(self):
        rir = simulate_rir(TEST_ROOM, reflection_override=0.0)
        nz = np.nonzero(rir.taps)[0]
        assert len(nz) == 1
        assert nz[0] == rir.direct_delay_samples
        assert rir.taps[nz[0]] == pytest.approx(1.0)  # 1/distance, d = 1 m

    def test_direct_delay_for_one_meter(self):
        rir = simulate_rir(TEST_ROOM)
        assert rir.direct_delay_samples == round(8000 / 343) == 23

    def test_direct_tap_is_first_nonzero(self):
        rir = simulate_rir(TEST_ROOM)
        nz = np.nonzero(rir.taps)[0]
        assert nz[0] == rir.direct_delay_samples
        assert np.all(np.isfinite(rir.taps))

    def test_covers_t60_seconds(self):
        rir = simulate_rir(TEST_ROOM)
        assert len(rir.taps) >= int(0.4 * 8000)

    def test_schroeder_t60_within_20_percent(self):
        rir = simulate_rir(TEST_ROOM)
        est = estimate_t60(rir)
        assert abs(est - 0.4) / 0.4 <= 0.20

    def test_degenerate_geometry(self):
        spec = RoomSpec((6.0, 5.0, 2.8), 0.3, (3.0, 2.5, 1.5), 0.0, 0.0, 5.0)
        with pytest.raises(InputError):
            simulate_rir(spec)


class TestMixAtSnr:
    def test_zero_db_equal_energy(self):
        rng = np.random.default_rng(0)
        s = Waveform(rng.standard_normal(4000).astype(np.float32) * 0.1)
        n = Waveform(rng.standard_normal(4000).astype(np.float32) * 0.3)
        _, info = mix_at_snr(s, n, 0.0)
        e_s = np.sum(s.samples.astype(np.float64) ** 2)
        e_n = np.sum((info.noise_gain * n.samples.astype(np.float64)) ** 2)
        assert e_s == pytest.approx(e_n, rel=1e-9)

    def test_20db_ratio_is_100(self):
        rng = np.random.default_rng(1)
        s = Waveform(rng.standard_normal(2000).astype(np.float32) * 0.1)
        n = Waveform(rng.standard_normal(2000).astype(np.float32) * 0.1)
        _, info = mix_at_snr(s, n, 20.0)
        e_s = np.sum(s.samples.astype(np.float64) ** 2)
        e_n = np.sum((info.noise_gain * n.samples.astype(np.float64)) ** 2)
        assert e_s / e_n == pytest.approx(100.0, rel=1e-9)

    def test_measured_snr_over_100_draws(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            s = Waveform(rng.standard_normal(3000).astype(np.float32) * 0.05)
            n = Waveform(rng.standard_normal(rng.integers(1000, 5000))
                         .astype(np.float32) * 0.2)
            snr = rng.uniform(-3.0, 20.0)
            mixed, info = mix_at_snr(s, n, snr)
            tiled = np.tile(n.samples, math.ceil(len(s) / len(n)))[:len(s)]
            noise_part = info.noise_gain * info.peak_scale * tiled.astype(np.float64)
            speech_part = mixed.samples.astype(np.float64) - noise_part
            measured = 10 * np.log10(np.sum(speech_part ** 2)
                                     / np.sum(noise_part ** 2))
            assert abs(measured - snr) < 0.01

    def test_peak_normalization(self):
        s = Waveform(tone(4000, amp=0.9))
        n = Waveform(np.random.default_rng(3).standard_normal(4000)
                     .astype(np.float32))
        mixed, info = mix_at_snr(s, n, 0.0)
        assert np.max(np.abs(mixed.samples)) <= 0.99 + 1e-6
        assert info.peak_scale < 1.0

    def test_zero_energy_rejected(self):
        s = Waveform(np.zeros(2000, dtype=np.float32))
        n = Waveform(np.ones(2000, dtype=np.float32))
        with pytest.raises(InputError):
            mix_at_snr(s, n, 0.0)
        with pytest.raises(InputError):
            mix_at_snr(n, s, 0.0)


class TestEnergyLabels:
    def test_digital_silence(self):
        labels = energy_vad_labels(Waveform(np.zeros(4096, dtype=np.float32)))
        assert labels.sum() == 0

    def test_constant_tone_all_ones(self):
        labels = energy_vad_labels(Waveform(tone(8192)))
        assert np.all(labels == 1)

    def test_half_tone_half_silence_frame_alignment(self):
        # 8192 samples -> 15 frames; frame l covers [512l, 512l+1024).
        # The tone fills [0, 4096): frames 0..6 lie fully inside it, frame 7
        # covers [3584, 4608) and carries half a frame of tone (about -3 dB,
        # far above the -40 dB threshold), frames 8..14 are pure silence.
        x = np.zeros(8192, dtype=np.float32)
        x[:4096] = tone(4096)
        labels = energy_vad_labels(Waveform(x))
        assert labels.tolist() == [1] * 8 + [0] * 7


class TestBalanceSilence:
    def test_already_balanced_unchanged(self):
        x = np.zeros(8192, dtype=np.float32)
        x[:4096] = tone(4096)
        w = Waveform(x)
        labels = energy_vad_labels(w)
        assert labels.mean() <= 0.55
        out_w, out_l = balance_silence(w, labels, np.random.default_rng(0), 0.5)
        assert np.array_equal(out_w.samples, x)
        assert np.array_equal(out_l, labels)

    def test_all_speech_inserts_enough_silence(self):
        n = 1024 + 99 * 512  # exactly 100 frames
        w = Waveform(tone(n))
        labels = energy_vad_labels(w)
        assert labels.sum() == 100
        out_w, out_l = balance_silence(w, labels, np.random.default_rng(1), 0.5)
        inserted = len(out_l) - 100
        assert inserted >= 95
        assert out_l.mean() <= 0.55

    def test_labels_consistent_with_padded_audio(self):
        w = Waveform(tone(1024 + 60 * 512))
        labels = energy_vad_labels(w)
        out_w, out_l = balance_silence(w, labels, np.random.default_rng(2), 0.5)
        assert np.array_equal(out_l, energy_vad_labels(out_w))
        assert len(out_l) == num_frames(len(out_w))

    def test_segments_are_hop_multiples(self):
        w = Waveform(tone(1024 + 40 * 512))
        labels = energy_vad_labels(w)
        out_w, _ = balance_silence(w, labels, np.random.default_rng(3), 0.5)
        assert (len(out_w) - len(w)) % HOP == 0


class TestSynthesizeScene:
    def test_free_field_noiseless_is_delayed_clean(self):
        clean = Waveform(tone(16384))
        noise = Waveform(np.random.default_rng(0).standard_normal(16384)
                         .astype(np.float32))
        ex = synthesize_scene(clean, noise, np.random.default_rng(1),
                              room=TEST_ROOM, balance=False,
                              reflection_override=0.0, noise_gain_override=0.0)
        delay = 23  # 1.0 m at 8 kHz
        got = ex.mixture.samples
        assert np.allclose(got[delay:], clean.samples[:len(got) - delay],
                           atol=1e-5)
        assert np.allclose(got[:delay], 0.0)

    def test_label_length_matches_mixture_frames(self):
        rng = np.random.default_rng(4)
        clean = Waveform((0.4 * rng.standard_normal(20000)).astype(np.float32))
        noise = Waveform((0.2 * rng.standard_normal(9000)).astype(np.float32))
        ex = synthesize_scene(clean, noise, rng)
        assert isinstance(ex, LabeledExample)
        assert len(ex.labels) == num_frames(len(ex.mixture))
        assert set(np.unique(ex.labels)) <= {0, 1}
        assert ex.metadata["room_spec"]["t60"] >= 0.15

    def test_corpus_speech_ratio_near_target(self):
        # reduced-size version of the corpus statistic: target 0.5 within
        # [0.4, 0.6] over many scenes
        speech_frames = 0
        total_frames = 0
        for i in range(150):
            rng = np.random.default_rng([99, i])
            clean = Waveform(np.concatenate([
                tone(int(rng.uniform(4000, 12000)), amp=0.4,
                     freq=rng.uniform(150, 600)),
                np.zeros(int(rng.uniform(0, 3000)), dtype=np.float32)]))
            noise = Waveform((0.2 * rng.standard_normal(8000)).astype(np.float32))
            ex = synthesize_scene(clean, noise, rng, target_ratio=0.5)
            speech_frames += int(ex.labels.sum())
            total_frames += len(ex.labels)
        ratio = speech_frames / total_frames
        assert 0.4 <= ratio <= 0.6

    def test_reverberant_noise_flag(self):
        rng = np.random.default_rng(5)
        clean = Waveform(tone(16384))
        noise = Waveform((0.2 * rng.standard_normal(16384)).astype(np.float32))
        dry = synthesize_scene(clean, noise, np.random.default_rng(6),
                               room=TEST_ROOM, balance=False)
        wet = synthesize_scene(clean, noise, np.random.default_rng(6),
                               room=TEST_ROOM, balance=False,
                               reverberant_noise=True)
        assert not np.allclose(dry.mixture.samples, wet.mixture.samples)


class TestFftConvolve:
    def test_matches_direct_convolution(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal(400)
        h = rng.standard_normal(37)
        assert np.allclose(fft_convolve(x, h), np.convolve(x, h), atol=1e-9)
