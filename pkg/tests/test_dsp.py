import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alcr.dsp import (FrontendConfig, Waveform, hamming_window, quantize, read_wav,
                      spectrogram, write_wav)
from oracles import direct_dft

SR = 4000
CFG = FrontendConfig()


def tone(freq, n, sr=SR, amp=0.5):
    return Waveform(amp * np.sin(2 * np.pi * freq * np.arange(n) / sr), sr)


def test_hamming_values():
    w = hamming_window(5)
    assert w[0] == pytest.approx(0.08, abs=1e-15)
    assert w[2] == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_array_equal(hamming_window(1), [1.0])
    with pytest.raises(ValueError):
        hamming_window(0)


@given(st.integers(1, 500))
def test_hamming_symmetric(n):
    w = hamming_window(n)
    np.testing.assert_allclose(w, w[::-1], atol=1e-15)


def test_frame_count_example():
    s = spectrogram(tone(500, 4000), CFG)
    assert s.num_frames == 9
    assert s.num_bins == 401


@settings(max_examples=40, deadline=None)
@given(st.integers(800, 6000))
def test_frame_count_formula(n):
    s = spectrogram(Waveform(np.random.default_rng(n).normal(size=n) * 0.1, SR), CFG)
    assert s.num_frames == 1 + (n - 800) // 400 == CFG.num_frames(n, SR)


def test_pure_tone_peaks_at_bin_100():
    s = spectrogram(tone(500, 4000), CFG)
    assert (np.argmax(s.frames, axis=1) == 100).all()


def test_zero_waveform_hits_floor():
    s = spectrogram(Waveform(np.zeros(1200), SR), CFG)
    np.testing.assert_array_equal(s.frames, np.log(1e-10))


def test_frames_match_direct_dft():
    rng = np.random.default_rng(0)
    w = Waveform(rng.uniform(-1, 1, size=1600), SR)
    s = spectrogram(w, CFG)
    win = hamming_window(800)
    for i in range(s.num_frames):
        ref = np.abs(direct_dft(w.samples[i * 400:i * 400 + 800] * win))[:401]
        np.testing.assert_allclose(np.exp(s.frames[i]), ref, rtol=1e-9, atol=1e-9)


def test_short_waveform_pad_or_reject():
    short = Waveform(np.ones(300) * 0.1, SR)
    assert spectrogram(short, CFG).num_frames == 1
    with pytest.raises(ValueError):
        spectrogram(short, FrontendConfig(pad_short=False))


def test_prefix_locality():
    rng = np.random.default_rng(1)
    x = rng.normal(size=3000) * 0.2
    full = spectrogram(Waveform(x, SR), CFG).frames
    prefix = spectrogram(Waveform(x[:2000], SR), CFG).frames
    np.testing.assert_array_equal(full[:len(prefix)], prefix)


def test_scaling_shifts_log_magnitude():
    x = tone(700, 2000, amp=0.2).samples + 0.01
    a = spectrogram(Waveform(x, SR), CFG).frames
    b = spectrogram(Waveform(3.0 * x, SR), CFG).frames
    np.testing.assert_allclose(b - a, np.log(3.0), atol=1e-9)


def test_waveform_validation():
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, np.nan]), SR)
    with pytest.raises(ValueError):
        Waveform(np.zeros((2, 2)), SR)
    with pytest.raises(ValueError):
        Waveform(np.zeros(4), 0)
    assert Waveform(np.zeros(2000), SR).duration_s == 0.5


def test_config_validation():
    with pytest.raises(ValueError):
        FrontendConfig(window_s=0.1, stride_s=0.2)


def test_wav_round_trip(tmp_path):
    w = quantize(tone(440, 1000, amp=0.9))
    write_wav(tmp_path / "a.wav", w)
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate == SR
    np.testing.assert_array_equal(back.samples, w.samples)


def test_wav_clips_out_of_range(tmp_path):
    write_wav(tmp_path / "c.wav", Waveform(np.array([2.0, -2.0, 0.5]), SR))
    np.testing.assert_array_equal(read_wav(tmp_path / "c.wav").samples,
                                  [32767 / 32768, -1.0, 0.5])
