"""Waveform container, WAV I/O and the log-magnitude spectrogram frontend."""
from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np

DEFAULT_SAMPLE_RATE = 4000


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    @property
    def duration_s(self):
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True, eq=False)
class Spectrogram:
    frames: np.ndarray  # (num_frames, num_bins)
    frame_stride_s: float
    source_rate: int

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def num_bins(self):
        return self.frames.shape[1]


@dataclass(frozen=True)
class FrontendConfig:
    window_s: float = 0.200
    stride_s: float = 0.100
    log_floor: float = 1e-10
    pad_short: bool = True

    def __post_init__(self):
        if not 0 < self.stride_s <= self.window_s:
            raise ValueError("need 0 < stride_s <= window_s")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    def window_samples(self, sample_rate):
        return int(round(self.window_s * sample_rate))

    def stride_samples(self, sample_rate):
        return int(round(self.stride_s * sample_rate))

    def num_frames(self, num_samples, sample_rate):
        win = self.window_samples(sample_rate)
        return 1 + (max(num_samples, win) - win) // self.stride_samples(sample_rate)

    def num_bins(self, sample_rate):
        return self.window_samples(sample_rate) // 2 + 1


def hamming_window(n):
    if n < 1:
        raise ValueError("window length must be >= 1")
    if n == 1:
        return np.ones(1)
    k = np.arange(n)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * k / (n - 1))


def spectrogram(w: Waveform, cfg: FrontendConfig = FrontendConfig()) -> Spectrogram:
    """Log-magnitude short-time spectrum with a Hamming window.

    Waveforms shorter than one window are zero-padded, or rejected when
    ``cfg.pad_short`` is false.
    """
    win = cfg.window_samples(w.sample_rate)
    hop = cfg.stride_samples(w.sample_rate)
    x = w.samples
    if len(x) < win:
        if not cfg.pad_short:
            raise ValueError(f"waveform has {len(x)} samples, shorter than one window ({win})")
        x = np.pad(x, (0, win - len(x)))
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop]
    mag = np.abs(np.fft.rfft(frames * hamming_window(win), n=win, axis=-1))
    return Spectrogram(np.log(np.maximum(mag, cfg.log_floor)), cfg.stride_s, w.sample_rate)


def write_wav(path, w: Waveform):
    """Mono 16-bit PCM; amplitudes outside [-1, 1) are clipped."""
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    return Waveform(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate)


def quantize(w: Waveform) -> Waveform:
    """Round-trip through 16-bit PCM without touching the filesystem."""
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767)
    return Waveform(pcm / 32768.0, w.sample_rate)
