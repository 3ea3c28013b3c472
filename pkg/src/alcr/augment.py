"""Utterance augmentations: speed, pitch, additive noise and spectrogram masking.

Randomness comes from counter-based streams keyed by (seed, utterance id,
epoch), so augmenting a batch in any order gives the same result.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from alcr.dsp import FrontendConfig, Spectrogram, Waveform, spectrogram


@dataclass(frozen=True)
class RngStream:
    seed: int
    counter: int = 0

    @classmethod
    def keyed(cls, *parts):
        """Stream whose 64-bit seed is a digest of arbitrary key parts."""
        digest = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
        return cls(int.from_bytes(digest, "little"))

    def generator(self):
        return np.random.Generator(np.random.Philox(key=self.seed, counter=self.counter))

    def advance(self, n=1):
        return RngStream(self.seed, self.counter + n)


def _gen(rng):
    if isinstance(rng, RngStream):
        return rng.generator()
    return rng


# -- policies ---------------------------------------------------------------

@dataclass(frozen=True)
class NoAugment:
    name = "none"


@dataclass(frozen=True)
class Speed:
    factor: float = 1.5
    name = "speed"

    def __post_init__(self):
        if self.factor <= 0:
            raise ValueError("speed factor must be positive")


@dataclass(frozen=True)
class Pitch:
    semitones: int = 2
    name = "pitch"

    def __post_init__(self):
        if abs(self.semitones) > 12:
            raise ValueError("pitch shift limited to one octave")


@dataclass(frozen=True)
class Awgn:
    snr_db: float = 5.0
    name = "awgn"


@dataclass(frozen=True)
class SpecAugment:
    time_width: int = 40
    freq_width: int = 27
    time_masks: int = 2
    freq_masks: int = 2
    name = "specaugment"

    def __post_init__(self):
        if min(self.time_width, self.freq_width, self.time_masks, self.freq_masks) < 0:
            raise ValueError("SpecAugment parameters must be non-negative")


POLICY_ALIASES = {
    "none": NoAugment, "speed": Speed, "s": Speed, "pitch": Pitch, "p": Pitch,
    "awgn": Awgn, "a": Awgn, "specaugment": SpecAugment, "sa": SpecAugment,
}


def policy_from_name(name):
    try:
        return POLICY_ALIASES[name.lower()]()
    except KeyError:
        raise ValueError(f"unknown augmentation policy {name!r}") from None


# -- waveform domain --------------------------------------------------------

def speed(w: Waveform, factor=1.5) -> Waveform:
    """Resample so playback runs ``factor`` times faster (pitch scales too)."""
    if factor <= 0:
        raise ValueError("speed factor must be positive")
    n_out = math.floor(len(w) / factor)
    if n_out < 1:
        raise ValueError(f"speed factor {factor} leaves no samples from {len(w)}")
    if factor == 1:
        return Waveform(w.samples.copy(), w.sample_rate)
    pos = np.arange(n_out) * factor
    return Waveform(np.interp(pos, np.arange(len(w)), w.samples), w.sample_rate)


def time_stretch(x, out_len, win, hop):
    """Waveform-similarity overlap-add: change duration, keep local pitch."""
    if out_len <= 0 or len(x) == 0:
        return np.zeros(max(out_len, 0))
    ratio = out_len / len(x)
    tol = hop // 2
    window = np.hanning(win + 2)[1:-1]
    n_frames = max(1, math.ceil((out_len - win) / hop) + 1)
    src = np.pad(x, (tol + win, 2 * win + tol + int(n_frames * hop / ratio)))
    offset = tol + win
    y = np.zeros(n_frames * hop + win)
    norm = np.zeros_like(y)
    prev = None
    for k in range(n_frames):
        nominal = offset + int(round(k * hop / ratio))
        if prev is None:
            pos = nominal
        else:
            target = src[prev + hop:prev + hop + win]
            cands = np.lib.stride_tricks.sliding_window_view(
                src[nominal - tol:nominal + tol + win], win)
            pos = nominal - tol + int(np.argmax(cands @ target))
        y[k * hop:k * hop + win] += window * src[pos:pos + win]
        norm[k * hop:k * hop + win] += window
        prev = pos
    y = np.divide(y, norm, out=np.zeros_like(y), where=norm > 1e-3)
    return y[:out_len]


def pitch(w: Waveform, semitones=2, win_s=0.025, hop_s=0.010) -> Waveform:
    """Shift pitch by ``semitones`` half-steps while keeping the duration."""
    if abs(semitones) > 12:
        raise ValueError("pitch shift limited to one octave")
    if semitones == 0:
        return Waveform(w.samples.copy(), w.sample_rate)
    ratio = 2.0 ** (semitones / 12.0)
    shifted = speed(w, ratio).samples
    win = max(2, int(round(win_s * w.sample_rate)))
    hop = max(1, int(round(hop_s * w.sample_rate)))
    return Waveform(time_stretch(shifted, len(w), win, hop), w.sample_rate)


def awgn(w: Waveform, snr_db=5.0, rng=None) -> Waveform:
    power = float(np.mean(w.samples ** 2)) if len(w) else 0.0
    if power == 0.0:
        raise ValueError("SNR undefined for an all-zero signal")
    if math.isinf(snr_db) and snr_db > 0:
        return Waveform(w.samples.copy(), w.sample_rate)
    std = math.sqrt(power / 10.0 ** (snr_db / 10.0))
    noise = _gen(rng).normal(0.0, std, size=len(w))
    return Waveform(w.samples + noise, w.sample_rate)


# -- feature domain ---------------------------------------------------------

def spec_augment_mask(shape, time_width=40, freq_width=27, time_masks=2, freq_masks=2,
                      rng=None):
    """Boolean (frames, bins) mask of cells to overwrite."""
    gen = _gen(rng)
    frames, bins = shape
    mask = np.zeros(shape, dtype=bool)
    for _ in range(time_masks):
        width = int(gen.integers(0, min(time_width, frames) + 1))
        start = int(gen.integers(0, frames - width + 1))
        mask[start:start + width, :] = True
    for _ in range(freq_masks):
        width = int(gen.integers(0, min(freq_width, bins) + 1))
        start = int(gen.integers(0, bins - width + 1))
        mask[:, start:start + width] = True
    return mask


def spec_augment(s: Spectrogram, time_width=40, freq_width=27, time_masks=2, freq_masks=2,
                 rng=None) -> Spectrogram:
    """Overwrite random time and frequency bands with the spectrogram mean."""
    if time_masks == 0 and freq_masks == 0:
        return s
    mask = spec_augment_mask(s.frames.shape, time_width, freq_width, time_masks,
                             freq_masks, rng)
    frames = np.where(mask, s.frames.mean(), s.frames)
    return Spectrogram(frames, s.frame_stride_s, s.source_rate)


def apply(policy, w: Waveform, frontend: FrontendConfig = FrontendConfig(), rng=None):
    """Spectrogram of ``w`` under ``policy``."""
    if isinstance(policy, Speed):
        return spectrogram(speed(w, policy.factor), frontend)
    if isinstance(policy, Pitch):
        return spectrogram(pitch(w, policy.semitones), frontend)
    if isinstance(policy, Awgn):
        return spectrogram(awgn(w, policy.snr_db, rng), frontend)
    if isinstance(policy, SpecAugment):
        return spec_augment(spectrogram(w, frontend), policy.time_width, policy.freq_width,
                            policy.time_masks, policy.freq_masks, rng)
    if isinstance(policy, NoAugment) or policy is None:
        return spectrogram(w, frontend)
    raise TypeError(f"unknown augmentation policy {policy!r}")
