"""Deterministic synthetic utterances standing in for a real speech pool.

Each character is a 300 ms dual tone (one low-group and one high-group
frequency, DTMF style) scaled by a per-utterance speaker profile, with
50 ms of silence around and between characters and background noise at
30 dB SNR. Waveforms are quantised to 16-bit PCM in memory so the arrays
match what the WAV files on disk decode to.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from alcr.augment import RngStream
from alcr.dsp import Waveform, quantize, read_wav, write_wav

LOW_TONES = (300.0, 375.0, 468.75, 585.9375)
HIGH_TONES = (732.421875, 915.52734375, 1144.409179688, 1430.511474609)
DTMF_TONES = LOW_TONES + HIGH_TONES
DEFAULT_CHARS = "abcdefghijkl"
SPLITS = ("initial", "unlabeled", "test")
MANIFEST_NAME = "manifest.tsv"
CORPUS_META_NAME = "corpus.json"


def tone_pairs(n_chars=len(DEFAULT_CHARS), tones=DTMF_TONES):
    """Injective character -> (low, high) frequency assignment from 8 tones."""
    low, high = tones[:4], tones[4:]
    pairs = [(lo, hi) for lo in range(4) for hi in range(4) if lo != hi]
    pairs += [(i, i) for i in range(4)]
    if n_chars > len(pairs):
        raise ValueError(f"at most {len(pairs)} characters can be encoded")
    return [(low[lo], high[hi]) for lo, hi in pairs[:n_chars]]


@dataclass(frozen=True)
class SpeakerProfile:
    base_freq_scale: float = 1.0
    gain: float = 0.75
    jitter_seed: int = 0

    def __post_init__(self):
        if not 0.9 <= self.base_freq_scale <= 1.1:
            raise ValueError("base_freq_scale must lie in [0.9, 1.1]")
        if not 0.5 <= self.gain <= 1.0:
            raise ValueError("gain must lie in [0.5, 1.0]")

    @classmethod
    def draw(cls, gen):
        return cls(float(gen.uniform(0.9, 1.1)), float(gen.uniform(0.5, 1.0)),
                   int(gen.integers(0, 2**31)))


@dataclass(frozen=True)
class SynthConfig:
    chars: str = DEFAULT_CHARS
    tones: tuple = DTMF_TONES
    sample_rate: int = 4000
    tone_s: float = 0.300
    gap_s: float = 0.050
    ramp_s: float = 0.010
    snr_db: float = 30.0
    freq_jitter: float = 0.01
    amp_jitter: float = 0.1
    max_len: int = 20

    def duration_s(self, n_chars):
        if n_chars == 0:
            return 2 * self.gap_s
        return 2 * self.gap_s + n_chars * self.tone_s + (n_chars - 1) * self.gap_s


@dataclass(frozen=True, eq=False)
class Utterance:
    id: str
    waveform: Waveform
    transcript: str

    @property
    def duration_s(self):
        return self.waveform.duration_s


def synthesize(transcript, speaker: SpeakerProfile, rng, cfg: SynthConfig = SynthConfig()):
    """Render ``transcript`` as a waveform; deterministic in (transcript, speaker, rng)."""
    if len(transcript) > cfg.max_len:
        raise ValueError(f"transcript longer than {cfg.max_len} characters")
    table = dict(zip(cfg.chars, tone_pairs(len(cfg.chars), cfg.tones)))
    unknown = set(transcript) - set(table)
    if unknown:
        raise ValueError(f"unknown characters {sorted(unknown)}")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    jitter = np.random.default_rng(speaker.jitter_seed)
    sr = cfg.sample_rate
    tone_n = int(round(cfg.tone_s * sr))
    gap_n = int(round(cfg.gap_s * sr))
    ramp_n = int(round(cfg.ramp_s * sr))
    total = int(round(cfg.duration_s(len(transcript)) * sr))
    x = np.zeros(total)
    t = np.arange(tone_n) / sr
    envelope = np.ones(tone_n)
    if ramp_n:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp_n) / ramp_n)
        envelope[:ramp_n] = ramp
        envelope[-ramp_n:] = ramp[::-1]
    for i, ch in enumerate(transcript):
        start = gap_n + i * (tone_n + gap_n)
        seg = np.zeros(tone_n)
        for f in table[ch]:
            f = f * speaker.base_freq_scale * (1.0 + cfg.freq_jitter * jitter.uniform(-1, 1))
            amp = 0.4 * speaker.gain * (1.0 + cfg.amp_jitter * jitter.uniform(-1, 1))
            seg += amp * np.sin(2 * np.pi * f * t + gen.uniform(0, 2 * np.pi))
        x[start:start + tone_n] = seg * envelope
    power = float(np.mean(x ** 2)) if transcript else 1e-8
    x = x + gen.normal(0.0, math.sqrt(power / 10 ** (cfg.snr_db / 10)), size=total)
    return quantize(Waveform(x, sr))


@dataclass
class Corpus:
    """Named splits of utterances plus generation metadata."""

    splits: dict
    seed: int
    chars: str
    meta: dict = field(default_factory=dict)

    def utterances(self, split):
        return self.splits[split]

    def by_id(self):
        return {u.id: u for us in self.splits.values() for u in us}

    def durations(self):
        return {name: sum(u.duration_s for u in us) for name, us in self.splits.items()}

    def manifest_rows(self):
        for name in SPLITS:
            for u in self.splits.get(name, []):
                yield u.id, f"wav/{u.id}.wav", u.transcript, u.duration_s, name


def _draw_transcript(gen, chars, length_range):
    lo, hi = length_range
    n = int(gen.integers(lo, hi + 1))
    return "".join(chars[i] for i in gen.integers(0, len(chars), size=n))


def _make_split(seed, split, count, chars, length_range, cfg, start_index=0):
    out = []
    for i in range(start_index, start_index + count):
        gen = RngStream.keyed("corpus", seed, split, i).generator()
        transcript = _draw_transcript(gen, chars, length_range)
        speaker = SpeakerProfile.draw(gen)
        uid = f"{split[:3]}{i:05d}"
        wav = synthesize(transcript, speaker, gen, cfg)
        out.append(Utterance(uid, wav, transcript))
    return out


DEFAULT_SIZES = {"initial": 400, "unlabeled": 1600, "test": 300}


def generate_corpus(seed=0, sizes=None, length_range=(3, 10), cfg: SynthConfig = SynthConfig(),
                    out_dir=None, split_chars=None):
    """Build the initial / unlabeled / test splits; writes WAVs and manifest if ``out_dir``.

    ``split_chars`` optionally restricts the characters drawn per split.
    """
    sizes = {**DEFAULT_SIZES, **(sizes or {})}
    if min(sizes.values()) < 1:
        raise ValueError("every split needs at least one utterance")
    split_chars = split_chars or {}
    splits = {name: _make_split(seed, name, sizes[name], split_chars.get(name, cfg.chars),
                                length_range, cfg)
              for name in SPLITS}
    corpus = Corpus(splits, seed, cfg.chars,
                    meta={"sizes": sizes, "length_range": list(length_range),
                          "split_chars": split_chars, "sample_rate": cfg.sample_rate})
    if out_dir is not None:
        write_corpus(corpus, out_dir)
    return corpus


def generate_heterogeneous_corpus(seed=0, sizes=None, length_range=(3, 10),
                                  cfg: SynthConfig = SynthConfig(), out_dir=None):
    """Initial split over the first 8 characters, the rest over the last 8.

    Four characters are shared; four are exclusive to each side.
    """
    chars_a, chars_b = cfg.chars[:8], cfg.chars[-8:]
    return generate_corpus(seed, sizes, length_range, cfg, out_dir,
                           split_chars={"initial": chars_a, "unlabeled": chars_b,
                                        "test": chars_b})


def write_corpus(corpus: Corpus, out_dir):
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    lines = []
    for uid, rel, transcript, duration, split in corpus.manifest_rows():
        lines.append(f"{uid}\t{rel}\t{transcript}\t{duration:.6f}\t{split}\n")
    for us in corpus.splits.values():
        for u in us:
            write_wav(out / "wav" / f"{u.id}.wav", u.waveform)
    (out / MANIFEST_NAME).write_text("".join(lines), encoding="utf-8")
    meta = {"seed": corpus.seed, "chars": corpus.chars, **corpus.meta,
            "durations_s": {k: round(v, 6) for k, v in corpus.durations().items()}}
    (out / CORPUS_META_NAME).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")


def read_manifest(path):
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        uid, rel, transcript, duration, split = line.split("\t")
        rows.append({"id": uid, "path": rel, "transcript": transcript,
                     "duration_s": float(duration), "split": split})
    return rows


def load_corpus(corpus_dir):
    root = Path(corpus_dir)
    meta = json.loads((root / CORPUS_META_NAME).read_text(encoding="utf-8"))
    splits = {name: [] for name in SPLITS}
    for row in read_manifest(root / MANIFEST_NAME):
        splits[row["split"]].append(Utterance(row["id"], read_wav(root / row["path"]),
                                              row["transcript"]))
    return Corpus(splits, meta["seed"], meta["chars"],
                  meta={k: v for k, v in meta.items() if k not in ("seed", "chars")})


class Oracle:
    """Simulated human annotator with a duration ledger."""

    def __init__(self, corpus: Corpus):
        self._by_id = corpus.by_id()
        self.labeled = {}
        self.spent_s = 0.0

    def annotate(self, utt_or_id):
        uid = utt_or_id if isinstance(utt_or_id, str) else utt_or_id.id
        if uid not in self._by_id:
            raise KeyError(f"unknown utterance {uid!r}")
        if uid not in self.labeled:
            u = self._by_id[uid]
            self.labeled[uid] = u.transcript
            self.spent_s += u.duration_s
        return self.labeled[uid]


def oracle_annotate(u: Utterance):
    return u.transcript
