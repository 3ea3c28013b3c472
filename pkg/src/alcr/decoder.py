"""Batched beam search with length normalisation.

Any object exposing ``encode``, ``decoder_start``, ``decoder_step``,
``max_decode_len`` and a ``vocab`` with ``eos``/``sos``/``output_size``
can be decoded; the seq2seq model and the toy posterior tables used in
tests both do.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

LP_OFFSET = 5.0
LP_POWER = 1.2


def length_penalty(length, offset=LP_OFFSET, power=LP_POWER):
    if length < 0:
        raise ValueError("length must be non-negative")
    return ((offset + length) / (offset + 1.0)) ** power


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple
    logp: float
    ended: bool = True

    @property
    def score(self):
        """Length-normalised log-probability; EOS is not counted in the length."""
        return self.logp / length_penalty(len(self.tokens))


@dataclass(frozen=True)
class BeamConfig:
    width: int = 5
    max_len: int | None = None  # None: 2 * frames, capped at max_len_cap
    max_len_cap: int = 40
    chunk: int = 64

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("beam width must be >= 1")
        if self.max_len is not None and self.max_len < 1:
            raise ValueError("max_len must be >= 1")


def _rank(hyps):
    return sorted(hyps, key=lambda h: (-h.score, len(h.tokens), h.tokens))


def _num_frames(x):
    frames = x.frames if hasattr(x, "frames") else np.asarray(x)
    return frames.shape[0]


def beam_search_batch(model, xs, cfg: BeamConfig = BeamConfig(), workers=1):
    """Decode every input; returns one ranked hypothesis list per input.

    Inputs are decoded in fixed chunks of ``cfg.chunk``; with ``workers > 1``
    chunks run on a thread pool. The chunking does not depend on the worker
    count, so results are identical either way.
    """
    chunks = [xs[start:start + cfg.chunk] for start in range(0, len(xs), cfg.chunk)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda c: _beam_chunk(model, c, cfg), chunks))
    else:
        parts = [_beam_chunk(model, c, cfg) for c in chunks]
    return [hyps for part in parts for hyps in part]


def _beam_chunk(model, xs, cfg):
    vocab = model.vocab
    eos, n_out, width = vocab.eos, vocab.output_size, cfg.width
    n = len(xs)
    if cfg.max_len is not None:
        max_lens = np.full(n, cfg.max_len)
    else:
        max_lens = np.array([model.max_decode_len(_num_frames(x), cfg.max_len_cap) for x in xs])
    state = model.decoder_start(model.encode(xs), repeat=width)
    scores = np.full((n, width), -np.inf)
    scores[:, 0] = 0.0
    tokens = [[()] * width for _ in range(n)]
    finished = [[] for _ in range(n)]
    active = np.arange(n)  # utterances still searching, in state-row block order
    prev = np.full(n * width, vocab.sos, dtype=np.int64)
    step = 0
    while len(active):
        step += 1
        logp, state = model.decoder_step(state, prev)
        logp = logp.reshape(len(active), width, n_out)
        keep_blocks, parents, next_tokens = [], [], []
        for b, u in enumerate(active):
            live = np.isfinite(scores[u])
            if step > max_lens[u]:
                for w in np.flatnonzero(live):
                    finished[u].append(Hypothesis(tokens[u][w],
                                                 float(scores[u, w] + logp[b, w, eos])))
                continue
            cand = (scores[u][:, None] + logp[b]).ravel()
            cand[np.repeat(~live, n_out)] = -np.inf
            order = np.argsort(-cand, kind="stable")[:width]
            new_scores = np.full(width, -np.inf)
            new_tokens = [()] * width
            block_parents = np.zeros(width, dtype=np.int64)
            block_next = np.full(width, eos, dtype=np.int64)
            slot = 0
            for flat in order:
                value = cand[flat]
                if not np.isfinite(value):
                    break
                w, tok = divmod(int(flat), n_out)
                if tok == eos:
                    finished[u].append(Hypothesis(tokens[u][w], float(value)))
                    continue
                new_scores[slot] = value
                new_tokens[slot] = tokens[u][w] + (tok,)
                block_parents[slot] = w
                block_next[slot] = tok
                slot += 1
            scores[u], tokens[u] = new_scores, new_tokens
            if slot:
                keep_blocks.append(b)
                parents.append(b * width + block_parents)
                next_tokens.append(block_next)
        if not keep_blocks:
            break
        active = active[keep_blocks]
        state = state.select(np.concatenate(parents))
        prev = np.concatenate(next_tokens)
    return [_rank(f) for f in finished]


def beam_search(model, x, cfg: BeamConfig = BeamConfig()):
    return beam_search_batch(model, [x], cfg)[0]


def pprob(model, x, cfg: BeamConfig = BeamConfig()):
    """Best length-normalised path log-probability (uncertainty score, <= 0)."""
    return beam_search(model, x, cfg)[0].score


def decode_pseudo_label(model, x, cfg: BeamConfig = BeamConfig()):
    return list(beam_search(model, x, cfg)[0].tokens)


def decode_batch(model, xs, cfg: BeamConfig = BeamConfig()):
    """Best hypothesis per input: (tokens, normalised score) pairs."""
    return [(list(h[0].tokens), h[0].score) for h in beam_search_batch(model, xs, cfg)]
