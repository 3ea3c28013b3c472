"""Attention encoder-decoder over spectrogram frames, its losses and checkpoints.

The encoder is a linear input bottleneck followed by bidirectional gated
recurrent layers. The decoder is a gated recurrent stack with
location-aware additive attention; each step emits log-posteriors over
the characters plus EOS.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from alcr import autodiff as ad
from alcr.autodiff import Tensor

CHECKPOINT_MAGIC = b"ALCR1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Vocabulary:
    """Characters take ids 0..C-1, then EOS, SOS and PAD."""

    chars: str = "abcdefghijkl"

    def __post_init__(self):
        if len(set(self.chars)) != len(self.chars) or not self.chars:
            raise ValueError("vocabulary characters must be unique and non-empty")

    @property
    def eos(self):
        return len(self.chars)

    @property
    def sos(self):
        return len(self.chars) + 1

    @property
    def pad(self):
        return len(self.chars) + 2

    @property
    def size(self):
        return len(self.chars) + 3

    @property
    def output_size(self):
        """Classes the decoder predicts: the characters and EOS."""
        return len(self.chars) + 1

    def encode(self, text):
        try:
            return [self.chars.index(c) for c in text]
        except ValueError:
            raise ValueError(f"text {text!r} has characters outside {self.chars!r}") from None

    def decode(self, ids):
        return "".join(self.chars[i] for i in ids if 0 <= i < len(self.chars))


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 401
    input_projection: int = 32
    encoder_layers: int = 1
    bidirectional: bool = True
    decoder_layers: int = 1
    hidden_size: int = 32
    embedding_size: int = 16
    attention_size: int = 32
    location_attention: bool = True
    location_kernel: int = 11
    location_channels: int = 4
    cell: str = "gru"

    def __post_init__(self):
        sizes = (self.input_size, self.input_projection, self.encoder_layers,
                 self.decoder_layers, self.hidden_size, self.embedding_size,
                 self.attention_size, self.location_kernel, self.location_channels)
        if min(sizes) < 1:
            raise ValueError("all model sizes must be >= 1")
        if self.cell != "gru":
            raise ValueError(f"unsupported recurrent cell {self.cell!r}")

    @property
    def encoder_output_size(self):
        return self.hidden_size * (2 if self.bidirectional else 1)


@dataclass
class Encoded:
    states: Tensor  # (B, T, D)
    proj: Tensor  # (B, T, A) attention keys
    mask: np.ndarray  # (B, T) bool
    lengths: np.ndarray


@dataclass
class DecoderState:
    """Per-row decoder state; rows are hypotheses or batch entries."""

    hidden: list
    context: np.ndarray
    attention: np.ndarray
    enc_states: np.ndarray
    enc_proj: np.ndarray
    mask: np.ndarray

    def select(self, rows):
        return DecoderState([h[rows] for h in self.hidden], self.context[rows],
                            self.attention[rows], self.enc_states[rows],
                            self.enc_proj[rows], self.mask[rows])


def pad_features(feats):
    """Stack (T_i, F) arrays into (B, T_max, F) plus a (B, T_max) validity mask."""
    lengths = np.array([f.shape[0] for f in feats])
    if lengths.min() < 1:
        raise ValueError("every input needs at least one frame")
    out = np.zeros((len(feats), lengths.max(), feats[0].shape[1]))
    for i, f in enumerate(feats):
        out[i, :len(f)] = f
    mask = np.arange(lengths.max())[None, :] < lengths[:, None]
    return out, mask, lengths


def _features(x):
    return x.frames if hasattr(x, "frames") else np.asarray(x, dtype=np.float64)


class Seq2Seq:
    def __init__(self, config: ModelConfig = ModelConfig(), vocab: Vocabulary = Vocabulary(),
                 seed=0):
        self.config = config
        self.vocab = vocab
        self.params = {}
        self.buffers = {"feat_mean": np.zeros(config.input_size),
                        "feat_std": np.ones(config.input_size)}
        self._init_params(np.random.default_rng(seed))

    # -- parameters ---------------------------------------------------------

    def _add(self, rng, name, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        self.params[name] = Tensor(rng.uniform(-bound, bound, size=shape),
                                   requires_grad=True, name=name)

    def _init_params(self, rng):
        c = self.config
        h, a = c.hidden_size, c.attention_size
        self._add(rng, "enc.proj.w", (c.input_size, c.input_projection), c.input_size)
        self._add(rng, "enc.proj.b", (c.input_projection,), c.input_size)
        directions = ("fwd", "bwd") if c.bidirectional else ("fwd",)
        in_size = c.input_projection
        for layer in range(c.encoder_layers):
            for d in directions:
                p = f"enc.{layer}.{d}"
                self._add(rng, p + ".w_x", (in_size, 3 * h), h)
                self._add(rng, p + ".b_x", (3 * h,), h)
                self._add(rng, p + ".w_h", (h, 3 * h), h)
                self._add(rng, p + ".b_h", (3 * h,), h)
            in_size = c.encoder_output_size
        enc = c.encoder_output_size
        self._add(rng, "dec.embed", (self.vocab.size, c.embedding_size), 1)
        in_size = c.embedding_size + enc
        for layer in range(c.decoder_layers):
            p = f"dec.{layer}"
            self._add(rng, p + ".w_x", (in_size, 3 * h), h)
            self._add(rng, p + ".b_x", (3 * h,), h)
            self._add(rng, p + ".w_h", (h, 3 * h), h)
            self._add(rng, p + ".b_h", (3 * h,), h)
            in_size = h
        self._add(rng, "att.w_query", (h, a), h)
        self._add(rng, "att.w_key", (enc, a), enc)
        self._add(rng, "att.b", (a,), enc)
        self._add(rng, "att.v", (a, 1), a)
        if c.location_attention:
            self._add(rng, "att.conv", (c.location_kernel, c.location_channels),
                      c.location_kernel)
            self._add(rng, "att.w_loc", (c.location_channels, a), c.location_channels)
        self._add(rng, "out.w", (h + enc, self.vocab.output_size), h + enc)
        self._add(rng, "out.b", (self.vocab.output_size,), h + enc)

    def set_feature_stats(self, spectrograms):
        """Per-bin input normalisation from training features."""
        stacked = np.concatenate([_features(s) for s in spectrograms], axis=0)
        self.buffers["feat_mean"] = stacked.mean(axis=0)
        self.buffers["feat_std"] = np.maximum(stacked.std(axis=0), 1e-3)

    def state_dict(self):
        out = {k: v.data.copy() for k, v in self.params.items()}
        out.update({k: v.copy() for k, v in self.buffers.items()})
        return out

    def load_state_dict(self, state):
        for k, v in state.items():
            if k in self.params:
                if v.shape != self.params[k].shape:
                    raise ValueError(f"shape mismatch for {k}")
                self.params[k].data = np.array(v, dtype=np.float64)
            elif k in self.buffers:
                self.buffers[k] = np.array(v, dtype=np.float64)
            else:
                raise KeyError(f"unexpected entry {k!r}")

    def copy(self):
        twin = Seq2Seq.__new__(Seq2Seq)
        twin.config, twin.vocab = self.config, self.vocab
        twin.params = {k: Tensor(v.data.copy(), requires_grad=True, name=k)
                       for k, v in self.params.items()}
        twin.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return twin

    # -- encoder ------------------------------------------------------------

    def encode(self, xs) -> Encoded:
        feats, mask, lengths = pad_features([_features(x) for x in xs])
        p = self.params
        x = (feats - self.buffers["feat_mean"]) / self.buffers["feat_std"]
        x = x * mask[..., None]
        h = ad.matmul(x, p["enc.proj.w"]) + p["enc.proj.b"]
        fmask = mask.astype(np.float64)
        batch, steps = mask.shape
        rows = np.arange(batch)[:, None]
        t = np.arange(steps)[None, :]
        rev = np.where(mask, lengths[:, None] - 1 - t, t)
        size = self.config.hidden_size
        h0 = Tensor(np.zeros((batch, size)))
        for layer in range(self.config.encoder_layers):
            pre = f"enc.{layer}.fwd"
            xg = ad.matmul(h, p[pre + ".w_x"]) + p[pre + ".b_x"]
            outs = [ad.gru_scan(xg, h0, p[pre + ".w_h"], p[pre + ".b_h"], fmask)]
            if self.config.bidirectional:
                pre = f"enc.{layer}.bwd"
                xr = ad.take(h, (rows, rev))
                xg = ad.matmul(xr, p[pre + ".w_x"]) + p[pre + ".b_x"]
                hr = ad.gru_scan(xg, h0, p[pre + ".w_h"], p[pre + ".b_h"], fmask)
                outs.append(ad.take(hr, (rows, rev)))
            h = ad.concat(outs, axis=-1) if len(outs) > 1 else outs[0]
        keys = ad.matmul(h, p["att.w_key"]) + p["att.b"]
        return Encoded(h, keys, mask, lengths)

    # -- decoder ------------------------------------------------------------

    def _initial_attention(self, mask):
        m = mask.astype(np.float64)
        return m / m.sum(axis=1, keepdims=True)

    def _step(self, emb, hidden, context, prev_att, enc_states, enc_proj, mask):
        """One decoder step on Tensors; returns new (hidden, context, attention, readout)."""
        p = self.params
        x = ad.concat([emb, context], axis=-1)
        new_hidden = []
        for layer, h in enumerate(hidden):
            pre = f"dec.{layer}"
            xg = ad.matmul(x, p[pre + ".w_x"]) + p[pre + ".b_x"]
            x = ad.gru_cell(xg, h, p[pre + ".w_h"], p[pre + ".b_h"])
            new_hidden.append(x)
        query = ad.matmul(x, p["att.w_query"])
        batch = query.shape[0]
        energy_in = enc_proj + ad.reshape(query, (batch, 1, -1))
        if self.config.location_attention:
            loc = ad.matmul(ad.unfold1d(prev_att, self.config.location_kernel), p["att.conv"])
            energy_in = energy_in + ad.matmul(loc, p["att.w_loc"])
        energy = ad.matmul(ad.tanh(energy_in), p["att.v"])
        att = ad.softmax(ad.reshape(energy, mask.shape), mask)
        context = ad.weighted_sum(att, enc_states)
        readout = ad.concat([x, context], axis=-1)
        return new_hidden, context, att, readout

    def _zero_hidden(self, batch):
        size = self.config.hidden_size
        return [Tensor(np.zeros((batch, size))) for _ in range(self.config.decoder_layers)]

    def forward_teacher_forced(self, xs, targets, enc: Encoded | None = None):
        """Log-posteriors for every step of every target, EOS step included.

        Returns ``(logp, target_ids, token_mask)`` with logp of shape
        (B, max_len + 1, V); step l consumes token l-1 (SOS first).
        """
        vocab = self.vocab
        if enc is None:
            enc = self.encode(xs)
        batch = len(targets)
        steps = max(len(t) for t in targets) + 1
        inputs = np.full((batch, steps), vocab.sos, dtype=np.int64)
        gold = np.full((batch, steps), vocab.eos, dtype=np.int64)
        tmask = np.zeros((batch, steps))
        for i, t in enumerate(targets):
            t = list(t)
            if any(not 0 <= tok < len(vocab.chars) for tok in t):
                raise IndexError(f"token id out of range in target {t}")
            inputs[i, 1:len(t) + 1] = t
            gold[i, :len(t)] = t
            tmask[i, :len(t) + 1] = 1.0
        emb = ad.embedding(self.params["dec.embed"], inputs)
        hidden = self._zero_hidden(batch)
        context = Tensor(np.zeros((batch, self.config.encoder_output_size)))
        att = Tensor(self._initial_attention(enc.mask))
        readouts = []
        for step in range(steps):
            hidden, context, att, readout = self._step(
                emb[:, step], hidden, context, att, enc.states, enc.proj, enc.mask)
            readouts.append(readout)
        logits = ad.matmul(ad.stack(readouts, axis=1), self.params["out.w"]) + self.params["out.b"]
        return ad.log_softmax(logits), gold, tmask

    def decoder_start(self, enc: Encoded, repeat=1) -> DecoderState:
        batch = len(enc.lengths)
        rows = np.repeat(np.arange(batch), repeat)
        return DecoderState(
            hidden=[np.zeros((batch * repeat, self.config.hidden_size))
                    for _ in range(self.config.decoder_layers)],
            context=np.zeros((batch * repeat, self.config.encoder_output_size)),
            attention=self._initial_attention(enc.mask)[rows],
            enc_states=enc.states.data[rows],
            enc_proj=enc.proj.data[rows],
            mask=enc.mask[rows],
        )

    def decoder_step(self, state: DecoderState, prev_tokens):
        """Advance every row by one token; returns (log-posteriors (R, V), new state)."""
        p = self.params
        with ad.no_grad():
            emb = Tensor(p["dec.embed"].data[np.asarray(prev_tokens, dtype=np.int64)])
            hidden, context, att, readout = self._step(
                emb, [Tensor(h) for h in state.hidden], Tensor(state.context),
                Tensor(state.attention), Tensor(state.enc_states), Tensor(state.enc_proj),
                state.mask)
            logp = ad.log_softmax(ad.matmul(readout, p["out.w"]) + p["out.b"]).data
        new = DecoderState([h.data for h in hidden], context.data, att.data,
                           state.enc_states, state.enc_proj, state.mask)
        return logp, new

    def max_decode_len(self, num_frames, cap=40):
        return max(1, min(2 * int(num_frames), cap))


# -- losses -----------------------------------------------------------------

def supervised_loss(logp, targets, mask):
    """Token-level cross-entropy normalised by the total token count (EOS included)."""
    count = float(np.sum(mask))
    if count == 0:
        raise ValueError("empty batch")
    return ad.mul(ad.nll_sum(logp, targets, mask), 1.0 / count)


def consistency_loss(model, augmented_xs, pseudo_labels):
    """Cross-entropy of predictions on augmented inputs against fixed pseudo-labels.

    ``augmented_xs`` are features already passed through the augmentation;
    pseudo-labels are plain token lists, so no gradient reaches them.
    """
    if not pseudo_labels:
        raise ValueError("empty pseudo-label set")
    logp, gold, mask = model.forward_teacher_forced(augmented_xs, pseudo_labels)
    return supervised_loss(logp, gold, mask)


def total_loss(l_sup, l_cr, lam):
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if lam == 0:
        return l_sup
    return ad.add(l_sup, ad.mul(l_cr, lam))


# -- checkpoints ------------------------------------------------------------

def config_hash(config: ModelConfig, vocab: Vocabulary):
    blob = json.dumps({"model": asdict(config), "vocab": vocab.chars}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def save_checkpoint(path, model: Seq2Seq, extra=None):
    """``ALCR1`` + u32 metadata length + JSON metadata + little-endian float64 payload."""
    state = model.state_dict()
    names = list(state)
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "vocabulary": model.vocab.chars,
        "config_hash": config_hash(model.config, model.vocab),
        "params": [{"name": n, "shape": list(state[n].shape),
                    "trainable": n in model.params} for n in names],
        "extra": extra or {},
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(state[n], dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an ALCR1 checkpoint")
    (size,) = struct.unpack("<I", raw[5:9])
    meta = json.loads(raw[9:9 + size].decode("utf-8"))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    config = ModelConfig(**meta["config"])
    vocab = Vocabulary(meta["vocabulary"])
    if meta["config_hash"] != config_hash(config, vocab):
        raise ValueError(f"{path}: config hash mismatch")
    model = Seq2Seq(config, vocab)
    offset = 9 + size
    state = {}
    for entry in meta["params"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        state[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    model.load_state_dict(state)
    return model, meta.get("extra", {})
