"""Active-learning pipeline with pseudo-labels and consistency regularisation.

One selection round: train an initial model, score the unlabeled pool,
send the most uncertain utterances (within a duration budget) to the
oracle, then keep training on initial + oracle-labelled + pseudo-labelled
data. Pseudo-labels are refreshed every ``delta`` epochs; consistency
training adds a cross-entropy term on augmented copies of the
pseudo-labelled utterances.
"""
from __future__ import annotations

import csv
import enum
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from alcr import augment
from alcr import autodiff as ad
from alcr.augment import RngStream
from alcr.corpus import Corpus, Oracle
from alcr.decoder import BeamConfig, beam_search_batch
from alcr.dsp import FrontendConfig, Spectrogram, spectrogram
from alcr.metrics import cer, p_cer
from alcr.model import (ModelConfig, Seq2Seq, Vocabulary, save_checkpoint, supervised_loss,
                        total_loss)

log = logging.getLogger(__name__)

VARIANTS = ("initial_only", "hls", "pls", "pls_filtered", "cr", "cr_filtered", "full_budget")
METRICS = ("pprob", "oracle_loss", "oracle_cer", "random")
REPORT_HEADER = ("variant", "budget_fraction", "seed", "epoch", "lr", "loss_sup", "loss_cr",
                 "test_cer", "p_cer")
SUMMARY_HEADER = ("variant", "budget_fraction", "seed", "final_cer")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    variant: str = "cr"
    policy: str = "specaugment"
    budget_fraction: float = 0.1
    lam: float = 1.0
    delta: int = 1
    tau: float = -0.5
    uncertainty_metric: str = "pprob"
    epochs_initial: int = 20
    epochs_pipeline: int = 15
    seed: int = 0
    lr_initial: float = 0.003
    lr_pipeline: float = 0.001
    lr_divisor: float = 1.1
    batch_size_initial: int = 8
    batch_size: int = 32
    clip_norm: float = 400.0
    beam_width: int = 5
    initial_augment: str = "specaugment"
    empty_pls: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not 0.0 <= self.budget_fraction <= 1.0:
            raise ValueError("budget_fraction must lie in [0, 1]")
        if self.delta < 1:
            raise ValueError("delta must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.uncertainty_metric not in METRICS:
            raise ValueError(f"unknown uncertainty metric {self.uncertainty_metric!r}")
        augment.policy_from_name(self.policy)

    @property
    def label(self):
        if self.variant in ("cr", "cr_filtered"):
            return f"{self.variant}-{augment.policy_from_name(self.policy).name}"
        return self.variant

    @property
    def uses_pls(self):
        return self.variant in ("pls", "pls_filtered", "cr", "cr_filtered") and not self.empty_pls

    @property
    def filtered(self):
        return self.variant in ("pls_filtered", "cr_filtered")

    @property
    def effective_lambda(self):
        return self.lam if self.variant in ("cr", "cr_filtered") else 0.0

    @property
    def effective_budget(self):
        return 1.0 if self.variant == "full_budget" else self.budget_fraction


def parse_variant(name):
    """CLI variant name -> (variant, policy); e.g. ``cr-sa`` -> ("cr", "specaugment")."""
    name = name.strip().lower()
    if name in VARIANTS:
        return name, "specaugment"
    base, _, pol = name.partition("-")
    if base in ("cr", "cr_filtered") and pol:
        if pol.endswith("-tau"):
            base, pol = "cr_filtered", pol[:-4]
        return base, augment.policy_from_name(pol).name
    raise ValueError(f"unknown variant {name!r}")


# -- pool state -------------------------------------------------------------

class Status(enum.Enum):
    UNLABELED = "unlabeled"
    HLS = "hls"
    PLS = "pls"
    FILTERED = "filtered"


@dataclass
class PoolRecord:
    id: str
    duration_samples: int
    score: float = 0.0
    status: Status = Status.UNLABELED
    transcript: str | None = None
    pseudo: list | None = None
    refreshed_at: int | None = None


@dataclass
class PoolState:
    records: dict

    @classmethod
    def from_utterances(cls, utts):
        return cls({u.id: PoolRecord(u.id, len(u.waveform)) for u in utts})

    def ids(self, status):
        return sorted(k for k, r in self.records.items() if r.status is status)

    def pseudo_labels(self):
        return {k: r.pseudo for k, r in self.records.items() if r.status is Status.PLS}

    def check(self):
        for r in self.records.values():
            if r.status is Status.PLS and r.pseudo is None:
                raise AssertionError(f"{r.id} is PLS without a pseudo-label")
            if r.status is Status.HLS and r.transcript is None:
                raise AssertionError(f"{r.id} is HLS without a transcript")


@dataclass
class TrainingReport:
    variant: str
    budget_fraction: float
    seed: int
    rows: list = field(default_factory=list)
    final_cer: float | None = None
    info: dict = field(default_factory=dict)

    def add_row(self, epoch, lr, loss_sup, loss_cr=None, test_cer=None, p_cer=None):
        if self.rows and epoch <= self.rows[-1]["epoch"]:
            raise ValueError("report rows must increase in epoch")
        self.rows.append({"epoch": epoch, "lr": lr, "loss_sup": loss_sup, "loss_cr": loss_cr,
                          "test_cer": test_cer, "p_cer": p_cer})

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for row in self.rows:
            writer.writerow([self.variant, _fmt(self.budget_fraction), self.seed]
                            + [_fmt(row[k]) for k in REPORT_HEADER[3:]])
        return buf.getvalue()

    def summary_row(self):
        return [self.variant, _fmt(self.budget_fraction), self.seed, _fmt(self.final_cer)]


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return repr(float(value))


def read_report_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_summary(path, reports):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_HEADER)
        for r in reports:
            writer.writerow(r.summary_row())


# -- features ---------------------------------------------------------------

class FeatureStore:
    """Genuine spectrograms cached per utterance, plus keyed augmentation."""

    def __init__(self, corpus: Corpus, frontend: FrontendConfig = FrontendConfig()):
        self.frontend = frontend
        self.utts = corpus.by_id()
        self._cache = {}

    def genuine(self, uid):
        frames = self._cache.get(uid)
        if frames is None:
            frames = self._cache[uid] = spectrogram(self.utts[uid].waveform, self.frontend).frames
        return frames

    def augmented(self, uid, policy, seed, epoch, tag="cr"):
        rng = RngStream.keyed(tag, seed, uid, epoch)
        if isinstance(policy, augment.SpecAugment):
            return augment.spec_augment(_as_spec(self.genuine(uid), self.frontend),
                                        policy.time_width, policy.freq_width,
                                        policy.time_masks, policy.freq_masks, rng).frames
        if isinstance(policy, augment.NoAugment):
            return self.genuine(uid)
        return augment.apply(policy, self.utts[uid].waveform, self.frontend, rng).frames


def _as_spec(frames, frontend):
    return Spectrogram(frames, frontend.stride_s, 0)


# -- training ---------------------------------------------------------------

def _shuffled(items, seed, tag, epoch):
    order = RngStream.keyed(tag, seed, epoch).generator().permutation(len(items))
    return [items[i] for i in order]


def _check_finite(value, what):
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite {what}: {value}")


def _sgd_step(model, loss, adam_state, lr, clip_norm):
    grads = ad.backward(loss)
    grads = ad.clip_global_norm(grads, clip_norm)
    ad.adam_step(model.params, grads, adam_state, lr)


def train_initial(corpus: Corpus, model_config: ModelConfig = ModelConfig(),
                  cfg: PipelineConfig = PipelineConfig(), store: FeatureStore | None = None):
    """Supervised training on the initial split with SpecAugment on the inputs.

    Returns ``(model, history)`` where history rows are (epoch, lr, loss).
    """
    store = store or FeatureStore(corpus)
    vocab = Vocabulary(corpus.chars)
    utts = corpus.utterances("initial")
    if not utts:
        raise ValueError("initial split is empty")
    model = Seq2Seq(model_config, vocab, seed=cfg.seed)
    model.set_feature_stats([store.genuine(u.id) for u in utts])
    policy = augment.policy_from_name(cfg.initial_augment)
    adam_state = ad.AdamState()
    items = [(u.id, vocab.encode(u.transcript)) for u in utts]
    history = []
    for epoch in range(cfg.epochs_initial):
        lr = ad.lr_at_epoch(cfg.lr_initial, epoch, cfg.lr_divisor)
        nll_total = tokens_total = 0.0
        batches = _shuffled(items, cfg.seed, "initial-shuffle", epoch)
        for start in range(0, len(batches), cfg.batch_size_initial):
            batch = batches[start:start + cfg.batch_size_initial]
            xs = [store.augmented(uid, policy, cfg.seed, epoch, tag="initial-aug")
                  for uid, _ in batch]
            logp, gold, mask = model.forward_teacher_forced(xs, [y for _, y in batch])
            loss = supervised_loss(logp, gold, mask)
            _check_finite(loss.item(), "initial training loss")
            nll_total += loss.item() * mask.sum()
            tokens_total += mask.sum()
            _sgd_step(model, loss, adam_state, lr, cfg.clip_norm)
        history.append((epoch, lr, nll_total / tokens_total))
    return model, history


@dataclass
class EpochStats:
    loss_sup: float
    loss_cr: float | None
    batches: int
    sup_tokens: float
    cr_tokens: float


def training_items(corpus: Corpus, pool: PoolState, vocab: Vocabulary):
    """(uid, target tokens, is_pseudo) for initial + HLS + PLS members."""
    items = [(u.id, vocab.encode(u.transcript), False) for u in corpus.utterances("initial")]
    for uid in pool.ids(Status.HLS):
        items.append((uid, vocab.encode(pool.records[uid].transcript), False))
    for uid in pool.ids(Status.PLS):
        items.append((uid, list(pool.records[uid].pseudo), True))
    return items


def train_epoch(model, adam_state, items, store: FeatureStore, lam, policy, lr, seed, epoch,
                batch_size=32, clip_norm=400.0):
    """One pass of supervised + lambda * consistency training over shuffled ``items``."""
    if not items:
        raise ValueError("nothing to train on")
    sup_nll = sup_tok = cr_nll = cr_tok = 0.0
    batches = 0
    order = _shuffled(items, seed, "shuffle", epoch)
    for start in range(0, len(order), batch_size):
        batch = order[start:start + batch_size]
        logp, gold, mask = model.forward_teacher_forced(
            [store.genuine(uid) for uid, _, _ in batch], [y for _, y, _ in batch])
        l_sup = supervised_loss(logp, gold, mask)
        _check_finite(l_sup.item(), "supervised loss")
        sup_nll += l_sup.item() * mask.sum()
        sup_tok += mask.sum()
        pseudo = [(uid, y) for uid, y, is_pseudo in batch if is_pseudo]
        l_cr = None
        if lam > 0 and pseudo:
            xs = [store.augmented(uid, policy, seed, epoch) for uid, _ in pseudo]
            logp_a, gold_a, mask_a = model.forward_teacher_forced(xs, [y for _, y in pseudo])
            l_cr = supervised_loss(logp_a, gold_a, mask_a)
            _check_finite(l_cr.item(), "consistency loss")
            cr_nll += l_cr.item() * mask_a.sum()
            cr_tok += mask_a.sum()
        loss = total_loss(l_sup, l_cr, lam) if l_cr is not None else l_sup
        _sgd_step(model, loss, adam_state, lr, clip_norm)
        batches += 1
    return EpochStats(sup_nll / sup_tok, cr_nll / cr_tok if cr_tok else None, batches,
                      sup_tok, cr_tok)


# -- active learning --------------------------------------------------------

def decode_ids(model, store: FeatureStore, ids, width=5, workers=1):
    """Best hypothesis per utterance id: {id: (tokens, normalised score)}."""
    with ad.no_grad():
        hyps = beam_search_batch(model, [store.genuine(i) for i in ids], BeamConfig(width=width),
                                 workers=workers)
    return {i: (list(h[0].tokens), float(h[0].score)) for i, h in zip(ids, hyps)}


def score_pool(model, store: FeatureStore, ids, metric="pprob", seed=0, width=5, workers=1):
    """Uncertainty score per utterance; lower means more uncertain."""
    ids = sorted(ids)
    if metric == "pprob":
        return {i: s for i, (_, s) in decode_ids(model, store, ids, width, workers).items()}
    if metric == "random":
        draws = RngStream.keyed("random-score", seed).generator().uniform(size=len(ids))
        return dict(zip(ids, draws.tolist()))
    vocab = model.vocab
    if metric == "oracle_loss":
        scores = {}
        with ad.no_grad():
            for i in ids:
                logp, gold, mask = model.forward_teacher_forced(
                    [store.genuine(i)], [vocab.encode(store.utts[i].transcript)])
                scores[i] = -supervised_loss(logp, gold, mask).item()
        return scores
    if metric == "oracle_cer":
        decoded = decode_ids(model, store, ids, width, workers)
        return {i: -cer([(store.utts[i].transcript, vocab.decode(decoded[i][0]))])
                for i in ids}
    raise ValueError(f"unknown uncertainty metric {metric!r}")


def _ascending(scores):
    return sorted(scores, key=lambda k: (scores[k], k))


def select_hls(pool: PoolState, scores, budget_fraction, oracle: Oracle | None = None):
    """Mark the most uncertain utterances HLS while their total duration fits the budget."""
    total = sum(r.duration_samples for r in pool.records.values())
    budget = budget_fraction * total
    used = 0
    for uid in _ascending({k: scores[k] for k in pool.records}):
        rec = pool.records[uid]
        rec.score = scores[uid]
        if used + rec.duration_samples > budget + 1e-9:
            break
        used += rec.duration_samples
        rec.status = Status.HLS
        rec.transcript = oracle.annotate(uid) if oracle is not None else None
    for uid, rec in pool.records.items():
        rec.score = scores[uid]
    return pool


def partition_subsets(scores, k=5):
    """Split ids sorted by ascending score into k near-equal subsets, most uncertain first."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(scores):
        raise ValueError("more subsets than pool members")
    ordered = _ascending(scores)
    base, extra = divmod(len(ordered), k)
    out, pos = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        out.append(ordered[pos:pos + size])
        pos += size
    return out


def preliminary_filter(pool: PoolState, scores, tau):
    """Drop pseudo-label candidates whose score falls below ``tau``."""
    for uid, rec in pool.records.items():
        if rec.status in (Status.UNLABELED, Status.PLS) and scores[uid] < tau:
            rec.status = Status.FILTERED
            rec.pseudo = None
    if not any(r.status in (Status.UNLABELED, Status.PLS) for r in pool.records.values()):
        log.warning("preliminary filter removed every pseudo-label candidate; HLS only")
    return pool


def refresh_pseudo_labels(model, pool: PoolState, store: FeatureStore, epoch, width=5,
                          workers=1):
    """Re-decode every pseudo-label candidate with the current (frozen) model."""
    ids = sorted(k for k, r in pool.records.items()
                 if r.status in (Status.UNLABELED, Status.PLS))
    if not ids:
        return pool
    for uid, (tokens, _) in decode_ids(model, store, ids, width, workers).items():
        rec = pool.records[uid]
        rec.status = Status.PLS
        rec.pseudo = tokens
        rec.refreshed_at = epoch
    return pool


def refresh_epochs(epochs, delta):
    return [e for e in range(epochs) if e % delta == 0]


def evaluate_cer(model, store: FeatureStore, utts, width=5, workers=1):
    decoded = decode_ids(model, store, [u.id for u in utts], width, workers)
    return cer((u.transcript, model.vocab.decode(decoded[u.id][0])) for u in utts)


def pseudo_label_cer(pool: PoolState, store: FeatureStore, vocab: Vocabulary):
    pseudo = pool.pseudo_labels()
    if not pseudo:
        return None
    return p_cer({k: vocab.decode(v) for k, v in pseudo.items()},
                 {k: store.utts[k].transcript for k in pseudo})


# -- orchestration ----------------------------------------------------------

def run_pipeline(cfg: PipelineConfig, corpus: Corpus, model_config: ModelConfig = ModelConfig(),
                 initial=None, store: FeatureStore | None = None, hls_ids=None,
                 return_model=False, out_dir=None):
    """Execute one variant end to end and return its TrainingReport.

    ``initial`` may carry a pre-trained ``(model, history)`` pair from
    :func:`train_initial` with the same seed; ``hls_ids`` replaces the
    uncertainty-driven selection with an explicit set. With ``out_dir`` the
    report CSV and the final checkpoint are written there.
    """
    store = store or FeatureStore(corpus)
    report = TrainingReport(cfg.label, cfg.effective_budget, cfg.seed,
                            info={"config": asdict(cfg)})
    if initial is None:
        initial = train_initial(corpus, model_config, cfg, store)
    init_model, history = initial
    vocab = init_model.vocab
    test = corpus.utterances("test")
    if cfg.variant == "initial_only":
        for epoch, lr, loss in history[:-1]:
            report.add_row(epoch, lr, loss)
        report.final_cer = evaluate_cer(init_model, store, test, cfg.beam_width, cfg.workers)
        if history:
            epoch, lr, loss = history[-1]
            report.add_row(epoch, lr, loss, test_cer=report.final_cer)
        else:
            report.add_row(0, cfg.lr_initial, None, test_cer=report.final_cer)
        return _finish(report, init_model, out_dir, return_model)

    model = init_model.copy()
    pool_utts = corpus.utterances("unlabeled")
    pool = PoolState.from_utterances(pool_utts)
    oracle = Oracle(corpus)
    pool_ids = [u.id for u in pool_utts]
    if hls_ids is not None:
        scores = {i: (0.0 if i in set(hls_ids) else 1.0) for i in pool_ids}
        for uid in hls_ids:
            pool.records[uid].status = Status.HLS
            pool.records[uid].transcript = oracle.annotate(uid)
    else:
        needs_scores = cfg.effective_budget < 1.0 or cfg.filtered
        scores = (score_pool(model, store, pool_ids, cfg.uncertainty_metric, cfg.seed,
                             cfg.beam_width, cfg.workers)
                  if needs_scores else {i: 0.0 for i in pool_ids})
        select_hls(pool, scores, cfg.effective_budget, oracle)
    if cfg.filtered and cfg.uses_pls:
        pf_scores = scores if cfg.uncertainty_metric == "pprob" else score_pool(
            model, store, pool_ids, "pprob", cfg.seed, cfg.beam_width, cfg.workers)
        preliminary_filter(pool, pf_scores, cfg.tau)
    report.info.update(hls=len(pool.ids(Status.HLS)), filtered=len(pool.ids(Status.FILTERED)),
                       hls_seconds=oracle.spent_s)
    policy = augment.policy_from_name(cfg.policy)
    lam = cfg.effective_lambda
    adam_state = ad.AdamState()
    refresh_at = set(refresh_epochs(cfg.epochs_pipeline, cfg.delta)) if cfg.uses_pls else set()
    for epoch in range(cfg.epochs_pipeline):
        if epoch in refresh_at:
            refresh_pseudo_labels(model, pool, store, epoch, cfg.beam_width, cfg.workers)
        pool.check()
        lr = ad.lr_at_epoch(cfg.lr_pipeline, epoch, cfg.lr_divisor)
        items = training_items(corpus, pool, vocab)
        stats = train_epoch(model, adam_state, items, store, lam, policy, lr, cfg.seed, epoch,
                            cfg.batch_size, cfg.clip_norm)
        test_cer = evaluate_cer(model, store, test, cfg.beam_width, cfg.workers)
        report.add_row(epoch, lr, stats.loss_sup, stats.loss_cr, test_cer,
                       pseudo_label_cer(pool, store, vocab))
    report.final_cer = report.rows[-1]["test_cer"] if report.rows else evaluate_cer(
        model, store, test, cfg.beam_width, cfg.workers)
    return _finish(report, model, out_dir, return_model)


def _finish(report, model, out_dir, return_model):
    if out_dir is not None:
        path = write_report(report, out_dir)
        save_checkpoint(path.with_name(path.stem.replace("report_", "model_") + ".ckpt"), model,
                        extra={"variant": report.variant, "budget_fraction": report.budget_fraction,
                               "seed": report.seed, "final_cer": report.final_cer})
    return (report, model) if return_model else report


def write_report(report: TrainingReport, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = f"{report.variant}_b{report.budget_fraction:g}_s{report.seed}"
    path = out / f"report_{name}.csv"
    path.write_text(report.to_csv(), encoding="utf-8")
    return path


def with_overrides(cfg: PipelineConfig, **kw):
    return replace(cfg, **kw)
