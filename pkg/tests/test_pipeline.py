import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alcr import augment
from alcr import autodiff as ad
from alcr.corpus import generate_corpus
from alcr.model import ModelConfig, load_checkpoint, supervised_loss
from alcr.pipeline import (REPORT_HEADER, FeatureStore, PipelineConfig, PoolRecord, PoolState,
                           Status, TrainingDiverged, TrainingReport, partition_subsets,
                           parse_variant, preliminary_filter, read_report_csv, refresh_epochs,
                           refresh_pseudo_labels, run_pipeline, score_pool, select_hls,
                           train_epoch, train_initial, training_items, with_overrides,
                           write_summary)

TINY_MODEL = ModelConfig(input_projection=8, hidden_size=8, embedding_size=4, attention_size=8,
                         location_kernel=3, location_channels=2)
TINY_CFG = PipelineConfig(epochs_initial=2, epochs_pipeline=3, batch_size=4,
                          batch_size_initial=4, budget_fraction=0.3, beam_width=2)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(0, sizes={"initial": 8, "unlabeled": 10, "test": 4}, length_range=(1, 4))


@pytest.fixture(scope="module")
def store(corpus):
    return FeatureStore(corpus)


@pytest.fixture(scope="module")
def initial(corpus, store):
    return train_initial(corpus, TINY_MODEL, TINY_CFG, store)


def run(corpus, store, initial, **kw):
    return run_pipeline(with_overrides(TINY_CFG, **kw), corpus, TINY_MODEL, initial=initial,
                        store=store)


def equal_pool(n, seconds=1):
    return PoolState({f"u{i}": PoolRecord(f"u{i}", seconds * 4000) for i in range(n)})


# -- config -----------------------------------------------------------------

def test_config_validation():
    for bad in ({"variant": "x"}, {"budget_fraction": 1.5}, {"delta": 0}, {"lam": -1},
                {"uncertainty_metric": "entropy"}, {"policy": "reverb"}, {"workers": 0}):
        with pytest.raises(ValueError):
            PipelineConfig(**bad)


def test_variant_names():
    assert parse_variant("cr-sa") == ("cr", "specaugment")
    assert parse_variant("cr-awgn") == ("cr", "awgn")
    assert parse_variant("cr-sa-tau") == ("cr_filtered", "specaugment")
    assert parse_variant("HLS") == ("hls", "specaugment")
    assert parse_variant("cr") == ("cr", "specaugment")
    with pytest.raises(ValueError):
        parse_variant("hls-sa")
    assert PipelineConfig(variant="cr", policy="p").label == "cr-pitch"
    assert PipelineConfig(variant="pls").label == "pls"
    full = PipelineConfig(variant="full_budget", budget_fraction=0.1)
    assert full.effective_budget == 1.0 and not full.uses_pls
    assert PipelineConfig(variant="pls").effective_lambda == 0.0
    assert PipelineConfig(variant="cr", lam=0.5).effective_lambda == 0.5


# -- selection --------------------------------------------------------------

def test_select_hls_examples():
    pool = select_hls(equal_pool(3), {"u0": -0.9, "u1": -0.1, "u2": -0.5}, 1 / 3)
    assert pool.ids(Status.HLS) == ["u0"]
    assert select_hls(equal_pool(3), dict.fromkeys(["u0", "u1", "u2"], -1.0), 0).ids(Status.HLS) == []
    assert len(select_hls(equal_pool(3), dict.fromkeys(["u0", "u1", "u2"], -1.0), 1).ids(Status.HLS)) == 3


def test_select_hls_ties_break_by_id():
    pool = select_hls(equal_pool(4), dict.fromkeys(["u3", "u1", "u2", "u0"], 0.0), 0.5)
    assert pool.ids(Status.HLS) == ["u0", "u1"]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(400, 40_000), st.floats(-5, 0)), min_size=1, max_size=30),
       st.floats(0, 1))
def test_budget_ledger(items, fraction):
    pool = PoolState({f"u{i:02d}": PoolRecord(f"u{i:02d}", n) for i, (n, _) in enumerate(items)})
    scores = {f"u{i:02d}": s for i, (_, s) in enumerate(items)}
    select_hls(pool, scores, fraction)
    total = sum(n for n, _ in items)
    hls = pool.ids(Status.HLS)
    assert sum(pool.records[k].duration_samples for k in hls) <= fraction * total + 1e-9
    # the selection is a prefix of the ascending order
    order = sorted(scores, key=lambda k: (scores[k], k))
    assert hls == sorted(order[:len(hls)])
    if len(hls) < len(order):
        nxt = pool.records[order[len(hls)]].duration_samples
        used = sum(pool.records[k].duration_samples for k in hls)
        assert used + nxt > fraction * total


def test_partition_examples():
    scores = {f"u{i}": float(-i) for i in range(10)}
    parts = partition_subsets(scores, 5)
    assert [len(p) for p in parts] == [2] * 5
    assert parts[0] == ["u9", "u8"]
    assert partition_subsets(scores, 1) == [sorted(scores, key=scores.get)]
    with pytest.raises(ValueError):
        partition_subsets(scores, 11)
    with pytest.raises(ValueError):
        partition_subsets(scores, 0)


@given(st.lists(st.floats(-10, 0), min_size=1, max_size=40), st.integers(1, 40))
def test_partition_properties(values, k):
    scores = {f"u{i:02d}": v for i, v in enumerate(values)}
    if k > len(scores):
        return
    parts = partition_subsets(scores, k)
    flat = [x for p in parts for x in p]
    assert flat == sorted(scores, key=lambda u: (scores[u], u))
    sizes = [len(p) for p in parts]
    assert max(sizes) - min(sizes) <= 1 and sizes == sorted(sizes, reverse=True)


def test_preliminary_filter(caplog):
    pool = preliminary_filter(equal_pool(2), {"u0": -0.9, "u1": -0.3}, -0.5)
    assert pool.ids(Status.FILTERED) == ["u0"] and pool.ids(Status.UNLABELED) == ["u1"]
    assert preliminary_filter(equal_pool(2), {"u0": -0.9, "u1": -0.3}, -math.inf).ids(Status.FILTERED) == []
    pool = equal_pool(3)
    pool.records["u2"].status = Status.HLS
    with caplog.at_level(logging.WARNING):
        preliminary_filter(pool, {"u0": -0.1, "u1": 0.0, "u2": -2.0}, 0.0)
    assert pool.ids(Status.FILTERED) == ["u0"]
    # u1 sits exactly on the threshold and is kept
    assert pool.ids(Status.HLS) == ["u2"]
    with caplog.at_level(logging.WARNING):
        preliminary_filter(pool, {"u0": -0.1, "u1": -1e-9, "u2": -2.0}, 0.0)
    assert "HLS only" in caplog.text


def test_refresh_schedule():
    assert refresh_epochs(15, 5) == [0, 5, 10]
    assert refresh_epochs(4, 1) == [0, 1, 2, 3]


# -- scoring and training ---------------------------------------------------

def test_pprob_scores_nonpositive_and_random_reproducible(corpus, store, initial):
    ids = [u.id for u in corpus.utterances("unlabeled")]
    scores = score_pool(initial[0], store, ids, "pprob", width=2)
    assert set(scores) == set(ids) and all(s <= 0 for s in scores.values())
    assert score_pool(initial[0], store, ids, "random", seed=3) == score_pool(
        initial[0], store, ids[::-1], "random", seed=3)
    loss = score_pool(initial[0], store, ids, "oracle_loss")
    assert all(v <= 0 for v in loss.values())
    cer_scores = score_pool(initial[0], store, ids, "oracle_cer", width=2)
    assert all(v <= 0 for v in cer_scores.values())


def test_refresh_is_deterministic(corpus, store, initial):
    ids = [u.id for u in corpus.utterances("unlabeled")]
    a = refresh_pseudo_labels(initial[0], PoolState.from_utterances(corpus.utterances("unlabeled")),
                              store, 0, width=2)
    b = refresh_pseudo_labels(initial[0], PoolState.from_utterances(corpus.utterances("unlabeled")),
                              store, 4, width=2)
    assert a.ids(Status.PLS) == sorted(ids)
    assert a.pseudo_labels() == b.pseudo_labels()
    assert {r.refreshed_at for r in b.records.values()} == {4}


def test_train_initial_determinism_and_zero_epochs(corpus, store, initial):
    again = train_initial(corpus, TINY_MODEL, TINY_CFG, store)
    for k, v in initial[0].state_dict().items():
        np.testing.assert_array_equal(again[0].state_dict()[k], v)
    assert initial[1] == again[1]
    fresh, hist = train_initial(corpus, TINY_MODEL, with_overrides(TINY_CFG, epochs_initial=0), store)
    assert hist == []
    from alcr.model import Seq2Seq
    init = Seq2Seq(TINY_MODEL, fresh.vocab, seed=TINY_CFG.seed)
    for k, v in init.params.items():
        np.testing.assert_array_equal(fresh.params[k].data, v.data)


def test_train_initial_loss_decreases(corpus, store):
    _, hist = train_initial(corpus, TINY_MODEL, with_overrides(TINY_CFG, epochs_initial=6), store)
    assert hist[-1][2] < hist[0][2]


def test_reported_loss_matches_recomputation(corpus, store, initial):
    model = initial[0].copy()
    pool = refresh_pseudo_labels(model, PoolState.from_utterances(corpus.utterances("unlabeled")),
                                 store, 0, width=2)
    items = training_items(corpus, pool, model.vocab)
    # with a zero learning rate the parameters stay fixed across batches
    stats = train_epoch(model, ad.AdamState(), items, store, 1.0, augment.SpecAugment(), 0.0,
                        0, 0, batch_size=5)
    with ad.no_grad():
        logp, gold, mask = model.forward_teacher_forced([store.genuine(u) for u, _, _ in items],
                                                        [y for _, y, _ in items])
        whole = supervised_loss(logp, gold, mask).item()
    assert stats.loss_sup == pytest.approx(whole, abs=1e-9)
    assert stats.batches == math.ceil(len(items) / 5)
    assert stats.loss_cr is not None
    for k, v in initial[0].params.items():
        np.testing.assert_array_equal(model.params[k].data, v.data)


def test_nan_parameters_abort(corpus, store, initial):
    model = initial[0].copy()
    model.params["out.b"].data[0] = np.nan
    items = training_items(corpus, PoolState.from_utterances([]), model.vocab)
    with pytest.raises(TrainingDiverged):
        train_epoch(model, ad.AdamState(), items, store, 0.0, augment.NoAugment(), 1e-3, 0, 0)


# -- end to end -------------------------------------------------------------

def test_initial_only_report(corpus, store, initial):
    rep = run(corpus, store, initial, variant="initial_only")
    assert [r["epoch"] for r in rep.rows] == [0, 1]
    assert rep.rows[-1]["test_cer"] == rep.final_cer >= 0
    assert rep.rows[0]["test_cer"] is None


def test_variant_columns(corpus, store, initial):
    hls = run(corpus, store, initial, variant="hls")
    pls = run(corpus, store, initial, variant="pls")
    cr = run(corpus, store, initial, variant="cr")
    full = run(corpus, store, initial, variant="full_budget")
    assert all(r["p_cer"] is None and r["loss_cr"] is None for r in hls.rows + full.rows)
    assert all(r["p_cer"] is not None and r["loss_cr"] is None for r in pls.rows)
    assert all(r["p_cer"] is not None and r["loss_cr"] is not None for r in cr.rows)
    assert full.budget_fraction == 1.0 and full.info["hls"] == 10
    assert [r["epoch"] for r in cr.rows] == [0, 1, 2]
    assert cr.variant == "cr-specaugment" and hls.info["hls_seconds"] > 0


def test_cr_with_zero_lambda_and_no_pls_matches_hls(corpus, store, initial):
    hls = run(corpus, store, initial, variant="hls")
    cr = run(corpus, store, initial, variant="cr", lam=0.0, empty_pls=True)
    assert cr.rows == hls.rows and cr.final_cer == hls.final_cer
    strip = lambda text: [line.split(",", 1)[1] for line in text.splitlines()]
    assert strip(cr.to_csv()) == strip(hls.to_csv())


def test_filtered_variant_records_filtered(corpus, store, initial):
    rep = run(corpus, store, initial, variant="cr_filtered", tau=0.0)
    assert rep.info["filtered"] == 10 - rep.info["hls"]
    assert all(r["p_cer"] is None and r["loss_cr"] is None for r in rep.rows)


def test_delta_schedules_share_first_epoch(corpus, store, initial):
    d1 = run(corpus, store, initial, variant="cr", delta=1)
    d5 = run(corpus, store, initial, variant="cr", delta=5)
    assert d1.rows[0] == d5.rows[0]
    assert d1.rows[1:] != d5.rows[1:]


def test_repeat_runs_are_byte_identical(corpus, store, initial, tmp_path):
    cfg = with_overrides(TINY_CFG, variant="cr")
    a = run_pipeline(cfg, corpus, TINY_MODEL, store=store, out_dir=tmp_path / "a")
    b = run_pipeline(cfg, corpus, TINY_MODEL, out_dir=tmp_path / "b")
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == ["model_cr-specaugment_b0.3_s0.ckpt", "report_cr-specaugment_b0.3_s0.csv"]
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert a.to_csv() == b.to_csv()
    _, extra = load_checkpoint(tmp_path / "a" / files[0])
    assert extra["final_cer"] == a.final_cer


def test_workers_do_not_change_results(corpus, store, initial):
    one = run(corpus, store, initial, variant="pls")
    many = run(corpus, store, initial, variant="pls", workers=3)
    assert one.to_csv() == many.to_csv()


def test_explicit_hls_ids(corpus, store, initial):
    ids = [u.id for u in corpus.utterances("unlabeled")][:3]
    rep = run_pipeline(with_overrides(TINY_CFG, variant="hls"), corpus, TINY_MODEL,
                       initial=initial, store=store, hls_ids=ids)
    assert rep.info["hls"] == 3


# -- report files -----------------------------------------------------------

def test_report_csv_format(tmp_path):
    rep = TrainingReport("hls", 0.1, 2)
    rep.add_row(0, 0.001, 1.5, None, 20.0)
    rep.add_row(1, 0.001 / 1.1, 1.25, 0.5, 10.0, 33.3)
    with pytest.raises(ValueError):
        rep.add_row(1, 0.1, 1.0)
    lines = rep.to_csv().splitlines()
    assert lines[0] == ",".join(REPORT_HEADER)
    assert lines[1] == "hls,0.1,2,0,0.001,1.5,,20.0,"
    rep.final_cer = 10.0
    path = tmp_path / "summary.csv"
    write_summary(path, [rep])
    assert read_report_csv(path) == [{"variant": "hls", "budget_fraction": "0.1", "seed": "2",
                                      "final_cer": "10.0"}]
