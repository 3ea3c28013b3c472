"""Command-line entry point: ``alcr {synth,train-initial,score,run,report}``.

Every command reads a YAML (or JSON) run configuration; command-line
flags override file values and the merged configuration is written to
``config.effective.yaml`` in the output directory. Exit codes: 0 on
success, 1 for usage or configuration errors, 2 for runtime failures.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import statistics
import sys
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from alcr.corpus import (CORPUS_META_NAME, DEFAULT_SIZES, SynthConfig, generate_corpus,
                         generate_heterogeneous_corpus, load_corpus)
from alcr.dsp import FrontendConfig
from alcr.model import ModelConfig, load_checkpoint, save_checkpoint
from alcr.pipeline import (PipelineConfig, FeatureStore, partition_subsets, parse_variant,
                           read_report_csv, run_pipeline, score_pool, train_initial)

log = logging.getLogger("alcr")

OUTPUT_ROOT_ENV = "ALCR_OUTPUT_ROOT"
EFFECTIVE_CONFIG = "config.effective.yaml"


class UsageError(Exception):
    pass


# -- configuration ----------------------------------------------------------

@dataclass
class CorpusSection:
    dir: str | None = None
    seed: int | None = None
    sizes: dict = field(default_factory=lambda: dict(DEFAULT_SIZES))
    length_range: list = field(default_factory=lambda: [3, 10])
    heterogeneous: bool = False
    synth: dict = field(default_factory=dict)


@dataclass
class GridSection:
    variants: list = field(default_factory=lambda: ["initial_only", "hls", "pls", "cr-sa"])
    budgets: list = field(default_factory=lambda: [0.1])
    seeds: list = field(default_factory=lambda: [0])


@dataclass
class RunConfig:
    output_dir: str | None = None
    seed: int = 0
    corpus: CorpusSection = field(default_factory=CorpusSection)
    frontend: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    pipeline: dict = field(default_factory=dict)
    grid: GridSection = field(default_factory=GridSection)

    # typed views; construction validates values and rejects unknown keys
    def synth_config(self):
        kw = dict(self.corpus.synth)
        if "tones" in kw:
            kw["tones"] = tuple(float(t) for t in kw["tones"])
        return _build(SynthConfig, kw, "corpus.synth")

    def frontend_config(self):
        return _build(FrontendConfig, self.frontend, "frontend")

    def model_config(self):
        return _build(ModelConfig, self.model, "model")

    def pipeline_config(self, **overrides):
        return _build(PipelineConfig, {**self.pipeline, **overrides}, "pipeline")

    @property
    def out(self):
        return Path(self.output_dir)

    @property
    def corpus_dir(self):
        return Path(self.corpus.dir) if self.corpus.dir else self.out / "corpus"

    @property
    def corpus_seed(self):
        return self.seed if self.corpus.seed is None else self.corpus.seed


_SECTIONS = {"corpus": CorpusSection, "grid": GridSection}
_GRID_KEYS = ("variant", "policy", "budget_fraction", "seed")


def _build(cls, values, where):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {where}: {exc}") from None


def parse_config(data):
    """Validate a raw mapping into a RunConfig."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise UsageError("configuration must be a mapping")
    data = dict(data)
    for name, cls in _SECTIONS.items():
        section = data.get(name) or {}
        if not isinstance(section, dict):
            raise UsageError(f"{name} must be a mapping")
        data[name] = _build(cls, section, name)
    for name in ("frontend", "model", "pipeline"):
        if not isinstance(data.get(name) or {}, dict):
            raise UsageError(f"{name} must be a mapping")
        data[name] = dict(data.get(name) or {})
    cfg = _build(RunConfig, data, "configuration")
    clash = sorted(set(cfg.pipeline) & set(_GRID_KEYS))
    if clash:
        raise UsageError(f"pipeline.{clash[0]} is set per run; use the grid section or flags")
    cfg.synth_config()
    cfg.frontend_config()
    cfg.model_config()
    cfg.pipeline_config()
    for v in cfg.grid.variants:
        try:
            parse_variant(str(v))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    for b in cfg.grid.budgets:
        if not isinstance(b, (int, float)) or not 0 <= b <= 1:
            raise UsageError(f"budget {b!r} must lie in [0, 1]")
    return cfg


def load_config(path):
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from None


def config_to_dict(cfg: RunConfig):
    return asdict(cfg)


def dump_config(cfg: RunConfig):
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True, default_flow_style=False)


def resolve_config(args):
    raw = load_config(args.config)
    cfg = parse_config(raw)
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    if cfg.output_dir is None:
        cfg.output_dir = os.environ.get(OUTPUT_ROOT_ENV, "runs")
    if getattr(args, "corpus", None):
        cfg.corpus.dir = args.corpus
    grid = cfg.grid
    if getattr(args, "variant", None):
        grid = replace(grid, variants=list(args.variant))
    if getattr(args, "budget", None):
        grid = replace(grid, budgets=list(args.budget))
    if getattr(args, "seed", None):
        grid = replace(grid, seeds=list(args.seed))
    cfg.grid = grid
    pipeline = dict(cfg.pipeline)
    for key in ("epochs_initial", "epochs_pipeline", "delta", "lam", "tau", "workers"):
        value = getattr(args, key, None)
        if value is not None:
            pipeline[key] = value
    metric = getattr(args, "metric", None)
    if metric:
        pipeline["uncertainty_metric"] = metric
    cfg.pipeline = pipeline
    # re-validate after overrides
    return parse_config(config_to_dict(cfg))


def write_effective(cfg: RunConfig):
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / EFFECTIVE_CONFIG).write_text(dump_config(cfg), encoding="utf-8")


# -- shared steps -----------------------------------------------------------

def _synthesize(cfg: RunConfig):
    kw = dict(sizes=cfg.corpus.sizes, length_range=tuple(cfg.corpus.length_range),
              cfg=cfg.synth_config(), out_dir=cfg.corpus_dir)
    gen = generate_heterogeneous_corpus if cfg.corpus.heterogeneous else generate_corpus
    return gen(cfg.corpus_seed, **kw)


def _load_corpus(cfg: RunConfig):
    if not (cfg.corpus_dir / CORPUS_META_NAME).exists():
        raise RuntimeError(f"no corpus at {cfg.corpus_dir}; run `alcr synth` first")
    return load_corpus(cfg.corpus_dir)


def _initial_fingerprint(cfg: RunConfig, pipe: PipelineConfig, corpus_dir):
    keys = ("epochs_initial", "lr_initial", "lr_divisor", "batch_size_initial", "clip_norm",
            "initial_augment", "seed")
    meta = (Path(corpus_dir) / CORPUS_META_NAME).read_bytes()
    blob = json.dumps({"model": asdict(cfg.model_config()),
                       "frontend": asdict(cfg.frontend_config()),
                       "train": {k: getattr(pipe, k) for k in keys},
                       "corpus": hashlib.sha256(meta).hexdigest()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def _initial_path(cfg: RunConfig, seed):
    return cfg.out / "initial" / f"initial_s{seed}.ckpt"


def _initial_model(cfg: RunConfig, corpus, store, seed, retrain=False):
    """Load the cached initial model for ``seed`` or train and cache it."""
    pipe = cfg.pipeline_config(seed=seed)
    path = _initial_path(cfg, seed)
    fingerprint = _initial_fingerprint(cfg, pipe, cfg.corpus_dir)
    if path.exists() and not retrain:
        model, extra = load_checkpoint(path)
        if extra.get("fingerprint") == fingerprint:
            return model, [tuple(h) for h in extra["history"]]
        log.info("initial checkpoint %s is stale; retraining", path)
    model, history = train_initial(corpus, cfg.model_config(), pipe, store)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, model, extra={"fingerprint": fingerprint, "seed": seed,
                                        "history": [list(h) for h in history]})
    with open(path.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "lr", "loss"])
        writer.writerows([e, repr(lr), repr(loss)] for e, lr, loss in history)
    return model, history


def _fmt_budget(b):
    return f"{float(b):g}"


# -- commands ---------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args):
    corpus = _synthesize(cfg)
    durations = corpus.durations()
    for name, utts in corpus.splits.items():
        print(f"{name}\t{len(utts)} utterances\t{durations[name]:.1f} s")
    print(f"corpus written to {cfg.corpus_dir}")


def cmd_train_initial(cfg: RunConfig, args):
    corpus = _load_corpus(cfg)
    store = FeatureStore(corpus, cfg.frontend_config())
    for seed in cfg.grid.seeds:
        _, history = _initial_model(cfg, corpus, store, seed, retrain=args.force)
        last = f"{history[-1][2]:.4f}" if history else "n/a"
        print(f"seed {seed}: {len(history)} epochs, final loss {last} -> "
              f"{_initial_path(cfg, seed)}")


def cmd_score(cfg: RunConfig, args):
    corpus = _load_corpus(cfg)
    store = FeatureStore(corpus, cfg.frontend_config())
    metric = cfg.pipeline_config().uncertainty_metric
    out = cfg.out / "scores"
    out.mkdir(parents=True, exist_ok=True)
    ids = [u.id for u in corpus.utterances("unlabeled")]
    for seed in cfg.grid.seeds:
        pipe = cfg.pipeline_config(seed=seed)
        model, _ = _initial_model(cfg, corpus, store, seed)
        scores = score_pool(model, store, ids, metric, seed, pipe.beam_width, pipe.workers)
        subset = {uid: k + 1 for k, part in enumerate(partition_subsets(scores, args.subsets))
                  for uid in part}
        path = out / f"scores_{metric}_s{seed}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["id", "score", "subset"])
            for uid in sorted(scores, key=lambda k: (scores[k], k)):
                writer.writerow([uid, repr(float(scores[uid])), subset[uid]])
        print(f"seed {seed}: {len(scores)} scores -> {path}")


def cmd_run(cfg: RunConfig, args):
    corpus = _load_corpus(cfg)
    store = FeatureStore(corpus, cfg.frontend_config())
    reports_dir = cfg.out / "reports"
    failures = 0
    for seed in cfg.grid.seeds:
        initial = _initial_model(cfg, corpus, store, seed)
        for name in cfg.grid.variants:
            variant, policy = parse_variant(str(name))
            # budget-independent variants run once
            budgets = {"initial_only": [0.0], "full_budget": [1.0]}.get(variant, cfg.grid.budgets)
            for budget in budgets:
                pipe = cfg.pipeline_config(variant=variant, policy=policy, seed=seed,
                                           budget_fraction=float(budget))
                try:
                    report = run_pipeline(pipe, corpus, cfg.model_config(), initial=initial,
                                          store=store, out_dir=reports_dir)
                except Exception as exc:  # keep going with the rest of the grid
                    log.error("%s budget %s seed %s failed: %s", name, budget, seed, exc)
                    failures += 1
                    continue
                print(f"{report.variant}\tbudget {_fmt_budget(budget)}\tseed {seed}\t"
                      f"final CER {report.final_cer:.2f}")
    write_summary_from_reports(reports_dir, cfg.out / "summary.csv")
    if failures:
        raise RuntimeError(f"{failures} grid cell(s) failed")


def _report_files(root):
    root = Path(root)
    base = root / "reports" if (root / "reports").is_dir() else root
    return sorted(base.glob("report_*.csv"))


def _final_rows(paths):
    """(variant, budget, seed, final_cer) from the last row of each report."""
    out = []
    for path in paths:
        rows = read_report_csv(path)
        if not rows:
            continue
        last = rows[-1]
        out.append((last["variant"], last["budget_fraction"], int(last["seed"]),
                    last["test_cer"]))
    return sorted(out, key=lambda r: (r[0], float(r[1]), r[2]))


def write_summary_from_reports(reports_dir, path):
    rows = _final_rows(_report_files(reports_dir))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "budget_fraction", "seed", "final_cer"])
        writer.writerows(rows)
    return rows


def pivot_medians(rows):
    """budget x variant table of median final CER over seeds."""
    cells = defaultdict(list)
    for variant, budget, _, value in rows:
        if value != "":
            cells[(budget, variant)].append(float(value))
    budgets = sorted({b for b, _ in cells}, key=float)
    variants = sorted({v for _, v in cells})
    table = [[b] + [repr(statistics.median(cells[(b, v)])) if cells.get((b, v)) else ""
                    for v in variants] for b in budgets]
    return ["budget_fraction"] + variants, table


def cmd_report(cfg: RunConfig, args):
    root = Path(args.dir) if args.dir else cfg.out
    paths = _report_files(root)
    if not paths:
        raise RuntimeError(f"no report_*.csv files under {root}")
    rows = write_summary_from_reports(paths[0].parent, root / "summary.csv")
    header, table = pivot_medians(rows)
    with open(root / "table.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(table)
    with open(root / "curves.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "budget_fraction", "seed", "epoch", "test_cer", "p_cer"])
        for path in paths:
            for row in read_report_csv(path):
                writer.writerow([row["variant"], row["budget_fraction"], row["seed"],
                                 row["epoch"], row["test_cer"], row["p_cer"]])
    print(",".join(header))
    for line in table:
        print(",".join(line))
    print(f"{len(rows)} runs summarised in {root}")


# -- argument parsing -------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _budget(text):
    if "/" in text:
        num, _, den = text.partition("/")
        return float(num) / float(den)
    return float(text)


def build_parser():
    parser = _Parser(prog="alcr", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("-c", "--config", help="YAML or JSON run configuration")
        p.add_argument("-o", "--out", help=f"output directory (default ${OUTPUT_ROOT_ENV} or runs)")
        p.add_argument("--corpus", help="corpus directory (default <out>/corpus)")
        return p

    common(sub.add_parser("synth", help="generate the synthetic corpus"))
    p = common(sub.add_parser("train-initial", help="train and cache initial models"))
    p.add_argument("--seed", type=int, action="append")
    p.add_argument("--epochs-initial", type=int)
    p.add_argument("--force", action="store_true", help="retrain even if a checkpoint exists")
    p = common(sub.add_parser("score", help="score the unlabeled pool"))
    p.add_argument("--seed", type=int, action="append")
    p.add_argument("--metric", choices=["pprob", "oracle_loss", "oracle_cer", "random"])
    p.add_argument("--subsets", type=int, default=5)
    p.add_argument("--workers", type=int)
    p = common(sub.add_parser("run", help="run the variant grid"))
    p.add_argument("--variant", action="append", help="e.g. hls, pls, cr-sa, cr-sa-tau")
    p.add_argument("--budget", type=_budget, action="append", help="fraction, e.g. 0.1 or 1/3")
    p.add_argument("--seed", type=int, action="append")
    p.add_argument("--epochs-initial", type=int)
    p.add_argument("--epochs-pipeline", type=int)
    p.add_argument("--delta", type=int)
    p.add_argument("--lam", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--metric", choices=["pprob", "oracle_loss", "oracle_cer", "random"])
    p.add_argument("--workers", type=int, help="decoding threads")
    p = common(sub.add_parser("report", help="aggregate report CSVs"))
    p.add_argument("dir", nargs="?", help="run output directory (default <out>)")
    return parser


COMMANDS = {"synth": cmd_synth, "train-initial": cmd_train_initial, "score": cmd_score,
            "run": cmd_run, "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except UsageError as exc:
        print(f"alcr: {exc}", file=sys.stderr)
        return 1
    try:
        if args.command != "report" or not args.dir:
            write_effective(cfg)
        COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"alcr: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"alcr: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
