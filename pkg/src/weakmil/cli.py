"""Command-line pipeline: ``weakmil <stage> [options]``.

Stages write under ``--out``::

    corpus/           synthetic slides, manifest.csv, manifest_markers.json
    preprocess/       grids.csv
    ssl/              encoder.moco, ssl_log.csv
    features/         bags/*.wbag, bags/index.csv
    mil/              folds.csv, fold{f}.wmil, fold{f}_log.csv, hyper.json [, search.csv]
    metrics/          folds.csv, summary.json, predictions.csv, roc*.csv, confusion.{csv,png}
    heatmaps/         {slide}_class{c}.png, index.csv

and each stage directory gets a ``manifest.json`` with the config hash, seed and
SHA-256 of every input and output file.  Errors end the process with one JSON
line on stderr and exit code 2 (config or data), 3 (missing or unreadable
upstream artifact) or 4 (numeric failure).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import PipelineConfig, load_config, parse_scalar
from .evaluation import (
    ConfusionMatrix,
    aggregate,
    confusion,
    make_folds,
    ppv_npv,
    render_confusion_png,
    roc_auc,
    write_confusion_csv,
    write_fold_csv,
    write_roc_csv,
    write_summary_json,
)
from .exceptions import (
    ConfigurationError,
    DatasetError,
    DependencyError,
    FormatError,
    NumericError,
    UndefinedMetricError,
    WeakMilError,
)
from .features import extract_manifest, read_bag_store, write_bag_store
from .heatmap import emit_class_pair, marker_contrast, write_heatmap_index
from .imaging import load_rgb
from .mil import load_mil, save_mil, select_hyper, slide_probability, train_mil, write_training_log
from .preprocess import extract_patch, patch_side_pixels, preprocess_manifest, read_grids, write_grids
from .ssl import load_encoder, prepare_input, sample_ssl_dataset, save_encoder, train_ssl
from .synthgen import generate_corpus, read_manifest

log = logging.getLogger("weakmil")

STAGES = ("synth", "preprocess", "ssl-train", "extract", "mil-train", "evaluate", "heatmap")
EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERIC, EXIT_INTERNAL = 2, 3, 4, 1


class Layout:
    """Artifact paths under one output directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.corpus = self.root / "corpus"
        self.slides = self.corpus / "manifest.csv"
        self.preprocess = self.root / "preprocess"
        self.grids = self.preprocess / "grids.csv"
        self.ssl = self.root / "ssl"
        self.encoder = self.ssl / "encoder.moco"
        self.ssl_log = self.ssl / "ssl_log.csv"
        self.features = self.root / "features"
        self.bags = self.features / "bags"
        self.bag_index = self.bags / "index.csv"
        self.mil = self.root / "mil"
        self.folds = self.mil / "folds.csv"
        self.metrics = self.root / "metrics"
        self.summary = self.metrics / "summary.json"
        self.heatmaps = self.root / "heatmaps"

    def fold_model(self, fold: int) -> Path:
        return self.mil / f"fold{fold}.wmil"

    def fold_log(self, fold: int) -> Path:
        return self.mil / f"fold{fold}_log.csv"


# -- provenance ------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _rel(path: Path, root: Path) -> str:
    try:
        return path.resolve().relative_to(root.resolve()).as_posix()
    except ValueError:
        return path.resolve().as_posix()


def write_stage_manifest(stage: str, directory: Path, cfg: PipelineConfig, inputs, outputs,
                         extra: dict | None = None) -> Path:
    root = Path(cfg.run.out)
    payload = {
        "stage": stage,
        "version": __version__,
        "config_hash": cfg.digest(),
        "seed": cfg.run.seed,
        "inputs": {_rel(Path(p), root): sha256_file(p) for p in sorted(map(str, inputs))},
        "outputs": {_rel(Path(p), root): sha256_file(p) for p in sorted(map(str, outputs))},
    }
    if extra:
        payload.update(extra)
    path = Path(directory) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def require(path, producer: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"missing {path}; run `weakmil {producer}` first")
    return path


def _slide_files(manifest) -> list[Path]:
    return [Path(r.path) for r in manifest]


def _load_slides(path):
    require(path, "synth")
    manifest = read_manifest(path)
    for rec in manifest:
        require(rec.path, "synth")
    return manifest


def _load_grids(cfg: PipelineConfig, lay: Layout):
    require(lay.grids, "preprocess")
    return read_grids(lay.grids, patch_side_pixels(cfg.microns), cfg.sampling.output_px)


def _load_bags(path):
    require(path, "extract")
    return read_bag_store(path)


# -- stages ----------------------------------------------------------------------


def stage_synth(cfg: PipelineConfig, lay: Layout, args) -> None:
    manifest = generate_corpus(cfg.synth_spec(), lay.corpus, threads=cfg.run.threads)
    labels = manifest.labels()
    log.info("synth: %d slides (%d positive) in %s", len(manifest), int(labels.sum()), lay.corpus)
    outputs = [lay.slides, lay.corpus / "manifest_markers.json", *_slide_files(manifest)]
    write_stage_manifest("synth", lay.corpus, cfg, [], outputs)


def stage_preprocess(cfg: PipelineConfig, lay: Layout, args) -> None:
    slides_path = Path(args.slides) if getattr(args, "slides", None) else lay.slides
    manifest = _load_slides(slides_path)
    px = patch_side_pixels(cfg.microns)
    grids = preprocess_manifest(manifest, px, cfg.qc, cfg.sampling.output_px, threads=cfg.run.threads)
    lay.preprocess.mkdir(parents=True, exist_ok=True)
    write_grids(grids, lay.grids)
    kept = sum(len(g.kept()) for g in grids)
    total = sum(len(g.records) for g in grids)
    log.info("preprocess: %d px patches, kept %d of %d candidates", px, kept, total)
    write_stage_manifest("preprocess", lay.preprocess, cfg, [slides_path, *_slide_files(manifest)],
                         [lay.grids], {"patch_px_source": px})


def _ssl_patches(cfg: PipelineConfig, manifest, grids) -> np.ndarray:
    refs = sample_ssl_dataset(manifest, grids, cfg.sampling.patches_per_slide, seed=cfg.run.seed)
    by_slide: dict[str, list] = {}
    for r in refs:
        by_slide.setdefault(r.slide_id, []).append(r)
    patches = []
    for rec in manifest:
        if rec.slide_id in by_slide:
            rgb = load_rgb(rec.path)
            grid = grids[rec.slide_id]
            patches.extend(extract_patch(rgb, grid, r.row, r.col) for r in by_slide[rec.slide_id])
    return prepare_input(np.stack(patches), cfg.ssl.input_px)


def stage_ssl(cfg: PipelineConfig, lay: Layout, args) -> None:
    manifest = _load_slides(lay.slides)
    grids = _load_grids(cfg, lay)
    data = _ssl_patches(cfg, manifest, grids)
    log.info("ssl-train: %d patches at %d px, %d epochs", len(data), cfg.ssl.input_px, cfg.ssl.epochs)
    state = train_ssl(data, cfg.ssl, seed=cfg.run.seed, augmentation=cfg.augment)
    lay.ssl.mkdir(parents=True, exist_ok=True)
    save_encoder(lay.encoder, state)
    write_training_log(state.loss_history, lay.ssl_log)
    write_stage_manifest("ssl-train", lay.ssl, cfg, [lay.slides, lay.grids], [lay.encoder, lay.ssl_log],
                         {"n_patches": int(len(data))})


def stage_extract(cfg: PipelineConfig, lay: Layout, args) -> None:
    require(lay.encoder, "ssl-train")
    manifest = _load_slides(lay.slides)
    grids = _load_grids(cfg, lay)
    state = load_encoder(lay.encoder)
    bags = extract_manifest(state.query, manifest, grids, cfg.ssl.input_px, threads=cfg.run.threads)
    index = write_bag_store(bags, lay.bags)
    log.info("extract: %d bags, %d patches", len(bags), sum(len(b) for b in bags))
    outputs = [index, *(lay.bags / f"{b.slide_id}.wbag" for b in bags)]
    write_stage_manifest("extract", lay.features, cfg, [lay.encoder, lay.slides, lay.grids], outputs)


def write_folds(folds, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "slide_id", "split"])
        for f in folds:
            w.writerows([f.fold_id, s, "train"] for s in f.train_ids)
            w.writerows([f.fold_id, s, "test"] for s in f.test_ids)


def read_folds(path):
    from .evaluation import FoldSplit

    split: dict[int, dict[str, list]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            split.setdefault(int(row["fold"]), {"train": [], "test": []})[row["split"]].append(row["slide_id"])
    return [FoldSplit(f, tuple(v["train"]), tuple(v["test"])) for f, v in sorted(split.items())]


def stage_mil(cfg: PipelineConfig, lay: Layout, args) -> None:
    bags = _load_bags(lay.bag_index)
    by_id = {b.slide_id: b for b in bags}
    seed = cfg.run.seed
    folds = make_folds([b.slide_id for b in bags], [b.label for b in bags], k=cfg.eval.folds, seed=seed,
                       stratified=cfg.eval.stratified, test_size=cfg.eval.test_size)
    lay.mil.mkdir(parents=True, exist_ok=True)
    write_folds(folds, lay.folds)
    outputs = [lay.folds]

    hyper = cfg.mil
    if cfg.search.enabled:
        hyper, table = select_hyper(bags, folds, cfg.mil, seed, cfg.search.learning_rates,
                                    cfg.search.weight_decays)
        path = lay.mil / "search.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["learning_rate", "weight_decay", "mean_auc"])
            w.writerows([repr(lr), repr(wd), repr(a)] for lr, wd, a in table)
        outputs.append(path)
        log.info("mil-train: search picked lr=%g wd=%g", hyper.learning_rate, hyper.weight_decay)
    hyper_path = lay.mil / "hyper.json"
    hyper_path.write_text(json.dumps(dataclasses.asdict(hyper), indent=2, sort_keys=True) + "\n")
    outputs.append(hyper_path)

    for f in folds:
        history: list[float] = []
        params = train_mil([by_id[s] for s in f.train_ids], hyper, seed=seed + f.fold_id, history=history)
        save_mil(lay.fold_model(f.fold_id), params)
        write_training_log(history, lay.fold_log(f.fold_id))
        outputs += [lay.fold_model(f.fold_id), lay.fold_log(f.fold_id)]
        log.info("mil-train: fold %d final loss %.4f", f.fold_id, history[-1] if history else float("nan"))
    inputs = [lay.bag_index, *(lay.bags / f"{b.slide_id}.wbag" for b in bags)]
    write_stage_manifest("mil-train", lay.mil, cfg, inputs, outputs)


def _write_predictions(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "slide_id", "label", "probability"])
        w.writerows([f, s, y, repr(p)] for f, s, y, p in rows)


def _evaluate_folds(cfg, fold_sets, out_dir: Path, markers: dict) -> list[Path]:
    """``fold_sets`` yields ``(fold_id, params, test_bags)``; writes all metric files."""
    out_dir.mkdir(parents=True, exist_ok=True)
    threshold = cfg.eval.threshold
    rows, aucs, preds, loc_rows = [], [], [], []
    pooled = ConfusionMatrix(0, 0, 0, 0)
    all_scores, all_labels = [], []
    outputs = []
    for fold_id, params, test in fold_sets:
        scores = [slide_probability(b, params) for b in test]
        labels = [b.label for b in test]
        try:
            auc = roc_auc(scores, labels)
        except UndefinedMetricError:
            raise DatasetError(f"fold {fold_id} test set holds a single class; AUC is undefined") from None
        cm = confusion(scores, labels, threshold)
        pooled = pooled + cm
        rows.append((fold_id, auc, *ppv_npv(cm)))
        aucs.append(auc)
        roc_path = out_dir / f"roc_fold{fold_id}.csv"
        write_roc_csv(scores, labels, roc_path)
        outputs.append(roc_path)
        preds += [(fold_id, b.slide_id, b.label, s) for b, s in zip(test, scores)]
        all_scores += scores
        all_labels += labels
        for b in test:
            cells = markers.get(b.slide_id)
            if b.label == 1 and cells:
                inside, outside = marker_contrast(b, params, cells)
                loc_rows.append((fold_id, b.slide_id, inside, outside, inside > outside))

    report = aggregate(aucs, pooled)
    extra = {"threshold": threshold, "n_slides": len(all_labels)}
    if loc_rows:
        extra["localization_rate"] = float(np.mean([r[4] for r in loc_rows]))
        extra["n_localization"] = len(loc_rows)
        path = out_dir / "localization.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fold", "slide_id", "marker_mean", "other_mean", "localized"])
            w.writerows([f, s, repr(i), repr(o), int(ok)] for f, s, i, o, ok in loc_rows)
        outputs.append(path)
    paths = {name: out_dir / name for name in
             ("folds.csv", "summary.json", "predictions.csv", "roc.csv", "confusion.csv", "confusion.png")}
    write_fold_csv(rows, paths["folds.csv"])
    write_summary_json(report, paths["summary.json"], extra)
    _write_predictions(preds, paths["predictions.csv"])
    write_roc_csv(all_scores, all_labels, paths["roc.csv"])
    write_confusion_csv(pooled, paths["confusion.csv"])
    render_confusion_png(pooled, paths["confusion.png"])
    log.info("evaluate: mean AUC %.4f +- %.4f, PPV %s, NPV %s", report.mean_auc, report.std_auc,
             report.ppv, report.npv)
    return outputs + list(paths.values())


def stage_evaluate(cfg: PipelineConfig, lay: Layout, args) -> None:
    train_manifest = getattr(args, "train_manifest", None)
    test_manifest = getattr(args, "test_manifest", None)
    if bool(train_manifest) != bool(test_manifest):
        raise ConfigurationError("--train-manifest and --test-manifest go together")
    markers = {}
    if lay.slides.exists():
        markers = {r.slide_id: r.marker_cells for r in read_manifest(lay.slides)}

    if train_manifest:
        # external cohort: one model on the training index, scored on the test index
        train = _load_bags(train_manifest)
        test = _load_bags(test_manifest)
        params = train_mil(train, cfg.mil, seed=cfg.run.seed)
        lay.metrics.mkdir(parents=True, exist_ok=True)
        model = lay.metrics / "external.wmil"
        save_mil(model, params)
        outputs = _evaluate_folds(cfg, [(0, params, test)], lay.metrics, markers) + [model]
        write_stage_manifest("evaluate", lay.metrics, cfg, [train_manifest, test_manifest], outputs,
                             {"mode": "external"})
        return

    bags = {b.slide_id: b for b in _load_bags(lay.bag_index)}
    require(lay.folds, "mil-train")
    folds = read_folds(lay.folds)
    models = [require(lay.fold_model(f.fold_id), "mil-train") for f in folds]
    fold_sets = ((f.fold_id, load_mil(m), [bags[s] for s in f.test_ids]) for f, m in zip(folds, models))
    outputs = _evaluate_folds(cfg, fold_sets, lay.metrics, markers)
    write_stage_manifest("evaluate", lay.metrics, cfg, [lay.bag_index, lay.folds, *models], outputs,
                         {"mode": "cross-validation"})


def stage_heatmap(cfg: PipelineConfig, lay: Layout, args) -> None:
    manifest = _load_slides(lay.slides)
    grids = _load_grids(cfg, lay)
    bags = {b.slide_id: b for b in _load_bags(lay.bag_index)}
    require(lay.folds, "mil-train")
    folds = read_folds(lay.folds)
    # each slide is drawn by the model that held it out, else the first that trained on it
    owner: dict[str, int] = {}
    for f in folds:
        for s in f.test_ids:
            owner.setdefault(s, f.fold_id)
    for f in folds:
        for s in f.train_ids:
            owner.setdefault(s, f.fold_id)
    models = {f.fold_id: load_mil(require(lay.fold_model(f.fold_id), "mil-train")) for f in folds}
    lay.heatmaps.mkdir(parents=True, exist_ok=True)
    h = cfg.heatmap
    rows = []
    for rec in manifest:
        if rec.slide_id not in bags:
            continue
        rows += emit_class_pair(rec.slide_id, load_rgb(rec.path), grids[rec.slide_id], bags[rec.slide_id],
                                models[owner[rec.slide_id]], lay.heatmaps, h.alpha,
                                clip=(h.clip_low, h.clip_high), clip_min_n=h.clip_min_n)
    index = lay.heatmaps / "index.csv"
    write_heatmap_index(rows, index, relative_to=lay.heatmaps)
    log.info("heatmap: %d images for %d slides", len(rows), len(rows) // 2)
    write_stage_manifest("heatmap", lay.heatmaps, cfg,
                         [lay.bag_index, lay.folds, lay.grids, *(lay.fold_model(f) for f in models)],
                         [index, *(r[2] for r in rows)])


RUNNERS = {
    "synth": stage_synth,
    "preprocess": stage_preprocess,
    "ssl-train": stage_ssl,
    "extract": stage_extract,
    "mil-train": stage_mil,
    "evaluate": stage_evaluate,
    "heatmap": stage_heatmap,
}


# -- argument handling -------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--seed", type=int, help="global seed (unsigned 64-bit)")
    p.add_argument("--threads", type=int, help="worker threads; 1 gives bitwise reproducible runs")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--weight-decay", type=float)


def _fold_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--folds", type=int)
    p.add_argument("--test-size", type=int, help="test slides per fold (default: cohort / folds)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weakmil", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic slide corpus")
    _common(p)
    p = sub.add_parser("preprocess", help="segment tissue and build QC'd patch grids")
    _common(p)
    p.add_argument("--slides", help="slide manifest CSV (default: OUT/corpus/manifest.csv)")
    p = sub.add_parser("ssl-train", help="contrastive encoder training")
    _common(p)
    _training_flags(p)
    p.add_argument("--queue-size", type=int)
    p = sub.add_parser("extract", help="encode every kept patch into per-slide bags")
    _common(p)
    p = sub.add_parser("mil-train", help="attention MIL, one model per fold")
    _common(p)
    _training_flags(p)
    _fold_flags(p)
    p.add_argument("--search", action="store_true", help="grid-search learning rate and weight decay first")
    p = sub.add_parser("evaluate", help="fold metrics, ROC and confusion matrix")
    _common(p)
    p.add_argument("--train-manifest", help="bag index CSV to train on (external-cohort mode)")
    p.add_argument("--test-manifest", help="bag index CSV to score (external-cohort mode)")
    p = sub.add_parser("heatmap", help="per-class attention overlays")
    _common(p)
    p = sub.add_parser("run-all", help="every stage in order")
    _common(p)
    p.add_argument("--queue-size", type=int)
    _fold_flags(p)
    p.add_argument("--search", action="store_true")
    return parser


def flag_overrides(args) -> dict:
    """Turn parsed flags into config overrides; per-stage flags target that stage's section."""
    out: dict = {}

    def put(section, key, value):
        if value is not None:
            out.setdefault(section, {})[key] = value

    for item in args.set:
        name, eq, value = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not eq or not dot:
            raise ConfigurationError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        put(section, key, parse_scalar(value))
    put("run", "seed", args.seed)
    put("run", "threads", args.threads)
    put("run", "out", args.out)
    stage = {"ssl-train": "ssl", "mil-train": "mil"}.get(args.command)
    if stage:
        put(stage, "epochs", args.epochs)
        put(stage, "learning_rate", args.lr)
        put(stage, "weight_decay", args.weight_decay)
    put("ssl", "queue_size", getattr(args, "queue_size", None))
    put("eval", "folds", getattr(args, "folds", None))
    put("eval", "test_size", getattr(args, "test_size", None))
    if getattr(args, "search", False):
        put("search", "enabled", True)
    return out


def run(args) -> PipelineConfig:
    cfg = load_config(args.config, flags=flag_overrides(args))
    lay = Layout(cfg.run.out)
    stages = STAGES if args.command == "run-all" else (args.command,)
    with threadpool_limits(limits=cfg.run.threads):
        for stage in stages:
            t0 = time.perf_counter()
            log.info("stage %s starting", stage)
            try:
                RUNNERS[stage](cfg, lay, args)
            except FloatingPointError as exc:
                raise NumericError(f"{stage}: {exc}") from exc
            log.info("stage %s done in %.1fs", stage, time.perf_counter() - t0)
    return cfg


def classify(exc: BaseException) -> tuple[str, int]:
    if isinstance(exc, NumericError):
        return "numeric", EXIT_NUMERIC
    if isinstance(exc, (DependencyError, FormatError)):
        return "dependency", EXIT_DEPENDENCY
    if isinstance(exc, ConfigurationError):
        return "config", EXIT_CONFIG
    if isinstance(exc, (DatasetError, UndefinedMetricError, WeakMilError)):
        return "data", EXIT_CONFIG
    return "internal", EXIT_INTERNAL


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        run(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        kind, code = classify(exc)
        if code == EXIT_INTERNAL:
            log.debug("unhandled error", exc_info=True)
        print(json.dumps({"error": kind, "exit": code, "command": args.command,
                          "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
