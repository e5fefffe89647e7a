"""Command-line pipeline: prepare -> segment -> train / matrix -> evaluate.

Every stage reads a flat YAML config (``--config``), applies flag overrides
and writes into the work directory:

    manifests/     split.csv (+ .meta.json), dataset_1.csv, dataset_2.csv
    segmentation/  masks/, fg/, verdicts.csv
    models/        model_<cell>.pt, model_<cell>.best.pt, train_log_<cell>.csv
    report/        report.json, summary.csv, confusion_<cell>.{txt,png}

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import augmenter, corpus, evaluator, segmenter
from .classifier import BackboneSpec, ModelCard, build_model, load_model, predict
from .config import PipelineConfig, load_config, provenance
from .errors import ConfigError, DataError, LeafbgError, ModelError
from .proxy import pretrain_proxy_backbone
from .synthetic import generate_synthetic_corpus
from .trainer import OPTIMIZERS, load_images, run_matrix, train

log = logging.getLogger("leafbg")

BUNDLED_CONFIGS = ("hermetic", "reference")
CELLS = tuple(f"{ds}_{opt}" for ds in augmenter.DATASET_NAMES for opt in OPTIMIZERS)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


# -- work directory layout -------------------------------------------------------

def manifests_dir(cfg: PipelineConfig) -> Path:
    return cfg.work_dir / "manifests"


def segmentation_dir(cfg: PipelineConfig) -> Path:
    return cfg.work_dir / "segmentation"


def models_dir(cfg: PipelineConfig) -> Path:
    return cfg.work_dir / "models"


def report_dir(cfg: PipelineConfig) -> Path:
    return cfg.work_dir / "report"


def write_provenance(cfg: PipelineConfig, out_dir: Path, stage: str, **extra) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "provenance.json").write_text(provenance(cfg, stage, **extra))


def _require(path: Path, hint: str) -> Path:
    if not path.is_file():
        raise DataError(f"{path} not found; run `leafbg {hint}` first")
    return path


def resolve_config_path(value: str | None):
    if value is None or Path(value).exists():
        return value
    if value in BUNDLED_CONFIGS:
        return resources.files("leafbg") / "configs" / f"{value}.yaml"
    return value


# -- stages ----------------------------------------------------------------------

def cmd_synth(cfg: PipelineConfig, n_per_class: int, out: Path) -> corpus.CorpusSummary:
    summary = generate_synthetic_corpus(n_per_class, cfg["seed"], out)
    write_provenance(cfg, out, "synth", n_per_class=n_per_class)
    print(f"synthetic corpus in {out}: {summary}")
    return summary


def cmd_prepare(cfg: PipelineConfig, synthetic: int | None = None) -> corpus.SplitManifest:
    if synthetic is not None:
        corpus_dir = cfg.work_dir / "synthetic"
        cmd_synth(cfg, synthetic, corpus_dir)
        cfg = cfg.with_overrides(**{"paths.label_table": str(corpus_dir / "labels.csv"),
                                    "paths.image_dir": str(corpus_dir / "images")})
    table, image_dir = cfg["paths.label_table"], cfg["paths.image_dir"]
    if not table or not image_dir:
        raise ConfigError("paths.label_table and paths.image_dir must be set (or pass --synthetic N)")
    summary, records = corpus.ingest(table, image_dir)
    print(f"ingested: {summary}")
    balanced = corpus.balance(records, cfg.seed_for("balance"))
    manifest = corpus.split(balanced, cfg.split_ratios, cfg.seed_for("split"))
    out = manifests_dir(cfg)
    corpus.write_split_manifest(manifest, out / "split.csv")
    augmenter.write_dataset_manifest(augmenter.build_dataset_1(manifest), out / "dataset_1.csv")
    write_provenance(cfg, out, "prepare", corpus=str(summary))
    print(f"balanced: {corpus.CorpusSummary.from_records(balanced)}")
    for label in corpus.LABELS:
        train_n, val_n, test_n = manifest.per_class_split_counts[label]
        print(f"  {label:<8} train {train_n:>4}  val {val_n:>4}  test {test_n:>4}")
    print(f"  {'total':<8} train {len(manifest.train):>4}  val {len(manifest.val):>4}  test {len(manifest.test):>4}")
    return manifest


def cmd_segment(cfg: PipelineConfig, force: bool = False) -> augmenter.DatasetManifest:
    split = corpus.read_split_manifest(_require(manifests_dir(cfg) / "split.csv", "prepare"))
    backend = cfg.segmenter_backend
    rejects_file = cfg["segment.manual_rejects"]
    rejects = segmenter.read_manual_rejects(rejects_file) if rejects_file else frozenset()
    out = segmentation_dir(cfg)
    rows = segmenter.segment_records(split.train, out, backend, float(cfg["segment.threshold"]),
                                     cfg.gate_bounds, rejects, force)
    verdicts = {r.image_id: r.verdict for r in rows}
    dataset_2 = augmenter.build_dataset_2(split, verdicts, out / "fg")
    augmenter.write_dataset_manifest(dataset_2, manifests_dir(cfg) / "dataset_2.csv")
    write_provenance(cfg, out, "segment", backend=backend.kind)

    table = segmenter.rejected_per_class(rows, {r.image_id: r.label for r in split.train})
    print(f"{'class':<10}{'images':>8}{'rejected':>10}{'kept':>8}")
    for label, (n, bad) in table.items():
        print(f"{label:<10}{n:>8}{bad:>10}{n - bad:>8}")
    n_all, bad_all = sum(v[0] for v in table.values()), sum(v[1] for v in table.values())
    print(f"{'total':<10}{n_all:>8}{bad_all:>10}{n_all - bad_all:>8}")
    print(f"dataset_2: {len(dataset_2)} images")
    return dataset_2


def _dataset(cfg: PipelineConfig, name: str) -> augmenter.DatasetManifest:
    hint = "prepare" if name == "dataset_1" else "segment"
    return augmenter.read_dataset_manifest(_require(manifests_dir(cfg) / f"{name}.csv", hint), name)


def resolve_backbone(cfg: PipelineConfig) -> BackboneSpec:
    """Turn ``backbone.weights: proxy`` into a concrete weights file."""
    spec = cfg.backbone
    if spec.weights != "proxy":
        return spec
    path = cfg.work_dir / "backbone" / "proxy.pt"
    if not path.is_file():
        print(f"pretraining proxy backbone -> {path}")
    pretrain_proxy_backbone(path, seed=int(cfg["seed"]), n_images=int(cfg["proxy.images"]),
                            size=int(cfg["proxy.size"]), epochs=int(cfg["proxy.epochs"]))
    return replace(spec, weights=str(path))


def _training_setup(cfg: PipelineConfig):
    backbone = resolve_backbone(cfg)
    card = ModelCard(backbone, cfg.head, cfg.preprocess, cfg.seeds, {"config_digest": cfg.digest()})

    def factory():
        return build_model(backbone, cfg.head, cfg.seed_for("init"))

    split = corpus.read_split_manifest(_require(manifests_dir(cfg) / "split.csv", "prepare"))
    val = augmenter.entries_from_records(split.val)
    return factory, card, val


def _print_log(cell, log_) -> None:
    last = log_.rows[-1]
    print(f"{cell}: {len(log_.rows)} epochs, final val_acc {last.val_acc:.4f}, "
          f"best val_acc epoch {log_.best_epoch} -> {log_.best_checkpoint}")


def cmd_train(cfg: PipelineConfig, dataset: str, optimizer: str, resume: bool = False):
    manifest = _dataset(cfg, dataset)
    factory, card, val = _training_setup(cfg)
    config = cfg.train_config(dataset, optimizer)
    out = models_dir(cfg)
    log_ = train(factory(), manifest, val, config, out, card, resume, preprocess_spec=cfg.preprocess)
    write_provenance(cfg, out, "train", cells=[config.cell])
    _print_log(config.cell, log_)
    return log_


def cmd_matrix(cfg: PipelineConfig, resume: bool = False) -> int:
    d1, d2 = _dataset(cfg, "dataset_1"), _dataset(cfg, "dataset_2")
    factory, card, val = _training_setup(cfg)
    out = models_dir(cfg)
    optimizers = {k: cfg.optimizer(k) for k in OPTIMIZERS}
    result = run_matrix(factory, d1, d2, val, cfg.train_config(), optimizers, out, card, resume,
                        preprocess_spec=cfg.preprocess)
    write_provenance(cfg, out, "matrix", cells=sorted(result.logs), failures=result.failures)
    for cell, log_ in result.logs.items():
        _print_log(cell, log_)
    for cell, msg in result.failures.items():
        print(f"{cell}: FAILED: {msg}", file=sys.stderr)
    return 3 if result.failures else 0


def checkpoint_path(cfg: PipelineConfig, cell: str) -> Path:
    which = cfg["evaluate.checkpoint"]
    if which not in ("best", "final"):
        raise ConfigError(f"evaluate.checkpoint must be 'best' or 'final', got {which!r}")
    suffix = ".best.pt" if which == "best" else ".pt"
    return models_dir(cfg) / f"model_{cell}{suffix}"


def cmd_evaluate(cfg: PipelineConfig, figures: bool = True) -> int:
    split = corpus.read_split_manifest(_require(manifests_dir(cfg) / "split.csv", "prepare"))
    test = split.test
    test_ids = [r.image_id for r in test]
    truth = [r.label for r in test]
    missing = [c for c in CELLS if not checkpoint_path(cfg, c).is_file()]
    present = [c for c in CELLS if c not in missing]
    if not present:
        raise ModelError(f"no checkpoints found under {models_dir(cfg)}; run `leafbg matrix` first")

    images_cache: dict = {}
    cells = []
    for cell in present:
        model, card = load_model(checkpoint_path(cfg, cell))
        key = card.preprocess
        if key not in images_cache:
            images_cache[key] = load_images(test, key).astype(np.float32) / 255.0
        probs = predict(model, images_cache[key], spec=key)
        dataset, optimizer = cell.rsplit("_", 1)
        cells.append(evaluator.evaluate_cell(dataset, optimizer, truth, evaluator.labels_from_probabilities(probs),
                                             card.extra.get("config_digest", ""), test_ids))
    report = evaluator.build_report(cells)
    out = report_dir(cfg)
    evaluator.write_report(report, out, figures)
    write_provenance(cfg, out, "evaluate", cells=present, missing=missing,
                     checkpoint=cfg["evaluate.checkpoint"])
    print(report.summary_table(), end="")
    for opt, delta in report.delta_accuracy.items():
        print(f"delta accuracy ({opt}, dataset_2 - dataset_1): {100 * delta:+.2f} points")
    if missing:
        print(f"missing checkpoints: {', '.join(missing)}", file=sys.stderr)
        return 3
    return 0


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat YAML config file, or a bundled name: " + ", ".join(BUNDLED_CONFIGS))
    common.add_argument("--seed", type=int, help="master seed (per-stage seeds default to it)")
    common.add_argument("--out", help="work directory (overrides paths.work_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="leafbg", description="Leaf disease classification with background-removal augmentation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic labelled corpus")
    p.add_argument("--synthetic", type=int, metavar="N", help="images per class (default synthetic.n_per_class)")
    p.add_argument("--dest", help="output directory (default <work>/synthetic)")

    p = sub.add_parser("prepare", parents=[common], help="ingest, balance and split the corpus")
    p.add_argument("--synthetic", type=int, metavar="N", help="generate and use a synthetic corpus with N per class")

    p = sub.add_parser("segment", parents=[common], help="background removal and quality gate on the train split")
    p.add_argument("--backend", choices=("salient", "baseline"))
    p.add_argument("--force", action="store_true", help="recompute masks that already exist")

    p = sub.add_parser("train", parents=[common], help="train one dataset x optimizer cell")
    p.add_argument("--dataset", choices=("1", "2"), default="1")
    p.add_argument("--optimizer", choices=OPTIMIZERS, default="adam")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("matrix", parents=[common], help="train all four cells")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("evaluate", parents=[common], help="score checkpoints on the raw test split")
    p.add_argument("--no-figures", action="store_true")
    return parser


def _config_from_args(args) -> PipelineConfig:
    cfg = load_config(resolve_config_path(args.config))
    backend = getattr(args, "backend", None)
    return cfg.with_overrides(**{
        "seed": args.seed,
        "paths.work_dir": args.out,
        "segment.backend": backend,
        "train.epochs": getattr(args, "epochs", None),
    })


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = _config_from_args(args)
    if args.command == "synth":
        n = args.synthetic if args.synthetic is not None else int(cfg["synthetic.n_per_class"])
        cmd_synth(cfg, n, Path(args.dest) if args.dest else cfg.work_dir / "synthetic")
    elif args.command == "prepare":
        cmd_prepare(cfg, args.synthetic)
    elif args.command == "segment":
        cmd_segment(cfg, args.force)
    elif args.command == "train":
        cmd_train(cfg, f"dataset_{args.dataset}", args.optimizer, args.resume)
    elif args.command == "matrix":
        return cmd_matrix(cfg, args.resume)
    elif args.command == "evaluate":
        return cmd_evaluate(cfg, not args.no_figures)
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except LeafbgError as exc:
        print(f"leafbg: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"leafbg: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
