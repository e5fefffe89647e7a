import filecmp
import json

import pytest

from leafbg import cli
from leafbg.augmenter import read_dataset_manifest
from leafbg.config import DEFAULTS, PipelineConfig, load_config
from leafbg.corpus import read_split_manifest
from leafbg.errors import ConfigError

TINY = """\
seed: 1
paths.work_dir: work
preprocess.size: 32
backbone.weights: random
backbone.freeze_boundary: 0
train.epochs: 1
"""


@pytest.fixture
def tiny(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "tiny.yaml").write_text(TINY)
    return ["--config", "tiny.yaml"]


def run(*argv):
    return cli.main(list(argv))


def test_config_defaults_and_overrides(tmp_path):
    cfg = load_config()
    assert cfg.optimizer("adam").learning_rate == 2e-5 and cfg.optimizer("rmsprop").rho == 0.98
    assert cfg.seeds == {"balance": 0, "split": 0, "init": 0, "shuffle": 0}
    cfg = cfg.with_overrides(**{"seed": 4, "seeds.split": 9, "train.epochs": None})
    assert cfg.seeds == {"balance": 4, "split": 9, "init": 4, "shuffle": 4}
    assert cfg["train.epochs"] == DEFAULTS["train.epochs"]
    with pytest.raises(ConfigError):
        cfg.with_overrides(**{"train.epoch": 3})
    nested = tmp_path / "nested.yaml"
    nested.write_text("train:\n  epochs: 3\n")
    with pytest.raises(ConfigError):
        load_config(nested)
    assert PipelineConfig().digest() == PipelineConfig().digest()


def test_bundled_configs_load():
    for name in cli.BUNDLED_CONFIGS:
        assert load_config(cli.resolve_config_path(name)).source is not None
    hermetic = load_config(cli.resolve_config_path("hermetic"))
    assert hermetic.backbone.freeze_boundary == 0 and hermetic["train.epochs"] == 5


def test_usage_errors_exit_1(tiny, capsys):
    assert run("train", "--dataset", "3", *tiny) == 1
    assert run("prepare", *tiny) == 1  # no corpus paths and no --synthetic
    assert run("prepare", "--config", "missing.yaml") == 1


def test_stage_order_errors_exit_2(tiny):
    assert run("segment", *tiny) == 2
    assert run("matrix", *tiny) == 2


def test_prepare_is_reproducible(tiny, tmp_path, capsys):
    assert run("prepare", "--synthetic", "5", *tiny) == 0
    out = capsys.readouterr().out
    assert "total    train    9  val    3  test    3" in out
    first = {p.name: p.read_bytes() for p in (tmp_path / "work" / "manifests").iterdir()}
    assert run("prepare", "--synthetic", "5", *tiny) == 0
    second = {p.name: p.read_bytes() for p in (tmp_path / "work" / "manifests").iterdir()}
    assert first == second and "provenance.json" in first
    prov = json.loads(first["provenance.json"])
    assert prov["seeds"] == {"balance": 1, "split": 1, "init": 1, "shuffle": 1} and prov["config_digest"]


def test_salient_without_model_fails_before_outputs(tiny, tmp_path):
    assert run("prepare", "--synthetic", "5", *tiny) == 0
    assert run("segment", "--backend", "salient", *tiny) != 0
    assert not (tmp_path / "work" / "segmentation").exists()


def test_full_pipeline(tiny, tmp_path, capsys):
    work = tmp_path / "work"
    assert run("prepare", "--synthetic", "5", *tiny) == 0
    assert run("segment", "--backend", "baseline", *tiny) == 0
    out = capsys.readouterr().out
    assert "rejected" in out and "scab" in out
    split = read_split_manifest(work / "manifests" / "split.csv")
    verdicts = (work / "segmentation" / "verdicts.csv").read_text().splitlines()[1:]
    rejected = sum(1 for line in verdicts if line.split(",")[2] == "False")
    assert len(verdicts) == len(split.train)
    d2 = read_dataset_manifest(work / "manifests" / "dataset_2.csv", "dataset_2")
    assert len(d2) == 2 * len(split.train) - rejected

    masks = sorted((work / "segmentation" / "masks").iterdir())
    stamp = [m.stat().st_mtime_ns for m in masks]
    assert run("segment", *tiny) == 0
    assert [m.stat().st_mtime_ns for m in masks] == stamp
    verdicts_before = (work / "segmentation" / "verdicts.csv").read_bytes()
    assert run("segment", "--force", *tiny) == 0
    assert (work / "segmentation" / "verdicts.csv").read_bytes() == verdicts_before

    assert run("matrix", *tiny) == 0
    models = work / "models"
    assert sorted(p.name for p in models.glob("model_*.best.pt")) == [f"model_{c}.best.pt" for c in sorted(cli.CELLS)]
    card = json.loads((models / "model_dataset_2_adam.json").read_text())
    assert card["seeds"]["init"] == 1 and card["freeze_boundary"] == 0

    assert run("evaluate", "--no-figures", *tiny) == 0
    report = work / "report"
    rows = (report / "summary.csv").read_text().splitlines()
    assert len(rows) == 5 and rows[0].endswith("delta_accuracy_vs_dataset_1")
    first = (report / "report.json").read_bytes()
    assert run("evaluate", "--no-figures", *tiny) == 0
    assert (report / "report.json").read_bytes() == first
    for stage_dir in ("manifests", "segmentation", "models", "report"):
        assert (work / stage_dir / "provenance.json").is_file()

    (models / "model_dataset_1_rmsprop.best.pt").unlink()
    capsys.readouterr()
    assert run("evaluate", "--no-figures", *tiny) == 3
    assert "dataset_1_rmsprop" in capsys.readouterr().err
    assert len(json.loads((report / "report.json").read_text())["cells"]) == 3


def test_train_single_cell_and_resume(tiny, tmp_path, capsys):
    assert run("prepare", "--synthetic", "5", *tiny) == 0
    assert run("train", "--dataset", "2", *tiny) == 2  # dataset_2 needs segment first
    assert run("train", "--dataset", "1", "--optimizer", "rmsprop", "--epochs", "2", *tiny) == 0
    log_file = tmp_path / "work" / "models" / "train_log_dataset_1_rmsprop.csv"
    before = log_file.read_text().splitlines()
    assert len(before) == 3
    assert run("train", "--dataset", "1", "--optimizer", "rmsprop", "--epochs", "2", "--resume", *tiny) == 0
    after = log_file.read_text().splitlines()
    strip = lambda lines: [line.rsplit(",", 1)[0] for line in lines]
    assert strip(after) == strip(before)
