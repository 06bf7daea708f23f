import csv
import json
import shutil

import numpy as np
import pytest

from fect.cli import main
from fect.descriptors import read_feature_cache
from fect.synthgen import default_recipe, recipe_to_json

EPOCHS = 3


def run(workdir, *args):
    return main(["--config", str(workdir / "fect.cfg"), *args])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "fect.cfg").write_text(
        "# tiny pipeline for tests\n"
        f"data_dir={root / 'data'}\ncache_dir={root / 'cache'}\n"
        f"model_dir={root / 'models'}\nreport_dir={root / 'reports'}\n"
        f"epochs={EPOCHS}\nbatch_size=4\nlr0=0.01\nmax_cells=24\nlandmarks=4\n")
    (root / "recipe.json").write_text(recipe_to_json(default_recipe(samples_per_class=4, image_size=192, seed=3)))
    assert run(root, "generate", "--recipe", str(root / "recipe.json")) == 0
    for mod in ("cell", "edge"):
        assert run(root, "train-aggregator", "--modality", mod) == 0
    for mod in ("cell", "tissue", "edge"):
        assert run(root, "extract", "--modality", mod) == 0
    assert run(root, "train-svm") == 0
    return root


def test_generate_outputs(workdir):
    full = json.loads((workdir / "data" / "manifest.json").read_text())
    assert len(full) == 16
    sizes = [len(json.loads((workdir / "data" / f"manifest_{s}.json").read_text())) for s in ("train", "val", "test")]
    assert sum(sizes) == 16 and min(sizes) >= 4


def test_loss_trace(workdir):
    rows = list(csv.reader((workdir / "models" / "aggregator_cell_loss.csv").open()))
    assert rows[0] == ["epoch", "lr", "loss"]
    assert len(rows) - 1 == EPOCHS + 1
    assert rows[1][0] == "init"
    assert [float(r[1]) for r in rows[2:]] == [0.01 * 0.5 ** (e // 7) for e in range(EPOCHS)]


def test_cache_shapes(workdir):
    n_train = len(json.loads((workdir / "data" / "manifest_train.json").read_text()))
    dims = {"cell": 64, "tissue": 27, "edge": 72}
    for mod, dim in dims.items():
        got_mod, x = read_feature_cache(workdir / "cache" / f"manifest_train.{mod}.feat")
        assert got_mod == mod and x.shape == (n_train, dim)


def test_reextraction_identical(workdir):
    path = workdir / "cache" / "manifest_test.edge.feat"
    before = path.read_bytes()
    assert run(workdir, "extract", "--modality", "edge", "--split", "test") == 0
    assert path.read_bytes() == before


def test_parallel_extraction_identical(workdir):
    path = workdir / "cache" / "manifest_val.cell.feat"
    before = path.read_bytes()
    assert run(workdir, "--jobs", "2", "extract", "--modality", "cell", "--split", "val") == 0
    assert path.read_bytes() == before


def test_evaluate_on_training_split(workdir, capsys):
    assert run(workdir, "evaluate", "--split", "train") == 0
    rows = list(csv.DictReader((workdir / "reports" / "metrics_train.csv").open()))
    assert float(rows[0]["weighted_f1"]) >= 0.95
    assert "weighted_f1=" in capsys.readouterr().out


def test_ablate_and_gridsearch(workdir):
    assert run(workdir, "ablate") == 0
    lines = (workdir / "reports" / "ablation.csv").read_text().splitlines()
    assert len(lines) == 8
    assert run(workdir, "gridsearch", "--alphas", "0,1", "--betas", "0,0.5,1", "--gammas", "0.5") == 0
    assert len((workdir / "reports" / "heatmap.csv").read_text().splitlines()) == 1 + 6
    best = json.loads((workdir / "reports" / "best_weights.json").read_text())
    assert set(best) == {"alpha", "beta", "gamma"}


def test_report_dir_env_override(workdir, tmp_path, monkeypatch):
    monkeypatch.setenv("FECT_REPORT_DIR", str(tmp_path / "elsewhere"))
    assert run(workdir, "evaluate") == 0
    assert (tmp_path / "elsewhere" / "metrics_test.csv").exists()


def test_project(workdir):
    out = workdir / "proj.csv"
    assert run(workdir, "project", "--split", "train", "--out", str(out)) == 0
    rows = list(csv.DictReader(out.open()))
    n_train = len(json.loads((workdir / "data" / "manifest_train.json").read_text()))
    assert len(rows) == n_train and list(rows[0]) == ["id", "x", "y", "true_label", "pred_label"]
    x = np.array([float(r["x"]) for r in rows])
    y = np.array([float(r["y"]) for r in rows])
    assert x.var() >= y.var()
    first = out.read_bytes()
    run(workdir, "project", "--split", "train", "--out", str(out))
    assert out.read_bytes() == first


def test_usage_errors(workdir, capsys):
    assert main(["bogus"]) == 1
    assert main(["extract"]) == 1
    assert run(workdir, "--set", "colour=blue", "evaluate") == 1
    assert run(workdir, "--set", "epochs=many", "evaluate") == 1


def test_tissue_has_no_aggregator(workdir, capsys):
    assert run(workdir, "train-aggregator", "--modality", "tissue") == 2
    assert "no aggregator" in capsys.readouterr().err


def test_bad_recipe(tmp_path, capsys):
    bad = tmp_path / "r.json"
    bad.write_text("{broken")
    assert main(["--set", f"data_dir={tmp_path / 'd'}", "generate", "--recipe", str(bad)]) == 2
    assert "invalid JSON" in capsys.readouterr().err


def test_missing_aggregator_writes_nothing(workdir, tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"data_dir={workdir / 'data'}\nmodel_dir={tmp_path / 'none'}\ncache_dir={tmp_path / 'cache'}\n")
    assert main(["--config", str(cfg), "extract", "--modality", "cell"]) == 2
    assert "train-aggregator" in capsys.readouterr().err
    assert not (tmp_path / "cache").exists()


def test_split_leakage_is_fatal(workdir, tmp_path, capsys):
    data = tmp_path / "data"
    shutil.copytree(workdir / "data", data)
    train = json.loads((data / "manifest_train.json").read_text())
    val = json.loads((data / "manifest_val.json").read_text())
    (data / "manifest_val.json").write_text(json.dumps(val + train[:1]))
    assert main(["--set", f"data_dir={data}", "--set", f"model_dir={workdir / 'models'}",
                 "--set", f"cache_dir={tmp_path / 'c'}", "extract", "--modality", "tissue"]) == 2
    assert "leakage" in capsys.readouterr().err


def test_empty_mask_gives_zero_features(workdir, tmp_path, caplog):
    data = tmp_path / "data"
    shutil.copytree(workdir / "data", data)
    test = json.loads((data / "manifest_test.json").read_text())
    victim = data / test[0]["mask_path"]
    raw = victim.read_bytes()
    header_end = len(raw) - 192 * 192
    victim.write_bytes(raw[:header_end] + bytes(192 * 192))
    args = ["--set", f"data_dir={data}", "--set", f"model_dir={workdir / 'models'}",
            "--set", f"cache_dir={tmp_path / 'c'}"]
    for mod in ("tissue", "edge"):
        assert main(args + ["extract", "--modality", mod, "--split", "test"]) == 0
        _, x = read_feature_cache(tmp_path / "c" / f"manifest_test.{mod}.feat")
        assert not x[0].any() and x[1:].any()
    assert "degenerate" in caplog.text
