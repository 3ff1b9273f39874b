import csv
import hashlib
import json

import numpy as np
import pytest

from treecount import data
from treecount.cli import main

TINY_CFG = """\
preset=tiny
crop=64
batch_size=2
learning_rate=1e-3
max_steps=2
val_fraction=0
"""


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(root), "--n", "4", "--size", "64", "--density", "2,6"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    rc = main(["train", "--config", str(cfg), "--manifest", str(dataset / "manifest.csv"),
               "--out", str(out), "--seed", "1", "--labeled-fraction", "0.5", "--lambda", "1"])
    assert rc == 0
    return out


def test_synth_counts_and_determinism(dataset, tmp_path):
    images = data.parse_annotations(dataset / "manifest.csv")
    assert len(images) == 4 and all(2 <= im.count <= 6 for im in images)
    for im in images:
        assert data.generate_density_map(im.points, 64, 64).count == pytest.approx(im.count, abs=1e-5)
    assert main(["synth", "--out", str(tmp_path), "--n", "4", "--size", "64", "--density", "2,6"]) == 0
    assert _digest(tmp_path) == _digest(dataset)


def test_synth_bad_size(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--size", "100"]) == 1
    assert "multiple of 32" in capsys.readouterr().err


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--manifest", "m.csv"])  # --out missing
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        main(["train", "--manifest", "m", "--out", "o", "--labeled-fraction", "1.5"])
    assert e.value.code == 1


def test_missing_manifest_exit_2(tmp_path, capsys):
    assert main(["prepare-data", "--manifest", str(tmp_path / "nope.csv"),
                 "--out", str(tmp_path)]) == 2


def test_prepare_data(dataset, tmp_path):
    assert main(["prepare-data", "--manifest", str(dataset / "manifest.csv"),
                 "--out", str(tmp_path), "--labeled-fraction", "0.5"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "summary.csv")))
    assert len(rows) == 4
    for r in rows:
        d = data.load_density(tmp_path / "density" / f"{r['id']}.bin")
        assert d.shape == (16, 16)
        assert d.count == pytest.approx(int(r["points"]), abs=1e-4)
    split = json.loads((tmp_path / "split.json").read_text())
    assert len(split["labeled"]) == 2 and len(split["unlabeled"]) == 2


def test_train_outputs(trained):
    assert (trained / "last.ckpt").exists()
    assert len(list(csv.DictReader(open(trained / "train_log.csv")))) == 2
    split = json.loads((trained / "split.json").read_text())
    assert len(split["labeled"]) == 2
    assert "seed=1" in (trained / "config.txt").read_text()


def test_train_unknown_switch(dataset, tmp_path, capsys):
    rc = main(["train", "--manifest", str(dataset / "manifest.csv"), "--out", str(tmp_path),
               "--switch", "w/o gravity"])
    assert rc == 1
    err = capsys.readouterr().err
    assert "w/o LTC" in err and "w/ L2" in err


def test_evaluate(trained, dataset, tmp_path):
    rc = main(["evaluate", "--checkpoint", str(trained / "last.ckpt"),
               "--manifest", str(dataset / "manifest.csv"), "--out", str(tmp_path)])
    assert rc == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["N"] == 4 and report["E_G0"] == report["E_MAE"]
    assert len(list(csv.DictReader(open(tmp_path / "per_image.csv")))) == 4


def test_evaluate_bad_checkpoint(dataset, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    assert main(["evaluate", "--checkpoint", str(bad), "--manifest",
                 str(dataset / "manifest.csv"), "--out", str(tmp_path)]) == 2


def test_predict(trained, dataset, tmp_path, capsys):
    img = dataset / "images" / "img0000.png"
    assert main(["predict", "--checkpoint", str(trained / "last.ckpt"), "--image", str(img),
                 "--out", str(tmp_path)]) == 0
    count = float(capsys.readouterr().out.strip().splitlines()[-1])
    d = data.load_density(tmp_path / "img0000_density.bin")
    assert d.shape == (16, 16)
    assert abs(d.count - count) < 1e-4
    heat = data.load_image(tmp_path / "img0000_heatmap.png")
    assert heat.shape == (64, 64, 3)


def test_predict_padded_input(trained, tmp_path, capsys):
    img = tmp_path / "odd.png"
    data.save_image(img, np.random.default_rng(0).random((50, 70, 3)))
    assert main(["predict", "--checkpoint", str(trained / "last.ckpt"), "--image", str(img),
                 "--out", str(tmp_path)]) == 0
    assert data.load_density(tmp_path / "odd_density.bin").shape == (13, 18)


def test_ablate_two_variants(dataset, tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    rc = main(["ablate", "--config", str(cfg), "--manifest", str(dataset / "manifest.csv"),
               "--out", str(tmp_path / "abl"), "--switch", "w/o LTC", "--switch", "w/ L2",
               "--seed", "2", "--test-fraction", "0.25"])
    assert rc == 0
    rows = list(csv.DictReader(open(tmp_path / "abl" / "ablation.csv")))
    assert [r["variant"] for r in rows] == ["w/o LTC", "w/ L2"]
    assert {r["seed"] for r in rows} == {"2"}
    assert all(r["N"] == "1" for r in rows)


def test_ablate_unknown_switch(dataset, tmp_path, capsys):
    rc = main(["ablate", "--manifest", str(dataset / "manifest.csv"), "--out", str(tmp_path),
               "--switch", "w/o LTC;bogus"])
    assert rc == 1
    assert "valid switches" in capsys.readouterr().err
