import csv

import pytest
import tomli_w

from wotlab.attacks import read_landscape_csv
from wotlab.cli import main
from wotlab.train import read_metrics

from conftest import tiny_config_dict


@pytest.fixture
def config_file(tmp_path):
    raw = tiny_config_dict(output_dir=str(tmp_path / "run"), wot__enabled=True)
    path = tmp_path / "cfg.toml"
    path.write_text(tomli_w.dumps(raw))
    return path


@pytest.fixture
def trained(config_file, tmp_path):
    assert main(["train", str(config_file)]) == 0
    return config_file, tmp_path / "run"


def test_train_writes_outputs(trained, capsys):
    _, run = trained
    assert {p.name for p in run.iterdir()} >= {"final.wotc", "best.wotc", "metrics.csv", "alpha_trace.csv"}
    assert len(read_metrics(run / "metrics.csv")) == 2


def test_eval(trained, capsys):
    cfg, run = trained
    assert main(["eval", str(run / "final.wotc"), str(cfg), "--out", str(run)]) == 0
    assert "clean" in capsys.readouterr().out
    with open(run / "eval.csv") as fh:
        assert [r[0] for r in csv.reader(fh)][:2] == ["attack", "clean"]


@pytest.mark.parametrize("mode", ["input", "weight"])
def test_landscape(trained, tmp_path, mode):
    cfg, run = trained
    out = tmp_path / f"{mode}.csv"
    assert main(["landscape", str(run / "final.wotc"), str(cfg), "--mode", mode, "--grid-n", "3",
                 "--samples", "8", "--out", str(out)]) == 0
    mat, meta = read_landscape_csv(out)
    assert mat.shape == (3, 3) and meta["mode"] == mode


def test_sweep(config_file, tmp_path):
    out = tmp_path / "sweep"
    assert main(["sweep", str(config_file), "--param", "wot.k", "--values", "1", "2", "--out", str(out)]) == 0
    with open(out / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["value"] for r in rows] == ["1", "2"]
    assert [int(r["refinements"]) for r in rows] == [4, 2]  # (12 - 3) // (2 k)


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[wot]\nm = 0\n")
    assert main(["train", str(bad)]) == 2
    assert "wot.m" in capsys.readouterr().err


def test_data_error_exit_code(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(tomli_w.dumps(tiny_config_dict(data__name="idx", data__train_images=str(tmp_path / "x"),
                                                  data__train_labels=str(tmp_path / "y"))))
    assert main(["train", str(cfg)]) == 3


def test_checkpoint_error_exit_code(config_file, tmp_path):
    junk = tmp_path / "junk.wotc"
    junk.write_bytes(b"NOPE" + bytes(40))
    assert main(["eval", str(junk), str(config_file)]) == 4


def test_usage_error():
    with pytest.raises(SystemExit):
        main(["frobnicate"])
