import csv
import json

import numpy as np
import pytest

from slr.cli import EXIT_CODES, main
from slr.dumps import read_array
from slr.evaluation import METRIC_COLUMNS


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    from conftest import tiny_config_text

    cfg.write_text(tiny_config_text())
    assert main(["gen", "--config", str(cfg), "--out", str(root / "data")]) == 0
    return cfg, root / "data"


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    cfg, data = dataset
    out = tmp_path_factory.mktemp("run") / "train"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(out), "--dump-labels"]) == 0
    return out


def test_gen_counts(tmp_path, tiny_cfg_file):
    assert main(["gen", "--config", str(tiny_cfg_file), "--out", str(tmp_path / "d")]) == 0
    man = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert man["counts"] == {"train": 4, "test": 2}
    assert len(list((tmp_path / "d" / "scenes").glob("*_img.png"))) == 6


def test_gen_seed_override(tmp_path, tiny_cfg_file):
    main(["gen", "--config", str(tiny_cfg_file), "--out", str(tmp_path / "d"), "--seed", "77"])
    assert json.loads((tmp_path / "d" / "manifest.json").read_text())["data_seed"] == 77


def test_refuses_overwrite_without_force(tmp_path, tiny_cfg_file, capsys):
    args = ["gen", "--config", str(tiny_cfg_file), "--out", str(tmp_path / "d")]
    assert main(args) == 0
    assert main(args) == EXIT_CODES["exists"]
    assert _error(capsys)["error"] == "exists"
    assert main(args + ["--force"]) == 0


def test_train_artifacts(trained):
    for name in ("run.json", "losses.csv", "metrics.csv", "warmup.ckpt", "iter1.ckpt"):
        assert (trained / name).exists(), name
    rows = _rows(trained / "metrics.csv")
    assert [r["stage"] for r in rows] == ["warmup", "iter1"]
    assert list(rows[0]) == ["stage", *METRIC_COLUMNS]
    losses = _rows(trained / "losses.csv")
    assert {"foc", "pair", "proj", "aux", "ws", "total"} <= set(losses[0])


def test_train_label_dumps(trained):
    labels = trained / "labels"
    assert len(list(labels.glob("*_partial.png"))) == 4
    assert len(list(labels.glob("*_weights.png"))) == 4
    dumps = sorted((labels / "iter1").glob("*_pseudo.f32"))
    assert len(dumps) == 4
    y = read_array(dumps[0])
    assert y.shape == (32, 32, 3)
    assert np.all(np.abs(y.sum(-1) - 1) < 1e-5)


def test_eval_command(dataset, trained, tmp_path):
    cfg, data = dataset
    out = tmp_path / "ev"
    assert main(["eval", "--config", str(cfg), "--data", str(data), "--checkpoint", str(trained / "iter1.ckpt"),
                 "--out", str(out), "--frame-table"]) == 0
    rep = json.loads((out / "eval.json").read_text())
    assert rep["protocol"] == "desk-1"
    final = _rows(trained / "metrics.csv")[-1]
    assert float(final["f1_d"]) == pytest.approx(rep["f1_d"], abs=1e-6)
    assert len(_rows(out / "frames.csv")) == 2


def test_report_merges_runs(trained, tmp_path):
    out = tmp_path / "rep"
    assert main(["report", "--out", str(out), str(trained), str(trained)]) == 0
    assert len(_rows(out / "report.csv")) == 4
    series = _rows(out / "series" / "f1_d.csv")
    assert list(series[0]) == ["run", "stage", "value"] and len(series) == 4


def test_report_names_malformed_file(tmp_path, capsys):
    run = tmp_path / "bad"
    run.mkdir()
    (run / "metrics.csv").write_text("stage,f1\nwarmup,0.5\n")
    assert main(["report", "--out", str(tmp_path / "r"), str(run)]) == EXIT_CODES["data"]
    err = _error(capsys)
    assert err["error"] == "data" and "metrics.csv" in err["message"]


def test_report_missing_run(tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path / "r"), str(tmp_path / "nope")]) == EXIT_CODES["data"]


def test_train_missing_dataset(tmp_path, tiny_cfg_file, capsys):
    code = main(["train", "--config", str(tiny_cfg_file), "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")])
    assert code == EXIT_CODES["data"]
    assert _error(capsys)["error"] == "data"


def test_bad_config_category(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("theta = -3\n")
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CODES["config"]
    assert _error(capsys)["error"] == "config"


def test_missing_config_file_is_io(tmp_path, capsys):
    code = main(["gen", "--config", str(tmp_path / "absent.cfg"), "--out", str(tmp_path / "o")])
    assert code == EXIT_CODES["io"]


def test_usage_error(capsys):
    assert main(["train"]) == EXIT_CODES["usage"]
    assert main(["frobnicate", "--out", "x"]) == EXIT_CODES["usage"]


def test_bad_checkpoint(dataset, tmp_path, capsys):
    cfg, data = dataset
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"garbage")
    code = main(["eval", "--config", str(cfg), "--data", str(data), "--checkpoint", str(junk), "--out", str(tmp_path / "e")])
    assert code == EXIT_CODES["data"]


def test_ablate_rows(dataset, tmp_path):
    cfg, data = dataset
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(cfg), "--data", str(data), "--out", str(out)]) == 0
    rows = _rows(out / "ablation.csv")
    assert [r["row"] for r in rows] == [str(k) for k in range(1, 8)]
    assert rows[0]["finetuning"] == "0"
    assert not list((out / "row1").glob("iter*.ckpt"))
    assert (out / "row7" / "iter1.ckpt").exists()
    again = tmp_path / "abl2"
    assert main(["ablate", "--config", str(cfg), "--data", str(data), "--out", str(again)]) == 0
    assert (out / "ablation.csv").read_bytes() == (again / "ablation.csv").read_bytes()


def test_smooth_grid(dataset, trained, tmp_path):
    cfg, data = dataset
    out = tmp_path / "sg"
    assert main(["smooth-grid", "--config", str(cfg), "--data", str(data), "--out", str(out),
                 "--alphas", "0,0.3", "--sigmas", "0", "--slr-run", str(trained)]) == 0
    rows = _rows(out / "smoothing.csv")
    assert [r["method"] for r in rows] == ["smoothing", "smoothing", "slr"]
    assert float(rows[-1]["f1_d"]) == pytest.approx(float(_rows(trained / "metrics.csv")[-1]["f1_d"]))


def test_train_idempotent_under_force(dataset, trained, tmp_path):
    cfg, data = dataset
    out = tmp_path / "t"
    args = ["train", "--config", str(cfg), "--data", str(data), "--out", str(out), "--threads", "2"]
    assert main(args) == 0
    first = (out / "metrics.csv").read_bytes()
    assert main(args + ["--force"]) == 0
    assert (out / "metrics.csv").read_bytes() == first
    assert (trained / "metrics.csv").read_bytes() == first
