import csv
import json

import numpy as np
import pytest

from otprompt.cli import build_parser, main

DATA_DEFAULTS = {"classes": 3, "dim": 8, "clips": 128, "train-videos": 8, "test-videos": 3, "pool-size": 6,
                 "seed": 1}


def data_args(**over):
    opts = {**DATA_DEFAULTS, **{k.replace("_", "-"): v for k, v in over.items()}}
    return [tok for k, v in opts.items() for tok in (f"--{k}", str(v))]


SMALL_DATA = data_args()
FAST_TRAIN = ["--epochs", "3", "--shots", "2", "--prompts", "2", "--n-ctx", "2", "--d-ctx", "4",
              "--fpn-levels", "3", "--quiet"]


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    assert main(["gen-data", "--out", str(d)] + SMALL_DATA) == 0
    return d


@pytest.fixture(scope="module")
def run_dir(corpus_dir, tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(corpus_dir), "--out", str(d)] + FAST_TRAIN) == 0
    return d


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_gen_data_outputs(corpus_dir):
    for name in ("manifest.json", "train.jsonl", "test.jsonl", "config.resolved.json"):
        assert (corpus_dir / name).exists()
    assert json.loads((corpus_dir / "config.resolved.json").read_text())["data"]["num_classes"] == 3


def test_train_writes_loss_rows(run_dir):
    rows = read_csv(run_dir / "loss.csv")
    assert rows[0] == ["epoch", "cls", "reg", "total"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
    resolved = json.loads((run_dir / "config.resolved.json").read_text())
    assert resolved["train"]["epochs"] == 3 and resolved["train"]["strategy"] == "ot"


def test_train_rerun_is_byte_identical(corpus_dir, run_dir, tmp_path):
    assert main(["train", "--data", str(corpus_dir), "--out", str(tmp_path)] + FAST_TRAIN) == 0
    for name in ("model.json", "loss.csv"):
        assert (tmp_path / name).read_bytes() == (run_dir / name).read_bytes()


def test_eval_model_report(corpus_dir, run_dir, tmp_path):
    assert main(["eval", "--model", str(run_dir / "model.json"), "--data", str(corpus_dir),
                 "--out", str(tmp_path), "--thresholds", "0.1,0.5"]) == 0
    doc = json.loads((tmp_path / "report.json").read_text())
    assert set(doc["map"]) == {"0.1", "0.5"}
    assert 0.0 <= doc["average_map"] <= 1.0


def test_eval_oracle_on_noiseless_corpus(tmp_path, capsys):
    data = tmp_path / "clean"
    assert main(["gen-data", "--out", str(data)] + data_args(noise_sigma=0)) == 0
    assert main(["eval", "--oracle", "--data", str(data), "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["map"]["0.3"] == pytest.approx(1.0)
    assert "avg" in capsys.readouterr().out


def test_eval_empty_split(tmp_path, capsys):
    data = tmp_path / "empty"
    assert main(["gen-data", "--out", str(data)] + data_args(test_videos=0)) == 0
    assert main(["eval", "--oracle", "--data", str(data), "--out", str(tmp_path)]) == 3
    assert "empty" in capsys.readouterr().err


def test_eval_class_mismatch(run_dir, tmp_path, capsys):
    other = tmp_path / "four"
    assert main(["gen-data", "--out", str(other)] + data_args(classes=4)) == 0
    assert main(["eval", "--model", str(run_dir / "model.json"), "--data", str(other),
                 "--out", str(tmp_path)]) == 3
    assert "C=3" in capsys.readouterr().err


def test_train_expect_classes_mismatch(corpus_dir, tmp_path):
    assert main(["train", "--data", str(corpus_dir), "--out", str(tmp_path), "--classes", "5"] + FAST_TRAIN) == 3


def test_missing_out_is_usage_error(capsys):
    assert main(["gen-data"] + SMALL_DATA) == 2
    assert "--out" in capsys.readouterr().err


def test_missing_corpus(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path)] + FAST_TRAIN) == 3


def test_bad_config_keys(tmp_path, corpus_dir):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"epochs": 2, "momentum": 0.9}}))
    assert main(["train", "--data", str(corpus_dir), "--out", str(tmp_path), "--config", str(cfg)]) == 2


def test_config_file_with_flag_override(tmp_path, corpus_dir):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"epochs": 5, "shots": 2, "num_prompts": 2, "n_ctx": 2, "d_ctx": 4,
                                         "fpn_levels": 3}}))
    assert main(["train", "--data", str(corpus_dir), "--out", str(tmp_path), "--config", str(cfg),
                 "--epochs", "2", "--quiet"]) == 0
    assert len(read_csv(tmp_path / "loss.csv")) == 3
    assert json.loads((tmp_path / "config.resolved.json").read_text())["train"]["shots"] == 2


@pytest.mark.parametrize("prompts", [2, 1])
def test_dump_plan(corpus_dir, tmp_path, prompts):
    run = tmp_path / "run"
    assert main(["train", "--data", str(corpus_dir), "--out", str(run)] + FAST_TRAIN
                + ["--prompts", str(prompts)]) == 0
    out = tmp_path / "plan.csv"
    assert main(["dump-plan", "--model", str(run / "model.json"), "--data", str(corpus_dir),
                 "--video", "test_0000", "--class", "1", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert rows[0] == ["frame"] + [f"prompt_{j + 1}" for j in range(prompts)]
    table = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    assert table.shape == (128, prompts)
    for col in table.T:
        assert col.min() == 0.0 and col.max() in (0.0, 1.0)


def test_dump_plan_unknown_video(corpus_dir, run_dir, tmp_path):
    assert main(["dump-plan", "--model", str(run_dir / "model.json"), "--data", str(corpus_dir),
                 "--video", "nope", "--class", "0", "--out", str(tmp_path / "p.csv")]) == 3


def test_ablate_grid(corpus_dir, tmp_path):
    assert main(["ablate", "--data", str(corpus_dir), "--out", str(tmp_path), "--strategies", "ot,mean",
                 "--prompt-grid", "1,2", "--epochs", "1", "--shots", "2", "--n-ctx", "2", "--d-ctx", "4",
                 "--fpn-levels", "2"]) == 0
    rows = read_csv(tmp_path / "ablation.csv")
    assert rows[0][:5] == ["strategy", "prompts", "n_ctx", "fpn_levels", "seed"]
    assert [(r[0], r[1]) for r in rows[1:]] == [("ot", "1"), ("ot", "2"), ("mean", "1"), ("mean", "2")]
    assert all(0.0 <= float(v) <= 1.0 for r in rows[1:] for v in r[5:])


def test_ablate_unknown_strategy(corpus_dir, tmp_path):
    assert main(["ablate", "--data", str(corpus_dir), "--out", str(tmp_path), "--strategies", "knn"]) == 2


@pytest.mark.parametrize("cmd", ["gen-data", "train", "eval", "ablate", "dump-plan"])
def test_help(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args([cmd, "--help"])
    assert exc.value.code == 0
    assert "--" in capsys.readouterr().out
