"""End-to-end command-line checks on tiny inputs: artifact layout, exit
codes and byte-identical reruns."""

import json

import numpy as np
import pytest

from bagnet.cli import main

SYNTH = ["dataset", "synth", "--classes", "2", "--per-class", "8", "--size", "16",
         "--texture-scale", "8", "--seed", "3"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(SYNTH + ["--out", str(root / "train.bagd")]) == 0
    assert main(SYNTH + ["--seed", "4", "--split", "val",
                         "--out", str(root / "val.bagd")]) == 0
    rc = main(["train", "--config", "bagnet5_32", "--data", str(root / "train.bagd"),
               "--val", str(root / "val.bagd"), "--out", str(root / "run"),
               "--epochs", "1", "--batch-size", "8", "--seed", "0"])
    assert rc == 0
    return root


def test_dataset_synth_and_inspect(workdir, capsys):
    assert main(["dataset", "inspect", str(workdir / "train.bagd")]) == 0
    out = capsys.readouterr().out
    assert "count: 16" in out
    assert "num_classes: 2" in out


def test_dataset_convert(tmp_path):
    rng = np.random.default_rng(0)
    rec = bytes([1]) + rng.integers(0, 256, 3072, dtype=np.uint8).tobytes()
    src = tmp_path / "data_batch_1.bin"
    src.write_bytes(rec * 5)
    assert main(["dataset", "convert", "--out", str(tmp_path / "c.bagd"), str(src)]) == 0
    assert main(["dataset", "inspect", str(tmp_path / "c.bagd")]) == 0


def test_train_outputs(workdir):
    run = workdir / "run"
    assert (run / "manifest.json").exists()
    assert (run / "metrics.csv").exists()
    assert (run / "model.bagc").exists()
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["subcommand"] == "train"
    assert manifest["config"]["seed"] == 0
    metrics = (run / "metrics.csv").read_text().strip().split("\n")
    assert metrics[0] == "epoch,lr,train_loss,val_top1"
    assert len(metrics) == 2


def test_train_same_seed_identical_checkpoints(workdir, tmp_path):
    rc = main(["train", "--config", "bagnet5_32", "--data", str(workdir / "train.bagd"),
               "--val", str(workdir / "val.bagd"), "--out", str(tmp_path / "rerun"),
               "--epochs", "1", "--batch-size", "8", "--seed", "0"])
    assert rc == 0
    assert (tmp_path / "rerun" / "model.bagc").read_bytes() == \
        (workdir / "run" / "model.bagc").read_bytes()
    assert (tmp_path / "rerun" / "metrics.csv").read_bytes() == \
        (workdir / "run" / "metrics.csv").read_bytes()


def test_eval_runs_and_repeats_identically(workdir, tmp_path):
    args = ["eval", "--checkpoint", str(workdir / "run" / "model.bagc"),
            "--data", str(workdir / "val.bagd"), "--topk", "1"]
    assert main(args + ["--out", str(tmp_path / "e1")]) == 0
    assert main(args + ["--out", str(tmp_path / "e2")]) == 0
    assert (tmp_path / "e1" / "eval.csv").read_bytes() == \
        (tmp_path / "e2" / "eval.csv").read_bytes()


def test_eval_topk_equals_classes_is_one(workdir, tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(workdir / "run" / "model.bagc"),
                 "--data", str(workdir / "val.bagd"), "--topk", "2",
                 "--out", str(tmp_path / "full")]) == 0
    text = (tmp_path / "full" / "eval.csv").read_text()
    assert "top2_accuracy,1" in text


def test_analyze_heatmap_and_rerun_bytes(workdir, tmp_path):
    args = ["analyze", "heatmap", "--checkpoint", str(workdir / "run" / "model.bagc"),
            "--data", str(workdir / "val.bagd"), "--image", "0", "--class", "pred"]
    assert main(args + ["--out", str(tmp_path / "h1")]) == 0
    assert main(args + ["--out", str(tmp_path / "h2")]) == 0
    ppms1 = sorted(p.name for p in (tmp_path / "h1").glob("*.ppm"))
    assert len(ppms1) == 1
    for name in ppms1:
        assert (tmp_path / "h1" / name).read_bytes() == (tmp_path / "h2" / name).read_bytes()
        csv1 = (tmp_path / "h1" / (name + ".csv")).read_bytes()
        assert csv1 == (tmp_path / "h2" / (name + ".csv")).read_bytes()


def test_analyze_interaction(workdir, tmp_path, capsys):
    assert main(["analyze", "interaction", "--checkpoint", str(workdir / "run" / "model.bagc"),
                 "--data", str(workdir / "val.bagd"), "--p", "8", "--limit", "6",
                 "--out", str(tmp_path / "i")]) == 0
    lines = (tmp_path / "i" / "interaction.csv").read_text().strip().split("\n")
    assert lines[0] == "image_index,lhs,rhs"
    assert lines[-1].startswith("pearson_r,")


def test_analyze_sensitivity(workdir, tmp_path):
    assert main(["analyze", "sensitivity", "--checkpoint", str(workdir / "run" / "model.bagc"),
                 "--data", str(workdir / "val.bagd"), "--sources", "bagnet,random",
                 "--p", "8", "--n-max", "2", "--limit", "3",
                 "--out", str(tmp_path / "s")]) == 0
    lines = (tmp_path / "s" / "sensitivity.csv").read_text().strip().split("\n")
    assert lines[0] == "source,n,mean_prob"
    assert len(lines) == 1 + 2 * 3


def test_analyze_threshold(workdir, tmp_path):
    assert main(["analyze", "threshold", "--checkpoint", str(workdir / "run" / "model.bagc"),
                 "--data", str(workdir / "val.bagd"), "--mode", "both",
                 "--thresholds=-inf,0,0.5", "--out", str(tmp_path / "t")]) == 0
    lines = (tmp_path / "t" / "threshold.csv").read_text().strip().split("\n")
    assert lines[0] == "mode,threshold,topk,accuracy"
    assert len(lines) == 1 + 6


def test_analyze_patches(workdir, tmp_path):
    assert main(["analyze", "patches", "--checkpoint", str(workdir / "run" / "model.bagc"),
                 "--data", str(workdir / "val.bagd"), "--class", "1", "--k", "3",
                 "--out", str(tmp_path / "p")]) == 0
    ppms = list((tmp_path / "p" / "patches").glob("*.ppm"))
    assert len(ppms) == 6  # 3 same-label + 3 other-label
    names = sorted(p.name for p in ppms)
    assert names[0].startswith("1_0_")


def test_analyze_scatter_and_logitcorr(workdir, tmp_path):
    ck = str(workdir / "run" / "model.bagc")
    assert main(["analyze", "scatter", "--checkpoint-a", ck, "--checkpoint-b", ck,
                 "--data", str(workdir / "val.bagd"), "--out", str(tmp_path / "sc")]) == 0
    lines = (tmp_path / "sc" / "class_scatter.csv").read_text().strip().split("\n")
    assert lines[0] == "class,acc_a,acc_b"
    assert main(["analyze", "logitcorr", "--checkpoint-a", ck, "--checkpoint-b", ck,
                 "--data", str(workdir / "val.bagd"), "--out", str(tmp_path / "lc")]) == 0
    text = (tmp_path / "lc" / "logitcorr.csv").read_text()
    assert "pearson_r,1" in text


def test_scramble_requires_tiling_config(workdir, tmp_path):
    # bagnet5_32 does not tile (stride 4 vs q 5): dedicated exit code 4
    rc = main(["analyze", "scramble", "--checkpoint", str(workdir / "run" / "model.bagc"),
               "--data", str(workdir / "val.bagd"), "--out", str(tmp_path / "scr")])
    assert rc == 4


def test_bench(workdir, capsys):
    assert main(["bench", "--checkpoint", str(workdir / "run" / "model.bagc"),
                 "--batch", "2", "--iters", "2", "--size", "16"]) == 0
    assert "images/s" in capsys.readouterr().out


def test_bench_throughput_non_increasing_in_input_size(workdir, capsys):
    rates = []
    for size in ("16", "48"):
        assert main(["bench", "--checkpoint", str(workdir / "run" / "model.bagc"),
                     "--batch", "4", "--iters", "3", "--size", size]) == 0
        line = capsys.readouterr().out.strip().split("\n")[-1]
        rates.append(float(line.split()[1]))
    assert rates[1] <= rates[0], f"throughput rose with input size: {rates}"


def test_exit_code_data_error(tmp_path, capsys):
    bad = tmp_path / "junk.bagd"
    bad.write_bytes(b"not a dataset")
    assert main(["dataset", "inspect", str(bad)]) == 3


def test_exit_code_missing_file(tmp_path):
    assert main(["dataset", "inspect", str(tmp_path / "nope.bagd")]) == 3


def test_exit_code_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["definitely-not-a-command"])
    assert exc.value.code == 2


def test_exit_code_divergence(workdir, tmp_path):
    rc = main(["train", "--config", "bagnet5_32", "--data", str(workdir / "train.bagd"),
               "--val", str(workdir / "val.bagd"), "--out", str(tmp_path / "div"),
               "--epochs", "2", "--batch-size", "8", "--seed", "0", "--lr0", "1e39"])
    assert rc == 5
    assert (tmp_path / "div" / "model.bagc").exists()  # last good state kept


def test_manifest_written_before_failure(workdir, tmp_path):
    # scramble refuses after the manifest exists
    out = tmp_path / "m"
    main(["analyze", "scramble", "--checkpoint", str(workdir / "run" / "model.bagc"),
          "--data", str(workdir / "val.bagd"), "--out", str(out)])
    assert (out / "manifest.json").exists()


def test_workers_env_default(monkeypatch, workdir, capsys):
    monkeypatch.setenv("BAGNET_WORKERS", "2")
    assert main(["dataset", "inspect", str(workdir / "train.bagd")]) == 0
