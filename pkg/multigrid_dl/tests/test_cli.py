import struct

import numpy as np
import pandas as pd
import pytest
import yaml

from multigrid_dl import cli
from multigrid_dl.data_synth import IMAGE_MAGIC, LABEL_MAGIC, load_samples
from multigrid_dl.tests.conftest import blob_digit

run_template = """
[run]
seed = 2
out = {out}
task = seg

[arch]
name = MG-4
widths = 4
levels = 2

[data]
mnist_images = {images}
mnist_labels = {labels}
train_count = 4
test_count = 2
digits = 1, 2
canvas = 16

[train]
batch_size = 2
iters_per_epoch = 1
epochs = 0
eval_batch_size = 2

[analyze]
occluder = 4
probes = 8:8
stride = 4
max_depth = 2
probe_levels = 2
"""


def write_idx(directory, prefix, labels):
    digits = np.stack([blob_digit(k) for k in labels]) * 255
    images = directory / f"{prefix}-images-idx3-ubyte"
    label_file = directory / f"{prefix}-labels-idx1-ubyte"
    images.write_bytes(struct.pack(">IIII", IMAGE_MAGIC, len(labels), 28, 28) + digits.astype(np.uint8).tobytes())
    label_file.write_bytes(struct.pack(">II", LABEL_MAGIC, len(labels)) + np.asarray(labels, dtype=np.uint8).tobytes())
    return images, label_file


@pytest.fixture
def run_config(tmp_path):
    images, labels = write_idx(tmp_path, "train", list(range(10)))
    path = tmp_path / "run.ini"
    path.write_text(run_template.format(out=tmp_path / "run", images=images, labels=labels))
    return path


def test_cost_vgg16(tmp_path, capsys):
    path = tmp_path / "vgg.ini"
    path.write_text("[run]\ntask = classify\n\n[arch]\nname = VGG-16\n")
    assert cli.main(["cost", "--config", str(path), "--out", str(tmp_path / "cost")]) == 0
    table = pd.read_csv(tmp_path / "cost" / "cost.csv")
    assert table["kind"].isin(["stem", "mgconv"]).sum() == 15
    assert table["kind"].iloc[-1] == "head"
    printed = capsys.readouterr().out
    assert f"total params={table['params'].sum()} flops={table['flops'].sum()}" in printed
    assert (tmp_path / "cost" / "cost.csv.meta.yml").exists()
    assert (tmp_path / "cost" / "resolved_config.ini").exists()


def test_resolve_config(capsys):
    assert cli.main(["resolve-config", "--seed", "4"]) == 0
    printed = capsys.readouterr().out
    assert "[run]\nseed = 4\n" in printed
    assert "name = PMG-11" in printed


def test_unknown_key_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[train]\nbogus = 1\n")
    assert cli.main(["resolve-config", "--config", str(path)]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error=ConfigError section=train key=bogus")


def test_missing_config_exits_2(tmp_path, capsys):
    assert cli.main(["cost", "--config", str(tmp_path / "absent.ini")]) == 2
    assert capsys.readouterr().err.startswith(f"error=FileNotFoundError path={tmp_path / 'absent.ini'}")


def test_unexpressible_architecture_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[run]\ntask = classify\n\n[arch]\nname = VGG-15\n")
    assert cli.main(["cost", "--config", str(path), "--out", str(tmp_path)]) == 2
    assert "error=ArchitectureError family=VGG depth=15" in capsys.readouterr().err


def test_seg_pipeline(run_config, tmp_path, capsys):
    out = tmp_path / "run"
    args = ["--config", str(run_config)]
    assert cli.main(["gen-data"] + args) == 0
    assert (out / "seg_train.mgd").exists() and (out / "seg_test.mgd").exists()
    meta = yaml.safe_load((out / "seg_train.mgd.meta.yml").read_text())
    assert meta["samples"] == 4
    assert meta["seed"] == 2

    assert cli.main(["train"] + args) == 0
    assert (out / "final.mgn").exists()
    assert (out / "metrics.csv").read_text() == "epoch,lr,train_loss,mean_iou,mean_error\n"

    checkpoint = ["--checkpoint", str(out / "final.mgn")]
    capsys.readouterr()
    assert cli.main(["eval"] + args + checkpoint) == 0
    printed = capsys.readouterr().out
    assert printed.startswith("model,task,samples,mean_iou,mean_error\nMG-4,seg,2,")

    assert cli.main(["attention", "--image-index", "1"] + args + checkpoint) == 0
    pgm = out / "attention_00001_8_8.pgm"
    assert pgm.read_bytes().startswith(b"P5\n16 16\n255\n")
    assert pd.read_csv(out / "attention_00001_8_8.csv").shape == (16, 16)

    assert cli.main(["attention"] + args + checkpoint) == 0
    summary = pd.read_csv(out / "attention_summary.csv")
    assert summary["image_index"].tolist() == [0, 1]
    assert (out / "attention_00000_8_8.pgm").exists()
    correlation = pd.read_csv(out / "attention_correlation.csv")
    assert list(correlation.columns) == ["probe_row", "probe_col", "images", "correlation"]
    assert correlation[["probe_row", "probe_col"]].values.tolist() == [[8, 8]]
    assert correlation["correlation"].isna().all()

    assert cli.main(["attention", "--image-index", "9"] + args + checkpoint) == 2
    assert "error=ShapeError op=select_image" in capsys.readouterr().err


def test_eval_needs_checkpoint(run_config, capsys):
    assert cli.main(["gen-data", "--config", str(run_config)]) == 0
    assert cli.main(["eval", "--config", str(run_config)]) == 2
    assert "error=ConfigError section=run key=checkpoint" in capsys.readouterr().err


def test_train_without_data(run_config, capsys):
    assert cli.main(["train", "--config", str(run_config)]) == 2
    assert "error=FileNotFoundError" in capsys.readouterr().err


def test_rf_probe(run_config, tmp_path, capsys):
    assert cli.main(["rf-probe", "--config", str(run_config)]) == 0
    table = pd.read_csv(tmp_path / "run" / "rf_probe.csv")
    assert table["depth"].tolist() == [1, 2]
    assert table["single_grid"].tolist() == [3, 5]
    assert "multigrid" in capsys.readouterr().out


def test_test_split_uses_test_digits(run_config, tmp_path):
    images, labels = write_idx(tmp_path, "t10k", [7, 7])
    text = run_config.read_text().replace("canvas = 16",
                                          f"canvas = 16\nmnist_test_images = {images}\nmnist_test_labels = {labels}")
    run_config.write_text(text)
    assert cli.main(["gen-data", "--config", str(run_config)]) == 0
    test = load_samples(tmp_path / "run" / "seg_test.mgd")
    classes = set(np.unique(np.concatenate([s.labels.ravel() for s in test])).tolist())
    assert classes <= {7, 10} and 7 in classes


def test_test_images_without_labels_exits_2(run_config, tmp_path, capsys):
    images, _ = write_idx(tmp_path, "t10k", [7])
    run_config.write_text(run_config.read_text().replace("canvas = 16", f"canvas = 16\nmnist_test_images = {images}"))
    assert cli.main(["gen-data", "--config", str(run_config)]) == 2
    assert "error=ConfigError section=data key=mnist_test_labels" in capsys.readouterr().err


def test_untrained_seg_model_is_near_chance(run_config, tmp_path):
    run_config.write_text(run_config.read_text().replace("test_count = 2", "test_count = 30"))
    errors = []
    for seed in (0, 1, 2):
        args = ["--config", str(run_config), "--seed", str(seed), "--out", str(tmp_path / f"seed_{seed}")]
        assert cli.main(["gen-data"] + args) == 0
        assert cli.main(["train"] + args) == 0
        assert cli.main(["eval"] + args + ["--checkpoint", str(tmp_path / f"seed_{seed}" / "final.mgn")]) == 0
        errors.append(pd.read_csv(tmp_path / f"seed_{seed}" / "eval.csv")["mean_error"].iloc[0])
    # an uninformed 11-way guess misses 10/11 of the foreground pixels
    assert 100 * 10 / 11 - 15 < np.mean(errors) <= 100
