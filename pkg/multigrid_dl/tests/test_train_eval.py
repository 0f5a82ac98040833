import numpy as np
import pandas as pd
import pytest

from multigrid_dl import tensor_core as tc
from multigrid_dl import train_eval as te
from multigrid_dl.data_synth import ArrayDataset
from multigrid_dl.errors import NonFiniteError
from multigrid_dl.model_zoo import ArchSpec, build

tiny_cfg = te.TrainConfig(batch_size=2, iters_per_epoch=2, epochs=1, checkpoint_every=1,
                          schedule=te.exp_decay(0.01, 0.001), seed=3)


def tiny_model(task="seg", seed=0):
    spec = ArchSpec.from_name("MG-4", task=task, in_channels=1, widths=(4,), levels=2)
    return build(spec, (8, 8), np.random.default_rng(seed))


def seg_data(rng, n=4):
    return ArrayDataset(rng.uniform(size=(n, 1, 8, 8)), rng.integers(0, 11, size=(n, 8, 8)), "seg")


def spt_data(rng, n=4):
    return ArrayDataset(rng.uniform(size=(n, 1, 8, 8)), rng.uniform(size=(n, 1, 8, 8)), "spt")


class LookupClassifier:
    """predicts the class stored in the first pixel"""

    def predict(self, x):
        logits = np.zeros((len(x), 10))
        logits[np.arange(len(x)), x[:, 0, 0, 0].astype(int)] = 1.0
        return logits


def test_exp_schedule_endpoints():
    schedule = te.exp_decay(0.1, 1e-4)
    assert te.lr_at(schedule, 0, 200) == pytest.approx(0.1)
    assert te.lr_at(schedule, 199, 200) == pytest.approx(1e-4)
    lrs = [te.lr_at(schedule, e, 200) for e in range(200)]
    assert all(b < a for a, b in zip(lrs, lrs[1:]))
    assert te.lr_at(schedule, 0, 1) == 0.1


def test_step_schedule():
    schedule = te.step_decay(0.1, 0.2, 60)
    assert te.lr_at(schedule, 59, 200) == pytest.approx(0.1)
    assert te.lr_at(schedule, 60, 200) == pytest.approx(0.02)
    assert te.lr_at(schedule, 120, 200) == pytest.approx(0.004)


@pytest.mark.parametrize("kwargs", [dict(kind="linear"), dict(start=0.0), dict(end=0.5),
                                    dict(kind="step", period=0)])
def test_bad_schedule(kwargs):
    with pytest.raises(ValueError):
        te.Schedule(**kwargs)


@pytest.mark.parametrize("kwargs", [dict(batch_size=0), dict(epochs=-1), dict(weight_decay=-1.0),
                                    dict(precision="f16")])
def test_bad_train_config(kwargs):
    with pytest.raises(ValueError):
        te.TrainConfig(**kwargs)


def test_presets():
    assert te.cifar_config().iters_per_epoch == 300
    assert te.seg_config().batch_size == 64
    assert te.spt_config().iters_per_epoch == 800
    assert te.spt_config(residual=True).schedule.kind == "step"
    assert te.seg_config(epochs=3).epochs == 3


def test_non_finite_input_is_reported(rng):
    model = tiny_model()
    optimizer = tc.SGD(model.named_parameters())
    x = rng.uniform(size=(2, 1, 8, 8))
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteError) as info:
        te.train_step(model, optimizer, x, rng.integers(0, 11, size=(2, 8, 8)), 0.01)
    assert info.value.tensor


def test_find_descent_lr(rng):
    data = seg_data(rng, n=2)
    lr = te.find_descent_lr(lambda: tiny_model(), data.inputs, data.targets, "seg", steps=3)
    assert lr is not None
    assert lr <= 0.1


small_widths = (4, 4, 8, 8, 8)


@pytest.mark.parametrize("name,task", [
    ("SG-5", "seg"), ("MG-5", "seg"), ("PMG-5", "seg"), ("R-SG-6", "seg"), ("R-MG-6", "seg"),
    ("R-PMG-8", "seg"), ("UNET-11", "seg"), ("UMG-11", "seg"), ("PMG-5", "spt"),
    ("VGG-6", "classify"), ("MG-11", "classify"), ("PMG-9", "classify"), ("RES-12", "classify"),
    ("R-MG-12", "classify"), ("R-PMG-16", "classify"),
])
def test_every_family_descends(name, task, rng):
    if task == "classify":
        spec = ArchSpec.from_name(name, widths=small_widths, num_classes=10)
        size, x, y = (32, 32), rng.uniform(size=(2, 3, 32, 32)), rng.integers(0, 10, size=2)
    else:
        spec = ArchSpec.from_name(name, task=task, in_channels=1, widths=small_widths)
        size, x = (16, 16), rng.uniform(size=(2, 1, 16, 16))
        y = rng.integers(0, 11, size=(2, 16, 16)) if task == "seg" else rng.uniform(size=(2, 1, 16, 16))
    lr = te.find_descent_lr(lambda: build(spec, size, np.random.default_rng(0)), x, y, task, steps=10)
    assert lr is not None


def test_train_zero_epochs_writes_outputs(tmp_path, rng):
    cfg = te.TrainConfig(epochs=0)
    model, history = te.train(tiny_model(), seg_data(rng), cfg, out_dir=tmp_path)
    assert history.empty
    assert (tmp_path / "final.mgn").exists()
    assert (tmp_path / "metrics.csv").read_text() == "epoch,lr,train_loss\n"


def test_train_records_history_and_checkpoints(tmp_path, rng):
    data = seg_data(rng)
    _, history = te.train(tiny_model(), data, tiny_cfg, eval_dataset=data, out_dir=tmp_path)
    assert list(history.columns) == ["epoch", "lr", "train_loss", "mean_iou", "mean_error"]
    assert history["lr"].iloc[0] == pytest.approx(0.01)
    assert (tmp_path / "ckpt_epoch_0001.mgn").exists()
    written = pd.read_csv(tmp_path / "metrics.csv")
    assert written["epoch"].tolist() == [1]


def test_training_is_reproducible(tmp_path, rng):
    data = spt_data(rng)
    for name in ("a", "b"):
        te.train(tiny_model("spt", seed=4), data, tiny_cfg, out_dir=tmp_path / name)
    assert (tmp_path / "a" / "final.mgn").read_bytes() == (tmp_path / "b" / "final.mgn").read_bytes()


def test_train_rejects_task_mismatch(rng):
    with pytest.raises(ValueError):
        te.train(tiny_model("spt"), seg_data(rng), tiny_cfg)


def test_seg_metrics_exclude_absent_classes():
    counts = np.zeros((11, 11), dtype=np.int64)
    counts[0, 0] = 3
    counts[0, 10] = 1
    counts[10, 0] = 2
    counts[1, 1] = 4
    counts[10, 10] = 50
    metrics = te.seg_metrics(counts)
    assert metrics["mean_iou"] == pytest.approx(75.0)
    assert metrics["mean_error"] == pytest.approx(12.5)
    assert metrics["excluded"] == list(range(2, 10))


def test_seg_confusion_shape():
    counts = te.seg_confusion(np.array([[0, 10]]), np.array([[0, 3]]))
    assert counts.shape == (11, 11)
    assert counts[0, 0] == 1 and counts[10, 3] == 1


def test_spt_metrics():
    predicted = np.zeros((3, 2, 2), dtype=bool)
    target = np.zeros((3, 2, 2), dtype=bool)
    predicted[0, 0] = True
    target[0, :, 0] = True
    target[1, 0, 0] = True
    ious, missed, foreground = te.spt_metrics(predicted, target)
    assert ious == [pytest.approx(1 / 3), 0.0]
    assert missed == 2
    assert foreground == 3


def test_eval_classification():
    inputs = np.zeros((4, 3, 2, 2))
    inputs[:, 0, 0, 0] = [1, 2, 3, 4]
    data = ArrayDataset(inputs, np.array([1, 2, 0, 4]), "classify")
    assert te.evaluate(LookupClassifier(), data, batch_size=3) == {"error": 25.0}


@pytest.mark.parametrize("make_data", [seg_data, spt_data])
def test_eval_is_order_and_batch_invariant(rng, make_data):
    data = make_data(rng, n=5)
    model = tiny_model(data.task)
    reference = te.evaluate(model, data, batch_size=5)
    shuffled = te.evaluate(model, data.subset(rng.permutation(5)), batch_size=1)
    assert shuffled["mean_iou"] == pytest.approx(reference["mean_iou"])
    assert shuffled["mean_error"] == pytest.approx(reference["mean_error"])


def eval_report(model, mean_iou, mean_error):
    return pd.DataFrame([{"model": model, "task": "seg", "samples": 500, "mean_iou": mean_iou,
                          "mean_error": mean_error}])


def test_summarize_runs_averages_seeds():
    reports = [eval_report("SG-11", iou, 90.0) for iou in (10.0, 20.0, 30.0)]
    reports += [eval_report("PMG-11", iou, 40.0) for iou in (50.0, 60.0, 70.0)]
    summary = te.summarize_runs(reports)
    assert summary["model"].tolist() == ["SG-11", "PMG-11"]
    assert summary["seeds"].tolist() == [3, 3]
    assert summary["mean_iou"].tolist() == pytest.approx([20.0, 60.0])
    assert summary["mean_iou_std"].tolist() == pytest.approx([10.0, 10.0])
    assert "samples" not in summary.columns

    gaps = te.compare_models(summary, "PMG-11", "SG-11").set_index("metric")
    assert gaps.loc["mean_iou", "gap"] == pytest.approx(40.0)
    assert gaps.loc["mean_error", "gap"] == pytest.approx(-50.0)
    with pytest.raises(KeyError):
        te.compare_models(summary, "PMG-11", "R-SG-20")


@pytest.mark.slow
def test_threshold_segmentation_is_learnable(rng):
    inputs = rng.uniform(size=(16, 1, 8, 8))
    labels = np.where(inputs[:, 0] > 0.5, 1, te.BACKGROUND)
    data = ArrayDataset(inputs, labels, "seg")
    cfg = te.TrainConfig(batch_size=4, iters_per_epoch=10, epochs=5, schedule=te.exp_decay(0.05, 0.01))
    _, history = te.train(tiny_model(), data, cfg)
    assert history["train_loss"].iloc[-1] < 0.5 * history["train_loss"].iloc[0]
