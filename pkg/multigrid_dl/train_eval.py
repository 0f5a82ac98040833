"""
Training loop, learning-rate schedules and evaluation metrics.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix
from tqdm import tqdm

from multigrid_dl import tensor_core as tc
from multigrid_dl.checkpoint import save_checkpoint
from multigrid_dl.data_synth import BACKGROUND
from multigrid_dl.errors import NonFiniteError

logger = logging.getLogger(__name__)

DIGIT_CLASSES = 10


@dataclass(frozen=True)
class Schedule:
    """
    :param kind: [str] 'exp' (start -> end exponentially over the run) or
    'step' (multiply by factor every period epochs)
    """

    kind: str = "exp"
    start: float = 0.1
    end: float = 1e-4
    factor: float = 0.2
    period: int = 60

    def __post_init__(self):
        if self.kind not in ("exp", "step"):
            raise ValueError(f"schedule kind must be 'exp' or 'step', got '{self.kind}'")
        if self.start <= 0:
            raise ValueError(f"schedule start must be positive, got {self.start}")
        if self.kind == "exp" and not 0 < self.end < self.start:
            raise ValueError(f"exp schedule needs 0 < end < start, got {self.start} -> {self.end}")
        if self.kind == "step" and (self.factor <= 0 or self.period <= 0):
            raise ValueError("step schedule needs a positive factor and period")


def exp_decay(start=0.1, end=1e-4):
    return Schedule("exp", start=start, end=end)


def step_decay(start=0.1, factor=0.2, period=60):
    return Schedule("step", start=start, factor=factor, period=period)


def lr_at(schedule, epoch, total):
    """
    :param schedule: [Schedule]
    :param epoch: [int] 0-based epoch, 0 <= epoch < total
    :param total: [int] number of epochs in the run
    :return: [float] learning rate for that epoch
    """
    if schedule.kind == "exp":
        if total <= 1:
            return schedule.start
        return schedule.start * (schedule.end / schedule.start) ** (epoch / (total - 1))
    return schedule.start * schedule.factor ** (epoch // schedule.period)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    iters_per_epoch: int = 300
    epochs: int = 200
    weight_decay: float = 5e-4
    momentum: float = tc.SGD_MOMENTUM
    schedule: Schedule = field(default_factory=Schedule)
    seed: int = 0
    precision: str = "f64"
    checkpoint_every: int = 10
    eval_batch_size: int = 100

    def __post_init__(self):
        for name in ("batch_size", "iters_per_epoch", "checkpoint_every", "eval_batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")
        tc.as_dtype(self.precision)


def cifar_config(residual=False, **kwargs):
    """batch 128, weight decay 5e-4, 300 iterations x 200 epochs"""
    schedule = step_decay(0.1, 0.2, 60) if residual else exp_decay(0.1, 1e-4)
    settings = dict(batch_size=128, iters_per_epoch=300, epochs=200, weight_decay=5e-4, schedule=schedule)
    settings.update(kwargs)
    return TrainConfig(**settings)


def seg_config(residual=False, **kwargs):
    """batch 64, weight decay 5e-4, 150 iterations x 200 epochs"""
    settings = dict(batch_size=64, iters_per_epoch=150)
    settings.update(kwargs)
    return cifar_config(residual, **settings)


def spt_config(residual=False, **kwargs):
    """as seg_config with 800 iterations per epoch"""
    settings = dict(iters_per_epoch=800)
    settings.update(kwargs)
    return seg_config(residual, **settings)


def task_loss(task, output, targets):
    if task == "classify":
        return tc.softmax_cross_entropy(output, targets)
    if task == "seg":
        return tc.pixel_softmax_cross_entropy(output, targets)
    if task == "spt":
        return tc.sigmoid_bce(output, targets)
    raise ValueError(f"no loss for task '{task}'")


def _first_non_finite(tape, model):
    activations = ((f"{node.op}[{i}]", node.output.data) for i, node in enumerate(tape.nodes))
    found = tc.first_non_finite(activations)
    if found is None:
        found = tc.first_non_finite((name, t.data) for name, t in model.named_parameters())
    return found or "loss"


def train_step(model, optimizer, x, y, lr):
    """
    one forward/backward/update on a batch
    :return: [float] batch loss before the update
    """
    optimizer.zero_grad()
    with tc.Tape() as tape:
        output = model.forward(tc.Tensor(x), train=True)
        loss = task_loss(model.task, output, y)
        if not np.isfinite(loss.data):
            name = _first_non_finite(tape, model)
            raise NonFiniteError(f"loss is {float(loss.data)}; first non-finite tensor: {name}",
                                 tensor=name)
        tape.backward(loss)
    bad = tc.first_non_finite((f"grad:{name}", t.grad) for name, t in model.named_parameters())
    if bad is not None:
        raise NonFiniteError(f"non-finite gradient in {bad}", tensor=bad)
    optimizer.step(lr)
    return float(loss.data)


def metric_columns(task):
    if task == "classify":
        return ["error"]
    return ["mean_iou", "mean_error"]


def train(model, dataset, cfg, eval_dataset=None, out_dir=None, augment=None):
    """
    SGD training with batches drawn uniformly with replacement
    :param model: [Model] network whose head matches dataset.task
    :param dataset: [ArrayDataset] training data
    :param cfg: [TrainConfig]
    :param eval_dataset: [ArrayDataset] held-out split evaluated every epoch
    :param out_dir: [str or Path] where checkpoints and metrics.csv go
    :param augment: [callable] (batch, rng) -> batch applied to inputs
    :return: [tuple] trained model, history DataFrame
    """
    if model.task != dataset.task:
        raise ValueError(f"model head is for '{model.task}' but the dataset is '{dataset.task}'")
    rng = np.random.default_rng(cfg.seed)
    optimizer = tc.SGD(model.named_parameters(), weight_decay=cfg.weight_decay, momentum=cfg.momentum)
    out_dir = Path(out_dir) if out_dir is not None else None
    columns = ["epoch", "lr", "train_loss"] + (metric_columns(dataset.task) if eval_dataset else [])
    rows = []

    logger.info("training %s on %d samples: %d epochs x %d iterations", model, len(dataset),
                cfg.epochs, cfg.iters_per_epoch)
    for epoch in range(cfg.epochs):
        t1 = time.time()
        lr = lr_at(cfg.schedule, epoch, cfg.epochs)
        losses = []
        with tqdm(range(cfg.iters_per_epoch), ncols=100, desc=f"Epoch {epoch + 1}", unit="batch") as tepoch:
            for _ in tepoch:
                x, y = dataset.batch(rng.integers(0, len(dataset), size=cfg.batch_size))
                if augment is not None:
                    x = augment(x, rng)
                loss = train_step(model, optimizer, x, y, lr)
                losses.append(loss)
                tepoch.set_postfix(loss=loss)
        row = {"epoch": epoch + 1, "lr": lr, "train_loss": float(np.mean(losses))}
        if eval_dataset is not None:
            row.update(evaluate(model, eval_dataset, cfg.eval_batch_size))
        rows.append(row)
        logger.info("epoch %d lr %.3g loss %.4f %s (%.1fs)", epoch + 1, lr, row["train_loss"],
                    " ".join(f"{k} {row[k]:.2f}" for k in columns[3:]), time.time() - t1)
        if out_dir is not None and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, out_dir / f"ckpt_epoch_{epoch + 1:04d}.mgn")

    history = pd.DataFrame(rows, columns=columns)
    if out_dir is not None:
        save_checkpoint(model, out_dir / "final.mgn")
        history.to_csv(out_dir / "metrics.csv", index=False, lineterminator="\n")
    return model, history


def _predictions(model, inputs, batch_size):
    for start in range(0, len(inputs), batch_size):
        yield start, model.predict(inputs[start:start + batch_size])


def eval_classification(model, dataset, batch_size=100):
    """
    :return: [float] top-1 error in percent
    """
    wrong = 0
    for start, logits in _predictions(model, dataset.inputs, batch_size):
        wrong += int(np.sum(logits.argmax(axis=1) != dataset.targets[start:start + len(logits)]))
    return 100.0 * wrong / len(dataset)


def seg_confusion(labels, predictions):
    """11x11 confusion counts, rows = true class, background last"""
    return confusion_matrix(np.ravel(labels), np.ravel(predictions), labels=np.arange(BACKGROUND + 1))


def seg_metrics(counts):
    """
    mean IoU over the digit classes present in the ground truth and the
    error rate over true-foreground pixels
    :param counts: [np array] accumulated seg_confusion
    :return: [dict] mean_iou (%), mean_error (%), excluded (classes without
    ground-truth pixels)
    """
    tp = np.diag(counts)[:DIGIT_CLASSES].astype(np.float64)
    true_total = counts[:DIGIT_CLASSES, :].sum(axis=1)
    pred_total = counts[:, :DIGIT_CLASSES].sum(axis=0)
    present = true_total > 0
    excluded = [int(c) for c in np.flatnonzero(~present)]
    if excluded:
        logger.warning("classes %s have no ground-truth pixels and are excluded from mean IoU", excluded)
    union = true_total + pred_total - tp
    iou = tp[present] / union[present]
    foreground = true_total.sum()
    mean_error = 100.0 * (1.0 - tp.sum() / foreground) if foreground else 0.0
    mean_iou = 100.0 * float(iou.mean()) if iou.size else 0.0
    return {"mean_iou": mean_iou, "mean_error": mean_error, "excluded": excluded}


def eval_seg(model, dataset, batch_size=100):
    """
    :return: [tuple] (mean IoU %, mean error %)
    """
    counts = np.zeros((BACKGROUND + 1, BACKGROUND + 1), dtype=np.int64)
    for start, logits in _predictions(model, dataset.inputs, batch_size):
        counts += seg_confusion(dataset.targets[start:start + len(logits)], logits.argmax(axis=1))
    metrics = seg_metrics(counts)
    return metrics["mean_iou"], metrics["mean_error"]


def spt_metrics(predicted, target):
    """
    :param predicted: [np array] boolean foreground predictions (n, ...)
    :param target: [np array] boolean true foreground, same shape
    :return: [tuple] list of per-sample IoUs (samples with an empty union
    skipped), misclassified true-foreground pixels, true-foreground pixels
    """
    flat_p = predicted.reshape(len(predicted), -1)
    flat_t = target.reshape(len(target), -1)
    inter = np.logical_and(flat_p, flat_t).sum(axis=1)
    union = np.logical_or(flat_p, flat_t).sum(axis=1)
    ious = [float(i / u) for i, u in zip(inter, union) if u > 0]
    missed = int(np.sum(flat_t & ~flat_p))
    return ious, missed, int(flat_t.sum())


def eval_spt(model, dataset, batch_size=100):
    """
    binarize prediction and target at 0.5 (logit 0 for the prediction)
    :return: [tuple] (mean per-sample foreground IoU %, error % over true foreground)
    """
    ious, missed, foreground = [], 0, 0
    for start, logits in _predictions(model, dataset.inputs, batch_size):
        target = dataset.targets[start:start + len(logits)] > 0.5
        sample_ious, sample_missed, sample_fg = spt_metrics(logits > 0, target)
        ious.extend(sample_ious)
        missed += sample_missed
        foreground += sample_fg
    mean_iou = 100.0 * math.fsum(ious) / len(ious) if ious else 0.0
    mean_error = 100.0 * missed / foreground if foreground else 0.0
    return mean_iou, mean_error


def evaluate(model, dataset, batch_size=100):
    """
    :return: [dict] task metrics keyed like the history columns
    """
    if dataset.task == "classify":
        return {"error": eval_classification(model, dataset, batch_size)}
    fn = eval_seg if dataset.task == "seg" else eval_spt
    mean_iou, mean_error = fn(model, dataset, batch_size)
    return {"mean_iou": mean_iou, "mean_error": mean_error}


def find_descent_lr(model_factory, x, y, task, steps=10, start=0.1, min_lr=1e-6):
    """
    halve the learning rate until plain gradient descent on one fixed batch
    lowers the loss at every one of `steps` steps
    :param model_factory: [callable] () -> freshly initialized Model
    :return: [float or None] the first such learning rate, None if none above min_lr
    """
    lr = start
    while lr >= min_lr:
        model = model_factory()
        optimizer = tc.SGD(model.named_parameters(), momentum=0.0)
        losses = [train_step(model, optimizer, x, y, lr) for _ in range(steps + 1)]
        if all(b < a for a, b in zip(losses, losses[1:])):
            logger.debug("loss decreases for %d steps at lr %.3g", steps, lr)
            return lr
        lr /= 2
    return None


def summarize_runs(reports):
    """
    average eval reports over replicate runs
    :param reports: [list of DataFrame] eval tables (model, task, samples, metrics), one per seed
    :return: [DataFrame] one row per model with the number of seeds and the
    mean and standard deviation of every metric
    """
    table = pd.concat(reports, ignore_index=True)
    metrics = [c for c in table.columns if c not in ("model", "task", "samples")]
    grouped = table.groupby(["model", "task"], sort=False)
    summary = grouped[metrics].agg(["mean", "std"])
    summary.columns = [name if stat == "mean" else f"{name}_std" for name, stat in summary.columns]
    summary.insert(0, "seeds", grouped.size())
    return summary.reset_index()


def compare_models(summary, model, baseline):
    """
    :param summary: [DataFrame] output of summarize_runs
    :return: [DataFrame] per metric the seed-averaged value of both models and
    the gap model - baseline
    """
    rows = summary.set_index("model")
    missing = [name for name in (model, baseline) if name not in rows.index]
    if missing:
        raise KeyError(f"no runs of {missing} in the summary")
    metrics = [c for c in rows.columns if c not in ("task", "seeds") and not c.endswith("_std")]
    first = rows.loc[model, metrics].to_numpy(dtype=np.float64)
    second = rows.loc[baseline, metrics].to_numpy(dtype=np.float64)
    return pd.DataFrame({"metric": metrics, model: first, baseline: second, "gap": first - second})
