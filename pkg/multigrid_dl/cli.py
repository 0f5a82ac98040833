"""
``mgdl`` command line: dataset generation, training, evaluation, attention
maps, receptive-footprint probe and cost accounting.

Every command reads one config file, writes ``resolved_config.ini`` into
the run directory and a ``.meta.yml`` sidecar next to every artifact.
Failures print a single ``error=<Type> key=value ... message="..."`` line
on stderr.
"""
import argparse
import errno
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from multigrid_dl import config
from multigrid_dl import tensor_core as tc
from multigrid_dl.analysis_probes import (attention_centroid, attention_map, centroid_correlation,
                                          footprint_table, write_map_csv, write_pgm)
from multigrid_dl.checkpoint import load_checkpoint, write_dataset
from multigrid_dl.data_synth import (ArrayDataset, audit_seg_dataset, audit_spt_dataset,
                                     bank_from_mnist, center_crop, dataset_digest, gen_seg_dataset,
                                     gen_spt_dataset, load_cifar100, load_samples, preprocess_cifar,
                                     random_crop_flip, save_samples, to_array_dataset)
from multigrid_dl.errors import ArchitectureError, ConfigError, MultigridError, ShapeError
from multigrid_dl.model_zoo import build, count_flops, count_params
from multigrid_dl.train_eval import evaluate, train

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
CLASSIFY_SIZE = (32, 32)


def _missing(path, what="file"):
    return FileNotFoundError(errno.ENOENT, f"{what} not found", str(path))


def _require_file(path, what="file"):
    path = Path(path)
    if not path.is_file():
        raise _missing(path, what)
    return path


def _data_file(resolved, key):
    value = resolved["data"][key]
    if not value:
        raise ConfigError(f"[data] {key} must name an existing file", section="data", key=key)
    return _require_file(value, key)


def _archive_path(resolved, split):
    configured = resolved["data"][f"{split}_archive"]
    if configured:
        return Path(configured), True
    return Path(resolved["run"]["out"]) / f"{resolved['run']['task']}_{split}.mgd", False


def _dtype(resolved):
    return tc.as_dtype(resolved["run"]["precision"])


def load_split(resolved, split, required=True):
    """
    read a generated archive back as an ArrayDataset in the run precision
    :return: [ArrayDataset or None] None for an optional split that was never generated
    """
    path, configured = _archive_path(resolved, split)
    if not path.is_file():
        if required or configured:
            raise _missing(path, f"{split} archive")
        return None
    samples = load_samples(path)
    dtype = _dtype(resolved)
    if resolved["run"]["task"] == "classify":
        inputs = np.stack([r["image"] for r in samples]).astype(dtype)
        targets = np.array([int(r["class"]) for r in samples], dtype=np.int64)
        return ArrayDataset(inputs, targets, "classify")
    return to_array_dataset(samples, dtype)


def input_size(resolved, dataset=None):
    if resolved["run"]["task"] == "classify":
        return CLASSIFY_SIZE
    if dataset is not None:
        return tuple(dataset.inputs.shape[-2:])
    canvas = resolved["data"]["canvas"]
    return canvas, canvas


def build_model(resolved, size):
    spec = config.arch_spec(resolved)
    rng = np.random.default_rng(config.derive_seed(resolved["run"]["seed"], "init"))
    return build(spec, size, rng, _dtype(resolved))


def _restore(resolved, checkpoint, size):
    if checkpoint is None:
        raise ConfigError("this command needs --checkpoint", section="run", key="checkpoint")
    model = build_model(resolved, size)
    load_checkpoint(model, _require_file(checkpoint, "checkpoint"))
    return model


def _test_bank(resolved, limit):
    """digits for the test split from the MNIST test files, or None to reuse the training digits"""
    data = resolved["data"]
    given = [key for key in ("mnist_test_images", "mnist_test_labels") if data[key]]
    if not given:
        logger.warning("no [data] mnist_test_images; test samples reuse the training digits")
        return None
    if len(given) == 1:
        missing = ({"mnist_test_images", "mnist_test_labels"} - set(given)).pop()
        raise ConfigError(f"[data] {given[0]} is set but {missing} is not", section="data", key=missing)
    return bank_from_mnist(_data_file(resolved, "mnist_test_images"),
                           _data_file(resolved, "mnist_test_labels"), limit)


def cmd_gen_data(args, resolved):
    """write train and test archives for the configured task"""
    out = config.out_dir(resolved)
    task, data = resolved["run"]["task"], resolved["data"]
    written = []
    if task == "classify":
        train_path = _data_file(resolved, "cifar_train")
        test_path = _data_file(resolved, "cifar_test")
        train_images, train_fine, _ = load_cifar100(train_path)
        test_images, test_fine, _ = load_cifar100(test_path)
        train_images, test_images = preprocess_cifar(train_images, test_images, data["whiten"])
        for split, images, labels in (("train", train_images, train_fine), ("test", test_images, test_fine)):
            path, _ = _archive_path(resolved, split)
            records = [{"image": img.astype(np.float32), "class": np.array(lab, dtype=np.uint8)}
                       for img, lab in zip(images, labels)]
            write_dataset(path, records)
            written.append((path, {"samples": len(records), "sha256": dataset_digest(records)}))
    else:
        limit = data["mnist_limit"] or None
        train_bank = bank_from_mnist(_data_file(resolved, "mnist_images"),
                                     _data_file(resolved, "mnist_labels"), limit)
        test_bank = _test_bank(resolved, limit)
        banks = {"train": train_bank, "test": train_bank if test_bank is None else test_bank}
        cfg = config.gen_config(resolved)
        generate, audit = (gen_seg_dataset, audit_seg_dataset) if task == "seg" \
            else (gen_spt_dataset, audit_spt_dataset)
        for split in ("train", "test"):
            samples = generate(cfg, banks[split], split)
            report = audit(samples, cfg)
            logger.info("%s/%s audit: %s", task, split, report)
            path, _ = _archive_path(resolved, split)
            save_samples(path, samples)
            written.append((path, {"samples": len(samples), "sha256": dataset_digest(samples)}))
    for path, details in written:
        config.write_sidecar(path, resolved, "gen-data", **details)
        logger.info("wrote %s", path)
    config.write_resolved(resolved, out)
    return 0


def cmd_train(args, resolved):
    """train from the generated archives; epochs = 0 only writes the initial weights"""
    out = config.out_dir(resolved)
    config.write_resolved(resolved, out)
    dataset = load_split(resolved, "train")
    eval_dataset = load_split(resolved, "test", required=False)
    augment = None
    if dataset.task == "classify":
        augment = random_crop_flip
        if eval_dataset is not None:
            eval_dataset = ArrayDataset(center_crop(eval_dataset.inputs), eval_dataset.targets, "classify")
    model = build_model(resolved, input_size(resolved, dataset))
    logger.info("%s: %d params, %d multiply-adds per sample", model, count_params(model), count_flops(model))
    train(model, dataset, config.train_config(resolved), eval_dataset, out, augment)
    for artifact in sorted(out.glob("ckpt_epoch_*.mgn")) + [out / "final.mgn", out / "metrics.csv"]:
        config.write_sidecar(artifact, resolved, "train", architecture=model.spec.name)
    return 0


def cmd_eval(args, resolved):
    """print one metric row for a checkpoint on the test split"""
    out = config.out_dir(resolved)
    config.write_resolved(resolved, out)
    dataset = load_split(resolved, "test")
    if dataset.task == "classify":
        dataset = ArrayDataset(center_crop(dataset.inputs), dataset.targets, "classify")
    model = _restore(resolved, args.checkpoint, input_size(resolved, dataset))
    metrics = evaluate(model, dataset, resolved["train"]["eval_batch_size"])
    report = pd.DataFrame([{"model": model.spec.name, "task": dataset.task, "samples": len(dataset),
                            **metrics}])
    path = out / "eval.csv"
    report.to_csv(path, index=False, lineterminator="\n")
    config.write_sidecar(path, resolved, "eval", checkpoint=str(args.checkpoint))
    sys.stdout.write(report.to_csv(index=False, lineterminator="\n"))
    return 0


def _select_images(args, resolved, dataset):
    if args.image_index is None:
        return list(range(min(resolved["analyze"]["images"], len(dataset))))
    index = args.image_index
    if not 0 <= index < len(dataset):
        raise ShapeError(f"image index {index} outside a test split of {len(dataset)}",
                         op="select_image", dim=0, expected=len(dataset), actual=index)
    return [index]


def cmd_attention(args, resolved):
    """occluder attention maps of test images, as PGM and raw CSV, plus a centroid summary"""
    out = config.out_dir(resolved)
    config.write_resolved(resolved, out)
    dataset = load_split(resolved, "test")
    if dataset.task == "classify":
        raise ArchitectureError("attention maps need a dense-output network",
                                family=resolved["arch"]["name"])
    indices = _select_images(args, resolved, dataset)
    model = _restore(resolved, args.checkpoint, input_size(resolved, dataset))
    cfg = config.attention_config(resolved)
    rows = []
    for index in indices:
        digit = attention_centroid(dataset.inputs[index, 0])
        for m in attention_map(model, dataset.inputs[index], cfg):
            stem = out / f"attention_{index:05d}_{m.probe[0]}_{m.probe[1]}"
            for path, writer, values in ((stem.with_suffix(".pgm"), write_pgm, m.normalized),
                                         (stem.with_suffix(".csv"), write_map_csv, m.raw)):
                writer(path, values)
                config.write_sidecar(path, resolved, "attention", image_index=index,
                                     probe=list(m.probe), checkpoint=str(args.checkpoint))
            focus = attention_centroid(m.raw)
            rows.append({"image_index": index, "probe_row": m.probe[0], "probe_col": m.probe[1],
                         "digit_row": digit[0], "digit_col": digit[1],
                         "attention_row": focus[0], "attention_col": focus[1], "peak": float(m.raw.max())})
    summary = pd.DataFrame(rows, columns=["image_index", "probe_row", "probe_col", "digit_row", "digit_col",
                                          "attention_row", "attention_col", "peak"])
    path = out / "attention_summary.csv"
    summary.to_csv(path, index=False, lineterminator="\n")
    config.write_sidecar(path, resolved, "attention", images=indices, checkpoint=str(args.checkpoint))
    correlations = []
    for probe, group in summary.groupby(["probe_row", "probe_col"]):
        group = group.dropna()
        r = np.nan
        if len(group) > 2:
            r = centroid_correlation(group[["digit_row", "digit_col"]].to_numpy(),
                                     group[["attention_row", "attention_col"]].to_numpy())
            logger.info("probe %s: digit/attention centroid correlation %.3f over %d images",
                        probe, r, len(group))
        correlations.append({"probe_row": probe[0], "probe_col": probe[1], "images": len(group),
                             "correlation": r})
    path = out / "attention_correlation.csv"
    pd.DataFrame(correlations, columns=["probe_row", "probe_col", "images", "correlation"]).to_csv(
        path, index=False, lineterminator="\n")
    config.write_sidecar(path, resolved, "attention", images=indices, checkpoint=str(args.checkpoint))
    return 0


def cmd_rf_probe(args, resolved):
    """print footprint side against depth for single-grid and multigrid stacks"""
    out = config.out_dir(resolved)
    config.write_resolved(resolved, out)
    analyze = resolved["analyze"]
    table = footprint_table(analyze["max_depth"], input_size(resolved), analyze["probe_levels"],
                            analyze["probe_width"])
    path = out / "rf_probe.csv"
    table.to_csv(path, index=False, lineterminator="\n")
    config.write_sidecar(path, resolved, "rf-probe")
    sys.stdout.write(table.to_string(index=False) + "\n")
    return 0


def cmd_cost(args, resolved):
    """print per-layer params and multiply-adds plus totals"""
    out = config.out_dir(resolved)
    config.write_resolved(resolved, out)
    model = build_model(resolved, input_size(resolved))
    table = model.summary()
    path = out / "cost.csv"
    table.to_csv(path, index=False, lineterminator="\n")
    config.write_sidecar(path, resolved, "cost", architecture=model.spec.name)
    sys.stdout.write(table.to_string(index=False) + "\n")
    sys.stdout.write(f"total params={count_params(model)} flops={count_flops(model)}\n")
    return 0


def cmd_resolve_config(args, resolved):
    """print the fully resolved config"""
    sys.stdout.write(config.serialize(resolved))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "attention": cmd_attention,
    "rf-probe": cmd_rf_probe,
    "cost": cmd_cost,
    "resolve-config": cmd_resolve_config,
}


def make_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="run config (.ini)")
    common.add_argument("--seed", type=int, default=None, help="overrides [run] seed")
    common.add_argument("--out", type=str, default=None, help="overrides [run] out")
    common.add_argument("--precision", choices=("f32", "f64"), default=None)
    common.add_argument("--checkpoint", type=str, default=None, help="MGN1 weights file")
    common.add_argument("--image-index", type=int, default=None,
                        help="one test image for attention (default: the first [analyze] images)")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="mgdl", description="multigrid neural network experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__doc__)
    return parser


def _quote(text):
    return str(text).replace("\n", " ").replace('"', "'")


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)
    try:
        resolved = config.load_config(args.config, seed=args.seed, out=args.out, precision=args.precision)
        return COMMANDS[args.command](args, resolved)
    except MultigridError as e:
        sys.stderr.write(e.describe() + "\n")
        return 2
    except FileNotFoundError as e:
        path = e.filename if e.filename is not None else e
        sys.stderr.write(f'error=FileNotFoundError path={path} message="{_quote(e.strerror or e)}"\n')
        return 2
    except Exception as e:
        logger.debug("unexpected failure", exc_info=True)
        sys.stderr.write(f'error={type(e).__name__} message="{_quote(e)}"\n')
        return 1


if __name__ == "__main__":
    sys.exit(main())
