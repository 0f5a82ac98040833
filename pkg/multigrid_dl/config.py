"""
Run configuration: sectioned ``key = value`` files, typed defaults,
canonical serialization, named sub-seeds and per-artifact sidecars.

A resolved config is a dict of sections, each a dict of typed values, with
every default filled in. ``serialize`` writes it in canonical order so that
parse -> resolve -> serialize -> parse is the identity.
"""
import configparser
import datetime
import errno
import hashlib
import logging
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np
import yaml

from multigrid_dl.errors import ConfigError

logger = logging.getLogger(__name__)

RESOLVED_NAME = "resolved_config.ini"

DEFAULTS = OrderedDict([
    ("run", OrderedDict([
        ("seed", 0),
        ("out", "output"),
        ("precision", "f64"),
        ("task", "seg"),
    ])),
    ("arch", OrderedDict([
        ("name", "PMG-11"),
        ("widths", (32, 64, 128, 256, 256)),
        ("levels", 3),
        ("multiplier", None),
        ("scales", 4),
        ("num_classes", 100),
    ])),
    ("data", OrderedDict([
        ("mnist_images", ""),
        ("mnist_labels", ""),
        ("mnist_test_images", ""),
        ("mnist_test_labels", ""),
        ("mnist_limit", 0),
        ("cifar_train", ""),
        ("cifar_test", ""),
        ("whiten", "standardize"),
        ("train_archive", ""),
        ("test_archive", ""),
        ("train_count", 10000),
        ("test_count", 1000),
        ("digits", (3, 5)),
        ("scale", (0.7, 1.3)),
        ("rotation", (-45.0, 45.0)),
        ("shear", (0.0, 0.0)),
        ("canvas", 64),
        ("overlap_cap", 0.3),
        ("translate", True),
        ("max_retries", 20),
        ("workers", 1),
    ])),
    ("train", OrderedDict([
        ("batch_size", 64),
        ("iters_per_epoch", 150),
        ("epochs", 200),
        ("weight_decay", 0.0005),
        ("momentum", 0.9),
        ("schedule", "exp"),
        ("lr_start", 0.1),
        ("lr_end", 0.0001),
        ("lr_factor", 0.2),
        ("lr_period", 60),
        ("checkpoint_every", 10),
        ("eval_batch_size", 100),
    ])),
    ("analyze", OrderedDict([
        ("occluder", 8),
        ("probes", ()),
        ("window", 3),
        ("stride", 1),
        ("images", 10),
        ("max_depth", 10),
        ("probe_levels", 3),
        ("probe_width", 4),
    ])),
])

OPTIONAL_FLOATS = {("arch", "multiplier")}
POINT_LISTS = {("analyze", "probes")}
CHOICES = {
    ("run", "precision"): ("f32", "f64"),
    ("run", "task"): ("classify", "seg", "spt"),
    ("data", "whiten"): ("standardize", "zca"),
    ("train", "schedule"): ("exp", "step"),
}


def _parse_value(section, key, text):
    default = DEFAULTS[section][key]
    text = text.strip()
    try:
        if (section, key) in OPTIONAL_FLOATS:
            return None if text in ("", "none", "None") else float(text)
        if isinstance(default, bool):
            value = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}
            return value[text.lower()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if (section, key) in POINT_LISTS:
            points = tuple(tuple(int(v) for v in pair.split(":")) for pair in text.split(",") if pair.strip())
            if any(len(p) != 2 for p in points):
                raise ValueError(text)
            return points
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(v) for v in text.split(",") if v.strip())
        value = text
    except (ValueError, KeyError):
        raise ConfigError(f"[{section}] {key} = '{text}' is not a valid {type(default).__name__}",
                          section=section, key=key)
    allowed = CHOICES.get((section, key))
    if allowed and value not in allowed:
        raise ConfigError(f"[{section}] {key} must be one of {allowed}, got '{value}'",
                          section=section, key=key)
    return value


def _format_value(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return ", ".join(":".join(str(v) for v in pair) for pair in value)
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


def resolve(parser):
    """
    fill every default and type every value
    :param parser: [ConfigParser or dict] raw sections of string values
    :return: [OrderedDict] resolved config
    """
    sections = {name: dict(parser[name]) for name in parser.keys() if name != "DEFAULT"} \
        if isinstance(parser, configparser.ConfigParser) else parser
    resolved = OrderedDict((name, OrderedDict(values)) for name, values in DEFAULTS.items())
    for section, values in sections.items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section [{section}]", section=section)
        for key, text in values.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key '{key}' in section [{section}]", section=section, key=key)
            resolved[section][key] = _parse_value(section, key, str(text))
    return resolved


def parse_text(text):
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}".replace("\n", " "))
    return resolve(parser)


def load_config(path=None, seed=None, out=None, precision=None):
    """
    read a config file (or only defaults when path is None) and apply
    command-line overrides
    """
    if path is None:
        resolved = resolve({})
    else:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(errno.ENOENT, "config file not found", str(path))
        resolved = parse_text(path.read_text())
        logger.info("loaded config %s", path)
    if seed is not None:
        resolved["run"]["seed"] = int(seed)
    if out is not None:
        resolved["run"]["out"] = str(out)
    if precision is not None:
        resolved["run"]["precision"] = _parse_value("run", "precision", precision)
    return resolved


def serialize(resolved):
    """canonical text form of a resolved config"""
    lines = []
    for section, keys in DEFAULTS.items():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {_format_value(resolved[section][key])}" for key in keys)
        lines.append("")
    return "\n".join(lines)


def config_hash(resolved):
    return hashlib.sha256(serialize(resolved).encode("utf-8")).hexdigest()


def derive_seed(seed, name):
    """
    independent sub-seed for a named consumer ('data', 'init', 'batch', 'noise')
    """
    sequence = np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode("utf-8")),))
    return int(sequence.generate_state(1)[0])


def out_dir(resolved):
    path = Path(resolved["run"]["out"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_resolved(resolved, directory=None):
    """write the as-run config snapshot next to a run's outputs"""
    directory = Path(directory) if directory is not None else out_dir(resolved)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / RESOLVED_NAME
    path.write_text(serialize(resolved))
    logger.debug("resolved config %s written to %s", config_hash(resolved)[:12], path)
    return path


def write_sidecar(artifact, resolved, command, **details):
    """
    write <artifact>.meta.yml with the seed, config hash and command that
    produced the artifact
    """
    meta = {
        "artifact": Path(artifact).name,
        "command": command,
        "seed": resolved["run"]["seed"],
        "config_hash": config_hash(resolved),
        "created": datetime.date.today().strftime("%Y-%m-%d"),
    }
    meta.update(details)
    path = Path(f"{artifact}.meta.yml")
    with open(path, "w") as f:
        yaml.safe_dump(meta, f, default_flow_style=False, sort_keys=False)
    return path


def arch_spec(resolved):
    from multigrid_dl.model_zoo import ArchSpec

    arch, run = resolved["arch"], resolved["run"]
    in_channels = 3 if run["task"] == "classify" else 1
    return ArchSpec.from_name(arch["name"], task=run["task"], num_classes=arch["num_classes"],
                              in_channels=in_channels, widths=tuple(arch["widths"]),
                              levels=arch["levels"], multiplier=arch["multiplier"],
                              scales=arch["scales"])


def gen_config(resolved):
    from multigrid_dl.data_synth import GenConfig

    data = resolved["data"]
    return GenConfig(seed=derive_seed(resolved["run"]["seed"], "data"),
                     train_count=data["train_count"], test_count=data["test_count"],
                     digits=tuple(data["digits"]), scale=tuple(data["scale"]),
                     rotation=tuple(data["rotation"]), shear=tuple(data["shear"]),
                     canvas=data["canvas"], overlap_cap=data["overlap_cap"],
                     translate=data["translate"], max_retries=data["max_retries"],
                     workers=data["workers"])


def train_config(resolved):
    from multigrid_dl.train_eval import Schedule, TrainConfig

    train = resolved["train"]
    schedule = Schedule(train["schedule"], start=train["lr_start"], end=train["lr_end"],
                        factor=train["lr_factor"], period=train["lr_period"])
    return TrainConfig(batch_size=train["batch_size"], iters_per_epoch=train["iters_per_epoch"],
                       epochs=train["epochs"], weight_decay=train["weight_decay"],
                       momentum=train["momentum"], schedule=schedule,
                       seed=derive_seed(resolved["run"]["seed"], "batch"),
                       precision=resolved["run"]["precision"],
                       checkpoint_every=train["checkpoint_every"],
                       eval_batch_size=train["eval_batch_size"])


def attention_config(resolved):
    """
    attention settings of a run; without [analyze] probes the single probe
    sits at the centre of the canvas
    """
    from multigrid_dl.analysis_probes import AttentionConfig

    analyze = resolved["analyze"]
    probes = tuple(analyze["probes"])
    if not probes:
        centre = resolved["data"]["canvas"] // 2
        probes = ((centre, centre),)
    return AttentionConfig(occluder=analyze["occluder"], probes=probes,
                           window=analyze["window"], stride=analyze["stride"],
                           seed=derive_seed(resolved["run"]["seed"], "noise"))
