"""Experiment configuration: a versioned, strictly validated JSON document.

Unknown keys are rejected at every level so that a typo can never silently
change an experiment.  Relative data paths are resolved through
:func:`ekiml.data.resolve_data_path` (environment override, then the config
file's directory, then the bundled datasets).
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import resolve_data_path
from .eki import EkiConfig
from .losses import LossSpec
from .models import model_from_dict

__all__ = ["SCHEMA_VERSION", "TASKS", "ConfigError", "ExperimentConfig", "load_config", "parse_config"]

SCHEMA_VERSION = 1
TASKS = ("supervised", "semi-supervised", "online")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


_TOP = {
    "schema_version", "name", "seed", "task", "data", "model", "graph",
    "loss", "optimizer", "ensemble_size", "epochs", "steps", "output",
}
_REQUIRED = {
    "supervised": {"data", "model", "loss", "optimizer", "ensemble_size", "epochs"},
    "semi-supervised": {"data", "graph", "optimizer", "ensemble_size", "steps"},
    "online": {"data", "model", "optimizer", "ensemble_size"},
}
_FORBIDDEN = {
    "supervised": {"graph", "steps"},
    "semi-supervised": {"model", "epochs"},
    "online": {"graph", "epochs", "steps"},
}
_DATA_KEYS = {
    "mnist": (
        {"train_images", "train_labels", "test_images", "test_labels"},
        {"train_size", "test_size", "checksums"},
    ),
    "blobs": (set(), {"n_train", "n_test", "dim", "classes", "spread"}),
    "voting": ({"path"}, {"labeled", "checksums"}),
    "sine": (set(), {"length", "period", "amplitude", "noise", "train_count"}),
    "series": ({"path"}, {"train_count", "checksums"}),
}
_TASK_DATA = {
    "supervised": {"mnist", "blobs"},
    "semi-supervised": {"voting"},
    "online": {"sine", "series"},
}
_GRAPH_DEFAULTS = {"bandwidth": 1.25, "laplacian": "unnormalized", "tau": 0.0, "alpha": 1.0, "tol": 1e-10}
_OUTPUT_DEFAULTS = {"metrics": "metrics.csv", "plots": False, "record_wall_time": True, "log_every": 50}


def _check_keys(d, allowed, where, required=()):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    missing = set(required) - set(d)
    if missing:
        raise ConfigError(f"missing keys in {where}: {sorted(missing)}")


def _positive_int(v, where):
    if isinstance(v, bool) or not isinstance(v, int) or v < 1:
        raise ConfigError(f"{where} must be a positive integer")
    return v


@dataclass
class ExperimentConfig:
    """Parsed configuration; see ``configs/*.json`` for complete examples."""

    seed: int
    task: str
    data: dict
    optimizer: EkiConfig
    ensemble_size: int
    name: str = "experiment"
    model: object = None
    loss: LossSpec | None = None
    graph: dict = field(default_factory=dict)
    epochs: int = 0
    steps: int = 0
    output: dict = field(default_factory=lambda: dict(_OUTPUT_DEFAULTS))
    base_dir: Path | None = None
    raw: dict = field(default_factory=dict, repr=False)

    def data_path(self, key):
        return resolve_data_path(self.data[key], self.base_dir)

    def to_dict(self):
        d = dict(self.raw)
        d["seed"] = self.seed
        return d


def parse_config(doc, base_dir=None, check_files=True):
    """Validate a decoded JSON document and build an :class:`ExperimentConfig`."""
    _check_keys(doc, _TOP, "config", required={"schema_version", "seed", "task"})
    if doc["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {doc['schema_version']!r}; expected {SCHEMA_VERSION}")
    task = doc["task"]
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}")
    seed = doc["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    missing = _REQUIRED[task] - set(doc)
    if missing:
        raise ConfigError(f"task {task!r} needs keys {sorted(missing)}")
    extra = _FORBIDDEN[task] & set(doc)
    if extra:
        raise ConfigError(f"keys {sorted(extra)} do not apply to task {task!r}")

    data = doc["data"]
    if not isinstance(data, dict) or data.get("dataset") not in _TASK_DATA[task]:
        raise ConfigError(f"data.dataset must be one of {sorted(_TASK_DATA[task])} for task {task!r}")
    req, opt = _DATA_KEYS[data["dataset"]]
    _check_keys(data, req | opt | {"dataset"}, "data", required=req)

    try:
        optimizer = EkiConfig.from_dict(doc["optimizer"])
        model = model_from_dict(doc["model"]) if "model" in doc else None
        loss = LossSpec.from_dict(doc["loss"]) if "loss" in doc else None
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from None

    graph = {}
    if task == "semi-supervised":
        _check_keys(doc["graph"], _GRAPH_DEFAULTS, "graph")
        graph = {**_GRAPH_DEFAULTS, **doc["graph"]}
        if graph["laplacian"] not in ("unnormalized", "symmetric"):
            raise ConfigError("graph.laplacian must be 'unnormalized' or 'symmetric'")
    if task == "online" and loss is None:
        loss = LossSpec()

    output = {**_OUTPUT_DEFAULTS, **doc.get("output", {})}
    _check_keys(output, _OUTPUT_DEFAULTS, "output")
    _positive_int(output["log_every"], "output.log_every")

    cfg = ExperimentConfig(
        seed=seed,
        task=task,
        data=dict(data),
        optimizer=optimizer,
        ensemble_size=_positive_int(doc["ensemble_size"], "ensemble_size"),
        name=str(doc.get("name", "experiment")),
        model=model,
        loss=loss,
        graph=graph,
        epochs=_positive_int(doc["epochs"], "epochs") if "epochs" in doc else 0,
        steps=_positive_int(doc["steps"], "steps") if "steps" in doc else 0,
        output=output,
        base_dir=Path(base_dir) if base_dir is not None else None,
        raw=json.loads(json.dumps(doc)),
    )
    if cfg.ensemble_size < 2:
        raise ConfigError("ensemble_size must be at least 2")
    if check_files:
        for key in req - {"dataset"}:
            if key.endswith(("path", "images", "labels")):
                try:
                    cfg.data_path(key)
                except FileNotFoundError as exc:
                    raise ConfigError(str(exc)) from None
    return cfg


def load_config(path, check_files=True):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(doc, base_dir=path.parent, check_files=check_files)
