"""Run configuration: a flat key=value file with sections, plus overrides.

The schema below is the single source of truth: every key is validated,
unknown keys are rejected, and the CLI can print all defaults. Files use
INI syntax (``[section]`` headers, ``key = value`` lines); command-line
``--set section.key=value`` flags override file values.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional


class ConfigKeyError(ValueError):
    """Unknown key/section or a value that fails schema validation."""


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_pair(text: str) -> tuple[int, int]:
    parts = [p.strip() for p in text.replace("x", ",").split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated integers: {text!r}")
    return int(parts[0]), int(parts[1])


@dataclass(frozen=True)
class Field:
    parse: Callable[[str], Any]
    default: Any
    help: str
    choices: Optional[tuple] = None


SCHEMA: dict[str, Field] = {
    # -- model ------------------------------------------------------------
    "model.head": Field(str, "classify", "model head", ("classify", "sequence")),
    "model.image_height": Field(int, 28, "input image height"),
    "model.image_width": Field(int, 28, "input image width"),
    "model.shallow_channels": Field(int, 16, "channels of the 5x5 shallow extraction group"),
    "model.shallow_stride": Field(_parse_pair, (1, 1), "shallow group stride (sequence models use 2,2)"),
    "model.num_rrdbs": Field(int, 3, "number of refined residual dense blocks (B)"),
    "model.layers_per_block": Field(int, 4, "inner layers per dense block (L)"),
    "model.growth_rate": Field(int, 12, "channels added per inner layer (k)"),
    "model.conv_flavor": Field(str, "depthwise_separable", "convolution flavor",
                               ("depthwise_separable", "standard")),
    "model.sum_includes_input": Field(_parse_bool, False,
                                      "include the block input in the inner running sums"),
    "model.down_channels": Field(_parse_pair, (0, 0),
                                 "down-sampling channel pair; 0,0 doubles per layer"),
    "model.num_classes": Field(int, 10, "classify head width"),
    "model.alphabet": Field(str, "0123456789", "sequence symbols; blank is implicit"),
    "model.max_label_len": Field(int, 5, "longest sequence label the frame budget must cover"),
    "model.dropout_shallow": Field(float, 0.0, "dropout rate after the shallow group"),
    "model.dropout_down": Field(float, 0.0, "dropout rate after the down-sampling block"),
    "model.dropout_fc": Field(float, 0.0, "dropout rate after the fully-connected layer"),
    # -- optimizer ---------------------------------------------------------
    "optimizer.base_lr": Field(float, 0.1, "learning rate for the constant schedule"),
    "optimizer.momentum": Field(float, 0.9, "SGD momentum"),
    "optimizer.weight_decay": Field(float, 1e-4, "L2 weight decay added to gradients"),
    "optimizer.schedule": Field(str, "constant", "learning-rate schedule",
                                ("constant", "step", "exponential")),
    "optimizer.epochs": Field(int, 5, "training epochs"),
    "optimizer.batch_size": Field(int, 128, "minibatch size"),
    # -- data ---------------------------------------------------------------
    "data.dataset": Field(str, "mnist", "data source", ("mnist", "synth-strings", "corpus")),
    "data.mnist_dir": Field(str, "data/mnist", "directory with the four IDX files"),
    "data.train_limit": Field(int, 0, "cap on training samples (0 = all)"),
    "data.test_limit": Field(int, 0, "cap on test samples (0 = all)"),
    "data.synth_train_size": Field(int, 20000, "generated training strings"),
    "data.synth_test_size": Field(int, 2000, "generated held-out strings"),
    "data.len_min": Field(int, 3, "shortest generated string"),
    "data.len_max": Field(int, 5, "longest generated string"),
    "data.canvas_width": Field(int, 160, "string canvas width (height is 32)"),
    "data.corpus_dir": Field(str, "", "string-corpus directory for dataset=corpus"),
    # -- run ------------------------------------------------------------------
    "run.seed": Field(int, 0, "master seed; every stream derives from it"),
    "run.out_dir": Field(str, "runs/default", "output directory for metrics and checkpoints"),
    "run.early_stop_patience": Field(int, 0,
                                     "stop when test loss has not descended this many epochs (0 = off)"),
}

MNIST_FILES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)


class RunConfig:
    """Validated key-value store backed by :data:`SCHEMA`."""

    def __init__(self, values: Optional[dict[str, Any]] = None):
        self._values = {k: f.default for k, f in SCHEMA.items()}
        for key, value in (values or {}).items():
            self.set_parsed(key, value)

    def __getitem__(self, key: str) -> Any:
        if key not in SCHEMA:
            raise ConfigKeyError(f"unknown config key {key!r}")
        return self._values[key]

    def set_parsed(self, key: str, value: Any) -> None:
        if key not in SCHEMA:
            raise ConfigKeyError(f"unknown config key {key!r}")
        field = SCHEMA[key]
        if field.choices is not None and value not in field.choices:
            raise ConfigKeyError(f"{key}: {value!r} not in {field.choices}")
        self._values[key] = value

    def set_text(self, key: str, text: str) -> None:
        if key not in SCHEMA:
            raise ConfigKeyError(f"unknown config key {key!r}")
        field = SCHEMA[key]
        try:
            value = field.parse(text)
        except ValueError as exc:
            raise ConfigKeyError(f"{key}: {exc}") from exc
        self.set_parsed(key, value)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigKeyError(f"cannot read config file {path}")
        cfg = cls()
        for section in parser.sections():
            for name, text in parser.items(section):
                cfg.set_text(f"{section}.{name}", text)
        return cfg

    def apply_overrides(self, assignments) -> None:
        for item in assignments or ():
            if "=" not in item:
                raise ConfigKeyError(f"override must look like section.key=value: {item!r}")
            key, text = item.split("=", 1)
            self.set_text(key.strip(), text.strip())

    @staticmethod
    def describe_defaults() -> str:
        lines = []
        section = None
        for key, field in SCHEMA.items():
            sec = key.split(".", 1)[0]
            if sec != section:
                section = sec
                lines.append(f"[{sec}]")
            default = field.default
            if isinstance(default, tuple):
                default = ",".join(str(v) for v in default)
            extra = f" (one of {', '.join(map(str, field.choices))})" if field.choices else ""
            lines.append(f"  {key} = {default}  # {field.help}{extra}")
        return "\n".join(lines)


def build_model_config(cfg: RunConfig):
    """Translate [model] keys into a validated DrnConfig."""
    from .blocks import classify_config, sequence_config

    down = cfg["model.down_channels"]
    down = None if down == (0, 0) else down
    if cfg["model.head"] == "classify":
        return classify_config(
            image_size=(cfg["model.image_height"], cfg["model.image_width"]),
            num_classes=cfg["model.num_classes"],
            shallow_channels=cfg["model.shallow_channels"],
            shallow_stride=cfg["model.shallow_stride"],
            num_rrdbs=cfg["model.num_rrdbs"],
            layers_per_block=cfg["model.layers_per_block"],
            growth_rate=cfg["model.growth_rate"],
            conv_flavor=cfg["model.conv_flavor"],
            down_channels=down,
            dropout=(cfg["model.dropout_shallow"], cfg["model.dropout_down"],
                     cfg["model.dropout_fc"]),
            sum_includes_input=cfg["model.sum_includes_input"],
        )
    return sequence_config(
        image_size=(cfg["model.image_height"], cfg["model.image_width"]),
        alphabet_size=len(cfg["model.alphabet"]) + 1,
        max_label_len=cfg["model.max_label_len"],
        shallow_channels=cfg["model.shallow_channels"],
        num_rrdbs=cfg["model.num_rrdbs"],
        layers_per_block=cfg["model.layers_per_block"],
        growth_rate=cfg["model.growth_rate"],
        conv_flavor=cfg["model.conv_flavor"],
        down_channels=down,
        dropout_down=cfg["model.dropout_down"],
        sum_includes_input=cfg["model.sum_includes_input"],
    )


def mnist_paths(cfg: RunConfig) -> dict[str, Path]:
    base = Path(cfg["data.mnist_dir"])
    return {
        "train_images": base / MNIST_FILES[0],
        "train_labels": base / MNIST_FILES[1],
        "test_images": base / MNIST_FILES[2],
        "test_labels": base / MNIST_FILES[3],
    }
