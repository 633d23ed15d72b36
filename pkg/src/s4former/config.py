"""Sectioned key-value run configuration (INI syntax).

Example::

    [model]
    approach = dir          # baseline | dir | com | rep
    scheme = real           # real | lin
    n_state = 4
    h = 64
    kernel_size = 4
    rep_left_context = 8
    blocks = 2
    with_attention = false
    context = online        # online | offline

    [task]
    kind = delayed_echo     # delayed_echo | local_pattern
    seq_len = 256
    delay = 64
    vocab = 8
    n_train = 2048
    n_eval = 256
    seed = 0

    [train]
    lr = 0.001
    steps = 2000
    batch_size = 16
    seed = 0

    [io]
    checkpoint = runs/model.s4fm
    log = runs/metrics.jsonl

Every key is optional; omitted keys take the dataclass defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

from .checkpoint import config_digest
from .conv_module import ConfigError
from .tasks import TaskSpec
from .training import ModelConfig, TrainConfig, model_config_dict


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _optional_float(text: str):
    return None if text.strip().lower() in ("", "none") else float(text)


_CONVERTERS = {
    "model": {
        "approach": str.lower, "scheme": str.lower, "n_state": int, "h": int,
        "kernel_size": int, "rep_left_context": int, "blocks": int,
        "with_attention": _bool, "context": str.lower, "dt_min": float,
        "dt_max": float, "ffn_mult": int,
    },
    "task": {
        "kind": str, "seq_len": int, "delay": int, "vocab": int,
        "n_train": int, "n_eval": int, "seed": int,
    },
    "train": {
        "lr": float, "beta1": float, "beta2": float, "eps": float, "steps": int,
        "batch_size": int, "seed": int, "clip_norm": float, "eval_every": int,
        "target_accuracy": _optional_float,
    },
    "io": {"checkpoint": str, "log": str},
}


@dataclass(frozen=True)
class IOConfig:
    checkpoint: str | None = None
    log: str | None = None


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    io: IOConfig = field(default_factory=IOConfig)

    def validate(self) -> None:
        self.task.validate()
        self.model.validate()
        self.train.validate()

    def with_seed(self, seed: int | None) -> RunConfig:
        if seed is None:
            return self
        return replace(self, task=replace(self.task, seed=seed), train=replace(self.train, seed=seed))

    def model_text(self) -> str:
        """Canonical text of everything that fixes the model's tensor layout."""
        items = model_config_dict(self.model)
        return "".join(f"{k}={items[k]!r}\n" for k in sorted(items))

    def model_digest(self) -> bytes:
        return config_digest(self.model_text())


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError("config", f"unparseable: {err}") from None
    values: dict[str, dict] = {name: {} for name in _CONVERTERS}
    for section in parser.sections():
        if section not in _CONVERTERS:
            raise ConfigError(section, "unknown section")
        for key, raw in parser.items(section):
            conv = _CONVERTERS[section].get(key)
            if conv is None:
                raise ConfigError(f"{section}.{key}", "unknown key")
            try:
                values[section][key] = conv(raw)
            except ValueError as err:
                raise ConfigError(f"{section}.{key}", f"bad value {raw!r} ({err})") from None

    task = TaskSpec(**values["task"])
    model_vals = dict(values["model"], vocab=task.vocab)
    try:
        model = ModelConfig(**model_vals)
    except ValueError as err:
        bad = next(
            (k for k in ("approach", "scheme", "context") if k in model_vals and str(model_vals[k]) in str(err)),
            "model",
        )
        raise ConfigError(f"model.{bad}" if bad != "model" else "model", str(err)) from None
    cfg = RunConfig(model, task, TrainConfig(**values["train"]), IOConfig(**values["io"]))
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError("config", f"cannot read {path}: {err.strerror}") from None
    return parse_config(text)


def dump_config(cfg: RunConfig) -> str:
    """Render a config back to INI text (round-trips through parse_config)."""
    lines = []
    model = model_config_dict(cfg.model)
    model.pop("vocab")
    for section, data in (
        ("model", model),
        ("task", dataclasses.asdict(cfg.task)),
        ("train", dataclasses.asdict(cfg.train)),
        ("io", dataclasses.asdict(cfg.io)),
    ):
        lines.append(f"[{section}]")
        for k, v in data.items():
            if v is None:
                continue
            lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
        lines.append("")
    return "\n".join(lines)
