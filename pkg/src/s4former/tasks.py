"""Synthetic sequence-labelling tasks.

``delayed_echo``: output the token seen ``delay`` frames ago (undefined
before that, marked with :data:`IGNORE_INDEX`). ``local_pattern``: output
``max(u[t-2], u[t-1], u[t])``, a function of a 3-frame window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .numerics import DTYPE

IGNORE_INDEX = -100
TASK_KINDS = ("delayed_echo", "local_pattern")
LOCAL_WINDOW = 3


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "delayed_echo"
    seq_len: int = 256
    delay: int = 64
    vocab: int = 8
    n_train: int = 2048
    n_eval: int = 256
    seed: int = 0

    def validate(self) -> None:
        from .conv_module import ConfigError

        if self.kind not in TASK_KINDS:
            raise ConfigError("task.kind", f"must be one of {TASK_KINDS}")
        if self.seq_len < 1:
            raise ConfigError("task.seq_len", "must be >= 1")
        if self.vocab < 2:
            raise ConfigError("task.vocab", "must be >= 2")
        if self.n_train < 1 or self.n_eval < 1:
            raise ConfigError("task.n_train" if self.n_train < 1 else "task.n_eval", "must be >= 1")
        if self.kind == "delayed_echo" and not 0 <= self.delay < self.seq_len:
            raise ConfigError("task.delay", "need 0 <= delay < seq_len")


@dataclass
class TaskSplit:
    """Token sequences and per-frame targets.

    ``features``, when given, replaces the one-hot encoding of ``tokens``
    as model input.
    """

    tokens: torch.Tensor | None  # [n, T] int64
    targets: torch.Tensor  # [n, T] int64, IGNORE_INDEX where undefined
    vocab: int
    features: torch.Tensor | None = None  # [n, T, F]

    def __len__(self) -> int:
        return self.targets.shape[0]

    def inputs(self, index=slice(None)) -> torch.Tensor:
        """Model inputs ``[n, T, F]`` for the selected rows (one-hot by default)."""
        if self.features is not None:
            return self.features[index]
        return torch.nn.functional.one_hot(self.tokens[index], self.vocab).to(DTYPE)


@dataclass
class TaskData:
    spec: TaskSpec
    train: TaskSplit
    eval: TaskSplit


def targets_for(spec: TaskSpec, tokens: np.ndarray) -> np.ndarray:
    out = np.full_like(tokens, IGNORE_INDEX)
    if spec.kind == "delayed_echo":
        d = spec.delay
        out[:, d:] = tokens[:, : tokens.shape[1] - d]
    else:
        w = LOCAL_WINDOW - 1
        if tokens.shape[1] > w:
            stacked = np.stack([tokens[:, w - i : tokens.shape[1] - i] for i in range(LOCAL_WINDOW)])
            out[:, w:] = stacked.max(axis=0)
    return out


def _split(spec: TaskSpec, seq: np.random.SeedSequence, n: int) -> TaskSplit:
    rng = np.random.default_rng(seq)
    tokens = rng.integers(0, spec.vocab, size=(n, spec.seq_len), dtype=np.int64)
    return TaskSplit(torch.from_numpy(tokens), torch.from_numpy(targets_for(spec, tokens)), spec.vocab)


def generate_task(spec: TaskSpec) -> TaskData:
    """Deterministic train/eval splits drawn from independent seed streams."""
    spec.validate()
    train_seq, eval_seq = np.random.SeedSequence(spec.seed).spawn(2)
    return TaskData(spec, _split(spec, train_seq, spec.n_train), _split(spec, eval_seq, spec.n_eval))
