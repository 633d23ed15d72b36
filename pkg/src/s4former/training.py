"""Model assembly and the Adam training loop, plus a finite-difference gradient check."""

from __future__ import annotations

import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .conv_module import (
    Approach,
    ConfigError,
    Context,
    ConvModuleSpec,
    Encoder,
    S4DConfig,
    build_encoder,
)
from .numerics import DTYPE
from .s4d import S4DScheme
from .tasks import IGNORE_INDEX, TaskData, TaskSpec, generate_task


class DivergedTrainingError(RuntimeError):
    def __init__(self, step: int, last_finite_step: int):
        super().__init__(f"non-finite loss at step {step}; last finite step {last_finite_step}")
        self.step = step
        self.last_finite_step = last_finite_step


@dataclass(frozen=True)
class ModelConfig:
    approach: Approach = Approach.DIR
    scheme: S4DScheme = S4DScheme.REAL
    n_state: int = 4
    h: int = 64
    kernel_size: int = 4
    rep_left_context: int = 8
    blocks: int = 2
    with_attention: bool = False
    context: Context = Context.ONLINE
    vocab: int = 8
    dt_min: float = 1e-3
    dt_max: float = 1e-1
    ffn_mult: int = 4

    def __post_init__(self):
        object.__setattr__(self, "approach", Approach(self.approach))
        object.__setattr__(self, "scheme", S4DScheme(self.scheme))
        object.__setattr__(self, "context", Context(self.context))

    def validate(self) -> None:
        if self.blocks < 1:
            raise ConfigError("model.blocks", "must be >= 1")
        if self.vocab < 2:
            raise ConfigError("task.vocab", "must be >= 2")
        if self.ffn_mult < 1:
            raise ConfigError("model.ffn_mult", "must be >= 1")
        try:
            self.module_spec()
        except ConfigError as err:
            raise ConfigError(f"model.{err.field}", str(err).split(": ", 1)[1]) from None

    def module_spec(self) -> ConvModuleSpec:
        s4d = None
        if self.approach is not Approach.BASELINE:
            if self.n_state < 1:
                raise ConfigError("n_state", "must be >= 1")
            if not 0 < self.dt_min <= self.dt_max:
                raise ConfigError("dt_min", "need 0 < dt_min <= dt_max")
            s4d = S4DConfig(self.scheme, self.n_state, self.dt_min, self.dt_max)
        return ConvModuleSpec(
            approach=self.approach,
            h=self.h,
            kernel_size=self.kernel_size,
            rep_left_context=self.rep_left_context,
            s4d=s4d,
            context=self.context,
        )


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 2000
    batch_size: int = 16
    seed: int = 0
    clip_norm: float = 1.0
    eval_every: int = 250
    target_accuracy: float | None = None

    def validate(self) -> None:
        if not self.lr >= 0:
            raise ConfigError("train.lr", "must be >= 0")
        if self.steps < 0:
            raise ConfigError("train.steps", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", "must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("train.beta1" if not 0 <= self.beta1 < 1 else "train.beta2", "must be in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("train.eps", "must be > 0")
        if self.clip_norm <= 0:
            raise ConfigError("train.clip_norm", "must be > 0")
        if self.eval_every < 1:
            raise ConfigError("train.eval_every", "must be >= 1")


class SequenceModel(nn.Module):
    """Inputs ``[B, T, F]`` -> encoder -> per-frame logits ``[B, T, V]``.

    ``F`` defaults to ``V`` (one-hot token inputs).
    """

    def __init__(self, encoder: Encoder, vocab: int, n_inputs: int | None = None):
        super().__init__()
        self.input_proj = nn.Linear(n_inputs or vocab, encoder.h, dtype=DTYPE)
        self.encoder = encoder
        self.readout = nn.Linear(encoder.h, vocab, dtype=DTYPE)

    def forward(self, x, s4d_mode: str = "conv", conv_path: str = "auto"):
        return self.readout(self.encoder(self.input_proj(x), s4d_mode, conv_path))


def build_model(cfg: ModelConfig, seed: int = 0) -> SequenceModel:
    cfg.validate()
    spec = cfg.module_spec()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        encoder = build_encoder([spec] * cfg.blocks, cfg.with_attention, cfg.ffn_mult, seed=seed)
        return SequenceModel(encoder, cfg.vocab)


def masked_loss_and_accuracy(logits: torch.Tensor, targets: torch.Tensor):
    loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=IGNORE_INDEX)
    mask = targets != IGNORE_INDEX
    correct = (logits.argmax(-1) == targets) & mask
    acc = correct.sum().item() / max(1, mask.sum().item())
    return loss, acc


@torch.no_grad()
def evaluate(model: SequenceModel, split, batch_size: int = 64) -> tuple[float, float]:
    """Eval-mode loss and token accuracy over a whole split."""
    was_training = model.training
    model.eval()
    total_loss, total_correct, total = 0.0, 0, 0
    for start in range(0, len(split), batch_size):
        idx = slice(start, start + batch_size)
        logits = model(split.inputs(idx))
        targets = split.targets[idx]
        mask = targets != IGNORE_INDEX
        n = int(mask.sum())
        if n == 0:
            continue
        loss = F.cross_entropy(logits[mask], targets[mask], reduction="sum")
        total_loss += loss.item()
        total_correct += int((logits.argmax(-1)[mask] == targets[mask]).sum())
        total += n
    model.train(was_training)
    return total_loss / max(1, total), total_correct / max(1, total)


@dataclass
class History:
    records: list[dict] = field(default_factory=list)

    def add(self, step: int, split: str, loss: float, accuracy: float) -> dict:
        rec = {"step": step, "split": split, "loss": loss, "accuracy": accuracy}
        self.records.append(rec)
        return rec

    def last(self, split: str) -> dict | None:
        for rec in reversed(self.records):
            if rec["split"] == split:
                return rec
        return None


def train(
    model: SequenceModel,
    task: TaskSpec | TaskData,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    checkpoint_digest: bytes | None = None,
    stream=sys.stdout,
) -> History:
    """Train with Adam on a synthetic task; emits one JSON record per line.

    Stops early once eval accuracy reaches ``cfg.target_accuracy``.
    """
    cfg.validate()
    data = task if isinstance(task, TaskData) else generate_task(task)
    history = History()
    log_file = open(log_path, "w") if log_path is not None else None

    def emit(rec):
        line = json.dumps(rec)
        if stream is not None:
            print(line, file=stream)
        if log_file is not None:
            log_file.write(line + "\n")
            log_file.flush()

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    gen = torch.Generator().manual_seed(cfg.seed)
    last_finite = 0
    try:
        for step in range(1, cfg.steps + 1):
            model.train()
            idx = torch.randint(0, len(data.train), (cfg.batch_size,), generator=gen)
            logits = model(data.train.inputs(idx))
            loss, acc = masked_loss_and_accuracy(logits, data.train.targets[idx])
            if not math.isfinite(loss.item()):
                raise DivergedTrainingError(step, last_finite)
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
            opt.step()
            last_finite = step
            if step % cfg.eval_every == 0 or step == cfg.steps:
                emit(history.add(step, "train", loss.item(), acc))
                eval_loss, eval_acc = evaluate(model, data.eval)
                if not math.isfinite(eval_loss):
                    raise DivergedTrainingError(step, last_finite)
                emit(history.add(step, "eval", eval_loss, eval_acc))
                if cfg.target_accuracy is not None and eval_acc >= cfg.target_accuracy:
                    break
        if cfg.steps == 0:
            eval_loss, eval_acc = evaluate(model, data.eval)
            emit(history.add(0, "eval", eval_loss, eval_acc))
    finally:
        if log_file is not None:
            log_file.close()
    model.eval()
    if checkpoint_path is not None:
        from .checkpoint import save_checkpoint

        save_checkpoint(checkpoint_path, model.state_dict(), checkpoint_digest or b"\0" * 32)
    return history


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    checked: int


def grad_check(
    loss_fn,
    params: dict[str, torch.Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckResult:
    """Compare autodiff gradients of ``loss_fn()`` with central differences.

    The error for each parameter tensor is the largest deviation over its
    checked entries divided by the largest finite-difference magnitude; the
    worst tensor and entry are reported. ``max_entries`` samples a random
    subset of entries per tensor.
    """
    names = list(params)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    worst = GradCheckResult(0.0, "", (), 0)
    checked = 0
    for name, g in zip(names, grads):
        p = params[name]
        g = torch.zeros_like(p) if g is None else g
        flat = p.data.view(-1)
        count = flat.numel()
        if max_entries is not None and count > max_entries:
            entries = torch.randperm(count, generator=gen)[:max_entries].tolist()
        else:
            entries = range(count)
        numeric, analytic = [], []
        for i in entries:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
            numeric.append((up - down) / (2 * step))
            analytic.append(g.view(-1)[i].item())
        if not numeric:
            continue
        checked += len(numeric)
        num = torch.tensor(numeric, dtype=DTYPE)
        ana = torch.tensor(analytic, dtype=DTYPE)
        diff = (num - ana).abs()
        scale = max(num.abs().max().item(), ana.abs().max().item())
        err = diff.max().item() / scale if scale > 0 else diff.max().item()
        if err >= worst.max_rel_error:
            j = int(diff.argmax())
            flat_index = list(entries)[j]
            index = tuple(int(v) for v in torch.unravel_index(torch.tensor(flat_index), p.shape)) if p.dim() else ()
            worst = GradCheckResult(err, name, index, 0)
    worst.checked = checked
    return worst


def model_config_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    for k, v in d.items():
        if hasattr(v, "value"):
            d[k] = v.value
    return d
