"""Conformer-style convolution module with S4D variants, and a small encoder.

Module layout (per frame, residual around everything)::

    x -> LN -> Linear(H, 2H) -> GLU -> core -> BN -> swish -> Linear(H, H) -> + x

``core`` is one of

* ``baseline``: depthwise convolution with ``kernel_size`` taps
* ``dir``: an S4D layer in place of the convolution
* ``com``: small depthwise convolution followed by an S4D layer
* ``rep``: depthwise convolution whose taps are the S4D kernel truncated
  to ``rep_left_context`` (recomputed from the S4D parameters each call)
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .numerics import DTYPE, causal_conv1d
from .s4d import S4D, S4DScheme


class Approach(str, enum.Enum):
    BASELINE = "baseline"
    DIR = "dir"
    COM = "com"
    REP = "rep"


class Context(str, enum.Enum):
    ONLINE = "online"
    OFFLINE = "offline"


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class S4DConfig:
    scheme: S4DScheme = S4DScheme.REAL
    n_state: int = 4
    dt_min: float = 1e-3
    dt_max: float = 1e-1


@dataclass(frozen=True)
class ConvModuleSpec:
    approach: Approach = Approach.BASELINE
    h: int = 64
    kernel_size: int = 4
    rep_left_context: int = 0
    s4d: S4DConfig | None = None
    context: Context = Context.ONLINE

    def __post_init__(self):
        object.__setattr__(self, "approach", Approach(self.approach))
        object.__setattr__(self, "context", Context(self.context))
        self.validate()

    def validate(self) -> None:
        if self.h < 1:
            raise ConfigError("h", "channel width must be >= 1")
        if self.approach is Approach.BASELINE:
            if self.s4d is not None:
                raise ConfigError("s4d", "baseline module takes no S4D configuration")
        elif self.s4d is None:
            raise ConfigError("s4d", f"{self.approach.value} module requires an S4D configuration")
        elif self.s4d.n_state < 1:
            raise ConfigError("s4d.n_state", "must be >= 1")
        if self.approach in (Approach.BASELINE, Approach.COM) and self.kernel_size < 1:
            raise ConfigError("kernel_size", "must be >= 1")
        if self.approach is Approach.REP and self.rep_left_context < 1:
            raise ConfigError("rep_left_context", "must be >= 1")

    @property
    def taps(self) -> int:
        """Number of depthwise convolution taps (0 for DIR)."""
        if self.approach is Approach.REP:
            return self.rep_left_context
        if self.approach is Approach.DIR:
            return 0
        return self.kernel_size


def glu(x: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] % 2:
        raise ValueError("glu needs an even channel count")
    a, b = x.chunk(2, dim=-1)
    return a * torch.sigmoid(b)


def swish(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


def depthwise_causal_conv(
    x: torch.Tensor, kernels: torch.Tensor, context: Context | str = Context.ONLINE, path: str = "auto"
) -> torch.Tensor:
    """Per-channel convolution of ``x [..., T, H]`` with ``kernels [H, k]``.

    Online: left padding ``k-1`` (tap 0 is the current frame). Offline: left
    ``ceil((k-1)/2)``, right ``floor((k-1)/2)``.
    """
    if kernels.dim() != 2 or kernels.shape[0] != x.shape[-1] or kernels.shape[1] < 1:
        raise ValueError(f"kernels {tuple(kernels.shape)} do not match input {tuple(x.shape)}")
    xt = x.transpose(-1, -2)
    if Context(context) is Context.ONLINE:
        return causal_conv1d(xt, kernels, path=path).transpose(-1, -2)
    right = (kernels.shape[1] - 1) // 2
    T = xt.shape[-1]
    out = causal_conv1d(F.pad(xt, (0, right)), kernels, path=path)
    return out[..., right : right + T].transpose(-1, -2)


class ConvModule(nn.Module):
    def __init__(self, spec: ConvModuleSpec, generator: torch.Generator | None = None):
        super().__init__()
        self.spec = spec
        h = spec.h
        self.pre_norm = nn.LayerNorm(h, dtype=DTYPE)
        self.glu_proj = nn.Linear(h, 2 * h, dtype=DTYPE)
        if spec.approach in (Approach.BASELINE, Approach.COM):
            bound = 1.0 / math.sqrt(spec.kernel_size)
            w = (torch.rand(h, spec.kernel_size, dtype=DTYPE, generator=generator) * 2 - 1) * bound
            self.dw_kernel = nn.Parameter(w)
        else:
            self.register_parameter("dw_kernel", None)
        if spec.s4d is not None:
            cfg = spec.s4d
            self.s4d = S4D(h, cfg.n_state, cfg.scheme, cfg.dt_min, cfg.dt_max, generator=generator)
        else:
            self.s4d = None
        # momentum 0.01 in torch's convention == 0.99 decay of running stats
        self.batch_norm = nn.BatchNorm1d(h, momentum=0.01, dtype=DTYPE)
        self.post_proj = nn.Linear(h, h, dtype=DTYPE)

    @property
    def approach(self) -> Approach:
        return self.spec.approach

    def rep_kernel(self) -> torch.Tensor:
        """REP taps ``[H, L]``: truncated S4D kernel with the residual folded into tap 0."""
        K = self.s4d.kernel(self.spec.rep_left_context)
        return torch.cat([K[:, :1] + self.s4d.d.unsqueeze(-1), K[:, 1:]], dim=-1)

    def pre(self, x: torch.Tensor) -> torch.Tensor:
        return glu(self.glu_proj(self.pre_norm(x)))

    def post(self, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        z = self.batch_norm(z.transpose(-1, -2)).transpose(-1, -2)
        return x + self.post_proj(swish(z))

    def core(self, z: torch.Tensor, s4d_mode: str = "conv", conv_path: str = "auto") -> torch.Tensor:
        ctx = self.spec.context
        if self.approach is Approach.BASELINE:
            return depthwise_causal_conv(z, self.dw_kernel, ctx, conv_path)
        if self.approach is Approach.DIR:
            return self._s4(z, s4d_mode, conv_path)
        if self.approach is Approach.COM:
            return self._s4(depthwise_causal_conv(z, self.dw_kernel, ctx, conv_path), s4d_mode, conv_path)
        return depthwise_causal_conv(z, self.rep_kernel(), Context.ONLINE, conv_path)

    def _s4(self, z, s4d_mode, conv_path):
        if s4d_mode == "conv":
            return self.s4d(z, mode="conv", path="fft" if conv_path == "auto" else conv_path)
        return self.s4d(z, mode=s4d_mode)

    def forward(self, x: torch.Tensor, s4d_mode: str = "conv", conv_path: str = "auto") -> torch.Tensor:
        if x.dim() == 2:
            return self.forward(x.unsqueeze(0), s4d_mode, conv_path).squeeze(0)
        if self.training and x.shape[0] * x.shape[1] == 0:
            raise ValueError("batch-norm statistics need at least one frame in training mode")
        return self.post(x, self.core(self.pre(x), s4d_mode, conv_path))


class FeedForward(nn.Module):
    """Half-step residual feed-forward: ``x + 0.5 * W2 swish(W1 LN(x))``."""

    def __init__(self, h: int, mult: int = 4):
        super().__init__()
        self.norm = nn.LayerNorm(h, dtype=DTYPE)
        self.up = nn.Linear(h, mult * h, dtype=DTYPE)
        self.down = nn.Linear(mult * h, h, dtype=DTYPE)

    def forward(self, x):
        return x + 0.5 * self.down(swish(self.up(self.norm(x))))


class SelfAttention(nn.Module):
    """Single-head self attention; causal when ``online``.

    Stand-in for the multi-head relative-position attention of a full
    Conformer.
    """

    def __init__(self, h: int, online: bool = True):
        super().__init__()
        self.online = online
        self.norm = nn.LayerNorm(h, dtype=DTYPE)
        self.qkv = nn.Linear(h, 3 * h, dtype=DTYPE)
        self.out = nn.Linear(h, h, dtype=DTYPE)
        self.scale = 1.0 / math.sqrt(h)

    def project(self, x):
        return self.qkv(self.norm(x)).chunk(3, dim=-1)

    def attend(self, q, k, v, offset: int = 0):
        """Queries at absolute positions ``offset + i`` over keys ``0..``."""
        scores = (q @ k.transpose(-1, -2)) * self.scale
        if self.online:
            tq, tk = q.shape[-2], k.shape[-2]
            qpos = torch.arange(tq).unsqueeze(-1) + offset
            mask = torch.arange(tk).unsqueeze(0) > qpos
            scores = scores.masked_fill(mask, float("-inf"))
        return self.out(torch.softmax(scores, dim=-1) @ v)

    def forward(self, x):
        q, k, v = self.project(x)
        return x + self.attend(q, k, v)


class EncoderBlock(nn.Module):
    def __init__(self, spec: ConvModuleSpec, with_attention: bool, ffn_mult: int = 4,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.ffn = FeedForward(spec.h, ffn_mult)
        self.attn = SelfAttention(spec.h, spec.context is Context.ONLINE) if with_attention else None
        self.conv = ConvModule(spec, generator=generator)
        self.norm = nn.LayerNorm(spec.h, dtype=DTYPE)

    def forward(self, x, s4d_mode: str = "conv", conv_path: str = "auto"):
        x = self.ffn(x)
        if self.attn is not None:
            x = self.attn(x)
        x = self.conv(x, s4d_mode, conv_path)
        return self.norm(x)


class Encoder(nn.Module):
    """Stack of encoder blocks over ``[B, T, H]`` (or ``[T, H]``) inputs."""

    def __init__(self, specs: list[ConvModuleSpec], with_attention: bool = False, ffn_mult: int = 4,
                 generator: torch.Generator | None = None):
        super().__init__()
        if not specs:
            raise ConfigError("blocks", "encoder needs at least one block")
        widths = {s.h for s in specs}
        if len(widths) != 1:
            raise ConfigError("h", f"inconsistent block widths {sorted(widths)}")
        contexts = {s.context for s in specs}
        if len(contexts) != 1:
            raise ConfigError("context", "all blocks must share one context")
        self.specs = list(specs)
        self.h = specs[0].h
        self.context = specs[0].context
        self.with_attention = with_attention
        self.blocks = nn.ModuleList(
            EncoderBlock(s, with_attention, ffn_mult, generator=generator) for s in specs
        )

    def forward(self, x, s4d_mode: str = "conv", conv_path: str = "auto"):
        if x.dim() == 2:
            return self.forward(x.unsqueeze(0), s4d_mode, conv_path).squeeze(0)
        for block in self.blocks:
            x = block(x, s4d_mode, conv_path)
        return x


def build_encoder(specs: list[ConvModuleSpec], with_attention: bool = False, ffn_mult: int = 4,
                  seed: int | None = None) -> Encoder:
    """Build an encoder; ``seed`` makes every initializer deterministic."""
    if seed is None:
        return Encoder(specs, with_attention, ffn_mult)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        gen = torch.Generator().manual_seed(seed + 1)
        return Encoder(specs, with_attention, ffn_mult, generator=gen)


def zero_residual_branches(encoder: Encoder) -> None:
    """Zero every residual branch's output projection (identity-at-init)."""
    with torch.no_grad():
        for block in encoder.blocks:
            for lin in (block.ffn.down, block.conv.post_proj) + ((block.attn.out,) if block.attn else ()):
                lin.weight.zero_()
                lin.bias.zero_()
