"""Diagonal state-space (S4D) layer.

One S4D head per channel. The diagonal recurrent weights ``A`` are tied
across channels; readout ``C``, residual ``D`` and timestep ``dt`` are
per channel. ``B`` is the all-ones vector and is not a parameter.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import nn

from .numerics import CDTYPE, DTYPE, causal_conv1d, expm1_complex, linear_scan, scan_pairs

# |z| below which (e^z - 1)/z is evaluated by its Taylor series
TAYLOR_RADIUS = 1e-4


class S4DScheme(str, enum.Enum):
    LIN = "lin"
    REAL = "real"


class DiscreteS4D(NamedTuple):
    a_bar: torch.Tensor  # [H, N] complex
    b_bar: torch.Tensor  # [H, N] complex


@dataclass
class S4DState:
    """Hidden state ``x`` per channel, stored as split real/imag parts."""

    re: torch.Tensor  # [..., H, N]
    im: torch.Tensor

    @classmethod
    def zeros(cls, n_channels: int, n_state: int, batch_shape=()) -> S4DState:
        shape = (*batch_shape, n_channels, n_state)
        return cls(torch.zeros(shape, dtype=DTYPE), torch.zeros(shape, dtype=DTYPE))

    def reset(self) -> None:
        self.re = torch.zeros_like(self.re)
        self.im = torch.zeros_like(self.im)

    @property
    def x(self) -> torch.Tensor:
        return torch.complex(self.re, self.im)


class ParamCount(NamedTuple):
    core: int
    a: int
    c: int
    d: int
    log_dt: int

    @property
    def total(self) -> int:
        return self.core + self.d + self.log_dt


def constrain_A(a_log: torch.Tensor, a_imag: torch.Tensor | None = None) -> torch.Tensor:
    """Map unconstrained parameters to diag(A) with ``Re(A) = -exp(a_log) < 0``."""
    re = -torch.exp(a_log)
    im = torch.zeros_like(re) if a_imag is None else a_imag
    return torch.complex(re, im)


def phi1(z: torch.Tensor) -> torch.Tensor:
    """``(e^z - 1) / z`` with a 4-term Taylor branch near the origin."""
    z = z.to(CDTYPE)
    small = z.abs() < TAYLOR_RADIUS
    z_safe = torch.where(small, torch.ones_like(z), z)
    direct = expm1_complex(z_safe) / z_safe
    series = 1 + z * (0.5 + z * (1.0 / 6.0 + z / 24.0))
    return torch.where(small, series, direct)


def discretize_zoh(A: torch.Tensor, dt: torch.Tensor) -> DiscreteS4D:
    """Zero-order hold: ``a_bar = e^{A dt}``, ``b_bar = (e^{A dt} - 1) / A`` (B = 1)."""
    A = A.to(CDTYPE)
    dt = dt.to(DTYPE)
    if not (torch.isfinite(A.real).all() and torch.isfinite(A.imag).all() and torch.isfinite(dt).all()):
        raise ValueError("discretize_zoh received non-finite inputs")
    z = A.unsqueeze(0) * dt.unsqueeze(-1)
    return DiscreteS4D(torch.exp(z), dt.unsqueeze(-1) * phi1(z))


def materialize_kernel(c: torch.Tensor, disc: DiscreteS4D, L: int) -> torch.Tensor:
    """``K[h, k] = Re(sum_n c[h,n] a_bar[h,n]^k b_bar[h,n])`` for ``k < L``.

    Powers come from a running product, so a length-L kernel is bit-for-bit
    the prefix of any longer one.
    """
    if L < 1:
        raise ValueError("kernel length must be >= 1")
    a_bar, b_bar = disc
    H, N = a_bar.shape
    if L == 1:
        powers = torch.ones(H, N, 1, dtype=CDTYPE)
    else:
        steps = a_bar.unsqueeze(-1).expand(H, N, L - 1)
        powers = torch.cat([torch.ones(H, N, 1, dtype=CDTYPE), torch.cumprod(steps, dim=-1)], dim=-1)
    weights = c * b_bar
    w_re, w_im = weights.real, weights.imag
    p_re, p_im = powers.real, powers.imag
    K = w_re[:, 0, None] * p_re[:, 0] - w_im[:, 0, None] * p_im[:, 0]
    for n in range(1, N):
        K = K + (w_re[:, n, None] * p_re[:, n] - w_im[:, n, None] * p_im[:, n])
    return K


def readout(c_re, c_im, x_re, x_im) -> torch.Tensor:
    """``Re(sum_n c[h,n] x[..., h, n])`` with a fixed summation order."""
    y = c_re[..., 0] * x_re[..., 0] - c_im[..., 0] * x_im[..., 0]
    for n in range(1, x_re.shape[-1]):
        y = y + (c_re[..., n] * x_re[..., n] - c_im[..., n] * x_im[..., n])
    return y


class S4D(nn.Module):
    """Channel-wise S4D with tied diagonal recurrence.

    Input and output are ``[..., T, H]``.
    """

    def __init__(
        self,
        n_channels: int,
        n_state: int = 4,
        scheme: S4DScheme | str = S4DScheme.REAL,
        dt_min: float = 1e-3,
        dt_max: float = 1e-1,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if n_channels < 1 or n_state < 1:
            raise ValueError("S4D needs n_channels >= 1 and n_state >= 1")
        if not 0 < dt_min <= dt_max:
            raise ValueError("need 0 < dt_min <= dt_max")
        self.scheme = S4DScheme(scheme)
        self.n_channels = n_channels
        self.n_state = n_state

        n = torch.arange(n_state, dtype=DTYPE)
        if self.scheme is S4DScheme.LIN:
            self.a_log = nn.Parameter(torch.full((n_state,), math.log(0.5), dtype=DTYPE))
            self.a_imag = nn.Parameter(math.pi * n)
        else:
            self.a_log = nn.Parameter(torch.log(n + 1))
            self.register_parameter("a_imag", None)
        self.c_re = nn.Parameter(torch.randn(n_channels, n_state, dtype=DTYPE, generator=generator))
        self.c_im = nn.Parameter(torch.randn(n_channels, n_state, dtype=DTYPE, generator=generator))
        self.d = nn.Parameter(torch.ones(n_channels, dtype=DTYPE))
        u = torch.rand(n_channels, dtype=DTYPE, generator=generator)
        self.log_dt = nn.Parameter(math.log(dt_min) + u * (math.log(dt_max) - math.log(dt_min)))

    def extra_repr(self) -> str:
        return f"channels={self.n_channels}, state={self.n_state}, scheme={self.scheme.value}"

    @property
    def A(self) -> torch.Tensor:
        return constrain_A(self.a_log, self.a_imag)

    @property
    def c(self) -> torch.Tensor:
        return torch.complex(self.c_re, self.c_im)

    def discretize(self) -> DiscreteS4D:
        return discretize_zoh(self.A, torch.exp(self.log_dt))

    def kernel(self, L: int) -> torch.Tensor:
        """Truncated convolution kernel, shape ``[H, L]`` (residual not included)."""
        return materialize_kernel(self.c, self.discretize(), L)

    def _check_input(self, u: torch.Tensor) -> None:
        if u.dim() < 2 or u.shape[-1] != self.n_channels:
            raise ValueError(
                f"expected input [..., T, {self.n_channels}], got {tuple(u.shape)}"
            )

    def forward(self, u: torch.Tensor, mode: str = "conv", path: str = "fft") -> torch.Tensor:
        self._check_input(u)
        if mode == "conv":
            T = u.shape[-2]
            y = causal_conv1d(u.transpose(-1, -2), self.kernel(T), path=path).transpose(-1, -2)
            return y + self.d * u
        if mode == "scan":
            state = S4DState.zeros(self.n_channels, self.n_state, u.shape[:-2])
            y, _ = self.scan(u, state)
            return y
        raise ValueError(f"unknown forward mode {mode!r}")

    def scan(self, u: torch.Tensor, state: S4DState, disc: DiscreteS4D | None = None):
        """Run the recurrence over ``u [..., T, H]`` from ``state``; returns (y, new state)."""
        self._check_input(u)
        a_bar, b_bar = self.discretize() if disc is None else disc
        uh = u.transpose(-1, -2).unsqueeze(-1)  # [..., H, T, 1]
        b_re = b_bar.real.unsqueeze(-2) * uh
        b_im = b_bar.imag.unsqueeze(-2) * uh
        a_re, a_im = a_bar.real, a_bar.imag
        xs_re, xs_im = scan_pairs(a_re, a_im, b_re, b_im, state.re, state.im)
        y = readout(self.c_re.unsqueeze(-2), self.c_im.unsqueeze(-2), xs_re, xs_im)
        y = y.transpose(-1, -2) + self.d * u
        return y, S4DState(xs_re[..., -1, :], xs_im[..., -1, :])

    def scan_parallel(self, u: torch.Tensor) -> torch.Tensor:
        self._check_input(u)
        a_bar, b_bar = self.discretize()
        bu = b_bar.unsqueeze(-2) * u.transpose(-1, -2).unsqueeze(-1).to(CDTYPE)
        xs = linear_scan(a_bar, bu, mode="parallel")
        y = readout(self.c_re.unsqueeze(-2), self.c_im.unsqueeze(-2), xs.real, xs.imag)
        return y.transpose(-1, -2) + self.d * u

    def step(self, disc: DiscreteS4D, state: S4DState, u: torch.Tensor):
        """One recurrence step for ``u [..., H]``; returns (new state, y [..., H])."""
        if u.shape[-1] != self.n_channels or state.re.shape[-2:] != (self.n_channels, self.n_state):
            raise ValueError("state or input shape does not match the layer")
        a_bar, b_bar = disc
        uh = u.unsqueeze(-1)
        a_re, a_im = a_bar.real, a_bar.imag
        x_re = a_re * state.re - a_im * state.im + b_bar.real * uh
        x_im = a_re * state.im + a_im * state.re + b_bar.imag * uh
        y = readout(self.c_re, self.c_im, x_re, x_im) + self.d * u
        return S4DState(x_re, x_im), y

    def param_count(self) -> ParamCount:
        a = self.a_log.numel() + (0 if self.a_imag is None else self.a_imag.numel())
        c = self.c_re.numel() + self.c_im.numel()
        return ParamCount(core=a + c, a=a, c=c, d=self.d.numel(), log_dt=self.log_dt.numel())


def init_s4d(scheme: S4DScheme | str, n_state: int, n_channels: int, seed: int = 0, **kwargs) -> S4D:
    if n_state < 1 or n_channels < 1:
        raise ValueError("init_s4d needs N >= 1 and H >= 1")
    gen = torch.Generator().manual_seed(seed)
    return S4D(n_channels, n_state, scheme, generator=gen, **kwargs)
