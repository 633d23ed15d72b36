"""Numerical substrate: causal convolution, linear-recurrence scans, gradients.

Everything runs in float64 / complex128. Autodiff is torch's reverse-mode
engine; complex quantities are only ever built from real leaves, so every
gradient is an ordinary real gradient (no Wirtinger conventions involved).
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping

import torch
import torch.nn.functional as F

DTYPE = torch.float64
CDTYPE = torch.complex128

# auto path switches to FFT above this kernel length
DIRECT_MAX_TAPS = 32


def next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def max_rel_err(x: torch.Tensor, ref: torch.Tensor) -> float:
    """Max absolute deviation normalised by the largest reference magnitude."""
    diff = (x - ref).abs().max().item() if x.numel() else 0.0
    scale = ref.abs().max().item() if ref.numel() else 0.0
    if scale == 0.0:
        return diff
    return diff / scale


def expm1_complex(z: torch.Tensor) -> torch.Tensor:
    """e^z - 1 without cancellation in either the real or imaginary part."""
    if not z.is_complex():
        return torch.expm1(z)
    x, y = z.real, z.imag
    half = torch.sin(0.5 * y)
    re = torch.expm1(x) * torch.cos(y) - 2.0 * half * half
    im = torch.exp(x) * torch.sin(y)
    return torch.complex(re, im)


def causal_conv1d(x: torch.Tensor, kernel: torch.Tensor, path: str = "auto") -> torch.Tensor:
    """Causal convolution along the last axis.

    ``out[..., t] = sum_{j=0}^{min(t, L-1)} kernel[..., j] * x[..., t - j]``;
    leading axes broadcast. ``path`` is ``"direct"``, ``"fft"`` or ``"auto"``.
    """
    if x.shape[-1] == 0 or kernel.shape[-1] == 0:
        raise ValueError("causal_conv1d needs a non-empty input and kernel")
    if path == "auto":
        path = "direct" if kernel.shape[-1] <= DIRECT_MAX_TAPS else "fft"
    T = x.shape[-1]
    kernel = kernel[..., :T]
    L = kernel.shape[-1]
    if path == "direct":
        out = kernel[..., :1] * x
        for j in range(1, L):
            out = out + F.pad(kernel[..., j : j + 1] * x[..., : T - j], (j, 0))
        return out
    if path == "fft":
        n = next_pow2(T + L - 1)
        spec = torch.fft.rfft(x, n=n) * torch.fft.rfft(kernel, n=n)
        return torch.fft.irfft(spec, n=n)[..., :T]
    raise ValueError(f"unknown convolution path {path!r}")


def _check_scan_shapes(a: torch.Tensor, b_seq: torch.Tensor) -> None:
    if b_seq.dim() < 2:
        raise ValueError("b_seq must have shape [..., T, N]")
    target = b_seq.shape[:-2] + b_seq.shape[-1:]
    try:
        if torch.broadcast_shapes(a.shape, target) != target:
            raise RuntimeError
    except RuntimeError:
        raise ValueError(
            f"recurrence weights {tuple(a.shape)} do not broadcast to {tuple(target)}"
        ) from None


def scan_pairs(a_re, a_im, b_re, b_im, x_re, x_im):
    """Sequential complex recurrence in split real arithmetic.

    Time runs along axis -2 of ``b_re``/``b_im``. Returns stacked (re, im)
    states. Using only real elementwise ops keeps the result bit-identical
    to repeated single-step updates regardless of tensor shape.
    """
    outs_re, outs_im = [], []
    for k in range(b_re.shape[-2]):
        x_re, x_im = (
            a_re * x_re - a_im * x_im + b_re[..., k, :],
            a_re * x_im + a_im * x_re + b_im[..., k, :],
        )
        outs_re.append(x_re)
        outs_im.append(x_im)
    return torch.stack(outs_re, dim=-2), torch.stack(outs_im, dim=-2)


def _combine(a1, b1, a2, b2):
    # (a1, b1) applied first, then (a2, b2)
    return a1 * a2, a2 * b1 + b2


def _blelloch(a_seq: torch.Tensor, b_seq: torch.Tensor):
    """Work-efficient exclusive scan (up-sweep / down-sweep) along axis -2."""
    lead, n, N = a_seq.shape[:-2], a_seq.shape[-2], a_seq.shape[-1]

    def blocks(t, size):
        return t.reshape(*lead, n // size, size, N)

    def flat(t):
        return t.reshape(*lead, n, N)

    A, B = a_seq, b_seq
    levels = int(math.log2(n))
    for d in range(levels):
        size, half = 2 << d, 1 << d
        Ab, Bb = blocks(A, size), blocks(B, size)
        ra, rb = _combine(Ab[..., half - 1, :], Bb[..., half - 1, :], Ab[..., size - 1, :], Bb[..., size - 1, :])
        A = flat(torch.cat([Ab[..., : size - 1, :], ra.unsqueeze(-2)], dim=-2))
        B = flat(torch.cat([Bb[..., : size - 1, :], rb.unsqueeze(-2)], dim=-2))

    A = torch.cat([A[..., :-1, :], torch.ones_like(A[..., -1:, :])], dim=-2)
    B = torch.cat([B[..., :-1, :], torch.zeros_like(B[..., -1:, :])], dim=-2)
    for d in reversed(range(levels)):
        size, half = 2 << d, 1 << d
        Ab, Bb = blocks(A, size), blocks(B, size)
        la, lb = Ab[..., half - 1, :], Bb[..., half - 1, :]
        pa, pb = Ab[..., size - 1, :], Bb[..., size - 1, :]
        ra, rb = _combine(pa, pb, la, lb)
        A = flat(torch.cat([Ab[..., : half - 1, :], pa.unsqueeze(-2), Ab[..., half : size - 1, :], ra.unsqueeze(-2)], dim=-2))
        B = flat(torch.cat([Bb[..., : half - 1, :], pb.unsqueeze(-2), Bb[..., half : size - 1, :], rb.unsqueeze(-2)], dim=-2))
    return A, B


def linear_scan(
    a: torch.Tensor,
    b_seq: torch.Tensor,
    mode: str = "sequential",
    initial: torch.Tensor | None = None,
) -> torch.Tensor:
    """All states of ``x_k = a * x_{k-1} + b_k`` (elementwise), ``x_0 = initial or 0``.

    ``b_seq`` has shape ``[..., T, N]`` and ``a`` broadcasts against
    ``[..., N]``. ``mode="parallel"`` uses a Blelloch prefix scan over the
    associative combine ``(a1, b1) o (a2, b2) = (a1 a2, a2 b1 + b2)``.
    """
    _check_scan_shapes(a, b_seq)
    a = a.to(CDTYPE)
    b_seq = b_seq.to(CDTYPE)
    state_shape = b_seq.shape[:-2] + b_seq.shape[-1:]
    if initial is None:
        initial = torch.zeros(state_shape, dtype=CDTYPE)
    else:
        _check_scan_shapes(initial, b_seq)
        initial = initial.to(CDTYPE).expand(state_shape)

    if mode == "sequential":
        x_re, x_im = scan_pairs(a.real, a.imag, b_seq.real, b_seq.imag, initial.real, initial.imag)
        return torch.complex(x_re, x_im)
    if mode != "parallel":
        raise ValueError(f"unknown scan mode {mode!r}")

    T = b_seq.shape[-2]
    n = next_pow2(T)
    a_seq = a.unsqueeze(-2).expand(*state_shape[:-1], T, state_shape[-1])
    if n > T:
        pad_a = torch.ones(*state_shape[:-1], n - T, state_shape[-1], dtype=CDTYPE)
        a_seq = torch.cat([a_seq, pad_a], dim=-2)
        b_seq = torch.cat([b_seq, torch.zeros_like(pad_a)], dim=-2)
    ex_a, ex_b = _blelloch(a_seq, b_seq)
    inc_a, inc_b = _combine(ex_a, ex_b, a_seq, b_seq)
    out = inc_b + inc_a * initial.unsqueeze(-2)
    return out[..., :T, :]


def gradients(
    output: torch.Tensor, leaves: Mapping[str, torch.Tensor] | Iterable[torch.Tensor]
) -> dict:
    """Reverse pass from a real scalar ``output`` to each leaf.

    Leaves the output does not depend on get an exact zero gradient.
    """
    if isinstance(leaves, Mapping):
        names, tensors = list(leaves.keys()), list(leaves.values())
    else:
        tensors = list(leaves)
        names = list(range(len(tensors)))
    if not isinstance(output, torch.Tensor) or output.numel() != 1:
        raise ValueError("output must be a scalar tensor")
    if output.is_complex():
        raise ValueError("output must be real")
    if output.grad_fn is None and not output.requires_grad:
        raise ValueError("output is not recorded on the autodiff tape")
    grads = torch.autograd.grad(output, tensors, allow_unused=True, retain_graph=True)
    return {
        name: torch.zeros_like(t) if g is None else g
        for name, t, g in zip(names, tensors, grads)
    }
