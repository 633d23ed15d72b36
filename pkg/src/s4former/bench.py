"""Timing of the four equivalent S4D execution paths."""

from __future__ import annotations

import statistics
import time

import torch

from .numerics import DTYPE, max_rel_err
from .s4d import S4D, S4DState

MODES = ("sequential_step", "parallel_scan", "direct_conv", "fft_conv")
LENGTHS = (256, 1024, 4096)
GATE_TOL = 1e-8


def run_mode(layer: S4D, u: torch.Tensor, mode: str) -> torch.Tensor:
    if mode == "sequential_step":
        disc = layer.discretize()
        state = S4DState.zeros(layer.n_channels, layer.n_state)
        ys = []
        for k in range(u.shape[0]):
            state, y = layer.step(disc, state, u[k])
            ys.append(y)
        return torch.stack(ys)
    if mode == "parallel_scan":
        return layer.scan_parallel(u)
    if mode == "direct_conv":
        return layer(u, mode="conv", path="direct")
    if mode == "fft_conv":
        return layer(u, mode="conv", path="fft")
    raise ValueError(f"unknown mode {mode!r}")


@torch.no_grad()
def bench(layer: S4D, lengths=LENGTHS, reps: int = 5, seed: int = 0):
    """Returns ``(rows, gate_errors)``; rows are ``(mode, T, median_ns, reps)``.

    Raises ``RuntimeError`` if any path disagrees with sequential stepping.
    """
    if reps < 5:
        raise ValueError("need at least 5 repetitions")
    gen = torch.Generator().manual_seed(seed)
    rows, gate = [], {}
    for T in lengths:
        u = torch.randn(T, layer.n_channels, dtype=DTYPE, generator=gen)
        ref = run_mode(layer, u, MODES[0])
        for mode in MODES[1:]:
            err = max_rel_err(run_mode(layer, u, mode), ref)
            gate[(mode, T)] = err
            if not err < GATE_TOL:
                raise RuntimeError(f"{mode} disagrees with sequential stepping at T={T}: {err:.3e}")
        for mode in MODES:
            times = []
            for _ in range(reps):
                t0 = time.perf_counter_ns()
                run_mode(layer, u, mode)
                times.append(time.perf_counter_ns() - t0)
            rows.append((mode, T, int(statistics.median(times)), reps))
    return rows, gate


def to_csv(rows) -> str:
    lines = ["mode,T,median_ns,reps"]
    lines += [f"{m},{T},{ns},{r}" for m, T, ns, r in rows]
    return "\n".join(lines) + "\n"
