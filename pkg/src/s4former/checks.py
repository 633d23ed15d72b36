"""Invariant suites run against a model (used by ``s4former check``)."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .conv_module import Context
from .numerics import DTYPE, max_rel_err
from .s4d import S4D, init_s4d
from .streaming import stream_sequence

# reference layer for the parameter-count claim
REFERENCE_H, REFERENCE_N = 512, 4
REFERENCE_WINDOW = (3500, 4600)


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        tail = f" {self.detail}" if self.detail else ""
        return f"{status} {self.name} measured={self.measured:.3e}{tail}"


def s4d_layers(model):
    return [(name, m) for name, m in model.named_modules() if isinstance(m, S4D)]


def input_dim(model) -> int:
    proj = getattr(model, "input_proj", None)
    return proj.in_features if proj is not None else model.h


def duality_suite(model, seed: int = 0, T: int = 512, tol: float = 1e-8):
    gen = torch.Generator().manual_seed(seed)
    results = []
    for name, layer in s4d_layers(model):
        u = torch.randn(2, T, layer.n_channels, dtype=DTYPE, generator=gen)
        with torch.no_grad():
            err = max_rel_err(layer(u, mode="scan"), layer(u, mode="conv"))
            long_k = layer.kernel(2 * T)
            prefix_ok = torch.equal(layer.kernel(T), long_k[:, :T])
        results.append(CheckResult(f"duality[{name}]", err < tol, err, f"tol={tol:g}"))
        results.append(CheckResult(f"kernel_prefix[{name}]", prefix_ok, 0.0 if prefix_ok else 1.0))
    if not results:
        results.append(CheckResult("duality", True, 0.0, "no S4D layers"))
    return results


def first_divergence(model, x, t0, delta) -> int | None:
    """First time index whose output changes when inputs at >= t0 are perturbed."""
    y = x.clone()
    y[..., t0:, :] += delta
    with torch.no_grad():
        a = model(x, s4d_mode="scan", conv_path="direct")
        b = model(y, s4d_mode="scan", conv_path="direct")
    changed = (a != b).flatten(0, -3).any(0).any(-1) if a.dim() > 2 else (a != b).any(-1)
    idx = torch.nonzero(changed)
    return int(idx[0]) if len(idx) else None


def causality_suite(model, seed: int = 0, probes: int = 20, T: int = 48):
    model = copy.deepcopy(model).eval()
    gen = torch.Generator().manual_seed(seed)
    worst = None
    for _ in range(probes):
        x = torch.randn(1, T, input_dim(model), dtype=DTYPE, generator=gen)
        t0 = int(torch.randint(1, T, (1,), generator=gen))
        delta = torch.randn(1, T - t0, x.shape[-1], dtype=DTYPE, generator=gen)
        first = first_divergence(model, x, t0, delta)
        if first is not None and first < t0:
            worst = first if worst is None else min(worst, first)
    if worst is None:
        return [CheckResult("causality", True, 0.0, f"probes={probes}")]
    return [CheckResult("causality", False, float(worst), f"first divergence at t={worst}")]


def streaming_suite(model, seed: int = 0, T: int = 128, partitions: int = 5, tol: float = 1e-9):
    model = copy.deepcopy(model).eval()
    encoder = getattr(model, "encoder", model)
    if encoder.context is not Context.ONLINE:
        return [CheckResult("streaming", False, float("nan"), "offline-context model cannot stream")]
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(1, T, input_dim(model), dtype=DTYPE, generator=gen)
    with torch.no_grad():
        full = model(x)
    results = []
    schemes = [[1] * T] + [random_partition(T, gen) for _ in range(partitions)]
    for i, sizes in enumerate(schemes):
        err = (stream_sequence(model, x, sizes) - full).abs().max().item()
        results.append(CheckResult(f"streaming[{i}] chunks={len(sizes)}", err < tol, err, f"tol={tol:g}"))
    return results


def random_partition(T: int, gen: torch.Generator) -> list[int]:
    n_cuts = int(torch.randint(0, min(T, 16), (1,), generator=gen))
    cuts = sorted(set(torch.randint(1, T, (n_cuts,), generator=gen).tolist())) if n_cuts else []
    bounds = [0, *cuts, T]
    return [b - a for a, b in zip(bounds, bounds[1:])]


def grads_suite(model, seed: int = 0, T: int = 12, per_tensor: int = 4, tol: float = 1e-4):
    from .training import grad_check

    model = copy.deepcopy(model).train()
    gen = torch.Generator().manual_seed(seed)
    F_in = input_dim(model)
    x = torch.randn(2, T, F_in, dtype=DTYPE, generator=gen)
    if hasattr(model, "readout"):
        targets = torch.randint(0, model.readout.out_features, (2, T), generator=gen)

        def loss_fn():
            out = model(x)
            return F.cross_entropy(out.reshape(-1, out.shape[-1]), targets.reshape(-1))
    else:
        w = torch.randn(2, T, F_in, dtype=DTYPE, generator=gen)

        def loss_fn():
            return (model(x) * w).sum()

    params = dict(model.named_parameters())
    res = grad_check(loss_fn, params, max_entries=per_tensor, seed=seed)
    return [CheckResult("grads", res.max_rel_error < tol, res.max_rel_error,
                        f"worst={res.worst_param}{list(res.worst_index)} checked={res.checked}")]


def enumerate_core_leaves(layer: S4D) -> int:
    core = ("a_log", "a_imag", "c_re", "c_im")
    return sum(p.numel() for n, p in layer.named_parameters() if n in core)


def params_suite(model, seed: int = 0):
    results = []
    for name, layer in s4d_layers(model):
        pc = layer.param_count()
        expected = 2 * layer.n_channels * layer.n_state + pc.a
        leaves = enumerate_core_leaves(layer)
        ok = pc.core == expected == leaves
        results.append(CheckResult(f"params[{name}]", ok, float(pc.core),
                                   f"core={pc.core} c={pc.c} a={pc.a} d={pc.d} log_dt={pc.log_dt}"))
    ref = init_s4d("real", REFERENCE_N, REFERENCE_H, seed=seed).param_count()
    lo, hi = REFERENCE_WINDOW
    results.append(CheckResult("params[reference real H=512 N=4]", lo <= ref.core <= hi, float(ref.core),
                               f"core={ref.core} window=[{lo}, {hi}]"))
    return results


SUITES = {
    "duality": duality_suite,
    "causality": causality_suite,
    "streaming": streaming_suite,
    "grads": grads_suite,
    "params": params_suite,
}
