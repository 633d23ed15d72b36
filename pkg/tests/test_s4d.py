import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from s4former.numerics import max_rel_err
from s4former.s4d import (
    DiscreteS4D,
    S4D,
    S4DState,
    constrain_A,
    discretize_zoh,
    init_s4d,
    materialize_kernel,
    phi1,
)
from s4former.training import grad_check

mpmath.mp.dps = 40
ULP_REL = 4.5e-16  # one unit in the last place, relative


def phi1_oracle(z: complex) -> complex:
    return complex(mpmath.expm1(mpmath.mpc(z)) / mpmath.mpc(z))


def random_input(T, H, seed=0, batch=()):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*batch, T, H, dtype=torch.float64, generator=g)


def test_lin_init_values():
    layer = init_s4d("lin", 4, 3)
    expected = torch.complex(torch.full((4,), -0.5, dtype=torch.float64), math.pi * torch.arange(4, dtype=torch.float64))
    assert torch.equal(layer.A, expected)


def test_real_init_values():
    layer = init_s4d("real", 8, 2)
    A = layer.A
    expected = -torch.arange(1, 9, dtype=torch.float64)
    # -exp(log(k)) cannot hit every integer exactly in float64; allow one ulp
    assert ((A.real - expected).abs() / expected.abs()).max().item() <= ULP_REL
    assert torch.equal(A.imag, torch.zeros(8, dtype=torch.float64))


def test_real_n1_raw_parameter_is_zero():
    layer = init_s4d("real", 1, 1)
    assert layer.a_log.item() == 0.0
    assert layer.A.real.item() == -1.0


def test_init_other_fields():
    layer = init_s4d("lin", 4, 16, seed=3)
    assert torch.equal(layer.d, torch.ones(16, dtype=torch.float64))
    dt = torch.exp(layer.log_dt)
    assert (dt >= 1e-3 * (1 - 1e-12)).all() and (dt <= 1e-1 * (1 + 1e-12)).all()
    assert layer.c_re.shape == layer.c_im.shape == (16, 4)


def test_init_is_seeded():
    a, b, c = init_s4d("real", 4, 8, seed=1), init_s4d("real", 4, 8, seed=1), init_s4d("real", 4, 8, seed=2)
    assert torch.equal(a.c_re, b.c_re) and torch.equal(a.log_dt, b.log_dt)
    assert not torch.equal(a.c_re, c.c_re)


@pytest.mark.parametrize("N,H", [(0, 1), (1, 0)])
def test_init_rejects_empty(N, H):
    with pytest.raises(ValueError):
        init_s4d("real", N, H)


def test_constrain_examples():
    assert constrain_A(torch.tensor([0.0], dtype=torch.float64)).real.item() == -1.0
    tiny = constrain_A(torch.tensor([-20.0], dtype=torch.float64)).real.item()
    assert tiny < 0 and abs(tiny + math.exp(-20)) < 1e-24
    lin = constrain_A(torch.tensor([0.0], dtype=torch.float64), torch.tensor([2.5], dtype=torch.float64))
    assert lin.imag.item() == 2.5


def test_negativity_survives_random_optimisation():
    g = torch.Generator().manual_seed(0)
    layer = init_s4d("lin", 8, 4)
    opt = torch.optim.SGD([layer.a_log, layer.a_imag], lr=0.5)
    for _ in range(1000):
        opt.zero_grad()
        layer.a_log.grad = torch.randn(8, dtype=torch.float64, generator=g) * 3
        layer.a_imag.grad = torch.randn(8, dtype=torch.float64, generator=g)
        opt.step()
        assert (layer.A.real < 0).all()


def test_zoh_scalar_closed_form():
    disc = discretize_zoh(torch.tensor([-1.0 + 0j], dtype=torch.complex128), torch.tensor([math.log(2.0)], dtype=torch.float64))
    assert abs(complex(disc.a_bar[0, 0]) - 0.5) < 1e-15
    assert abs(complex(disc.b_bar[0, 0]) - 0.5) < 1e-15


def test_zoh_euler_formula():
    disc = discretize_zoh(torch.tensor([-0.5 + 1j * math.pi], dtype=torch.complex128), torch.tensor([1.0], dtype=torch.float64))
    assert abs(complex(disc.a_bar[0, 0]) + math.exp(-0.5)) < 1e-15


def test_zoh_broadcast_shape():
    disc = discretize_zoh(torch.tensor([-1.0 + 0j, -2.0 + 1j]), torch.tensor([0.1, 0.2, 0.3], dtype=torch.float64))
    assert disc.a_bar.shape == disc.b_bar.shape == (3, 2)


def test_stable_branch_vs_naive_at_small_argument():
    z = torch.tensor([1e-6 + 0j, -1e-6 + 0j, 1e-6j], dtype=torch.complex128)
    stable = phi1(z)
    naive = (torch.exp(z) - 1) / z
    for i in range(3):
        ref = phi1_oracle(complex(z[i]))
        assert abs(complex(stable[i]) - ref) / abs(ref) < 1e-12
    # the naive quotient is visibly wrong once cancellation dominates
    z12 = torch.tensor([1e-12 + 0j], dtype=torch.complex128)
    naive12 = complex(((torch.exp(z12) - 1) / z12)[0])
    assert abs(naive12 - phi1_oracle(1e-12)) >= 1e-10
    assert abs(complex(phi1(z12)[0]) - phi1_oracle(1e-12)) < 1e-15
    assert naive.shape == stable.shape


def test_phi1_matches_series_oracle_over_range():
    rng = np.random.default_rng(0)
    mags = np.logspace(-12, 1, 200)
    angles = rng.uniform(0, 2 * np.pi, 200)
    z = mags * np.exp(1j * angles)
    got = phi1(torch.from_numpy(z)).numpy()
    for zi, gi in zip(z, got):
        ref = phi1_oracle(complex(zi))
        assert abs(gi - ref) / abs(ref) < 1e-12


def test_zoh_rejects_non_finite():
    with pytest.raises(ValueError):
        discretize_zoh(torch.tensor([complex("nan")]), torch.tensor([1.0]))
    with pytest.raises(ValueError):
        discretize_zoh(torch.tensor([-1.0 + 0j]), torch.tensor([math.inf]))


def test_kernel_geometric_sequence():
    disc = DiscreteS4D(torch.tensor([[0.5 + 0j]]), torch.tensor([[0.5 + 0j]]))
    K = materialize_kernel(torch.tensor([[1.0 + 0j]]), disc, 4)
    assert torch.allclose(K, torch.tensor([[0.5, 0.25, 0.125, 0.0625]], dtype=torch.float64), atol=1e-16)


@pytest.mark.parametrize("scheme", ["real", "lin"])
def test_kernel_prefix_is_exact(scheme):
    layer = init_s4d(scheme, 5, 3, seed=2)
    assert torch.equal(layer.kernel(8), layer.kernel(32)[:, :8])


def test_kernel_rejects_zero_length():
    with pytest.raises(ValueError):
        init_s4d("real", 2, 2).kernel(0)


@pytest.mark.parametrize("scheme", ["real", "lin"])
def test_kernel_is_impulse_response(scheme):
    layer = init_s4d(scheme, 4, 5, seed=4)
    with torch.no_grad():
        K = layer.kernel(64)
        disc = layer.discretize()
        state = S4DState.zeros(5, 4)
        response = []
        for k in range(64):
            u = torch.ones(5, dtype=torch.float64) if k == 0 else torch.zeros(5, dtype=torch.float64)
            state, y = layer.step(disc, state, u)
            response.append(y - (layer.d * u))
        response = torch.stack(response, dim=-1)
    assert (response - K).abs().max().item() < 1e-12 * K.abs().max().item()


def test_zero_input_gives_zero_output():
    layer = init_s4d("lin", 4, 3)
    u = torch.zeros(10, 3, dtype=torch.float64)
    for mode in ("scan", "conv"):
        assert torch.equal(layer(u, mode=mode).abs(), torch.zeros(10, 3, dtype=torch.float64))


def test_pure_residual_when_readout_disabled():
    layer = init_s4d("real", 4, 3)
    with torch.no_grad():
        layer.c_re.zero_()
        layer.c_im.zero_()
    u = random_input(20, 3)
    assert torch.equal(layer(u, mode="scan"), u)
    assert torch.allclose(layer(u, mode="conv"), u, atol=1e-15)


@pytest.mark.parametrize("scheme", ["real", "lin"])
def test_scan_and_conv_agree(scheme):
    layer = init_s4d(scheme, 4, 8, seed=5)
    u = random_input(512, 8, seed=1)
    with torch.no_grad():
        assert max_rel_err(layer(u, mode="scan"), layer(u, mode="conv")) < 1e-8
        assert max_rel_err(layer.scan_parallel(u), layer(u, mode="scan")) < 1e-8
        assert max_rel_err(layer(u, mode="conv", path="direct"), layer(u, mode="scan")) < 1e-8


def test_forward_rejects_channel_mismatch():
    layer = init_s4d("real", 2, 3)
    with pytest.raises(ValueError):
        layer(torch.zeros(5, 4, dtype=torch.float64))
    with pytest.raises(ValueError):
        layer(torch.zeros(5, 3, dtype=torch.float64), mode="fancy")


def test_step_zero_state_zero_input():
    layer = init_s4d("lin", 3, 2)
    state, y = layer.step(layer.discretize(), S4DState.zeros(2, 3), torch.zeros(2, dtype=torch.float64))
    assert torch.equal(state.re.abs(), torch.zeros(2, 3, dtype=torch.float64))
    assert torch.equal(y.abs(), torch.zeros(2, dtype=torch.float64))


def test_first_step_is_first_kernel_tap():
    layer = init_s4d("lin", 3, 4, seed=1)
    with torch.no_grad():
        _, y = layer.step(layer.discretize(), S4DState.zeros(4, 3), torch.ones(4, dtype=torch.float64))
        expected = layer.kernel(1)[:, 0] + layer.d
    assert torch.allclose(y, expected, rtol=0, atol=1e-15)


@pytest.mark.parametrize("scheme", ["real", "lin"])
def test_steps_reproduce_scan_bit_for_bit(scheme):
    layer = init_s4d(scheme, 4, 6, seed=8)
    u = random_input(40, 6, seed=9)
    with torch.no_grad():
        full = layer(u, mode="scan")
        disc = layer.discretize()
        state = S4DState.zeros(6, 4)
        ys = []
        for k in range(40):
            state, y = layer.step(disc, state, u[k])
            ys.append(y)
    assert torch.equal(torch.stack(ys), full)


def test_step_rejects_bad_state():
    layer = init_s4d("real", 2, 3)
    with pytest.raises(ValueError):
        layer.step(layer.discretize(), S4DState.zeros(3, 5), torch.zeros(3, dtype=torch.float64))


def test_state_reset():
    state = S4DState(torch.ones(2, 2, dtype=torch.float64), torch.ones(2, 2, dtype=torch.float64))
    state.reset()
    assert torch.equal(state.x, torch.zeros(2, 2, dtype=torch.complex128))


def test_param_count_reference_configuration():
    pc = init_s4d("real", 4, 512).param_count()
    assert (pc.core, pc.c, pc.a, pc.d, pc.log_dt) == (4100, 4096, 4, 512, 512)


def test_param_count_smallest_lin():
    assert init_s4d("lin", 1, 1).param_count().core == 4


def test_param_count_matches_leaf_enumeration():
    layer = init_s4d("real", 2, 64)
    leaves = {n: p.numel() for n, p in layer.named_parameters()}
    assert leaves["a_log"] + leaves["c_re"] + leaves["c_im"] == 258 == layer.param_count().core
    assert sum(leaves.values()) == layer.param_count().total


@pytest.mark.parametrize("scheme", ["real", "lin"])
def test_stability_and_kernel_decay(scheme):
    layer = init_s4d(scheme, 8, 4, seed=11)
    with torch.no_grad():
        disc = layer.discretize()
        rho = disc.a_bar.abs()
        assert (rho < 1).all()
        bound = (layer.c * disc.b_bar).abs().sum(-1)
        K = layer.kernel(1)
        for h in range(4):
            peak_guess = layer.kernel(4096)[h].abs().max().item()
            r = rho[h].max().item()
            lag = math.ceil(math.log(1e-7 * peak_guess / bound[h].item()) / math.log(r))
            K = layer.kernel(lag + 1)
            assert abs(K[h, lag].item()) < 1e-6 * K[h].abs().max().item()


@settings(max_examples=20, deadline=None)
@given(T=st.integers(2, 64), t0_frac=st.floats(0.01, 0.99), seed=st.integers(0, 1000))
def test_causality_property(T, t0_frac, seed):
    t0 = max(1, min(T - 1, int(t0_frac * T)))
    layer = init_s4d("lin", 3, 2, seed=seed)
    u = random_input(T, 2, seed=seed)
    v = u.clone()
    v[t0:] += 1.0
    with torch.no_grad():
        assert torch.equal(layer(u, mode="scan")[:t0], layer(v, mode="scan")[:t0])
        assert torch.equal(layer(u, mode="conv", path="direct")[:t0], layer(v, mode="conv", path="direct")[:t0])


def test_truncation_consistency():
    layer = init_s4d("real", 4, 3, seed=1)
    u = random_input(30, 3)
    with torch.no_grad():
        full = layer(u, mode="conv")
        for L in (30, 45, 100):
            from s4former.numerics import causal_conv1d

            trunc = causal_conv1d(u.T, layer.kernel(L), "fft").T + layer.d * u
            assert max_rel_err(trunc, full) < 1e-12


@pytest.mark.parametrize("scheme", ["real", "lin"])
@pytest.mark.parametrize("mode", ["conv", "scan"])
def test_gradients_match_finite_differences(scheme, mode):
    layer = init_s4d(scheme, 2, 2, seed=3)
    with torch.no_grad():
        layer.log_dt.add_(1.5)  # larger steps make every parameter matter
    u = random_input(8, 2, seed=4)
    w = random_input(8, 2, seed=5)
    res = grad_check(lambda: (layer(u, mode=mode) * w).sum(), dict(layer.named_parameters()))
    assert res.max_rel_error < 1e-4, res


def test_module_is_s4d_instance():
    assert isinstance(init_s4d("real", 1, 1), S4D)
