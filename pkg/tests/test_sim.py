import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from merton_pgdpo import autodiff as ad
from merton_pgdpo.errors import UsageError
from merton_pgdpo.model import MarketParams, closed_form_policies, consumption_rate, utility
from merton_pgdpo.nn import CONSUME, INVEST, ClosedFormPolicy, mlp_init
from merton_pgdpo.rng import BROWNIAN, NODES, KeyedRng, Stream
from merton_pgdpo.sim import (WEALTH_FLOOR, BatchDraw, batch_objective, draw_batch, draw_for_iteration,
                              euler_step, pairwise_mean, pairwise_sum, path_rows, rollout,
                              sample_initial_node, sample_nodes, simulate)

DT = torch.float64


def value_function(p, t, x):
    """Optimal expected cost from (t, x) in the closed form, discounted to time 0."""
    rate = consumption_rate(p, np.asarray(t))
    return np.exp(-p.rho * np.asarray(t)) * rate ** (-p.gamma) * utility(np.asarray(x), p.gamma)


def const_policy(value, head):
    return ClosedFormPolicy(lambda t, x: x * 0 + value, head)


# --- random streams ---------------------------------------------------------------

def test_uniforms_open_interval_and_reproducible():
    s = Stream(7, 3, 1)
    u = s.uniform((1000, 3))
    assert (u > 0).all() and (u < 1).all()
    assert np.array_equal(u, Stream(7, 3, 1).uniform((1000, 3)))
    assert not np.array_equal(u, Stream(7, 4, 1).uniform((1000, 3)))


def test_draws_are_addressed_by_position():
    s = Stream(1, 0, BROWNIAN)
    assert np.array_equal(s.normal((5,)), s.normal((50,))[:5])


def test_streams_keyed_independently():
    rng = KeyedRng(0)
    a = rng.stream(0, NODES).uniform((100,))
    b = rng.stream(0, BROWNIAN).uniform((100,))
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.3


def test_normals_have_unit_moments():
    z = Stream(0, 0, 0).normal((200_000,))
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01


# --- node sampling ----------------------------------------------------------------

def test_point_domain_gives_point():
    d = SimpleNamespace(t_min=0.0, t_max=0.0, x_min=1.0, x_max=1.0)
    for i in range(5):
        node = sample_initial_node(d, Stream(0, i, NODES))
        assert (node.t0, node.x0) == (0.0, 1.0)


def test_node_mean_on_default_domain(domain):
    t0, x0 = sample_nodes(domain, 100_000, Stream(0, 0, NODES))
    assert abs(x0.mean() - 1.05) < 0.02
    assert abs(t0.mean() - 0.5) < 0.01
    assert x0.min() >= 0.1 and x0.max() <= 2.0 and t0.min() >= 0 and t0.max() <= 1


def test_node_sampling_deterministic(domain):
    a = sample_nodes(domain, 10, Stream(3, 2, NODES))
    b = sample_nodes(domain, 10, Stream(3, 2, NODES))
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def test_paths_end_at_horizon(domain, market):
    draw = draw_for_iteration(KeyedRng(0), 0, domain, 500, 37, market)
    assert np.allclose(draw.t0 + draw.N * draw.dt, market.T, rtol=0, atol=1e-15)
    # increments carry variance dt
    z = draw.dW / np.sqrt(draw.dt)[:, None]
    assert abs(z.var() - 1) < 0.02


def test_bad_sizes_rejected(domain, market):
    with pytest.raises(UsageError):
        draw_batch(domain, 0, 10, market, Stream(0, 0, 0), Stream(0, 0, 1))


# --- Euler step -------------------------------------------------------------------

def _scalar_step(x, pi, c, dt, dW, p):
    tape = ad.Tape()
    return euler_step(tape.var(x), 0.0, tape.var(pi), tape.var(c), dt, dW, p).value


@pytest.mark.parametrize("dW", [0.0, 0.3, -1.2])
def test_riskless_growth(market, dW):
    assert _scalar_step(1.0, 0.0, 0.0, 0.1, dW, market) == pytest.approx(1.003, rel=1e-14)


def test_drift_with_full_investment(market):
    assert _scalar_step(1.0, 1.0, 0.0, 0.1, 0.0, market) == pytest.approx(1.012, rel=1e-14)


@given(st.floats(0.1, 5.0), st.floats(-2.0, 3.0))
def test_consumption_offsetting_drift_is_fixed_point(x, pi):
    p = MarketParams()
    c = x * (p.r + pi * (p.mu - p.r))
    if c < 0:
        return
    assert _scalar_step(x, pi, c, 0.01, 0.0, p) == pytest.approx(x, rel=1e-13)


def test_euler_step_torch_and_tape_agree(market):
    x = torch.tensor([0.5, 1.0, 1.7], dtype=DT)
    pi = torch.tensor([0.3, 1.1, -0.4], dtype=DT)
    c = torch.tensor([0.05, 0.9, 0.2], dtype=DT)
    dW = torch.tensor([0.1, -0.05, 0.02], dtype=DT)
    out = euler_step(x, 0.0, pi, c, 0.01, dW, market)
    for i in range(3):
        assert float(out[i]) == pytest.approx(
            _scalar_step(float(x[i]), float(pi[i]), float(c[i]), 0.01, float(dW[i]), market), rel=1e-15)


def test_wealth_floor_holds(domain, market):
    greedy = const_policy(50.0, CONSUME)
    levered = const_policy(10.0, INVEST)
    draw = draw_for_iteration(KeyedRng(1), 0, domain, 200, 20, market)
    with torch.no_grad():
        batch = simulate(levered, greedy, draw, market)
    X = torch.stack([x.detach() for x in batch.X])
    assert float(X.min()) >= WEALTH_FLOOR * (1 - 1e-9)
    assert bool(torch.isfinite(batch.J).all())


# --- rollouts -----------------------------------------------------------------------

def test_single_step_expansion(market):
    c_val, pi_val = 1e-3, 0.5
    node = sample_initial_node(SimpleNamespace(t_min=0.2, t_max=0.2, x_min=1.0, x_max=1.0), Stream(0, 0, 0))
    tape = ad.Tape()
    J, x0, xs, pis, cs = rollout(const_policy(pi_val, INVEST), const_policy(c_val, CONSUME), node, 1,
                                 market, [0.05], tape)
    dt = market.T - 0.2
    x1 = 1.0 + (market.r + pi_val * (market.mu - market.r)) * dt - c_val * dt + market.sigma * pi_val * 0.05
    expected = math.exp(-market.rho * 0.2) * utility(c_val, 2.0) * dt + market.kappa * math.exp(-market.rho) * utility(x1, 2.0)
    assert J.value == pytest.approx(expected, rel=1e-13)
    assert xs[-1].value == pytest.approx(x1, rel=1e-14)


def test_closed_form_rollout_matches_value_function(domain, market):
    pi_cf, c_cf = closed_form_policies(market)
    draw = draw_for_iteration(KeyedRng(0), 0, domain, 10_000, 100, market)
    with torch.no_grad():
        J_hat = float(simulate(pi_cf, c_cf, draw, market).J_hat)
    oracle = value_function(market, draw.t0, draw.x0).mean()
    assert abs(J_hat - oracle) / abs(oracle) < 0.02


@pytest.mark.slow
def test_closed_form_rollout_matches_fine_grid(domain, market):
    pi_cf, c_cf = closed_form_policies(market)
    coarse = draw_for_iteration(KeyedRng(0), 0, domain, 10_000, 100, market)
    fine = draw_for_iteration(KeyedRng(1), 0, domain, 20_000, 2_000, market)
    with torch.no_grad():
        a = float(simulate(pi_cf, c_cf, coarse, market).J_hat)
        b = float(simulate(pi_cf, c_cf, fine, market).J_hat)
    assert abs(a - b) / abs(b) < 0.02


def _aggregate(draw, N):
    f = draw.N // N
    return BatchDraw(draw.t0, draw.x0, draw.dW.reshape(draw.M, N, f).sum(-1), draw.T)


def test_zero_noise_matches_ode(market):
    pi, C, x0, t0 = 0.5, 0.04, 1.0, 0.0
    a = market.r + pi * (market.mu - market.r)
    xT = (x0 - C / a) * math.exp(a * (market.T - t0)) + C / a
    exact = (utility(C, 2.0) * (math.exp(-market.rho * t0) - math.exp(-market.rho * market.T)) / market.rho
             + market.kappa * math.exp(-market.rho * market.T) * utility(xT, 2.0))
    errs = []
    for N in (25, 50, 100, 200):
        draw = BatchDraw(np.array([t0]), np.array([x0]), np.zeros((1, N)), market.T)
        with torch.no_grad():
            J = float(simulate(const_policy(pi, INVEST), const_policy(C, CONSUME), draw, market).J_hat)
        errs.append(abs(J - exact))
    ratios = [errs[i] / errs[i + 1] for i in range(3)]
    assert all(1.8 < r < 2.2 for r in ratios), ratios
    assert errs[-1] / abs(exact) < 1e-4


def test_discretization_differences_shrink(domain, market):
    pi_cf, c_cf = closed_form_policies(market)
    fine = draw_for_iteration(KeyedRng(4), 0, domain, 4_000, 400, market)
    vals = {}
    for N in (25, 50, 100, 200, 400):
        with torch.no_grad():
            vals[N] = float(simulate(pi_cf, c_cf, _aggregate(fine, N), market).J_hat)
    diffs = [abs(vals[N] - vals[2 * N]) for N in (25, 50, 100, 200)]
    assert all(diffs[i] > diffs[i + 1] for i in range(3)), diffs


def test_tape_and_torch_rollouts_agree(domain, market):
    pi_net = mlp_init([2, 6, 6, 1], INVEST, 1)
    c_net = mlp_init([2, 6, 6, 1], CONSUME, 2)
    draw = draw_for_iteration(KeyedRng(0), 0, domain, 3, 8, market)
    tb = simulate(pi_net, c_net, draw, market, tape=ad.Tape())
    vb = simulate(pi_net, c_net, draw, market)
    assert tb.J_hat.value == pytest.approx(float(vb.J_hat.detach()), rel=1e-13)
    g_tape = ad.grad(tb.J_hat, tb.x0)
    g_torch = torch.autograd.grad(vb.J_hat, vb.x0)[0].numpy()
    assert np.allclose(g_tape, g_torch, rtol=1e-12, atol=0)


@pytest.mark.parametrize("N, M", [(10, 4), (50, 8)])
def test_x0_gradient_matches_frozen_noise_fd(domain, market, N, M):
    pi_net = mlp_init([2, 8, 8, 1], INVEST, 3)
    c_net = mlp_init([2, 8, 8, 1], CONSUME, 4)
    draw = draw_for_iteration(KeyedRng(2), 0, domain, M, N, market)
    batch = simulate(pi_net, c_net, draw, market)
    g = torch.autograd.grad(batch.J_hat, batch.x0)[0].numpy()
    h = 1e-6
    for i in range(M):
        up, dn = draw.x0.copy(), draw.x0.copy()
        up[i] += h
        dn[i] -= h
        with torch.no_grad():
            fd = (float(simulate(pi_net, c_net, draw, market, x0=torch.tensor(up)).J_hat)
                  - float(simulate(pi_net, c_net, draw, market, x0=torch.tensor(dn)).J_hat)) / (2 * h)
        assert abs(fd - g[i]) / max(abs(fd), abs(g[i])) < 1e-5


# --- batch objective ----------------------------------------------------------------

def test_single_path_batch(domain, market):
    pi_cf, c_cf = closed_form_policies(market)
    J_hat, batch = batch_objective(pi_cf, c_cf, domain, 1, 20, market, KeyedRng(0))
    assert float(J_hat.detach()) == float(batch.J[0].detach())


def test_batch_objective_reproducible(domain, market):
    pi_net = mlp_init([2, 8, 1], INVEST, 1)
    c_net = mlp_init([2, 8, 1], CONSUME, 2)
    a, _ = batch_objective(pi_net, c_net, domain, 64, 20, market, KeyedRng(5), iteration=3)
    b, _ = batch_objective(pi_net, c_net, domain, 64, 20, market, KeyedRng(5), iteration=3)
    assert float(a.detach()) == float(b.detach())


def test_standard_error_scales_with_batch(domain, market):
    pi_cf, c_cf = closed_form_policies(market)
    rng = KeyedRng(11)

    def spread(M):
        vals = []
        for rep in range(30):
            draw = draw_batch(domain, M, 20, market, rng.stream(rep + 100 * M, NODES),
                              rng.stream(rep + 100 * M, BROWNIAN))
            with torch.no_grad():
                vals.append(float(simulate(pi_cf, c_cf, draw, market).J_hat))
        return np.std(vals, ddof=1)

    ratio = spread(500) / spread(1000)
    assert 1.2 <= ratio <= 1.7


# --- reductions and dumps ----------------------------------------------------------

@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=200))
def test_pairwise_sum_matches_list_and_fsum(xs):
    t = pairwise_sum(torch.tensor(xs, dtype=DT))
    assert float(t) == pairwise_sum(xs)
    assert float(t) == pytest.approx(math.fsum(xs), abs=1e-6 * max(1.0, sum(abs(x) for x in xs)))
    assert float(pairwise_mean(torch.tensor(xs, dtype=DT))) == pytest.approx(math.fsum(xs) / len(xs), abs=1e-6 * max(1.0, max(abs(x) for x in xs)))


def test_path_rows(domain, market):
    pi_cf, c_cf = closed_form_policies(market)
    draw = draw_for_iteration(KeyedRng(0), 0, domain, 5, 4, market)
    with torch.no_grad():
        batch = simulate(pi_cf, c_cf, draw, market)
    rows = list(path_rows(batch, 7, 2))
    assert len(rows) == 2 * 5
    assert rows[0][:3] == (7, 0, 0) and rows[4][3] == market.T
    assert rows[0][5] == pytest.approx(1.125)
