"""Benchmarks against the closed-form Merton solution."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch

from .errors import DomainError, UsageError
from .model import Domain, MarketParams, closed_form_consumption, closed_form_pi
from .nn import DTYPE, LEAKY_SLOPE, PI_BOUND
from .rng import EVAL_BROWNIAN, EVAL_NODES, PROBE, KeyedRng
from .sim import CONSUMPTION_CAP, FLOOR_WIDTH, WEALTH_FLOOR, draw_batch, draw_for_iteration, simulate


@dataclass
class MetricsReport:
    iter: int
    relmse_c: float
    relmse_pi: float
    empirical_utility: float
    n_rollouts: int
    utility_stderr: float = float("nan")

    @property
    def abs_empirical_utility(self) -> float:
        return abs(self.empirical_utility)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["abs_empirical_utility"] = self.abs_empirical_utility
        return d


def grid(d: Domain, n_t: int = 101, n_x: int = 101) -> tuple[torch.Tensor, torch.Tensor]:
    """Flattened uniform (t, x) grid over the domain, t varying slowest."""
    if n_t < 2 or n_x < 2:
        raise UsageError("grid needs at least 2 x 2 points")
    t = torch.linspace(d.t_min, d.t_max, n_t, dtype=DTYPE)
    x = torch.linspace(d.x_min, d.x_max, n_x, dtype=DTYPE)
    tt, xx = torch.meshgrid(t, x, indexing="ij")
    return tt.reshape(-1), xx.reshape(-1)


def relative_mse(net: Callable, oracle: Callable, d: Domain, resolution=(101, 101)) -> float:
    """mean (net - oracle)^2 / mean oracle^2 over a uniform grid."""
    t, x = grid(d, *resolution)
    with torch.no_grad():
        a = torch.as_tensor(net(t, x), dtype=DTYPE)
        b = torch.as_tensor(oracle(t, x), dtype=DTYPE)
    denom = float((b * b).mean())
    if denom == 0.0:
        raise DomainError("oracle vanishes on the whole grid")
    return float(((a - b) ** 2).mean()) / denom


def exact_oracles(p: MarketParams):
    """(investment, consumption) closed forms as tensor functions of (t, x)."""
    pi_star = closed_form_pi(p)
    return (lambda t, x: torch.full_like(x, pi_star),
            lambda t, x: closed_form_consumption(p, t, x))


def empirical_utility(pi_net, c_net, d: Domain, n_rollouts: int, N: int, p: MarketParams,
                      seed: int, iteration: int = 0) -> tuple[float, float]:
    """Mean path cost over fresh rollouts from uniformly drawn nodes, and its standard error."""
    if n_rollouts < 1:
        raise UsageError("n_rollouts must be >= 1")
    rng = KeyedRng(seed)
    draw = draw_for_iteration(rng, iteration, d, n_rollouts, N, p, EVAL_NODES, EVAL_BROWNIAN)
    with torch.no_grad():
        batch = simulate(pi_net, c_net, draw, p, x0=torch.tensor(draw.x0, dtype=DTYPE))
    J = batch.J.numpy()
    se = float(J.std(ddof=1) / math.sqrt(J.size)) if J.size > 1 else float("nan")
    return float(batch.J_hat), se


def metrics_report(pi_net, c_net, p: MarketParams, d: Domain, iteration: int, seed: int,
                   n_rollouts: int = 500, N: int = 100, grid=(101, 101)) -> MetricsReport:
    pi_star, c_star = exact_oracles(p)
    rc = relative_mse(c_net, c_star, d, grid)
    rp = relative_mse(pi_net, pi_star, d, grid)
    u, se = empirical_utility(pi_net, c_net, d, n_rollouts, N, p, seed, iteration)
    return MetricsReport(iteration, rc, rp, u, n_rollouts, se)


def policy_surface(pi_net, c_net, p: MarketParams, d: Domain, resolution=(101, 101)):
    """Columns (t, x, c_learned, c_exact, pi_learned, pi_exact) as numpy arrays."""
    t, x = grid(d, *resolution)
    pi_star, c_star = exact_oracles(p)
    with torch.no_grad():
        cols = (t, x, c_net(t, x), c_star(t, x), pi_net(t, x), pi_star(t, x))
        return [np.asarray(c.detach().numpy(), dtype=np.float64) for c in cols]


# --- gradient diagnostics ---------------------------------------------------

def finite_diff_gradcheck(f: Callable[[np.ndarray], float], point, h: float = 1e-6, grad=None,
                          max_coords: int = 50, seed: int = 0) -> float:
    """Largest relative error between an autodiff gradient and central differences.

    ``f`` maps a parameter vector to a float.  ``grad`` is the autodiff
    gradient at ``point`` (an array, or a callable returning one); when
    omitted ``f`` must accept a torch tensor and is differentiated with
    torch.  Up to ``max_coords`` coordinates are checked, chosen at random.
    """
    if h <= 0:
        raise UsageError("h must be positive")
    point = np.asarray(point, dtype=np.float64).copy()
    if grad is None:
        xt = torch.tensor(point, dtype=DTYPE, requires_grad=True)
        g = torch.autograd.grad(f(xt), xt)[0].numpy()
    elif callable(grad):
        g = np.asarray(grad(point), dtype=np.float64)
    else:
        g = np.asarray(grad, dtype=np.float64)
    n = point.size
    coords = np.arange(n)
    if n > max_coords:
        coords = np.sort(np.random.default_rng(seed).choice(n, max_coords, replace=False))
    worst = 0.0
    for i in coords:
        e = point.copy()
        e[i] += h
        fp = f(e)
        e[i] = point[i] - h
        fm = f(e)
        # subtract before rounding so an extended-precision f keeps its digits
        fd = float((fp - fm) / (2 * h))
        err = abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-12)
        worst = max(worst, err)
    return worst


def _np_mlp(layers, slope, horizon, t, x):
    h = np.stack([t / horizon, x], axis=-1)
    for i, (w, b) in enumerate(layers):
        h = h @ w.T + b
        if i < len(layers) - 1:
            h = np.where(h > 0, h, slope * h)
    return h[..., 0]


def _np_softplus(z):
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def unpack_params(vec, layer_sizes, dtype=np.longdouble):
    """Split a flat row-major parameter vector into per-layer (W, b) arrays."""
    vec = np.asarray(vec, dtype=dtype)
    need = sum(a * b + b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))
    if vec.size != need:
        raise UsageError(f"parameter vector has {vec.size} entries, layout needs {need}")
    out, i = [], 0
    for a, b in zip(layer_sizes[:-1], layer_sizes[1:]):
        w = vec[i:i + a * b].reshape(b, a)
        i += a * b
        out.append((w, vec[i:i + b]))
        i += b
    return out


def reference_objective(pi_layers, c_layers, draw, p: MarketParams, x0=None, slope=LEAKY_SLOPE,
                        dtype=np.longdouble) -> float:
    """J_hat recomputed in numpy at ``dtype`` (extended precision by default).

    An independent forward pass over the same frozen draw, used as the
    finite-difference side of gradient checks where float64 cancellation
    would swamp small gradient coordinates.
    """
    one = dtype(1)
    x = np.asarray(draw.x0 if x0 is None else x0, dtype=dtype)
    t0 = np.asarray(draw.t0, dtype=dtype)
    T = dtype(p.T)
    dt = (T - t0) / draw.N
    dW = np.asarray(draw.dW, dtype=dtype)
    r, mu, sigma, rho, g = (dtype(v) for v in (p.r, p.mu, p.sigma, p.rho, p.gamma))
    J = np.zeros_like(x)
    for k in range(draw.N):
        t = t0 + k * dt
        pi = np.clip(_np_mlp(pi_layers, slope, T, t, x), -PI_BOUND, PI_BOUND)
        c = _np_softplus(_np_mlp(c_layers, slope, T, t, x)) * x
        J = J + c ** (one - g) / (one - g) * np.exp(-rho * t) * dt
        c_eff = np.minimum(c, x * (dtype(CONSUMPTION_CAP) / dt))
        y = x + (x * r + pi * x * (mu - r) - c_eff) * dt + pi * x * dW[:, k] * sigma
        s = dtype(FLOOR_WIDTH)
        x = y + _np_softplus((dtype(WEALTH_FLOOR) - y) / s) * s
    J = J + x ** (one - g) / (one - g) * (dtype(p.kappa) * np.exp(-rho * T))
    return J.mean()


@dataclass
class ProbeSummary:
    mean: np.ndarray
    var: np.ndarray
    objective_mean: float
    objective_var: float
    reference: np.ndarray | None = None
    z: np.ndarray | None = None

    def frac_within(self, bound: float = 3.0) -> float:
        if self.z is None:
            raise UsageError("no reference gradient was computed")
        return float(np.mean(np.abs(self.z) <= bound))


def _batch_gradient(pi_net, c_net, p, draw):
    params = list(pi_net.parameters()) + list(c_net.parameters())
    batch = simulate(pi_net, c_net, draw, p)
    g = torch.autograd.grad(batch.J_hat, params)
    return float(batch.J_hat.detach()), torch.cat([x.reshape(-1) for x in g]).numpy()


def gradient_variance_probe(pi_net, c_net, p: MarketParams, d: Domain, M: int, N: int,
                            n_repeats: int, seed: int, reference_M: int | None = None,
                            frozen: bool = False, chunk: int = 10_000) -> ProbeSummary:
    """Mean and variance of the batch gradient of J_hat over independent batches.

    With ``reference_M`` a large-batch gradient is also computed (in chunks
    of ``chunk`` paths) and each coordinate gets a z-score of the repeat
    mean against it, counting the sampling noise of both.  ``frozen`` reuses
    one draw for every repeat.
    """
    if n_repeats < 2:
        raise UsageError("n_repeats must be >= 2")
    rng = KeyedRng(seed)
    grads, objs = [], []
    for rep in range(n_repeats):
        key = 0 if frozen else rep
        draw = draw_batch(d, M, N, p, rng.stream(key, PROBE), rng.stream(key, PROBE + 1))
        obj, g = _batch_gradient(pi_net, c_net, p, draw)
        grads.append(g)
        objs.append(obj)
    G = np.stack(grads)
    objs = np.asarray(objs)
    # shifted-data variance: exact zero for identical repeats, less cancellation otherwise
    out = ProbeSummary(G.mean(0), (G - G[0]).var(0, ddof=1), float(objs.mean()),
                       float((objs - objs[0]).var(ddof=1)))
    if reference_M:
        acc, done, part = None, 0, 0
        while done < reference_M:
            m = min(chunk, reference_M - done)
            draw = draw_batch(d, m, N, p, rng.stream(10**6 + part, PROBE),
                              rng.stream(10**6 + part, PROBE + 1))
            _, g = _batch_gradient(pi_net, c_net, p, draw)
            acc = g * m if acc is None else acc + g * m
            done += m
            part += 1
        ref = acc / reference_M
        # both the repeat mean and the reference carry sampling noise
        se = np.sqrt(out.var / n_repeats + out.var * M / reference_M)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, (out.mean - ref) / se, 0.0)
        out.reference, out.z = ref, z
    return out
