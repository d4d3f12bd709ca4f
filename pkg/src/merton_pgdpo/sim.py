"""Initial-node sampling and Euler-Maruyama rollouts of the wealth SDE.

Two engines share the same arithmetic:

* the batched torch engine (``tape=None``), used for training, where every
  quantity is a length-M tensor and the graph is recorded by torch autograd;
* the scalar tape engine (``tape=Tape()``), one path at a time, used as an
  independent differentiation route on small instances.

Both consume the same :class:`BatchDraw`, so with identical draws they
simulate identical paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import autodiff as ad
from .errors import NumericError, UsageError
from .model import Domain, MarketParams, utility
from .nn import DTYPE, policy_eval, softplus
from .rng import BROWNIAN, NODES, Stream

WEALTH_FLOOR = 1e-6
FLOOR_WIDTH = 1e-6
CONSUMPTION_CAP = 0.99


@dataclass(frozen=True)
class InitialNode:
    t0: float
    x0: float


@dataclass
class BatchDraw:
    """Initial nodes and frozen Brownian increments for M paths of N steps."""

    t0: np.ndarray
    x0: np.ndarray
    dW: np.ndarray  # (M, N), already scaled by sqrt(dt)
    T: float

    @property
    def M(self) -> int:
        return self.t0.shape[0]

    @property
    def N(self) -> int:
        return self.dW.shape[1]

    @property
    def dt(self) -> np.ndarray:
        return (self.T - self.t0) / self.N

    def node(self, i: int) -> InitialNode:
        return InitialNode(float(self.t0[i]), float(self.x0[i]))

    def subset(self, idx) -> "BatchDraw":
        idx = np.atleast_1d(idx)
        return BatchDraw(self.t0[idx], self.x0[idx], self.dW[idx], self.T)


@dataclass
class RolloutBatch:
    """Result of simulating a :class:`BatchDraw`.

    In torch mode ``X`` is a list of N+1 length-M tensors, ``pi`` and ``c``
    lists of N tensors, ``J`` a length-M tensor and ``x0`` the leaf that
    ``J`` is differentiable with respect to.  In tape mode each of these
    holds per-path lists of Vars instead.
    """

    draw: BatchDraw
    x0: object
    X: list
    pi: list
    c: list
    J: object
    J_hat: object
    tape: ad.Tape | None = None
    extra: dict = field(default_factory=dict)


def sample_initial_node(d: Domain, rng) -> InitialNode:
    """One uniform node on the domain; ``rng`` is a :class:`Stream` or numpy Generator."""
    t0, x0 = sample_nodes(d, 1, rng)
    return InitialNode(float(t0[0]), float(x0[0]))


def sample_nodes(d: Domain, M: int, rng) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(rng, Stream):
        u = rng.uniform((M, 2))
    else:
        u = rng.random((M, 2))
    t0 = d.t_min + u[:, 0] * (d.t_max - d.t_min)
    x0 = d.x_min + u[:, 1] * (d.x_max - d.x_min)
    return t0, x0


def draw_batch(d: Domain, M: int, N: int, p: MarketParams, node_rng: Stream,
               noise_rng: Stream) -> BatchDraw:
    if M < 1 or N < 1:
        raise UsageError("need M >= 1 and N >= 1")
    t0, x0 = sample_nodes(d, M, node_rng)
    dt = (p.T - t0) / N
    z = noise_rng.normal((M, N))
    return BatchDraw(t0, x0, z * np.sqrt(dt)[:, None], p.T)


def draw_for_iteration(rng, iteration: int, d: Domain, M: int, N: int, p: MarketParams,
                       node_stream: int = NODES, noise_stream: int = BROWNIAN) -> BatchDraw:
    return draw_batch(d, M, N, p, rng.stream(iteration, node_stream),
                      rng.stream(iteration, noise_stream))


# --- one Euler step ---------------------------------------------------------

def _is_var(x) -> bool:
    return isinstance(x, ad.Var)


def smooth_floor(x):
    """Softplus-smoothed max(x, WEALTH_FLOOR); the identity far above the floor."""
    s = FLOOR_WIDTH
    if _is_var(x):
        return x + ad.softplus((WEALTH_FLOOR - x) * (1.0 / s)) * s
    return x + softplus((WEALTH_FLOOR - x) * (1.0 / s)) * s


def capped_consumption(c, x, dt):
    cap = x * (CONSUMPTION_CAP / dt)
    if _is_var(c):
        return ad.minimum(c, cap)
    return torch.minimum(c, cap)


def euler_step(x, t, pi, c, dt, dW, p: MarketParams):
    """x + [r x + pi (mu - r) x - c] dt + sigma pi x dW, then the wealth floor.

    Works on autodiff Vars (scalars) or torch tensors (one entry per path).
    """
    c_eff = capped_consumption(c, x, dt)
    drift = x * p.r + pi * x * (p.mu - p.r) - c_eff
    y = x + drift * dt + pi * x * dW * p.sigma
    return smooth_floor(y)


def euler_step_partials(x, pi, c, dt, dW, p: MarketParams):
    """Analytic (dF/dpi, dF/dc) of :func:`euler_step` at fixed x (torch tensors)."""
    cap = x * (CONSUMPTION_CAP / dt)
    c_eff = torch.minimum(c, cap)
    y = x + (x * p.r + pi * x * (p.mu - p.r) - c_eff) * dt + pi * x * dW * p.sigma
    floor_d = torch.sigmoid((y - WEALTH_FLOOR) / FLOOR_WIDTH)
    d_pi = floor_d * ((p.mu - p.r) * x * dt + p.sigma * x * dW)
    d_c = floor_d * (-dt) * (c <= cap).to(x.dtype)
    return d_pi, d_c


# --- rollouts ---------------------------------------------------------------

def rollout(pi_net, c_net, node: InitialNode, N: int, p: MarketParams, dW, tape: ad.Tape):
    """Simulate one path on ``tape``; returns ``(J, x0, xs, pis, cs)``.

    ``dW`` holds the N Brownian increments (already scaled by sqrt(dt)), or
    is a :class:`Stream` from which standard normals are drawn.
    """
    if N < 1:
        raise UsageError("N must be >= 1")
    dt = (p.T - node.t0) / N
    if isinstance(dW, Stream):
        dW = dW.normal((N,)) * math.sqrt(dt)
    dW = np.asarray(dW, dtype=np.float64)
    x0 = tape.var(node.x0)
    x = x0
    xs, pis, cs = [x0], [], []
    J = None
    for k in range(N):
        t = node.t0 + k * dt
        pi = policy_eval(pi_net, t, x, tape)
        c = policy_eval(c_net, t, x, tape)
        term = utility(c, p.gamma) * (math.exp(-p.rho * t) * dt)
        J = term if J is None else J + term
        x = euler_step(x, t, pi, c, dt, float(dW[k]), p)
        if not math.isfinite(x.value):
            raise NumericError(f"non-finite wealth at step {k + 1}", step=k + 1)
        xs.append(x)
        pis.append(pi)
        cs.append(c)
    J = J + utility(x, p.gamma) * (p.kappa * math.exp(-p.rho * p.T))
    return J, x0, xs, pis, cs


def simulate(pi_net, c_net, draw: BatchDraw, p: MarketParams, tape: ad.Tape | None = None,
             x0: torch.Tensor | None = None) -> RolloutBatch:
    """Roll out every path of ``draw`` under the given policies."""
    if tape is not None:
        return _simulate_tape(pi_net, c_net, draw, p, tape)
    if x0 is None:
        x0 = torch.tensor(draw.x0, dtype=DTYPE, requires_grad=True)
    t0 = torch.tensor(draw.t0, dtype=DTYPE)
    dt = torch.tensor(draw.dt, dtype=DTYPE)
    dW = torch.tensor(draw.dW, dtype=DTYPE)
    N = draw.N
    x = x0
    X, pis, cs = [x0], [], []
    J = torch.zeros_like(t0)
    for k in range(N):
        t = t0 + k * dt
        pi = pi_net(t, x)
        c = c_net(t, x)
        J = J + utility_nocheck(c, p.gamma) * torch.exp(-p.rho * t) * dt
        x = euler_step(x, t, pi, c, dt, dW[:, k], p)
        X.append(x)
        pis.append(pi)
        cs.append(c)
    J = J + utility_nocheck(x, p.gamma) * (p.kappa * math.exp(-p.rho * p.T))
    if not bool(torch.isfinite(J).all()):
        raise _locate_failure(J, X, cs)
    return RolloutBatch(draw, x0, X, pis, cs, J, pairwise_mean(J))


def utility_nocheck(c, gamma):
    return c ** (1.0 - gamma) / (1.0 - gamma)


def _locate_failure(J, X, cs) -> NumericError:
    with torch.no_grad():
        bad_paths = torch.nonzero(~torch.isfinite(J)).flatten()
        i = int(bad_paths[0])
        for k, x in enumerate(X):
            ok_c = k >= len(cs) or (math.isfinite(float(cs[k][i])) and float(cs[k][i]) > 0)
            if not math.isfinite(float(x[i])) or not ok_c:
                return NumericError(f"path {i} broke down at step {k}", path=i, step=k)
    return NumericError(f"path {i} has a non-finite cost", path=i)


def _simulate_tape(pi_net, c_net, draw: BatchDraw, p: MarketParams, tape: ad.Tape) -> RolloutBatch:
    Js, x0s, Xs, pis, cs = [], [], [], [], []
    for i in range(draw.M):
        try:
            J, x0, xs, pi, c = rollout(pi_net, c_net, draw.node(i), draw.N, p, draw.dW[i], tape)
        except NumericError as e:
            raise NumericError(f"path {i}: {e}", path=i, step=e.step) from e
        Js.append(J)
        x0s.append(x0)
        Xs.append(xs)
        pis.append(pi)
        cs.append(c)
    return RolloutBatch(draw, x0s, Xs, pis, cs, Js, pairwise_mean(Js), tape=tape)


def batch_objective(pi_net, c_net, d: Domain, M: int, N: int, p: MarketParams, rng, iteration: int = 0,
                    tape: ad.Tape | None = None):
    """Empirical extended objective over M fresh nodes; returns ``(J_hat, batch)``.

    ``rng`` is a :class:`~merton_pgdpo.rng.KeyedRng`; the draw is keyed by
    ``iteration``.
    """
    draw = draw_for_iteration(rng, iteration, d, M, N, p)
    batch = simulate(pi_net, c_net, draw, p, tape=tape)
    return batch.J_hat, batch


# --- reductions -------------------------------------------------------------

def pairwise_sum(v):
    """Sum with a fixed pairwise tree, independent of threading.

    Accepts a 1-D tensor or a list of scalars/Vars.
    """
    if isinstance(v, torch.Tensor):
        while v.shape[0] > 1:
            if v.shape[0] % 2:
                v = torch.cat([v, v.new_zeros(1)])
            v = v[0::2] + v[1::2]
        return v[0]
    items = list(v)
    if not items:
        raise UsageError("empty reduction")
    while len(items) > 1:
        nxt = [items[j] + items[j + 1] for j in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


def pairwise_mean(v):
    n = v.shape[0] if isinstance(v, torch.Tensor) else len(v)
    return pairwise_sum(v) * (1.0 / n)


# --- debugging output -------------------------------------------------------

PATH_DUMP_HEADER = ("iter", "path", "k", "t", "x", "pi", "c")


def path_rows(batch: RolloutBatch, iteration: int, n_paths: int):
    """Rows (iter, path, k, t, x, pi, c) for the first ``n_paths`` paths (torch mode)."""
    draw = batch.draw
    with torch.no_grad():
        X = torch.stack([x.detach() for x in batch.X], 1).numpy()
        P = torch.stack([q.detach() for q in batch.pi], 1).numpy()
        C = torch.stack([q.detach() for q in batch.c], 1).numpy()
    for i in range(min(n_paths, draw.M)):
        for k in range(draw.N + 1):
            t = draw.T if k == draw.N else draw.t0[i] + k * draw.dt[i]
            pi = P[i, k] if k < draw.N else float("nan")
            c = C[i, k] if k < draw.N else float("nan")
            yield (iteration, i, k, t, X[i, k], pi, c)
