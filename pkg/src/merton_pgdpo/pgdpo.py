"""Pontryagin-guided direct policy optimisation.

``train_pgdpo`` maximises the simulated extended objective by plain
backpropagation through time.  ``train_pgdpo_reg`` additionally extracts the
single-path adjoint (lambda_0, d lambda_0 / dx) at every initial node,
converts it into Pontryagin controls and penalises the policies' distance
from them.

``explicit_gradient_oracle`` assembles the parameter gradient from per-step
adjoints instead of a single backward pass.  It exists to test the trainer's
gradients and is never used in the training loop.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from . import autodiff as ad
from .errors import NumericError, UsageError
from .model import Domain, MarketParams, utility_prime
from .nn import CONSUME, DTYPE, INVEST, AdamState, adam_step, mlp_init
from .rng import KeyedRng
from .sim import (BatchDraw, RolloutBatch, draw_for_iteration, euler_step_partials, pairwise_mean,
                  pairwise_sum, simulate)

log = logging.getLogger(__name__)

DLAMBDA_MIN = 1e-12
MAX_CONSECUTIVE_FAILURES = 3

PGDPO = "pgdpo"
PGDPO_REG = "pgdpo-reg"
ALGORITHMS = (PGDPO, PGDPO_REG)


@dataclass
class AdjointEstimate:
    """Single-path adjoint at the initial node (scalars or length-M arrays)."""

    lambda0: object
    dlambda0_dx: object
    t0: object
    x0: object


@dataclass
class PmpControls:
    c_pmp: object
    pi_pmp: object
    valid: object  # paths whose adjoint defines both controls

    @property
    def n_excluded(self) -> int:
        return int(np.size(self.valid) - np.count_nonzero(self.valid))


# --- adjoints and Pontryagin controls ---------------------------------------

def adjoint_at_origin(J, x0, t0=None) -> AdjointEstimate:
    """lambda_0 = dJ/dx0 and its derivative d^2 J / dx0^2, path by path.

    Tape mode: ``J`` and ``x0`` are Vars (or equal-length lists of Vars).
    Torch mode: ``J`` is a length-M tensor and ``x0`` the leaf tensor it was
    simulated from; the graph is retained so the caller can still
    backpropagate through ``J``.
    """
    if isinstance(J, torch.Tensor):
        lam = torch.autograd.grad(J.sum(), x0, create_graph=True, retain_graph=True)[0]
        dlam = torch.autograd.grad(lam.sum(), x0, retain_graph=True)[0]
        t0v = None if t0 is None else np.asarray(t0, dtype=np.float64)
        return AdjointEstimate(lam.detach().numpy().copy(), dlam.numpy().copy(), t0v,
                               x0.detach().numpy().copy())
    if isinstance(J, ad.Var):
        lam_var = ad.grad_as_var(J, x0)
        lam = ad.grad(J, [x0])[0]
        dlam = ad.grad(lam_var, [x0])[0] if isinstance(lam_var, ad.Var) else 0.0
        return AdjointEstimate(lam, dlam, t0, x0.value)
    Js, x0s = list(J), list(x0)
    if len(Js) != len(x0s):
        raise UsageError("J and x0 lists differ in length")
    ests = [adjoint_at_origin(j, x) for j, x in zip(Js, x0s)]
    return AdjointEstimate(np.array([e.lambda0 for e in ests]),
                           np.array([e.dlambda0_dx for e in ests]),
                           None if t0 is None else np.asarray(t0, dtype=np.float64),
                           np.array([e.x0 for e in ests]))


def pmp_controls(a: AdjointEstimate, p: MarketParams) -> PmpControls:
    """Consumption (e^{rho t0} lambda0)^(-1/gamma) and investment
    -(mu - r) / (sigma^2 x0) * lambda0 / dlambda0.

    Paths with lambda0 <= 0, |dlambda0| < 1e-12 or non-finite inputs get
    NaN controls and ``valid = False``.
    """
    scalar = np.ndim(a.lambda0) == 0
    lam = np.atleast_1d(np.asarray(a.lambda0, dtype=np.float64))
    dlam = np.atleast_1d(np.asarray(a.dlambda0_dx, dtype=np.float64))
    x0 = np.atleast_1d(np.asarray(a.x0, dtype=np.float64))
    t0 = np.zeros_like(lam) if a.t0 is None else np.atleast_1d(np.asarray(a.t0, dtype=np.float64))
    valid = np.isfinite(lam) & np.isfinite(dlam) & (lam > 0) & (np.abs(dlam) >= DLAMBDA_MIN)
    with np.errstate(all="ignore"):
        c = np.where(valid, (np.exp(p.rho * t0) * lam) ** (-1.0 / p.gamma), np.nan)
        pi = np.where(valid, -(p.mu - p.r) / (p.sigma**2 * x0) * lam / dlam, np.nan)
    valid &= np.isfinite(c) & np.isfinite(pi)
    if scalar:
        return PmpControls(float(c[0]), float(pi[0]), bool(valid[0]))
    return PmpControls(c, pi, valid)


def alignment_penalty(c_policy, pi_policy, target: PmpControls, alpha_C: float, alpha_pi: float):
    """alpha_C * mean|c - c_pmp| + alpha_pi * mean|pi - pi_pmp| over valid paths.

    Targets are constants: no gradient flows through them.  Accepts torch
    tensors (one entry per path) or lists of Vars.
    """
    if alpha_C < 0 or alpha_pi < 0:
        raise UsageError("penalty weights must be nonnegative")
    valid = np.atleast_1d(np.asarray(target.valid, dtype=bool))
    c_t = np.atleast_1d(np.asarray(target.c_pmp, dtype=np.float64))
    pi_t = np.atleast_1d(np.asarray(target.pi_pmp, dtype=np.float64))
    idx = np.flatnonzero(valid)
    if isinstance(c_policy, torch.Tensor):
        if idx.size == 0:
            return c_policy.sum() * 0.0
        sel = torch.from_numpy(idx)
        dc = (c_policy[sel] - torch.from_numpy(c_t[idx])).abs()
        dpi = (pi_policy[sel] - torch.from_numpy(pi_t[idx])).abs()
        return pairwise_mean(dc) * alpha_C + pairwise_mean(dpi) * alpha_pi
    cs = c_policy if isinstance(c_policy, (list, tuple)) else [c_policy]
    pis = pi_policy if isinstance(pi_policy, (list, tuple)) else [pi_policy]
    if idx.size == 0:
        return 0.0
    dc = [_abs(cs[i] - c_t[i]) for i in idx]
    dpi = [_abs(pis[i] - pi_t[i]) for i in idx]
    return pairwise_mean(dc) * alpha_C + pairwise_mean(dpi) * alpha_pi


def _abs(v):
    return ad.maximum(v, -v) if isinstance(v, ad.Var) else abs(v)


# --- explicit adjoint-weighted gradient (test oracle) ------------------------

PATHWISE = "pathwise"
ITO = "ito"


def step_adjoints(batch: RolloutBatch, second_order: bool = False):
    """Per-step lambda_k = dJ/dX_k (k = 0..N) and optionally d lambda_k / dX_k (k < N)."""
    lam = torch.autograd.grad(batch.J.sum(), batch.X, create_graph=second_order, retain_graph=True)
    dlam = None
    if second_order:
        dlam = [torch.autograd.grad(lam[k].sum(), batch.X[k], retain_graph=True)[0]
                for k in range(batch.draw.N)]
    return lam, dlam


def explicit_gradient_oracle(batch: RolloutBatch, pi_net, c_net, p: MarketParams,
                             form: str = PATHWISE, limit: tuple | None = (8, 10, 8)):
    """Parameter gradients of J_hat assembled from per-step adjoints.

    ``form="pathwise"`` weights the policy sensitivities with the discrete
    adjoint lambda_{k+1} of each Euler step, so under frozen noise it equals
    the BPTT gradient to rounding.  ``form="ito"`` uses the continuous-time
    weights (lambda_k (mu - r) X_k + Z_k sigma X_k) dt and
    (e^{-rho t_k} U'(C_k) - lambda_k) dt with Z_k = sigma pi_k X_k dlambda_k;
    it agrees with BPTT only in expectation.

    Returns ``(grads_pi, grads_c)``, lists shaped like the parameters.
    """
    draw = batch.draw
    if limit is not None:
        m_max, n_max, w_max = limit
        widths = [w for net in (pi_net, c_net) for w in getattr(net, "layer_sizes", [1])[1:-1]]
        if draw.M > m_max or draw.N > n_max or any(w > w_max for w in widths):
            raise UsageError(f"oracle is limited to M<={m_max}, N<={n_max}, widths<={w_max}")
    if form not in (PATHWISE, ITO):
        raise UsageError(f"unknown form {form!r}")
    lam, dlam = step_adjoints(batch, second_order=(form == ITO))
    t0 = torch.tensor(draw.t0, dtype=DTYPE)
    dt = torch.tensor(draw.dt, dtype=DTYPE)
    dW = torch.tensor(draw.dW, dtype=DTYPE)
    w_pi, w_c, ts, xs = [], [], [], []
    with torch.no_grad():
        for k in range(draw.N):
            t = t0 + k * dt
            x = batch.X[k].detach()
            pi = batch.pi[k].detach()
            c = batch.c[k].detach()
            running = torch.exp(-p.rho * t) * utility_prime(c, p.gamma) * dt
            if form == PATHWISE:
                f_pi, f_c = euler_step_partials(x, pi, c, dt, dW[:, k], p)
                w_pi.append(lam[k + 1].detach() * f_pi)
                w_c.append(running + lam[k + 1].detach() * f_c)
            else:
                lk = lam[k].detach()
                z = p.sigma * pi * x * dlam[k]
                w_pi.append((lk * (p.mu - p.r) * x + z * p.sigma * x) * dt)
                w_c.append(running - lk * dt)
            ts.append(t)
            xs.append(x)
    t_all, x_all = torch.cat(ts), torch.cat(xs)
    inv_m = 1.0 / draw.M
    out = []
    for net, w in ((pi_net, w_pi), (c_net, w_c)):
        params = list(net.parameters())
        # per-node differentiation: the policy is re-evaluated at detached states
        surrogate = (net(t_all, x_all) * torch.cat(w)).sum() * inv_m
        out.append(list(torch.autograd.grad(surrogate, params)))
    return out[0], out[1]


# --- training ---------------------------------------------------------------

@dataclass
class TrainConfig:
    iters: int = 100_000
    batch: int = 10_000
    steps: int = 100
    lr_pi: float = 1e-3
    lr_c: float = 1e-5
    alpha_c: float = 1e-3
    alpha_pi: float = 1e-1
    seed: int = 0
    hidden: tuple = (200, 200)
    metric_iters: tuple = (1_000, 10_000, 50_000, 100_000)
    metric_every: int = 0
    eval_rollouts: int = 500
    eval_grid: tuple = (101, 101)
    checkpoint_every: int = 1_000
    keep_last: int = 3
    dump_paths: int = 0

    def __post_init__(self):
        from .errors import ConfigError

        self.hidden = tuple(int(h) for h in self.hidden)
        self.metric_iters = tuple(int(i) for i in self.metric_iters)
        self.eval_grid = tuple(int(g) for g in self.eval_grid)
        for name in ("iters", "metric_every", "checkpoint_every", "dump_paths"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        for name in ("batch", "steps", "eval_rollouts", "keep_last"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        for name in ("lr_pi", "lr_c"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be > 0")
        for name in ("alpha_c", "alpha_pi"):
            if not getattr(self, name) >= 0:
                raise ConfigError(name, "must be >= 0")
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError("hidden", "need at least one positive layer width")
        if len(self.eval_grid) != 2 or min(self.eval_grid) < 2:
            raise ConfigError("eval_grid", "need at least a 2x2 grid")

    def is_metric_iter(self, it: int) -> bool:
        return it in self.metric_iters or (self.metric_every > 0 and it % self.metric_every == 0)

    def to_dict(self) -> dict:
        return asdict(self)


METRIC_COLUMNS = ("iter", "relmse_c", "relmse_pi", "empirical_utility", "penalty_mean", "excluded_frac")


@dataclass
class StepInfo:
    iteration: int
    J_hat: float
    penalty: float = 0.0
    excluded_frac: float = 0.0
    batch: RolloutBatch | None = None
    wallclock: float = 0.0


class TrainingAborted(NumericError):
    pass


class Trainer:
    """Holds both policies, their Adam states and the metric history.

    ``iteration`` counts completed iterations; iteration ``k`` (0-based)
    draws its batch from the random streams keyed by ``k``, so a trainer
    restored from a checkpoint continues with exactly the draws an
    uninterrupted run would have used.
    """

    def __init__(self, cfg: TrainConfig, p: MarketParams, d: Domain, algo: str = PGDPO,
                 pi_net=None, c_net=None):
        if algo not in ALGORITHMS:
            raise UsageError(f"unknown algorithm {algo!r}")
        d.check(p)
        self.cfg, self.p, self.d, self.algo = cfg, p, d, algo
        sizes = [2, *cfg.hidden, 1]
        self.pi_net = pi_net if pi_net is not None else mlp_init(sizes, INVEST, cfg.seed * 2 + 1, p.T)
        self.c_net = c_net if c_net is not None else mlp_init(sizes, CONSUME, cfg.seed * 2 + 2, p.T)
        self.pi_params = list(self.pi_net.parameters())
        self.c_params = list(self.c_net.parameters())
        self.adam_pi = AdamState.zeros_like(self.pi_params)
        self.adam_c = AdamState.zeros_like(self.c_params)
        self.rng = KeyedRng(cfg.seed)
        self.iteration = 0
        self.history: list[dict] = []
        self.failures = 0
        self.last: StepInfo | None = None
        self.elapsed = 0.0
        self.timings: list[tuple[int, float]] = []

    @property
    def regularized(self) -> bool:
        return self.algo == PGDPO_REG

    def step(self) -> StepInfo:
        """Run one iteration; on numeric trouble skip it (abort after three in a row)."""
        k = self.iteration
        try:
            info = self._step(k)
        except NumericError as e:
            self.failures += 1
            log.warning("iteration %d skipped: %s", k, e)
            self.iteration += 1
            if self.failures >= MAX_CONSECUTIVE_FAILURES:
                raise TrainingAborted(f"{self.failures} consecutive failed iterations, last: {e}") from e
            info = StepInfo(k, float("nan"))
        else:
            self.failures = 0
            self.iteration += 1
        self.last = info
        return info

    def _step(self, k: int) -> StepInfo:
        cfg, p = self.cfg, self.p
        draw = draw_for_iteration(self.rng, k, self.d, cfg.batch, cfg.steps, p)
        batch = simulate(self.pi_net, self.c_net, draw, p)
        objective = batch.J_hat
        penalty, excluded = 0.0, 0.0
        if self.regularized:
            adj = adjoint_at_origin(batch.J, batch.x0, draw.t0)
            target = pmp_controls(adj, p)
            pen = alignment_penalty(batch.c[0], batch.pi[0], target, cfg.alpha_c, cfg.alpha_pi)
            objective = objective - pen
            penalty = float(pen.detach())
            excluded = target.n_excluded / draw.M
        grads = torch.autograd.grad(objective, self.pi_params + self.c_params)
        n = len(self.pi_params)
        g_pi, g_c = grads[:n], grads[n:]
        # check both before touching either network
        for g in grads:
            if not bool(torch.isfinite(g).all()):
                raise NumericError(f"non-finite gradient at iteration {k}")
        adam_step(self.pi_params, g_pi, self.adam_pi, cfg.lr_pi)
        adam_step(self.c_params, g_c, self.adam_c, cfg.lr_c)
        keep = batch if cfg.dump_paths else None
        return StepInfo(k, float(batch.J_hat.detach()), penalty, excluded, keep)

    def evaluate(self):
        from .evaluation import metrics_report

        return metrics_report(self.pi_net, self.c_net, self.p, self.d, self.iteration, self.cfg.seed,
                              n_rollouts=self.cfg.eval_rollouts, N=self.cfg.steps,
                              grid=self.cfg.eval_grid)

    def run(self, until: int | None = None, on_step: Callable[["Trainer", StepInfo], None] | None = None):
        """Iterate until ``until`` (default ``cfg.iters``) iterations are complete."""
        until = self.cfg.iters if until is None else until
        while self.iteration < until:
            t_start = time.perf_counter()
            info = self.step()
            if self.cfg.is_metric_iter(self.iteration):
                rep = self.evaluate()
                row = {"iter": self.iteration, "relmse_c": rep.relmse_c, "relmse_pi": rep.relmse_pi,
                       "empirical_utility": rep.empirical_utility,
                       "penalty_mean": info.penalty, "excluded_frac": info.excluded_frac}
                self.history.append(row)
                log.info("iter %d relmse_c=%.3e relmse_pi=%.3e J=%.5f", self.iteration,
                         rep.relmse_c, rep.relmse_pi, rep.empirical_utility)
                self.timings.append((self.iteration, self.elapsed + time.perf_counter() - t_start))
            self.elapsed += time.perf_counter() - t_start
            info.wallclock = self.elapsed
            if on_step is not None:
                on_step(self, info)
        return self


@dataclass
class TrainResult:
    pi_net: torch.nn.Module
    c_net: torch.nn.Module
    history: list
    trainer: Trainer = field(repr=False, default=None)


def train_pgdpo(cfg: TrainConfig, p: MarketParams, d: Domain, **kw) -> TrainResult:
    """PG-DPO: BPTT ascent on the extended objective, no alignment penalty."""
    tr = Trainer(cfg, p, d, PGDPO).run(**kw)
    return TrainResult(tr.pi_net, tr.c_net, tr.history, tr)


def train_pgdpo_reg(cfg: TrainConfig, p: MarketParams, d: Domain, **kw) -> TrainResult:
    """PG-DPO-Reg: ascent on J_hat minus the Pontryagin alignment penalty."""
    tr = Trainer(cfg, p, d, PGDPO_REG).run(**kw)
    return TrainResult(tr.pi_net, tr.c_net, tr.history, tr)
