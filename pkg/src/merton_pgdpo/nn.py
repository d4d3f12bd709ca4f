"""Policy networks and the Adam optimizer.

Both policies are small fully connected Leaky-ReLU networks on the input
``(t / T, x)``.  The investment head returns the final linear output
clipped to ``[-PI_BOUND, PI_BOUND]``; the consumption head returns
``softplus(z) * x`` so that consumption is positive and scales with wealth.

A network is a ``torch.nn.Module`` in double precision for batched
training.  The same parameters can be replayed on a scalar
:class:`~merton_pgdpo.autodiff.Tape` via :func:`policy_eval`, which is what
the small-instance gradient checks use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from . import autodiff as ad
from .errors import NumericError, UsageError

INVEST = "identity"
CONSUME = "softplus"
HEADS = (INVEST, CONSUME)

LEAKY_SLOPE = 0.01
PI_BOUND = 10.0

DTYPE = torch.float64


def softplus(z: torch.Tensor) -> torch.Tensor:
    """Overflow-safe softplus matching :func:`autodiff.softplus`."""
    out = torch.clamp_min(z, 0.0) + torch.log1p(torch.exp(-torch.abs(z)))
    return torch.clamp_min(out, ad.SOFTPLUS_TINY)


class Mlp(torch.nn.Module):
    """Feed-forward policy network mapping (t, x) to one control."""

    def __init__(self, layer_sizes: Sequence[int], head: str, horizon: float = 1.0,
                 slope: float = LEAKY_SLOPE):
        super().__init__()
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or sizes[0] != 2 or sizes[-1] != 1 or min(sizes) < 1:
            raise UsageError(f"layer sizes must run from 2 inputs to 1 output, got {sizes}")
        if head not in HEADS:
            raise UsageError(f"unknown head {head!r}")
        if not 0.0 < slope < 1.0:
            raise UsageError("leaky slope must lie in (0, 1)")
        self.layer_sizes = sizes
        self.head = head
        self.horizon = float(horizon)
        self.slope = float(slope)
        self.layers = torch.nn.ModuleList(
            torch.nn.Linear(a, b, dtype=torch.float64) for a, b in zip(sizes[:-1], sizes[1:])
        )

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def raw(self, t: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        h = torch.stack([t / self.horizon, x], dim=-1)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = torch.nn.functional.leaky_relu(h, self.slope, inplace=True)
        return h.squeeze(-1)

    def forward(self, t: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        z = self.raw(t, x)
        if self.head == CONSUME:
            return softplus(z) * x
        return torch.clamp(z, -PI_BOUND, PI_BOUND)


def mlp_init(layer_sizes: Sequence[int], head: str, seed: int, horizon: float = 1.0,
             slope: float = LEAKY_SLOPE) -> Mlp:
    """Build a network with U(-sqrt(6/fan_in), +sqrt(6/fan_in)) weights and zero biases."""
    net = Mlp(layer_sizes, head, horizon, slope)
    rng = np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), 0x6E6E]))
    with torch.no_grad():
        for layer in net.layers:
            fan_out, fan_in = layer.weight.shape
            bound = math.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            layer.weight.copy_(torch.from_numpy(w))
            layer.bias.zero_()
    return net


class ClosedFormPolicy(torch.nn.Module):
    """Wraps an analytic policy ``fn(t, x)`` so it can stand in for an Mlp."""

    def __init__(self, fn, head: str):
        super().__init__()
        self.fn = fn
        self.head = head

    def forward(self, t, x):
        return self.fn(t, x)


# --- scalar tape evaluation -------------------------------------------------

def bind(net: Mlp, tape: ad.Tape) -> list[tuple[list[list[ad.Var]], list[ad.Var]]]:
    """Leaf Vars for the parameters of ``net`` on ``tape`` (cached per tape)."""
    cache = tape.__dict__.setdefault("_bound", {})
    key = id(net)
    if key not in cache:
        layers = []
        for layer in net.layers:
            w = layer.weight.detach().numpy()
            b = layer.bias.detach().numpy()
            layers.append(([[tape.var(v) for v in row] for row in w], [tape.var(v) for v in b]))
        cache[key] = (net, layers)
    return cache[key][1]


def param_vars(net: Mlp, tape: ad.Tape) -> list[ad.Var]:
    """Flat parameter leaves in the same order as ``flat_params(net)``."""
    out = []
    for w, b in bind(net, tape):
        for row in w:
            out.extend(row)
        out.extend(b)
    return out


def policy_eval(net, t: float, x, tape: ad.Tape):
    """Record one forward pass of ``net`` at (t, x) on ``tape``.

    ``x`` may be a float or a Var (wealth is usually a Var carrying the
    state's history).  ``net`` may also be a :class:`ClosedFormPolicy` whose
    function accepts Vars.
    """
    xv = x.value if isinstance(x, ad.Var) else float(x)
    if not (math.isfinite(t) and math.isfinite(xv)):
        raise NumericError(f"non-finite policy input t={t}, x={xv}")
    if isinstance(net, ClosedFormPolicy):
        return net.fn(t, x)
    h = [t / net.horizon, x]
    layers = bind(net, tape)
    for li, (w, b) in enumerate(layers):
        nxt = []
        for row, bias in zip(w, b):
            acc = bias
            for wij, hj in zip(row, h):
                acc = acc + wij * hj
            if li < len(layers) - 1:
                acc = ad.leaky_relu(acc, net.slope)
            nxt.append(acc)
        h = nxt
    z = h[0]
    if net.head == CONSUME:
        return ad.softplus(z) * x
    return ad.minimum(ad.maximum(z, -PI_BOUND), PI_BOUND)


# --- parameters as flat vectors ---------------------------------------------

def flat_params(net: torch.nn.Module) -> np.ndarray:
    """Row-major concatenation of (W, b) for each layer."""
    return np.concatenate([p.detach().numpy().ravel() for p in net.parameters()])


def set_flat_params(net: torch.nn.Module, vec) -> None:
    vec = np.asarray(vec, dtype=np.float64)
    i = 0
    with torch.no_grad():
        for p in net.parameters():
            n = p.numel()
            p.copy_(torch.from_numpy(vec[i:i + n].reshape(p.shape)))
            i += n
    if i != vec.size:
        raise UsageError(f"expected {i} parameters, got {vec.size}")


# --- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor], **kw) -> "AdamState":
        return cls([torch.zeros_like(p) for p in params],
                    [torch.zeros_like(p) for p in params], **kw)

    def copy(self) -> "AdamState":
        return AdamState([m.clone() for m in self.m], [v.clone() for v in self.v],
                         self.step, self.beta1, self.beta2, self.eps)


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam step of gradient *ascent*, in place.

    Raises NumericError, leaving params and state untouched, if any
    gradient is non-finite.
    """
    if lr <= 0:
        raise UsageError("learning rate must be positive")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise UsageError("params, grads and state must have matching lengths")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise UsageError(f"shape mismatch at tensor {i}: {tuple(p.shape)} vs {tuple(g.shape)}")
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient in tensor {i}; update aborted")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / bc2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=lr / bc1)
