"""Leaky integrate-and-fire neurons.

Two flavours live here.  The numpy ``LifState``/``LifLayer`` pair is a plain
step-by-step reference used for verification and small simulations.  The
torch pieces (``spike``, ``bernoulli_st``, ``LIFNode``) are what the trainable
models are built from: a Heaviside spike whose backward pass is a
fast-sigmoid surrogate, and a straight-through Bernoulli sampler.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import torch
from torch import nn

DEFAULT_BETA = 0.9
DEFAULT_THRESHOLD = 1.0
DEFAULT_WIDTH = 1.0


@dataclass
class LifState:
    membrane: np.ndarray
    beta: float = DEFAULT_BETA
    v_thresh: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        self.membrane = np.asarray(self.membrane, dtype=np.float64)
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")
        if not self.v_thresh > 0:
            raise ValueError("threshold must be positive")

    @classmethod
    def zeros(cls, n: int, beta: float = DEFAULT_BETA, v_thresh: float = DEFAULT_THRESHOLD) -> "LifState":
        return cls(np.zeros(n), beta, v_thresh)

    def reset(self) -> None:
        self.membrane[...] = 0.0


def lif_step(state: LifState, input_current: np.ndarray) -> np.ndarray:
    """Advance one time step in place and return the boolean spike vector."""
    current = np.asarray(input_current, dtype=np.float64)
    if current.shape != state.membrane.shape:
        raise ValueError("input current does not match the neuron count")
    if not np.all(np.isfinite(current)):
        raise ValueError("input current must be finite")
    v = state.beta * state.membrane + current
    fired = v >= state.v_thresh
    v[fired] = 0.0
    state.membrane = v
    return fired


@dataclass
class LifLayer:
    weights: np.ndarray
    state: LifState = field(default=None)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("weights must be a matrix")
        if self.state is None:
            self.state = LifState.zeros(self.n_out)
        if self.state.membrane.shape != (self.n_out,):
            raise ValueError("state size does not match weight rows")

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    def current(self, x_in: np.ndarray) -> np.ndarray:
        """``W @ x_in`` for binary ``x_in`` as a sum of the selected columns."""
        x_in = np.asarray(x_in)
        if x_in.shape != (self.n_in,):
            raise ValueError("input size does not match weight columns")
        if x_in.dtype != np.bool_:
            if not np.isin(x_in, (0, 1)).all():
                raise ValueError("LIF layer input must be binary")
            x_in = x_in.astype(np.bool_)
        return self.weights[:, x_in].sum(axis=1)

    def reset(self) -> None:
        self.state.reset()


def lif_layer_forward(layer: LifLayer, x_in: np.ndarray) -> np.ndarray:
    return lif_step(layer.state, layer.current(x_in))


def reset_states(network) -> None:
    """Zero every membrane in ``network``.

    Accepts a torch module (all ``LIFNode`` children), a single layer or
    state, or an iterable of those.
    """
    if isinstance(network, nn.Module):
        for mod in network.modules():
            if isinstance(mod, LIFNode):
                mod.reset()
        return
    if isinstance(network, (LifLayer, LifState)):
        network.reset()
        return
    if isinstance(network, Iterable):
        for item in network:
            reset_states(item)
        return
    raise TypeError(f"cannot reset {type(network).__name__}")


def surrogate_spike_grad(v_minus_thresh, width: float = DEFAULT_WIDTH):
    """Fast-sigmoid surrogate ``1 / (width * (1 + |v / width|)**2)``."""
    if width <= 0:
        raise ValueError("surrogate width must be positive")
    x = np.abs(np.asarray(v_minus_thresh, dtype=np.float64)) / width
    return 1.0 / (width * (1.0 + x) ** 2)


class _Spike(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, width, relaxed):
        ctx.save_for_backward(x)
        ctx.width = width
        if relaxed:
            z = x / width
            return 0.5 + z / (1.0 + z.abs())
        return (x >= 0).to(x.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (x,) = ctx.saved_tensors
        w = ctx.width
        sg = 1.0 / (w * (1.0 + x.abs() / w) ** 2)
        return grad_out * sg, None, None


def spike(x: torch.Tensor, width: float = DEFAULT_WIDTH, relaxed: bool = False) -> torch.Tensor:
    """Heaviside step of ``x = v - v_thresh`` with surrogate backward.

    ``relaxed=True`` swaps the forward pass for the smooth function whose
    derivative is exactly the surrogate, which makes finite differences
    meaningful (gradient verification only).
    """
    return _Spike.apply(x, width, relaxed)


def bernoulli_st(p: torch.Tensor, generator: torch.Generator | None = None, u: torch.Tensor | None = None) -> torch.Tensor:
    """Draw ``Bern(p)`` bits; the backward pass treats the draw as identity in ``p``."""
    if u is None:
        u = torch.rand(p.shape, generator=generator, dtype=p.dtype, device=p.device)
    bits = (u < p).to(p.dtype)
    if p.requires_grad:
        # (p - p.detach()) is exactly zero, so the forward value stays binary
        return bits + (p - p.detach())
    return bits


class LIFNode(nn.Module):
    """Stateful LIF nonlinearity: ``V <- beta V + I``; spike and reset to 0 at threshold.

    The membrane persists across calls until ``reset()``; shape is taken from
    the first input after a reset.
    """

    def __init__(self, beta: float = DEFAULT_BETA, v_thresh: float = DEFAULT_THRESHOLD,
                 width: float = DEFAULT_WIDTH, relaxed: bool = False):
        super().__init__()
        if not 0.0 < beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")
        self.beta = beta
        self.v_thresh = v_thresh
        self.width = width
        self.relaxed = relaxed
        self.v: torch.Tensor | None = None

    def reset(self) -> None:
        self.v = None

    def forward(self, current: torch.Tensor) -> torch.Tensor:
        v = current if self.v is None else self.beta * self.v + current
        s = spike(v - self.v_thresh, self.width, self.relaxed)
        self.v = v * (1.0 - s)
        return s

    def extra_repr(self) -> str:
        return f"beta={self.beta}, v_thresh={self.v_thresh}, width={self.width}"
