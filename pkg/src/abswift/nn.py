"""Shared neural-network primitives: dense layers, GeLU, layer norm, init.

Everything downstream (attention, supernode pooling, encoders, decoder heads)
is built from these pieces so that initialization and parameter counting stay
in one place.
"""

from __future__ import annotations

import math

import torch
from torch import nn


class ShapeError(ValueError):
    """Raised when an input's trailing dimension does not match a layer."""


def gelu(x):
    """Exact GeLU: x * Phi(x), with Phi the standard normal CDF (erf form)."""
    if isinstance(x, torch.Tensor):
        return x * 0.5 * (1.0 + torch.erf(x / math.sqrt(2.0)))
    return x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


class Gelu(nn.Module):
    def forward(self, x):
        return gelu(x)


class MlpBlock(nn.Module):
    """Dense -> GeLU -> Dense with a single hidden layer."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.d_in = d_in
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(
                f"MlpBlock expected input dimension {self.d_in}, got {x.shape[-1]}"
            )
        return self.fc2(gelu(self.fc1(x)))


def init_weights_(module: nn.Module, generator: torch.Generator) -> None:
    """Initialize all Linear weights N(0, 0.02) and biases to zero.

    LayerNorm weights keep their (1, 0) default. Deterministic given the
    generator state; submodules are visited in registration order.
    """
    for m in module.modules():
        if isinstance(m, nn.Linear):
            with torch.no_grad():
                m.weight.normal_(0.0, 0.02, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


def count_parameters(module: nn.Module) -> int:
    """Number of trainable scalars in a module."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
