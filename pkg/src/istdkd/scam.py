"""Semantic-conditioned affine modulation of CNN feature maps.

A pooled VFM vector ``g`` is mapped per layer to a channel scale and bias. The
raw scale passes through a gated residual squash ``1 + tanh(raw * u)`` so every
effective scale stays in (0, 2), and the features are modulated as
``f + (gamma - 1) * f + beta``.
"""
from __future__ import annotations

import torch
from torch import nn

from .errors import ShapeError
from .vfm import FusionWeights, TapHead


class ScamLayer(nn.Module):
    def __init__(self, layer_index, channels, dim=384, hidden=64, gate_init=0.1):
        super().__init__()
        self.layer_index = layer_index
        self.channels = channels
        self.generator = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, 2 * channels),
        )
        # zero output layer: training starts from exact identity modulation
        nn.init.zeros_(self.generator[2].weight)
        nn.init.zeros_(self.generator[2].bias)
        self.gate = nn.Parameter(torch.full((channels,), float(gate_init)))

    def forward(self, g):
        return affine_params(g, self)


def gated_scale(gamma_raw, gate):
    return 1.0 + torch.tanh(gamma_raw * gate)


def affine_params(g, layer):
    out = layer.generator(g)
    gamma_raw, beta = out.split(layer.channels, dim=-1)
    return gated_scale(gamma_raw, layer.gate), beta


def modulate(f, gamma, beta):
    """Residual channel-wise affine: ``f + ((gamma - 1) * f + beta)``.

    ``f`` is ``(C, h, w)`` or ``(B, C, h, w)``; ``gamma``/``beta`` are ``(C,)``
    or ``(B, C)``.
    """
    c = f.shape[-3]
    if gamma.shape[-1] != c or beta.shape[-1] != c:
        raise ShapeError(f"affine params for {gamma.shape[-1]} channels, features have {c}")
    gamma = gamma[..., :, None, None]
    beta = beta[..., :, None, None]
    delta = (gamma - 1.0) * f + beta
    return f + delta


def gate_sparsity(layers):
    layers = list(layers)
    if not layers:
        raise ValueError("gate_sparsity needs at least one layer")
    return sum(layer.gate.abs().sum() for layer in layers)


class ScamModulator(nn.Module):
    """All teacher-side parameters: depth fusion, TAP head and one SCAM layer per hook."""

    def __init__(self, hook_channels, n_blocks=12, dim=384, hidden=64, gate_init=0.1):
        super().__init__()
        self.fusion = FusionWeights(n_blocks)
        self.tap = TapHead(dim)
        self.layers = nn.ModuleList(
            ScamLayer(i, c, dim=dim, hidden=hidden, gate_init=gate_init)
            for i, c in enumerate(hook_channels)
        )

    def semantic_vector(self, blocks):
        """``(B, K, N, d)`` tokens -> pooled ``g`` ``(B, d)`` and attention ``(B, N)``."""
        return self.tap(self.fusion(blocks))

    def affine(self, g):
        return [layer(g) for layer in self.layers]

    def r_gate(self):
        return gate_sparsity(self.layers)
