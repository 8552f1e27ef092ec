"""Sandwich stacks of orthogonal layers and certified blocks, and
inner-outer factor models.

A sandwich alternates K+1 static orthogonal layers with K certified REN
blocks, all of one channel width; the composite gain interval is the
product of the per-block intervals (orthogonal layers contribute factor
one).  A factor model routes the signal through an invertible outer stack
followed by an energy-preserving inner layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bilip import BiLipHyper, Certificate, invert_ren
from .orthogonal import (DynOrtho, StaticOrtho, dyn_forward, static_forward,
                         static_inverse)
from .ren import EquilibriumConfig, RenWeights, ren_simulate

#: equilibrium accuracy used when running inverse realizations
INVERSE_EQ_CFG = EquilibriumConfig(mode="fixed-point", tol=1e-13, max_iters=500)


@dataclass
class RenBlock:
    """A certified REN block together with its hyperparameters and proof."""

    weights: RenWeights
    hyper: BiLipHyper
    certificate: Certificate


@dataclass
class SandwichModel:
    """Alternating static orthogonal layers and certified blocks."""

    layers: list
    mu: float
    nu: float
    allocation: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("sandwich needs at least one layer")
        widths = set()
        for i, layer in enumerate(self.layers):
            expect_static = (i % 2 == 0)
            if expect_static and not isinstance(layer, StaticOrtho):
                raise ValueError(f"layer {i} must be a static orthogonal layer")
            if not expect_static and not isinstance(layer, RenBlock):
                raise ValueError(f"layer {i} must be a certified block")
            widths.add(layer.m if isinstance(layer, StaticOrtho) else layer.weights.dims.m)
        if len(self.layers) % 2 == 0:
            raise ValueError("sandwich must start and end with a static layer")
        if len(widths) != 1:
            raise ValueError(f"all interface widths must match, got {sorted(widths)}")

    @property
    def m(self) -> int:
        return self.layers[0].m

    @property
    def ren_blocks(self) -> list[RenBlock]:
        return [l for l in self.layers if isinstance(l, RenBlock)]


@dataclass
class FactorModel:
    """Energy-preserving inner layer after an invertible outer stack."""

    inner: DynOrtho
    outer: SandwichModel

    def __post_init__(self):
        if self.inner.m != self.outer.m:
            raise ValueError("inner and outer channel widths must match")


def allocate_bounds(mu: float, nu: float, blocks: int) -> list[tuple[float, float]]:
    """Geometric split of a composite gain interval over ``blocks`` blocks."""
    if blocks < 1:
        raise ValueError("need at least one block")
    return [(mu ** (1.0 / blocks), nu ** (1.0 / blocks))] * blocks


def composed_bounds(model: SandwichModel) -> tuple[float, float]:
    """Product of the per-block gain intervals."""
    mu = 1.0
    nu = 1.0
    for block in model.ren_blocks:
        mu *= block.hyper.mu
        nu *= block.hyper.nu
    return mu, nu


# ---------------------------------------------------------------------------
# evaluation


def _zero_states(model: SandwichModel) -> list[np.ndarray]:
    return [np.zeros(b.weights.dims.n) for b in model.ren_blocks]


def sandwich_forward(model: SandwichModel, x0_list, u_seq) -> np.ndarray:
    """Apply the layers in order; one initial state per certified block."""
    y, _ = sandwich_forward_states(model, x0_list, u_seq)
    return y


def sandwich_forward_states(model: SandwichModel, x0_list, u_seq):
    """Forward pass that also returns each block's state trajectory."""
    if x0_list is None:
        x0_list = _zero_states(model)
    blocks = model.ren_blocks
    if len(x0_list) != len(blocks):
        raise ValueError(f"need {len(blocks)} initial states, got {len(x0_list)}")
    seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
    state_trajs = []
    ren_idx = 0
    for layer in model.layers:
        if isinstance(layer, StaticOrtho):
            seq = static_forward(layer, seq)
        else:
            seq, xs = ren_simulate(layer.weights, x0_list[ren_idx], seq)
            state_trajs.append(xs)
            ren_idx += 1
    return seq, state_trajs


def sandwich_inverse(model: SandwichModel, x0_list, y_seq) -> np.ndarray:
    """Recover the input by passing backwards through the layer inverses.

    Each certified block is replaced by its closed-form inverse realization
    started from the matching entry of ``x0_list``; static layers invert
    exactly.  With initial states equal to those of the forward pass the
    round trip is exact up to the equilibrium solver tolerance.
    """
    if x0_list is None:
        x0_list = _zero_states(model)
    blocks = model.ren_blocks
    if len(x0_list) != len(blocks):
        raise ValueError(f"need {len(blocks)} initial states, got {len(x0_list)}")
    seq = np.atleast_2d(np.asarray(y_seq, dtype=float))
    ren_idx = len(blocks)
    for layer in reversed(model.layers):
        if isinstance(layer, StaticOrtho):
            seq = static_inverse(layer, seq)
        else:
            ren_idx -= 1
            hat = invert_ren(layer.weights)
            cfg = None if hat.acyclic else INVERSE_EQ_CFG
            seq, _ = ren_simulate(hat, x0_list[ren_idx], seq, cfg=cfg)
    return seq


def factor_forward(model: FactorModel, states, u_seq) -> np.ndarray:
    """Outer stack first, then the energy-preserving inner layer.

    ``states`` is ``(outer_x0_list, inner_h0)`` or None for zero states.
    """
    x0_list, h0 = states if states is not None else (None, None)
    mid = sandwich_forward(model.outer, x0_list, u_seq)
    y, _ = dyn_forward(model.inner, h0, mid)
    return y


def simulate(model, u_seq, states=None) -> np.ndarray:
    """Uniform forward evaluation across every supported model type."""
    if isinstance(model, SandwichModel):
        return sandwich_forward(model, states, u_seq)
    if isinstance(model, FactorModel):
        return factor_forward(model, states, u_seq)
    if isinstance(model, RenBlock):
        y, _ = ren_simulate(model.weights, states, u_seq)
        return y
    if isinstance(model, RenWeights):
        y, _ = ren_simulate(model, states, u_seq)
        return y
    if isinstance(model, StaticOrtho):
        return static_forward(model, np.atleast_2d(np.asarray(u_seq, dtype=float)))
    if isinstance(model, DynOrtho):
        y, _ = dyn_forward(model, states, u_seq)
        return y
    raise TypeError(f"cannot simulate object of type {type(model).__name__}")


def wrap_block(block: RenBlock) -> SandwichModel:
    """Single-block sandwich with identity static layers on both sides."""
    m = block.weights.dims.m
    identity = StaticOrtho(Pk=np.eye(m), qk=np.zeros(m))
    return SandwichModel(
        layers=[identity, block, StaticOrtho(Pk=np.eye(m), qk=np.zeros(m))],
        mu=block.hyper.mu, nu=block.hyper.nu,
    )
