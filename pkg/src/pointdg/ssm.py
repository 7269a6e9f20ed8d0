"""Selective state-space block and the staged backbone configuration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, apply_primitive
from .nn import LayerNorm, Linear, Module, param
from .rng import Rng


def discretize(delta, A, B_t):
    """Zero-order hold on A, Euler on B.

    ``delta``: (...,) step sizes, ``A``: (D,S), ``B_t``: (..., S).
    Returns ``a_bar`` (..., D, S) and ``b_bar`` (..., S).
    """
    delta = np.asarray(delta, dtype=np.float64)
    a_bar = np.exp(delta[..., None, None] * A)
    b_bar = delta[..., None] * B_t
    return a_bar, b_bar


class SsmBlock(Module):
    """in_proj -> gated selective scan -> out_proj -> residual -> layernorm.

    ``in_proj`` maps D to 2D channels: the scan input and a silu gate.
    """

    def __init__(self, width: int, state: int, rng: Rng):
        self.width = width
        self.state = state
        self.in_proj = Linear(width, 2 * width, rng)
        self.W_delta = Linear(width, 1, rng)
        # initial step sizes in [1e-3, 1e-1], stored through softplus^-1
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1)))
        self.W_delta.bias.data[:] = dt + np.log(-np.expm1(-dt))
        self.W_B = Linear(width, state, rng, bias=False)
        self.W_C = Linear(width, state, rng, bias=False)
        self.A_log = param(np.log(np.tile(np.arange(1, state + 1, dtype=np.float64), (width, 1))))
        self.skip = param(np.ones(width))
        self.out_proj = Linear(width, width, rng)
        self.norm = LayerNorm(width)

    def continuous_A(self) -> Tensor:
        return -apply_primitive("exp", self.A_log)

    def __call__(self, x: Tensor, order=None) -> Tensor:
        return mamba_block_forward(x, self, order)


def selective_scan(u: Tensor, block: SsmBlock, order=None) -> Tensor:
    """Input-dependent recurrence over ``u`` (B,T,D), visiting tokens in ``order``."""
    nb, T, _ = u.shape
    delta = apply_primitive("softplus", block.W_delta(u)).reshape(nb, T)
    return apply_primitive(
        "selective_scan",
        u,
        delta,
        block.W_B(u),
        block.W_C(u),
        block.continuous_A(),
        block.skip,
        order=order,
    )


def mamba_block_forward(x: Tensor, block: SsmBlock, order=None) -> Tensor:
    if x.shape[-1] != block.width:
        raise ShapeError(f"block width {block.width} does not match input width {x.shape[-1]}")
    D = block.width
    uz = block.in_proj(x)
    u = apply_primitive("slice", uz, start=0, stop=D, axis=-1)
    z = apply_primitive("slice", uz, start=D, stop=2 * D, axis=-1)
    y = selective_scan(u, block, order) * apply_primitive("silu", z)
    return block.norm(x + block.out_proj(y))


SCALES = {
    # name: (num_stages, width)
    "tiny": (3, 192),
    "small": (3, 128),
    "base": (2, 192),
}


@dataclass(frozen=True)
class StageConfig:
    num_stages: int = 3
    blocks_per_stage: int = 1
    width: int = 192
    state: int = 16

    def __post_init__(self):
        if self.num_stages < 2:
            raise ValueError("at least two stages are required")
        if self.blocks_per_stage < 1 or self.width < 2 or self.state < 1:
            raise ValueError(f"invalid stage config {self}")

    @classmethod
    def for_scale(cls, scale: str, **overrides) -> "StageConfig":
        if scale not in SCALES:
            raise ValueError(f"unknown scale {scale!r}; expected one of {sorted(SCALES)}")
        stages, width = SCALES[scale]
        kw = {"num_stages": stages, "width": width}
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)
