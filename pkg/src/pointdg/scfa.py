"""Cross-domain feature aggregation with a shared learnable prompt."""

from __future__ import annotations

import logging

import numpy as np

from .autodiff import ShapeError, Tensor, apply_primitive, as_tensor
from .data import IndexPlan
from .nn import MLP, Module, param
from .rng import Rng

log = logging.getLogger(__name__)

AGGREGATIONS = ("scfa", "sum", "concat")


def select_partner(domain_id: int, class_id: int, index: int, plan: IndexPlan | None, mode: str, rng: Rng | None = None):
    """Pick the cross-domain partner of one sample as ``(domain_id, pool_index)``.

    In ``infer`` mode the sample is its own partner.
    """
    if mode == "infer":
        return domain_id, index
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if plan is None or rng is None:
        raise ValueError("train-mode pairing needs the balanced plan and an rng")
    others = [d for d in plan.participating(class_id) if d != domain_id]
    if not others:
        log.warning("class %d only present in domain %d; pairing within the domain", class_id, domain_id)
        others = [domain_id]
    d = others[int(rng.integers(len(others)))]
    pool = plan.entries[(d, class_id)]
    return d, int(pool[int(rng.integers(len(pool)))])


class Conv1d(Module):
    """Token-axis convolution, zero 'same' padding."""

    def __init__(self, width: int, kernel: int, rng: Rng):
        bound = 1.0 / np.sqrt(width * kernel)
        self.weight = param(rng.uniform(-bound, bound, (kernel, width, width)))
        self.bias = param(rng.uniform(-bound, bound, (width,)))

    def __call__(self, x: Tensor) -> Tensor:
        return apply_primitive("conv1d", x, self.weight, self.bias)


class SCFA(Module):
    def __init__(
        self,
        width: int,
        length: int,
        rng: Rng,
        kernel: int = 1,
        aggregation: str = "scfa",
        global_prompt: bool = True,
    ):
        if aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {aggregation!r}")
        self.aggregation = aggregation
        self.length = length
        if aggregation == "scfa":
            self.mlp1 = MLP(width, width, width, rng)
            self.mlp2 = MLP(width, width, width, rng)
            self.conv = Conv1d(width, kernel, rng)
        self.global_prompt = param(rng.normal(0.0, 0.02, (length, width))) if global_prompt else None

    @property
    def n_blocks(self) -> int:
        return 3 if self.global_prompt is not None else 2

    def cross_feature(self, f1: Tensor, f2: Tensor) -> Tensor:
        if self.aggregation == "scfa":
            return aggregate(self, f1, f2)
        if f1.shape != f2.shape:
            raise ShapeError(f"partner shape {f2.shape} != sample shape {f1.shape}")
        return f1 + f2 if self.aggregation == "sum" else f2

    def __call__(self, f1: Tensor, f2: Tensor) -> Tensor:
        fp = self.cross_feature(f1, f2)
        blocks = [f1, fp]
        if self.global_prompt is not None:
            blocks.append(apply_primitive("expand", self.global_prompt, shape=f1.shape))
        return apply_primitive("concat", *blocks, axis=-2)


def aggregate(module: SCFA, f1, f2) -> Tensor:
    """f' = Conv(MLP1(f1) * MLP2(f2)) on (B,L,D) or (L,D) sequences."""
    f1, f2 = as_tensor(f1), as_tensor(f2)
    if f1.shape != f2.shape:
        raise ShapeError(f"cannot aggregate shapes {f1.shape} and {f2.shape}")
    prod = module.mlp1(f1) * module.mlp2(f2)
    if prod.ndim == 2:
        return module.conv(prod.reshape(1, *prod.shape)).reshape(prod.shape)
    return module.conv(prod)


def assemble_sequence(f1, f_prime, f_g):
    """Concat(f1, f', f_g) along the token axis.

    Returns the sequence and the ``(start, stop)`` token range of each block.
    """
    f1, f_prime, f_g = as_tensor(f1), as_tensor(f_prime), as_tensor(f_g)
    L = f1.shape[-2]
    if f_prime.shape != f1.shape or f_g.shape[-2:] != f1.shape[-2:]:
        raise ShapeError(f"block shapes differ: {f1.shape}, {f_prime.shape}, {f_g.shape}")
    if f_g.shape != f1.shape:
        f_g = apply_primitive("expand", f_g, shape=f1.shape)
    F = apply_primitive("concat", f1, f_prime, f_g, axis=-2)
    return F, [(0, L), (L, 2 * L), (2 * L, 3 * L)]
