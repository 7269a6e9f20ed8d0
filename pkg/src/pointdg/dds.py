"""Dual-level domain scanning over the block-assembled sequence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor
from .nn import Module
from .rng import Rng
from .ssm import SsmBlock, mamba_block_forward

SCAN_KINDS = ("dds", "ids", "cds", "forward", "backward", "shuffle")


@dataclass(frozen=True)
class ScanOrder:
    perm: np.ndarray
    kind: str

    def __post_init__(self):
        n = len(self.perm)
        if not np.array_equal(np.sort(self.perm), np.arange(n)):
            raise ValueError(f"{self.kind} order is not a permutation of [0, {n})")


def ids_order(L: int, n_blocks: int = 3) -> ScanOrder:
    """Blocks one after another: the identity over the concatenated sequence."""
    if L < 1:
        raise ValueError("block length must be >= 1")
    return ScanOrder(np.arange(n_blocks * L), "IDS")


def cds_order(L: int, n_blocks: int = 3) -> ScanOrder:
    """Position t of every block before position t+1: perm[n*t + j] = j*L + t."""
    if L < 1:
        raise ValueError("block length must be >= 1")
    t, j = np.meshgrid(np.arange(L), np.arange(n_blocks), indexing="ij")
    return ScanOrder((j * L + t).reshape(-1), "CDS")


def baseline_order(kind: str, L3: int, rng: Rng | None = None) -> ScanOrder:
    if kind == "forward":
        return ScanOrder(np.arange(L3), kind)
    if kind == "backward":
        return ScanOrder(np.arange(L3)[::-1].copy(), kind)
    if kind == "shuffle":
        if rng is None:
            raise ValueError("shuffle order needs an rng")
        return ScanOrder(rng.permutation(L3), kind)
    raise ValueError(f"unknown baseline scan {kind!r}")


def dual_scan(F: Tensor, block1: SsmBlock, block2: SsmBlock, n_blocks: int = 3) -> Tensor:
    """IDS pass with ``block1`` then CDS pass with ``block2``; tokens stay in place."""
    T = F.shape[-2]
    if T % n_blocks:
        raise ShapeError(f"sequence length {T} is not divisible by {n_blocks} blocks")
    L = T // n_blocks
    y = mamba_block_forward(F, block1, ids_order(L, n_blocks).perm)
    return mamba_block_forward(y, block2, cds_order(L, n_blocks).perm)


class DDS(Module):
    """Two scan passes with their own parameters.

    ``kind`` selects the traversal: ``dds`` (IDS then CDS), ``ids``/``cds`` alone,
    or a baseline order used for both passes. ``composed`` collapses DDS into
    a single pass over the composed permutation.
    """

    def __init__(self, width: int, state: int, rng: Rng, kind: str = "dds", composed: bool = False):
        if kind not in SCAN_KINDS:
            raise ValueError(f"unknown scan kind {kind!r}")
        self.kind = kind
        self.composed = composed
        single = kind in ("ids", "cds") or (kind == "dds" and composed)
        self.block1 = SsmBlock(width, state, rng)
        self.block2 = None if single else SsmBlock(width, state, rng)

    def orders(self, T: int, n_blocks: int, rng: Rng | None) -> list[np.ndarray]:
        L = T // n_blocks
        if self.kind == "dds":
            ids, cds = ids_order(L, n_blocks).perm, cds_order(L, n_blocks).perm
            return [ids[cds]] if self.composed else [ids, cds]
        if self.kind == "ids":
            return [ids_order(L, n_blocks).perm]
        if self.kind == "cds":
            return [cds_order(L, n_blocks).perm]
        if self.kind == "shuffle" and rng is None:
            # deterministic fallback for inference
            rng = Rng(0)
        return [baseline_order(self.kind, T, rng).perm] * 2

    def __call__(self, F: Tensor, n_blocks: int, rng: Rng | None = None) -> Tensor:
        T = F.shape[-2]
        if T % n_blocks:
            raise ShapeError(f"sequence length {T} is not divisible by {n_blocks} blocks")
        if self.kind == "dds" and not self.composed:
            return dual_scan(F, self.block1, self.block2, n_blocks)
        y = F
        for block, order in zip((self.block1, self.block2), self.orders(T, n_blocks, rng)):
            y = mamba_block_forward(y, block, order)
        return y
