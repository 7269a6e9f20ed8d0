"""Masked sequence denoising: a content-conditioned soft token mask drawn with
Gumbel-Softmax, plus the random and similarity mask baselines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, apply_primitive, as_tensor
from .nn import Linear, Module
from .rng import Rng

P_CLAMP = 1e-8


@dataclass
class MaskVector:
    m: Tensor  # (B, L) keep weights in (0, 1)
    p: Tensor | None  # (B, L, 2) drop/keep probabilities
    g: np.ndarray | None  # (B, L, 2) gumbel noise, None when noiseless
    tau: float

    def drop_component(self) -> Tensor:
        """The index-0 output of the same 2-way softmax (m + drop == 1)."""
        return apply_primitive("neg", self.m) + 1.0 if self.p is None else self._component(0)

    def _component(self, i: int) -> Tensor:
        logits = apply_primitive("log", self.p)
        if self.g is not None:
            logits = logits + self.g
        soft = apply_primitive("softmax", logits * (1.0 / self.tau), axis=-1)
        return apply_primitive("slice", soft, start=i, stop=i + 1, axis=-1).reshape(self.m.shape)


class MaskPredictor(Module):
    def __init__(self, width: int, rng: Rng):
        self.W_mask = Linear(width, 2, rng)


def predict_mask_probs(predictor: MaskPredictor, x: Tensor) -> Tensor:
    p = apply_primitive("softmax", predictor.W_mask(x), axis=-1)
    return apply_primitive("clip", p, lo=P_CLAMP, hi=1.0 - P_CLAMP)


def sample_gumbel(shape, rng: Rng) -> np.ndarray:
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, shape)
    return -np.log(-np.log(u))


def gumbel_softmax_mask(p, tau: float, rng: Rng | None = None, noise: np.ndarray | None = None) -> MaskVector:
    """Keep-component of a 2-way Gumbel-Softmax over ``log p``.

    Without ``rng`` and ``noise`` the mask is the noiseless tempered softmax.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    p = as_tensor(p)
    g = noise if noise is not None else (sample_gumbel(p.shape, rng) if rng is not None else None)
    logits = apply_primitive("log", p)
    if g is not None:
        logits = logits + g
    soft = apply_primitive("softmax", logits * (1.0 / tau), axis=-1)
    m = apply_primitive("slice", soft, start=1, stop=2, axis=-1)
    return MaskVector(m.reshape(p.shape[:-1]), p, g, tau)


def apply_mask(x, mask: MaskVector) -> Tensor:
    """F = f * m with m broadcast over feature channels."""
    x = as_tensor(x)
    m = mask.m
    if m.shape != x.shape[:-1]:
        raise ShapeError(f"mask shape {m.shape} does not match token shape {x.shape[:-1]}")
    return x * m.reshape(*m.shape, 1)


def _cosine_scores(x: np.ndarray, ref: np.ndarray) -> np.ndarray:
    xn = x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)
    rn = ref / np.maximum(np.linalg.norm(ref, axis=-1, keepdims=True), 1e-12)
    return np.matmul(xn, np.swapaxes(rn, -1, -2)).sum(axis=-1)


def baseline_masks(x, strategy: str, rng: Rng | None = None, reference=None) -> MaskVector:
    """Non-learned {0,1} masks on (B,L,D) or (L,D) tokens."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    single = data.ndim == 2
    data = data[None] if single else data
    nb, L, _ = data.shape
    m = np.ones((nb, L))
    if strategy == "random-5pct":
        if rng is None:
            raise ValueError("random-5pct requires an rng")
        k = int(round(0.05 * L))
        for b in range(nb):
            m[b, rng.choice(L, k, replace=False)] = 0.0
    elif strategy == "similarity-top80":
        if reference is None:
            raise ValueError("similarity-top80 requires reference features")
        ref = reference.data if isinstance(reference, Tensor) else np.asarray(reference, dtype=np.float64)
        ref = ref[None] if ref.ndim == 2 else ref
        if ref.shape[-1] != data.shape[-1]:
            raise ShapeError(f"reference width {ref.shape[-1]} != token width {data.shape[-1]}")
        scores = _cosine_scores(data, np.broadcast_to(ref, (nb,) + ref.shape[1:]))
        keep = int(round(0.8 * L))
        for b in range(nb):
            ranked = np.argsort(-scores[b], kind="stable")
            m[b, ranked[keep:]] = 0.0
    else:
        raise ValueError(f"unknown mask strategy {strategy!r}")
    return MaskVector(Tensor(m[0] if single else m), None, None, 1.0)


def temperature_at(epoch: float, epochs: int, start: float = 5.0, end: float = 0.5) -> float:
    """Linear anneal over the first half of training, then hold."""
    half = epochs / 2.0
    if half <= 0 or epoch >= half:
        return end
    return start + (end - start) * epoch / half


class MSD(Module):
    def __init__(self, width: int, rng: Rng, strategy: str = "gumbel"):
        self.strategy = strategy
        self.predictor = MaskPredictor(width, rng) if strategy == "gumbel" else None

    def __call__(self, x: Tensor, *, train: bool, tau: float, rng: Rng | None, reference=None):
        if self.strategy == "gumbel":
            p = predict_mask_probs(self.predictor, x)
            mask = gumbel_softmax_mask(p, tau, rng if train else None)
        elif self.strategy == "random":
            if not train:
                return x, None
            mask = baseline_masks(x, "random-5pct", rng)
        elif self.strategy == "similarity":
            mask = baseline_masks(x, "similarity-top80", reference=x if reference is None else reference)
        else:
            raise ValueError(f"unknown msd strategy {self.strategy!r}")
        return apply_mask(x, mask), mask
