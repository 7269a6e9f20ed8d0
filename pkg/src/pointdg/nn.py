"""Parameter containers and the small layers shared by every stage."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import Tensor, apply_primitive
from .rng import Rng


def param(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Walks attributes in definition order to name parameters for checkpoints."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in own.items():
            if p.data.shape != state[k].shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.data.shape}")
            p.data[...] = state[k]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True):
        bound = 1.0 / np.sqrt(d_in)
        self.weight = param(rng.uniform(-bound, bound, (d_in, d_out)))
        self.bias = param(rng.uniform(-bound, bound, (d_out,))) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = apply_primitive("matmul", x, self.weight)
        return y if self.bias is None else apply_primitive("add", y, self.bias)


class MLP(Module):
    """Two tokenwise linear layers with relu in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: Rng):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(apply_primitive("relu", self.fc1(x)))


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return apply_primitive("layernorm", x, self.gamma, self.beta, eps=self.eps)
