"""Finite-difference suite over every primitive plus one end-to-end model step."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, apply_primitive as P, finite_difference_check
from .config import TrainConfig
from .model import build_model
from .rng import Rng

PRIMITIVE_TOL = 1e-6
MODEL_TOL = 1e-4
# central differences at eps=1e-5 carry ~1e-11 absolute noise on an O(1) loss;
# below this floor both gradients are treated as zero
MODEL_ATOL = 1e-6


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    compared: int = 0
    probed: int = 0

    @property
    def ok(self) -> bool:
        return self.error < self.tol


def _away_from_zero(a: np.ndarray, margin: float = 1e-2) -> np.ndarray:
    # keep relu/clip/max inputs clear of kinks
    return np.where(np.abs(a) < margin, np.sign(a + 1e-300) * margin + a, a)


def _weighted(y: Tensor, w: np.ndarray) -> Tensor:
    """Scalar loss sum(w * y) so every output coordinate contributes."""
    return P("sum", P("mul", y, Tensor(w)))


def primitive_cases(rng: np.random.Generator):
    """(name, inputs, fn(*inputs) -> output tensor) for each primitive."""
    n = rng.normal
    B, T, D = 2, 5, 4
    idx = rng.permutation(T)
    order = rng.permutation(T)
    distinct = np.arange(B * T * D, dtype=float).reshape(B, T, D)
    distinct = rng.permutation(distinct.reshape(-1)).reshape(B, T, D) * 0.1
    cases = [
        ("matmul", [n(size=(B, T, D)), n(size=(D, 3))], lambda a, b: P("matmul", a, b)),
        ("add", [n(size=(B, T, D)), n(size=(D,))], lambda a, b: P("add", a, b)),
        ("sub", [n(size=(B, T, D)), n(size=(B, T, D))], lambda a, b: P("sub", a, b)),
        ("mul", [n(size=(B, T, D)), n(size=(B, T, 1))], lambda a, b: P("mul", a, b)),
        ("exp", [n(size=(B, T))], lambda a: P("exp", a)),
        ("log", [rng.uniform(0.5, 2.0, (B, T))], lambda a: P("log", a)),
        ("neg", [n(size=(B, T))], lambda a: P("neg", a)),
        ("reciprocal", [rng.uniform(0.5, 2.0, (B, T))], lambda a: P("reciprocal", a)),
        ("softmax", [n(size=(B, T, D))], lambda a: P("softmax", a, axis=-1)),
        ("concat", [n(size=(B, T, D)), n(size=(B, 2, D))], lambda a, b: P("concat", a, b, axis=1)),
        ("gather", [n(size=(B, T, D))], lambda a: P("gather", a, indices=idx, axis=1)),
        ("scatter", [n(size=(B, T, D))], lambda a: P("scatter", a, indices=idx, axis=1, size=T)),
        ("sum", [n(size=(B, T, D))], lambda a: P("sum", a, axis=1)),
        ("mean", [n(size=(B, T, D))], lambda a: P("mean", a, axis=1)),
        ("max", [distinct], lambda a: P("max", a, axis=1)),
        ("relu", [_away_from_zero(n(size=(B, T, D)))], lambda a: P("relu", a)),
        ("sigmoid", [n(size=(B, T))], lambda a: P("sigmoid", a)),
        ("softplus", [n(size=(B, T))], lambda a: P("softplus", a)),
        ("silu", [n(size=(B, T))], lambda a: P("silu", a)),
        (
            "clip",
            [_away_from_zero(n(size=(B, T)) * 0.5) + 0.0],
            lambda a: P("clip", a, lo=-0.3, hi=0.3),
        ),
        (
            "layernorm",
            [n(size=(B, T, D)), n(size=(D,)), n(size=(D,))],
            lambda x, g, b: P("layernorm", x, g, b, eps=1e-5),
        ),
        (
            "conv1d",
            [n(size=(B, T, D)), n(size=(3, D, 3)), n(size=(3,))],
            lambda x, w, b: P("conv1d", x, w, b),
        ),
        ("slice", [n(size=(B, T, D))], lambda a: P("slice", a, start=1, stop=4, axis=1)),
        ("reshape", [n(size=(B, T, D))], lambda a: P("reshape", a, shape=(B, T * D))),
        ("expand", [n(size=(T, D))], lambda a: P("expand", a, shape=(B, T, D))),
        (
            "selective_scan",
            [
                n(size=(B, T, D)),
                rng.uniform(0.05, 0.5, (B, T)),
                n(size=(B, T, 3)),
                n(size=(B, T, 3)),
                -rng.uniform(0.5, 2.0, (D, 3)),
                n(size=(D,)),
            ],
            lambda x, d, b, c, a, s: P("selective_scan", x, d, b, c, a, s, order=order),
        ),
    ]
    # clip inputs must avoid the two bounds as well
    clip_x = cases[[c[0] for c in cases].index("clip")][1][0]
    for bound in (-0.3, 0.3):
        near = np.abs(clip_x - bound) < 1e-2
        clip_x[near] += 2e-2
    return cases


def check_primitives(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, arrays, fn in primitive_cases(rng):
        tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        probe = fn(*[Tensor(a) for a in arrays])
        w = rng.normal(size=probe.shape)
        st: dict = {}
        err = finite_difference_check(lambda: _weighted(fn(*tensors), w), tensors, stats=st)
        out.append(CheckResult(name, err, PRIMITIVE_TOL, st["compared"], st["probed"]))
    return out


def tiny_model_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(
        width=16, num_stages=2, state_size=4, groups=8, neighbors=4, num_points=32, seed=seed, epochs=2, warmup_epochs=1
    )


def check_model(seed: int = 0, max_coords: int = 12) -> CheckResult:
    """Full train-mode forward + cross-entropy on a batch of 2, all modules on."""
    from .train import cross_entropy

    cfg = tiny_model_config(seed)
    model = build_model(cfg, num_classes=5)
    r = Rng(seed, 0x6C)
    pts = r.normal(0, 1, (2, cfg.num_points, 3))
    partner = r.normal(0, 1, (2, cfg.num_points, 3))
    labels = np.eye(5)[[1, 3]]

    def loss():
        # fresh stream each call keeps the Gumbel draw fixed across probes
        res = model.forward(pts, train=True, rng=Rng(seed, 0x6D), partner_points=partner, tau=1.0, starts=0)
        return cross_entropy(res.logits, labels)

    st: dict = {}
    err = finite_difference_check(
        loss, model.parameters(), max_coords=max_coords, rng=np.random.default_rng(seed), atol=MODEL_ATOL, stats=st
    )
    return CheckResult("model", err, MODEL_TOL, st["compared"], st["probed"])


def run_suite(seed: int = 0) -> tuple[list[CheckResult], float]:
    t0 = time.perf_counter()
    results = check_primitives(seed) + [check_model(seed)]
    return results, time.perf_counter() - t0
