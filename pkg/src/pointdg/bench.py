"""Timing of one SSM block forward as the sequence length doubles."""

from __future__ import annotations

import csv
import time
from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_grad
from .rng import Rng
from .ssm import SsmBlock, mamba_block_forward

BENCH_LENGTHS = (256, 512, 1024, 2048)


def _setup(L: int, width: int, state: int, seed: int):
    rng = Rng(seed, 0xBE, L)
    block = SsmBlock(width, state, rng.substream(0))
    return block, Tensor(rng.normal(0, 1, (1, L, width)))


def time_lengths(lengths, reps: int = 20, width: int = 64, state: int = 16, seed: int = 0) -> dict[int, np.ndarray]:
    """Wall times in ms of inference forwards of one SSM block per length.

    Repetitions are interleaved across lengths so slow periods of a shared
    machine hit every length alike.
    """
    cases = {L: _setup(L, width, state, seed) for L in lengths}
    times = {L: [] for L in lengths}
    with no_grad():
        for block, x in cases.values():
            mamba_block_forward(x, block)  # warm-up
        for _ in range(reps):
            for L, (block, x) in cases.items():
                t0 = time.perf_counter()
                mamba_block_forward(x, block)
                times[L].append((time.perf_counter() - t0) * 1e3)
    return {L: np.array(t) for L, t in times.items()}


def scan_bench(lengths=BENCH_LENGTHS, reps: int = 20, width: int = 64, seed: int = 0) -> list[dict]:
    """One row per L; ``ratio_vs_half`` is median(L) / median(L/2)."""
    lengths = sorted(lengths)
    times = time_lengths(sorted(set(lengths) | {L // 2 for L in lengths}), reps, width, seed=seed)
    med = {L: float(np.median(t)) for L, t in times.items()}
    return [
        {
            "L": L,
            "mean_ms": float(times[L].mean()),
            "std_ms": float(times[L].std()),
            "median_ms": med[L],
            "ratio_vs_half": med[L] / med[L // 2],
        }
        for L in lengths
    ]


def write_bench_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["L", "mean_ms", "std_ms", "ratio_vs_half"])
        for r in rows:
            w.writerow([r["L"], f"{r['mean_ms']:.4f}", f"{r['std_ms']:.4f}", f"{r['ratio_vs_half']:.4f}"])
