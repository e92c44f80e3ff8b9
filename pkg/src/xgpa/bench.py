"""Wall-clock scaling of pyramid attention against full pairwise attention."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .nn import AttentionVariant
from .temporal import AutocorrAttentionLayer, PatchAttentionLayer, pyramid_forward

COMPONENTS = ("pyramid_attention", "naive_quadratic_attention")

# Problem widths keep every length compute-bound rather than dominated by call overhead.
DEFAULT_SHAPES = {"pyramid_attention": (32, 16), "naive_quadratic_attention": (4, 16)}


@dataclass
class ScalingResult:
    component: str
    lengths: list[int]
    seconds: list[float]
    slope: float

    def rows(self) -> list[tuple[int, float]]:
        return list(zip(self.lengths, self.seconds))

    def monotonic(self) -> bool:
        return all(b >= a for a, b in zip(self.seconds, self.seconds[1:]))


def loglog_slope(lengths: Sequence[int], seconds: Sequence[float]) -> float:
    if len(lengths) < 2:
        return float("nan")
    return float(np.polyfit(np.log(lengths), np.log(seconds), 1)[0])


def naive_quadratic_attention(x: np.ndarray, wq: np.ndarray, wk: np.ndarray, chunk: int = 256) -> np.ndarray:
    """softmax(Q K^T / sqrt(D)) X over all step pairs, per node. x: [N, L, D]."""
    q = x @ wq
    k = x @ wk
    scale = 1.0 / np.sqrt(x.shape[-1])
    out = np.empty_like(x)
    kt = np.swapaxes(k, 1, 2)
    for lo in range(0, x.shape[1], chunk):
        s = (q[:, lo : lo + chunk] @ kt) * scale
        s -= s.max(axis=-1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=-1, keepdims=True)
        out[:, lo : lo + chunk] = s @ x
    return out


def _runner(component: str, length: int, nodes: int, dim: int, seed: int) -> Callable[[], object]:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(nodes, length, dim))
    if component == "pyramid_attention":
        levels = [PatchAttentionLayer(rng, dim, 2, AttentionVariant.IDENTITY_VALUE) for _ in range(2)]
        head = AutocorrAttentionLayer(rng, dim, 3, AttentionVariant.IDENTITY_VALUE)

        def run():
            with T.no_grad():
                return pyramid_forward(levels, head, x)

        return run
    if component == "naive_quadratic_attention":
        wq = rng.normal(size=(dim, dim)) / np.sqrt(dim)
        wk = rng.normal(size=(dim, dim)) / np.sqrt(dim)
        return lambda: naive_quadratic_attention(x, wq, wk)
    raise ValueError(f"unknown component {component!r}; expected one of {COMPONENTS}")


def time_call(fn: Callable[[], object], repeats: int = 5, warmup: int = 1) -> float:
    """Median wall time of ``repeats`` calls after ``warmup`` discarded calls."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def benchmark_scaling(
    component: str,
    lengths: Sequence[int],
    repeats: int = 5,
    warmup: int = 1,
    nodes: int | None = None,
    dim: int | None = None,
    seed: int = 0,
) -> ScalingResult:
    if component not in COMPONENTS:
        raise ValueError(f"unknown component {component!r}; expected one of {COMPONENTS}")
    lengths = [int(n) for n in lengths]
    if any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ValueError("lengths must be strictly ascending")
    if any(n < 64 for n in lengths):
        raise ValueError("every length must be at least 64")
    d_nodes, d_dim = DEFAULT_SHAPES[component]
    nodes, dim = nodes or d_nodes, dim or d_dim
    seconds = [time_call(_runner(component, n, nodes, dim, seed), repeats, warmup) for n in lengths]
    return ScalingResult(component, lengths, seconds, loglog_slope(lengths, seconds))
