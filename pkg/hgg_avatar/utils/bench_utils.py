"""Timing of the intra-node operation against dense all-pairs attention.

The intra-node operation touches every Gaussian token once per layer, so its
cost grows linearly with the frame count T. Attention among all M*T Gaussian
tokens grows quadratically.
"""
import csv
import logging
import statistics
import time
from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np
import torch

from hgg_avatar.model.graph_blocks import GraphBlock

logger = logging.getLogger(__name__)

NAIVE_CHUNK = 256


@dataclass
class BenchRow:
    T: int
    hgg_ms: float
    naive_ms: float
    tokens: int


def median_ms(fn: Callable[[], object], reps: int = 5, warmup: int = 1) -> float:
    """Median wall time of fn() in milliseconds over reps runs."""
    if reps < 1:
        raise ValueError(f"reps must be positive, got {reps}")
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        fn()
        times.append((time.perf_counter() - start) * 1000.0)
    return statistics.median(times)


def naive_attention(queries: torch.Tensor, tokens: torch.Tensor, chunk: int = NAIVE_CHUNK) -> torch.Tensor:
    """Every token attends to every token, processed in row chunks."""
    scale = 1.0 / np.sqrt(tokens.shape[1])
    out = torch.empty_like(queries)
    for start in range(0, queries.shape[0], chunk):
        scores = queries[start:start + chunk] @ tokens.T * scale
        out[start:start + chunk] = torch.softmax(scores, dim=-1) @ tokens
    return out


def bench_intra(n_gaussians: int, n_vertices: int, dim: int, frame_counts: Sequence[int], reps: int = 5,
                seed: int = 0, naive: bool = True) -> List[BenchRow]:
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        block = GraphBlock(dim)
    queries = torch.randn(n_vertices, dim, generator=gen)

    rows = []
    for T in frame_counts:
        n_tokens = n_gaussians * T
        tokens = torch.randn(n_tokens, dim, generator=gen)
        assign = rng.integers(0, n_vertices, size=n_tokens)
        order = np.argsort(assign, kind="stable")
        members = torch.as_tensor(order, dtype=torch.long)
        segments = torch.as_tensor(assign[order], dtype=torch.long)

        with torch.no_grad():
            hgg_ms = median_ms(lambda: block(queries, tokens, tokens, members, segments), reps=reps)
            naive_ms = median_ms(lambda: naive_attention(tokens, tokens), reps=reps) if naive else float("nan")
        rows.append(BenchRow(T=int(T), hgg_ms=hgg_ms, naive_ms=naive_ms, tokens=n_tokens + n_vertices))
        logger.info(f"T={T}: hgg {hgg_ms:.3f} ms, naive {naive_ms:.3f} ms ({n_tokens} Gaussian tokens)")
    return rows


def doubling_ratios(values: Sequence[float]) -> List[float]:
    return [b / a for a, b in zip(values[:-1], values[1:])]


def write_bench_csv(rows: Sequence[BenchRow], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["T", "hgg_ms", "naive_ms", "tokens"])
        for row in rows:
            writer.writerow([row.T, f"{row.hgg_ms:.6f}", f"{row.naive_ms:.6f}", row.tokens])
