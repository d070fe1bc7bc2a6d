"""Throughput benchmark over synthetic inputs."""
from __future__ import annotations

import csv
import hashlib
import io
import time
import tracemalloc
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .graph import Graph, count_flops, count_params, execute, to_manifest
from .tensor import Tensor

CSV_FIELDS = ("model", "graph_hash", "seed", "input_dims", "threads", "warmup_iters", "timed_iters",
              "mean_fps", "median_fps", "p95_latency_ms", "nodes", "params", "flops", "alloc_growth_bytes")


def graph_hash(g: Graph) -> str:
    return hashlib.sha256(to_manifest(g).encode()).hexdigest()[:16]


@dataclass
class BenchReport:
    model: str
    graph_hash: str
    seed: int
    input_dims: tuple[int, int, int, int]
    threads: int
    warmup_iters: int
    timed_iters: int
    mean_fps: float
    median_fps: float
    p95_latency_ms: float
    nodes: int
    params: int
    flops: int
    alloc_growth_bytes: int | None = None

    def row(self) -> dict:
        d = asdict(self)
        d["input_dims"] = "x".join(map(str, self.input_dims))
        for k in ("mean_fps", "median_fps", "p95_latency_ms"):
            d[k] = f"{d[k]:.4f}"
        if d["alloc_growth_bytes"] is None:
            d["alloc_growth_bytes"] = ""
        return d

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.row().items())


@dataclass
class Model:
    name: str
    graph: Graph
    weights: dict


def synthetic_input(dims, seed: int) -> Tensor:
    return Tensor.wrap(np.random.default_rng(seed).random(dims, dtype=np.float32))


def _alloc_growth(m: Model, x: Tensor, rounds: int = 3) -> int:
    """Net traced-memory growth across extra steady-state iterations."""
    tracemalloc.start()
    try:
        execute(m.graph, m.weights, x)
        before = tracemalloc.get_traced_memory()[0]
        for _ in range(rounds):
            execute(m.graph, m.weights, x)
        return tracemalloc.get_traced_memory()[0] - before
    finally:
        tracemalloc.stop()


def run_bench(models: list[Model], dims, *, warmup: int = 10, iters: int = 100, threads: int = 1,
              seed: int = 0, check_alloc: bool = False) -> tuple[list[BenchReport], dict[str, np.ndarray]]:
    """Time every model on the same synthetic input.

    With more than one model the iterations are interleaved (and the order
    rotates each round) so slow drift on a shared host hits all models alike.
    Returns the reports and the raw per-iteration latencies in milliseconds.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    x = synthetic_input(tuple(dims), seed)
    lat = {m.name: np.empty(iters) for m in models}
    with threadpool_limits(limits=threads):
        for _ in range(warmup):
            for m in models:
                execute(m.graph, m.weights, x)
        for i in range(iters):
            k = i % len(models)
            for m in models[k:] + models[:k]:
                t0 = time.perf_counter()
                execute(m.graph, m.weights, x)
                lat[m.name][i] = (time.perf_counter() - t0) * 1e3
        growth = {m.name: _alloc_growth(m, x) if check_alloc else None for m in models}
    reports = []
    for m in models:
        ms = lat[m.name]
        reports.append(BenchReport(
            m.name, graph_hash(m.graph), seed, tuple(dims), threads, warmup, iters,
            float(np.mean(1000.0 / ms)), float(1000.0 / np.median(ms)), float(np.percentile(ms, 95)),
            len(m.graph), count_params(m.graph), count_flops(m.graph, dims), growth[m.name]))
    return reports, lat


def reports_to_csv(reports: list[BenchReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


def speedup(reports: list[BenchReport]) -> float:
    """Median-FPS ratio of the last model over the first."""
    return reports[-1].median_fps / reports[0].median_fps
