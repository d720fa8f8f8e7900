"""Fused lookup matmul over packed assignments.

Instead of materializing the dense weight matrix, the kernel
precomputes every codeword x activation-sub-vector partial dot product
(a k * (i/d) * q table whose codebook working set is k*d*4 bytes) and
then accumulates one table lookup per packed index. Per-output-row
accumulation runs in float64. Weight-memory traffic is therefore
exactly the packed payload plus the codebook, which an instrumented
counter verifies.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import vq


@dataclass
class TrafficCounter:
    """Weight bytes touched; activations are not counted."""

    weight_bytes: int = 0


@dataclass
class PackedLayer:
    shape: vq.LayerShape
    codebook: np.ndarray  # (k, d) float32
    packed: vq.PackedAssignments
    bias: np.ndarray | None = None  # (o,) float32

    def __post_init__(self):
        if self.codebook.shape != (self.shape.k, self.shape.d):
            raise ValueError(
                f"codebook {self.codebook.shape} does not match layer shape"
            )
        if self.packed.count != self.shape.num_subvectors:
            raise ValueError("packed assignment count does not match layer shape")
        if self.packed.bits_per_index != self.shape.index_bits:
            raise ValueError("packed bit width does not match codebook size")
        if self.bias is not None and self.bias.shape != (self.shape.o,):
            raise ValueError(f"bias must be ({self.shape.o},), got {self.bias.shape}")

    @classmethod
    def from_arrays(
        cls,
        codebook: np.ndarray,
        assignments: np.ndarray,
        shape: vq.LayerShape,
        bias: np.ndarray | None = None,
    ) -> "PackedLayer":
        return cls(
            shape=shape,
            codebook=np.ascontiguousarray(codebook, dtype=np.float32),
            packed=vq.pack(assignments, shape.k),
            bias=None if bias is None else np.ascontiguousarray(bias, dtype=np.float32),
        )


def fused_matmul(
    layer: PackedLayer,
    x: np.ndarray,
    traffic: TrafficCounter | None = None,
) -> np.ndarray:
    """reconstruct_hard(layer) @ x + bias without building the weights.

    x is (i, q); the result is (o, q) float32.
    """
    shape = layer.shape
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] != shape.i:
        raise ValueError(f"activations must be ({shape.i}, q), got {x.shape}")
    q = x.shape[1]
    j = shape.i // shape.d
    assigns = vq.unpack(layer.packed, shape.num_subvectors, shape.k).reshape(
        shape.o, j
    )
    if traffic is not None:
        traffic.weight_bytes += len(layer.packed.payload)
        traffic.weight_bytes += shape.k * shape.d * 4
    # partial[c, jj, :] = codeword c . x sub-vector jj — built once, then
    # each assignment is a single row lookup
    xb = x.astype(np.float64).reshape(j, shape.d, q)
    partial = np.einsum("kd,jdq->kjq", layer.codebook.astype(np.float64), xb)
    acc = partial[assigns, np.arange(j)[None, :], :].sum(axis=1)
    if layer.bias is not None:
        acc = acc + layer.bias.astype(np.float64)[:, None]
    return acc.astype(np.float32)


def dense_matmul(
    layer: PackedLayer,
    x: np.ndarray,
    traffic: TrafficCounter | None = None,
) -> np.ndarray:
    """Dequantize-then-multiply reference path."""
    shape = layer.shape
    assigns = vq.unpack(layer.packed, shape.num_subvectors, shape.k)
    w = vq.reconstruct_hard(layer.codebook, assigns, shape)
    if traffic is not None:
        traffic.weight_bytes += w.nbytes
    out = w.astype(np.float64) @ np.asarray(x, dtype=np.float64)
    if layer.bias is not None:
        out = out + layer.bias.astype(np.float64)[:, None]
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# benchmarking
# ---------------------------------------------------------------------------


@dataclass
class BenchRow:
    o: int
    i: int
    d: int
    k: int
    q: int
    repetitions: int
    fused_seconds: float
    dense_seconds: float
    fused_weight_bytes: int
    dense_weight_bytes: int
    max_abs_diff: float

    def to_dict(self) -> dict:
        return {
            "o": self.o,
            "i": self.i,
            "d": self.d,
            "k": self.k,
            "q": self.q,
            "repetitions": self.repetitions,
            "fused_seconds": self.fused_seconds,
            "dense_seconds": self.dense_seconds,
            "fused_weight_bytes": self.fused_weight_bytes,
            "dense_weight_bytes": self.dense_weight_bytes,
            "bytes_ratio": self.dense_weight_bytes / self.fused_weight_bytes,
            "max_abs_diff": self.max_abs_diff,
        }


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)

    def to_dicts(self) -> list[dict]:
        return [r.to_dict() for r in self.rows]


def _random_layer(o, i, d, k, rng) -> PackedLayer:
    shape = vq.LayerShape(o=o, i=i, d=d, k=k)
    return PackedLayer.from_arrays(
        codebook=rng.normal(size=(k, d)).astype(np.float32),
        assignments=rng.integers(0, k, size=shape.num_subvectors),
        shape=shape,
        bias=rng.normal(size=o).astype(np.float32),
    )


def bench(
    sizes: list[tuple[int, int, int, int]],
    repetitions: int,
    q: int = 1,
    seed: int = 0,
) -> BenchReport:
    """Time fused vs dequantize-then-matmul per (o, i, d, k) size.

    Timings are medians over ``repetitions`` runs; byte counts come from
    one instrumented pass each. repetitions=0 yields an empty report.
    """
    report = BenchReport()
    if repetitions <= 0:
        return report
    rng = np.random.default_rng(seed)
    for o, i, d, k in sizes:
        layer = _random_layer(o, i, d, k, rng)
        x = rng.normal(size=(i, q)).astype(np.float32)
        tf = TrafficCounter()
        td = TrafficCounter()
        fused = fused_matmul(layer, x, tf)
        dense = dense_matmul(layer, x, td)
        fused_times = []
        dense_times = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            fused_matmul(layer, x)
            fused_times.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            dense_matmul(layer, x)
            dense_times.append(time.perf_counter() - t0)
        report.rows.append(
            BenchRow(
                o=o,
                i=i,
                d=d,
                k=k,
                q=q,
                repetitions=repetitions,
                fused_seconds=float(np.median(fused_times)),
                dense_seconds=float(np.median(dense_times)),
                fused_weight_bytes=tf.weight_bytes,
                dense_weight_bytes=td.weight_bytes,
                max_abs_diff=float(np.max(np.abs(fused - dense))),
            )
        )
    return report
