"""Vector quantization of weight matrices via shared codebooks.

A weight matrix is cut into row sub-vectors of a fixed dimension; a
K-Means codebook plus one index per sub-vector replaces the dense
weights. Around that core this module provides candidate sets (top-n
nearest codewords with trainable mixture logits), soft and hard
reconstruction, a symmetric uniform-quantization baseline, bit packing
of indices, and storage accounting.

Indices are 0-based throughout. All distance computations and
tie-breaks are deterministic: equal distances resolve to the lowest
codeword index, and K-Means centroid accumulation uses a fixed
reduction order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KMEANS_MAX_ITERS = 100
KMEANS_TOL = 1e-6
# Above this S*k*d the squared-distance helper switches from exact
# elementwise differences to the |x|^2 - 2x.c + |c|^2 expansion.
_DIRECT_DIST_LIMIT = 1 << 22
_CHUNK_ELEMS = 1 << 22


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerShape:
    """Geometry of one quantized layer: o x i weights, sub-vector dim d,
    codebook size k (power of two)."""

    o: int
    i: int
    d: int
    k: int

    def __post_init__(self):
        if self.o < 1 or self.i < 1:
            raise ValueError(f"bad layer dims {self.o}x{self.i}")
        if self.d < 1 or self.i % self.d != 0:
            raise ValueError(f"sub-vector dim {self.d} must divide i={self.i}")
        if self.k < 2 or self.k > 65536 or (self.k & (self.k - 1)) != 0:
            raise ValueError(f"codebook size {self.k} not a power of two in [2, 65536]")

    @property
    def num_subvectors(self) -> int:
        return self.o * self.i // self.d

    @property
    def index_bits(self) -> int:
        return self.k.bit_length() - 1


@dataclass
class CandidateSet:
    """Top-n codeword candidates per sub-vector with mixture logits.

    ``candidates[s]`` holds n distinct codeword indices in ascending
    distance order, so column 0 is the plain nearest-codeword
    assignment. Ratios are softmax(logits) per row; zero logits give the
    uniform 1/n initialization. ``frozen`` marks a layer whose
    assignments have been finalized (logits stop training).
    """

    candidates: np.ndarray  # (S, n) int64
    logits: np.ndarray  # (S, n) float32
    frozen: bool = False

    @property
    def n(self) -> int:
        return self.candidates.shape[1]

    def ratios(self) -> np.ndarray:
        """Per-row softmax of the logits, float64, rows sum to 1."""
        z = self.logits.astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class UniformQuantConfig:
    """Symmetric per-tensor uniform quantizer: b bits, scale s."""

    b: int
    s: float

    def __post_init__(self):
        if self.b not in (2, 3, 4, 8):
            raise ValueError(f"unsupported bit-width {self.b}")
        if not self.s > 0:
            raise ValueError(f"scale must be positive, got {self.s}")


@dataclass(frozen=True)
class PackedAssignments:
    """Assignment indices packed at log2(k) bits each, LSB-first within
    each byte, little-endian across bytes; the final partial byte is
    zero-padded in its high bits."""

    payload: bytes
    bits_per_index: int
    count: int

    def __post_init__(self):
        want = (self.count * self.bits_per_index + 7) // 8
        if len(self.payload) != want:
            raise ValueError(
                f"payload is {len(self.payload)} bytes, expected {want}"
            )


# ---------------------------------------------------------------------------
# sub-vector layout
# ---------------------------------------------------------------------------


def split_subvectors(w: np.ndarray, d: int) -> np.ndarray:
    """Cut W (o x i) into row-major sub-vectors of length d.

    Sub-vector (r, j) covers W[r, j*d:(j+1)*d]; returns an (o*i/d, d)
    float32 array.
    """
    w = np.asarray(w, dtype=np.float32)
    if w.ndim != 2:
        raise ValueError(f"expected a 2-D weight matrix, got shape {w.shape}")
    o, i = w.shape
    if d < 1 or i % d != 0:
        raise ValueError(f"sub-vector dim {d} must divide i={i}")
    return w.reshape(o * i // d, d)


def join_subvectors(sub: np.ndarray, o: int, i: int) -> np.ndarray:
    """Inverse of :func:`split_subvectors`."""
    sub = np.asarray(sub, dtype=np.float32)
    if sub.ndim != 2 or sub.shape[0] * sub.shape[1] != o * i:
        raise ValueError(f"cannot join {sub.shape} into {o}x{i}")
    return sub.reshape(o, i)


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------


def _sqdist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, float64, shape (len(x), len(c)).

    Small problems use exact elementwise differences so that equal
    points give exactly zero; large ones use the BLAS-friendly norm
    expansion, chunked over rows to bound memory.
    """
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    s, d = x.shape
    k = c.shape[0]
    out = np.empty((s, k), dtype=np.float64)
    chunk = max(1, _CHUNK_ELEMS // max(k * d, 1))
    if s * k * d <= _DIRECT_DIST_LIMIT:
        for lo in range(0, s, chunk):
            diff = x[lo : lo + chunk, None, :] - c[None, :, :]
            out[lo : lo + chunk] = np.einsum("skd,skd->sk", diff, diff)
        return out
    c_norm = np.einsum("kd,kd->k", c, c)
    for lo in range(0, s, chunk):
        xb = x[lo : lo + chunk]
        g = out[lo : lo + chunk]
        np.matmul(xb, c.T, out=g)
        g *= -2.0
        g += np.einsum("sd,sd->s", xb, xb)[:, None]
        g += c_norm[None, :]
        np.maximum(g, 0.0, out=g)
    return out


def nearest_candidates(sub: np.ndarray, codebook: np.ndarray, n: int) -> np.ndarray:
    """Indices of the n nearest codewords per sub-vector, ascending
    distance, ties broken by lowest index. Shape (S, n), int64."""
    d2 = _sqdist(sub, codebook)
    if n == 1:
        return np.argmin(d2, axis=1).astype(np.int64)[:, None]
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :n].astype(np.int64)


# ---------------------------------------------------------------------------
# K-Means
# ---------------------------------------------------------------------------


@dataclass
class KMeansResult:
    codebook: np.ndarray  # (k, d) float32
    assignments: np.ndarray  # (S,) int64
    objective: float  # sum of squared distances at the final iterate
    history: np.ndarray = field(repr=False)  # per-iteration objective, float64


def _kmeanspp_seed(x64: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """K-Means++ seeding over data points. If the remaining D^2 mass is
    zero (fewer distinct points than k) the remaining centroids cycle
    through the data deterministically."""
    s = x64.shape[0]
    centroids = np.empty((k, x64.shape[1]), dtype=np.float64)
    first = int(rng.integers(s))
    centroids[0] = x64[first]
    diff = x64 - centroids[0]
    d2 = np.einsum("sd,sd->s", diff, diff)
    for c in range(1, k):
        total = d2.sum()
        if total > 0.0:
            idx = int(rng.choice(s, p=d2 / total))
        else:
            idx = (first + c) % s
        centroids[c] = x64[idx]
        diff = x64 - centroids[c]
        np.minimum(d2, np.einsum("sd,sd->s", diff, diff), out=d2)
    return centroids


def kmeans(
    subvectors: np.ndarray,
    k: int,
    seed: int = 0,
    max_iters: int = KMEANS_MAX_ITERS,
    tol: float = KMEANS_TOL,
) -> KMeansResult:
    """Lloyd iterations from K-Means++ seeding.

    The recorded objective history is non-increasing: an iteration that
    fails to improve (including float-level noise) terminates the loop
    without being recorded, and the returned codebook/assignments are
    the consistent pair behind ``history[-1]``. Final assignments are
    recomputed against the float32 codebook with the same distance
    helper used by :func:`build_candidates`, so
    ``build_candidates(...).candidates[:, 0]`` reproduces them exactly.
    """
    sub = np.asarray(subvectors, dtype=np.float32)
    if sub.ndim != 2:
        raise ValueError(f"expected (count, d) sub-vectors, got shape {sub.shape}")
    s = sub.shape[0]
    if s < k:
        raise ValueError(f"k-means needs at least k={k} sub-vectors, got {s}")
    rng = np.random.default_rng(seed)
    x64 = sub.astype(np.float64)
    centroids = _kmeanspp_seed(x64, k, rng)

    history: list[float] = []
    best_centroids = centroids
    best_assign = np.zeros(s, dtype=np.int64)
    for _ in range(max_iters):
        d2 = _sqdist(x64, centroids)
        assign = np.argmin(d2, axis=1)
        errs = d2[np.arange(s), assign]
        counts = np.bincount(assign, minlength=k)
        for c in np.flatnonzero(counts == 0):
            # dead cluster: steal the point with the largest current error
            p = int(np.argmax(errs))
            centroids = centroids.copy()
            centroids[c] = x64[p]
            assign[p] = c
            errs[p] = 0.0
            counts = np.bincount(assign, minlength=k)
        obj = float(errs.sum())
        if history and obj >= history[-1]:
            break
        history.append(obj)
        best_centroids = centroids
        best_assign = assign.astype(np.int64)
        if obj == 0.0:
            break
        if len(history) >= 2 and history[-2] - obj < tol * history[-2]:
            break
        sums = np.zeros((k, x64.shape[1]), dtype=np.float64)
        np.add.at(sums, assign, x64)
        centroids = sums / counts[:, None]

    codebook = best_centroids.astype(np.float32)
    final_assign = nearest_candidates(sub, codebook, 1)[:, 0]
    # keep the recorded objective; re-assignment against the rounded
    # codebook only moves it at float32 noise level
    return KMeansResult(
        codebook=codebook,
        assignments=final_assign,
        objective=history[-1],
        history=np.asarray(history, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# candidate sets and reconstruction
# ---------------------------------------------------------------------------


def build_candidates(subvectors: np.ndarray, codebook: np.ndarray, n: int) -> CandidateSet:
    """Top-n nearest codewords per sub-vector with uniform initial ratios."""
    sub = np.asarray(subvectors, dtype=np.float32)
    cb = np.asarray(codebook, dtype=np.float32)
    k = cb.shape[0]
    if not 1 <= n <= k:
        raise ValueError(f"candidate count n={n} must satisfy 1 <= n <= k={k}")
    cand = nearest_candidates(sub, cb, n)
    logits = np.zeros(cand.shape, dtype=np.float32)
    return CandidateSet(candidates=cand, logits=logits, frozen=False)


def reconstruct_hard(
    codebook: np.ndarray, assignments: np.ndarray, shape: LayerShape
) -> np.ndarray:
    """Replace each sub-vector by its assigned codeword; (o, i) float32."""
    cb = np.asarray(codebook, dtype=np.float32)
    a = np.asarray(assignments)
    sub = cb[a]
    return join_subvectors(sub, shape.o, shape.i)


def reconstruct_soft(
    codebook: np.ndarray, cand: CandidateSet, shape: LayerShape
) -> np.ndarray:
    """Ratio-weighted average of each sub-vector's candidate codewords.

    Pure-numpy reference; the differentiable twin used during
    calibration is built from tensor ops and must agree with this.
    """
    cb = np.asarray(codebook, dtype=np.float64)
    r = cand.ratios()  # (S, n) float64
    gathered = cb[cand.candidates]  # (S, n, d)
    sub = np.einsum("sn,snd->sd", r, gathered)
    return join_subvectors(sub.astype(np.float32), shape.o, shape.i)


def finalize(cand: CandidateSet) -> np.ndarray:
    """Collapse each sub-vector to its highest-ratio candidate.

    Ties resolve to the earliest tied position, so an exactly uniform
    row picks candidates[0], the nearest codeword.
    """
    pos = np.argmax(cand.logits, axis=1)
    return cand.candidates[np.arange(cand.candidates.shape[0]), pos]


# ---------------------------------------------------------------------------
# uniform-quantization baseline
# ---------------------------------------------------------------------------


def uniform_quantize(w: np.ndarray, b: int) -> tuple[np.ndarray, UniformQuantConfig]:
    """Symmetric per-tensor uniform quantization to b bits.

    s = max|W| / (2^(b-1) - 1); integer levels are clamped to
    +-(2^(b-1)-1). An all-zero tensor reconstructs to zeros with s = 1.
    Rounding is round-half-to-even at exact midpoints.
    """
    w = np.asarray(w, dtype=np.float32)
    if b not in (2, 3, 4, 8):
        raise ValueError(f"unsupported bit-width {b}")
    qmax = (1 << (b - 1)) - 1
    m = float(np.max(np.abs(w))) if w.size else 0.0
    if m == 0.0:
        return np.zeros_like(w), UniformQuantConfig(b=b, s=1.0)
    s = m / qmax
    w_int = np.clip(np.rint(w.astype(np.float64) / s), -qmax, qmax)
    w_hat = (w_int * s).astype(np.float32)
    return w_hat, UniformQuantConfig(b=b, s=s)


# ---------------------------------------------------------------------------
# bit packing
# ---------------------------------------------------------------------------


def pack(assignments: np.ndarray, k: int) -> PackedAssignments:
    """Pack indices at log2(k) bits each into a little-endian bit stream."""
    if k < 2 or (k & (k - 1)) != 0:
        raise ValueError(f"codebook size {k} not a power of two")
    a = np.asarray(assignments, dtype=np.int64)
    if a.ndim != 1:
        raise ValueError(f"expected flat assignments, got shape {a.shape}")
    if a.size and (a.min() < 0 or a.max() >= k):
        raise ValueError(f"assignment index out of range for k={k}")
    bits = k.bit_length() - 1
    # (count, bits) matrix of bits, LSB of each index first
    bit_mat = (a[:, None] >> np.arange(bits, dtype=np.int64)[None, :]) & 1
    stream = bit_mat.astype(np.uint8).reshape(-1)
    payload = np.packbits(stream, bitorder="little").tobytes()
    return PackedAssignments(payload=payload, bits_per_index=bits, count=a.size)


def unpack(packed: PackedAssignments, count: int, k: int) -> np.ndarray:
    """Inverse of :func:`pack`; returns (count,) int64 indices."""
    if k < 2 or (k & (k - 1)) != 0:
        raise ValueError(f"codebook size {k} not a power of two")
    bits = k.bit_length() - 1
    if packed.bits_per_index != bits:
        raise ValueError(
            f"packed at {packed.bits_per_index} bits/index, expected {bits}"
        )
    if packed.count != count:
        raise ValueError(f"packed count {packed.count} != requested {count}")
    need = (count * bits + 7) // 8
    if len(packed.payload) != need:
        raise ValueError(f"payload is {len(packed.payload)} bytes, expected {need}")
    raw = np.frombuffer(packed.payload, dtype=np.uint8)
    stream = np.unpackbits(raw, bitorder="little", count=count * bits)
    bit_mat = stream.reshape(count, bits).astype(np.int64)
    return bit_mat @ (np.int64(1) << np.arange(bits, dtype=np.int64))


# ---------------------------------------------------------------------------
# storage accounting
# ---------------------------------------------------------------------------


def storage_report(shape: LayerShape) -> dict:
    """Exact bit counts for one quantized layer."""
    bits = shape.index_bits
    assignment_bits = shape.num_subvectors * bits
    codebook_bits = shape.k * shape.d * 32
    return {
        "assignment_bits": assignment_bits,
        "codebook_bits": codebook_bits,
        "effective_bits_per_weight": bits / shape.d,
    }
