"""Codebooks and the three quantization schemes: VQ, MCQ, and RQ.

Plain vector quantization maps a vector to its nearest codebook entry.
Multi-codebook quantization (MCQ) splits a d-dim token into n contiguous
chunks and quantizes chunk j with its own sub-codebook, so the effective
vocabulary is the product of sub-codebook sizes. Residual quantization (RQ)
quantizes coarse-to-fine: each level quantizes what the previous levels left
over, and the reconstruction is the sum of the selected codes.

Distances are squared Euclidean with no normalization; ties break toward the
smallest index. Distance arithmetic runs in float64 even though entries are
stored float32, so results are stable against summation order.

Lookups and quantize calls are pure with respect to `entries` and may run
concurrently over disjoint tokens; usage-count increments are batched.
Mutation (fitting, EMA updates, revival) requires exclusive access.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientDataError, NonFiniteInputError, ShapeError
from .seeding import substream

EMA_EPS = 1e-5

# cap on float64 elements of a (chunk, K, c) distance workspace
_DIST_BLOCK = 4_000_000


@dataclass
class Codebook:
    """A bank of K learnable code vectors of dimension c.

    Carries per-entry usage counts (reset with `reset_usage`) and the EMA
    accumulators used by `ema_update`.
    """

    entries: np.ndarray  # (K, c) float32
    usage_counts: np.ndarray  # (K,) int64
    ema_cluster_size: np.ndarray  # (K,) float64
    ema_embed_sum: np.ndarray  # (K, c) float64

    @classmethod
    def from_entries(cls, entries) -> "Codebook":
        e = np.ascontiguousarray(entries, dtype=np.float32)
        if e.ndim != 2 or e.shape[0] < 1 or e.shape[1] < 1:
            raise ShapeError(f"codebook entries must be (K>=1, c>=1), got {e.shape}")
        if not np.isfinite(e).all():
            raise NonFiniteInputError("codebook entries contain NaN/Inf")
        k = e.shape[0]
        return cls(
            entries=e,
            usage_counts=np.zeros(k, dtype=np.int64),
            ema_cluster_size=np.ones(k, dtype=np.float64),
            ema_embed_sum=e.astype(np.float64),
        )

    @property
    def num_entries(self) -> int:
        return self.entries.shape[0]

    @property
    def code_dim(self) -> int:
        return self.entries.shape[1]

    def reset_usage(self):
        self.usage_counts[:] = 0

    def validate(self):
        if not np.isfinite(self.entries).all():
            raise NonFiniteInputError("codebook entries contain NaN/Inf")
        if (self.ema_cluster_size < 0).any():
            raise ShapeError("ema_cluster_size must be nonnegative")
        if (self.usage_counts < 0).any():
            raise ShapeError("usage_counts must be nonnegative")


@dataclass
class MultiCodebookQuantizer:
    """n sub-codebooks jointly quantizing a d-dim token by contiguous chunks."""

    sub_codebooks: list
    token_dim: int

    def __post_init__(self):
        n = len(self.sub_codebooks)
        if n < 1:
            raise ShapeError("need at least one sub-codebook")
        if self.token_dim % n != 0:
            raise ShapeError(f"token_dim {self.token_dim} not divisible by n={n}")
        chunk = self.token_dim // n
        for j, cb in enumerate(self.sub_codebooks):
            if cb.code_dim != chunk:
                raise ShapeError(
                    f"sub-codebook {j} has code_dim {cb.code_dim}, expected {chunk}"
                )

    @property
    def num_sub_codebooks(self) -> int:
        return len(self.sub_codebooks)

    @property
    def chunk_dim(self) -> int:
        return self.token_dim // len(self.sub_codebooks)

    def vocab_bits(self) -> float:
        return vocab_bits([cb.num_entries for cb in self.sub_codebooks])


@dataclass
class ResidualQuantizer:
    """Coarse-to-fine quantizer: each level quantizes the running residual.

    With `shared=True` every level is the same Codebook object (one shared
    large codebook, the conventional RQ setup); otherwise levels own
    independent codebooks.
    """

    levels: list
    shared: bool = False

    def __post_init__(self):
        if len(self.levels) < 1:
            raise ShapeError("need at least one level")
        d = self.levels[0].code_dim
        for j, cb in enumerate(self.levels):
            if cb.code_dim != d:
                raise ShapeError(f"level {j} code_dim {cb.code_dim} != token dim {d}")
        if self.shared and any(cb is not self.levels[0] for cb in self.levels):
            raise ShapeError("shared residual quantizer must reuse one Codebook object")

    @classmethod
    def with_shared_codebook(cls, codebook: Codebook, num_levels: int) -> "ResidualQuantizer":
        return cls(levels=[codebook] * num_levels, shared=True)

    @property
    def token_dim(self) -> int:
        return self.levels[0].code_dim

    @property
    def num_levels(self) -> int:
        return len(self.levels)


@dataclass
class QuantizedToken:
    """One quantized token: selected indices, reconstruction, squared error."""

    indices: tuple
    quantized: np.ndarray  # (d,) float32
    error: float


@dataclass
class CodebookStats:
    """Usage diagnostics: assignment histogram, utilization, perplexity."""

    histogram: np.ndarray
    utilization: float
    perplexity: float


# ---------------------------------------------------------------------------
# distance kernels


def _check_queries(x, dim, what="query"):
    q = np.asarray(x)
    if q.ndim == 1:
        q = q[None, :]
    if q.ndim != 2 or q.shape[1] != dim:
        raise ShapeError(f"{what} must have dimension {dim}, got shape {np.asarray(x).shape}")
    if not np.isfinite(q).all():
        raise NonFiniteInputError(f"{what} contains NaN/Inf")
    return q


def sq_distances(queries, entries) -> np.ndarray:
    """Exact (N, K) squared Euclidean distances in float64, blocked over rows."""
    x = np.asarray(queries, dtype=np.float64)
    e = np.asarray(entries, dtype=np.float64)
    n, k = x.shape[0], e.shape[0]
    out = np.empty((n, k), dtype=np.float64)
    step = max(1, _DIST_BLOCK // max(k * e.shape[1], 1))
    for i in range(0, n, step):
        diff = x[i : i + step, None, :] - e[None, :, :]
        out[i : i + step] = np.einsum("nkc,nkc->nk", diff, diff)
    return out


def lookup(codebook: Codebook, query) -> tuple:
    """Nearest entry to `query`: returns (index, code vector) and counts the hit."""
    q = np.asarray(query)
    if q.ndim != 1 or q.shape[0] != codebook.code_dim:
        raise ShapeError(f"query must have dimension {codebook.code_dim}, got shape {q.shape}")
    if not np.isfinite(q).all():
        raise NonFiniteInputError("query contains NaN/Inf")
    d = sq_distances(q[None, :], codebook.entries)[0]
    idx = int(np.argmin(d))
    codebook.usage_counts[idx] += 1
    return idx, codebook.entries[idx].copy()


def lookup_batch(codebook: Codebook, queries, count_usage: bool = True):
    """Vectorized nearest-entry search: (indices, squared errors)."""
    q = _check_queries(queries, codebook.code_dim, "queries")
    d = sq_distances(q, codebook.entries)
    idx = np.argmin(d, axis=1).astype(np.int64)
    err = d[np.arange(len(idx)), idx]
    if count_usage:
        codebook.usage_counts += np.bincount(idx, minlength=codebook.num_entries)
    return idx, err


# ---------------------------------------------------------------------------
# quantization schemes


def quantize_mcq(q: MultiCodebookQuantizer, token) -> QuantizedToken:
    """Quantize one token chunk-wise: chunk j spans components [j*d/n, (j+1)*d/n)."""
    t = np.asarray(token)
    if t.ndim != 1 or t.shape[0] != q.token_dim:
        raise ShapeError(f"token must have dimension {q.token_dim}, got shape {t.shape}")
    if not np.isfinite(t).all():
        raise NonFiniteInputError("token contains NaN/Inf")
    chunk = q.chunk_dim
    indices, codes, error = [], [], 0.0
    for j, cb in enumerate(q.sub_codebooks):
        part = t[j * chunk : (j + 1) * chunk]
        idx, code = lookup(cb, part)
        indices.append(idx)
        codes.append(code)
        diff = part.astype(np.float64) - code.astype(np.float64)
        error += float(diff @ diff)
    return QuantizedToken(tuple(indices), np.concatenate(codes), error)


def quantize_mcq_batch(q: MultiCodebookQuantizer, tokens, count_usage: bool = True):
    """Batch MCQ: returns (indices (N, n), quantized (N, d) float32,
    per-sub-codebook squared errors (N, n)); total error is the row sum."""
    x = _check_queries(tokens, q.token_dim, "tokens")
    n, chunk = q.num_sub_codebooks, q.chunk_dim
    indices = np.empty((x.shape[0], n), dtype=np.int64)
    quantized = np.empty((x.shape[0], q.token_dim), dtype=np.float32)
    sub_errors = np.empty((x.shape[0], n), dtype=np.float64)
    for j, cb in enumerate(q.sub_codebooks):
        part = x[:, j * chunk : (j + 1) * chunk]
        idx, err = lookup_batch(cb, part, count_usage=count_usage)
        indices[:, j] = idx
        quantized[:, j * chunk : (j + 1) * chunk] = cb.entries[idx]
        sub_errors[:, j] = err
    return indices, quantized, sub_errors


def quantize_rq(q: ResidualQuantizer, token) -> QuantizedToken:
    """Quantize one token level by level against the running residual."""
    t = np.asarray(token)
    if t.ndim != 1 or t.shape[0] != q.token_dim:
        raise ShapeError(f"token must have dimension {q.token_dim}, got shape {t.shape}")
    if not np.isfinite(t).all():
        raise NonFiniteInputError("token contains NaN/Inf")
    residual = t.astype(np.float64)
    indices, codes = [], []
    for cb in q.levels:
        d = sq_distances(residual[None, :], cb.entries)[0]
        idx = int(np.argmin(d))
        cb.usage_counts[idx] += 1
        indices.append(idx)
        codes.append(cb.entries[idx])
        residual = residual - codes[-1].astype(np.float64)
    quantized = np.sum(np.stack(codes, axis=0), axis=0, dtype=np.float32)
    diff = t.astype(np.float64) - quantized.astype(np.float64)
    return QuantizedToken(tuple(indices), quantized, float(diff @ diff))


def quantize_rq_batch(q: ResidualQuantizer, tokens, count_usage: bool = True):
    """Batch RQ: returns (indices (N, n), quantized (N, d) float32, errors (N,),
    level_inputs) where level_inputs[j] is the residual each level saw (for EMA)."""
    x = _check_queries(tokens, q.token_dim, "tokens")
    residual = x.astype(np.float64)
    indices = np.empty((x.shape[0], q.num_levels), dtype=np.int64)
    codes = np.zeros((x.shape[0], q.token_dim), dtype=np.float32)
    level_inputs = []
    for j, cb in enumerate(q.levels):
        level_inputs.append(residual.astype(np.float32))
        idx, _ = lookup_batch(cb, residual, count_usage=count_usage)
        indices[:, j] = idx
        picked = cb.entries[idx]
        codes = codes + picked
        residual = residual - picked.astype(np.float64)
    diff = x.astype(np.float64) - codes.astype(np.float64)
    errors = np.einsum("nd,nd->n", diff, diff)
    return indices, codes, errors, level_inputs


def vocab_bits(sub_codebook_sizes) -> float:
    """Effective vocabulary size in bits: sum of log2(K_i)."""
    bits = 0.0
    for k in sub_codebook_sizes:
        if k < 1:
            raise ShapeError(f"sub-codebook size must be >= 1, got {k}")
        bits += math.log2(k)
    return bits


# ---------------------------------------------------------------------------
# codebook fitting and maintenance


def _grouped_sums(x, idx, num_groups):
    """Per-group column sums via bincount (much faster than np.add.at)."""
    out = np.empty((num_groups, x.shape[1]), dtype=np.float64)
    for j in range(x.shape[1]):
        out[:, j] = np.bincount(idx, weights=x[:, j], minlength=num_groups)
    return out


def _fast_assign(x64, centers64, x32=None, xsq32=None):
    # assignment via |x|^2 - 2 x.c + |c|^2 in float32 (speed), distances of the
    # chosen pairs recomputed in float64 (stable distortion bookkeeping); used
    # only inside k-means where exact tie-breaking does not matter
    if x32 is None:
        x32 = x64.astype(np.float32)
    if xsq32 is None:
        xsq32 = (x32**2).sum(axis=1)
    c32 = centers64.astype(np.float32)
    d = xsq32[:, None] - 2.0 * (x32 @ c32.T) + (c32**2).sum(axis=1)[None, :]
    idx = np.argmin(d, axis=1)
    diff = x64 - centers64[idx]
    return idx, np.einsum("nc,nc->n", diff, diff)


def fit_kmeans(
    vectors,
    num_entries: int,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-4,
    return_history: bool = False,
):
    """k-means++ seeding followed by Lloyd iterations.

    Stops when the relative distortion improvement falls below `tol` or after
    `max_iters`. Empty clusters are re-seeded to the point currently farthest
    from its assigned centroid. Deterministic given `seed`.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"vectors must be 2-d, got shape {x.shape}")
    if num_entries < 1:
        raise ShapeError("need num_entries >= 1")
    if x.shape[0] < num_entries:
        raise InsufficientDataError(
            f"need at least {num_entries} vectors, got {x.shape[0]}"
        )
    rng = substream(seed, "kmeans")
    n = x.shape[0]

    centers = np.empty((num_entries, x.shape[1]), dtype=np.float64)
    centers[0] = x[int(rng.integers(n))]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, num_entries):
        total = d2.sum()
        if total <= 0:
            pick = int(rng.integers(n))
        else:
            pick = int(rng.choice(n, p=d2 / total))
        centers[j] = x[pick]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))

    history = []
    prev = np.inf
    x32 = x.astype(np.float32)
    xsq32 = (x32**2).sum(axis=1)
    for _ in range(max_iters):
        idx, dist = _fast_assign(x, centers, x32, xsq32)
        distortion = float(dist.mean())
        history.append(distortion)
        counts = np.bincount(idx, minlength=num_entries)
        sums = _grouped_sums(x, idx, num_entries)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if empty.size:
            order = np.argsort(dist)[::-1]
            for rank, j in enumerate(empty):
                centers[j] = x[order[rank % n]]
        if prev - distortion < tol * max(prev, 1e-12):
            break
        prev = distortion

    cb = Codebook.from_entries(centers.astype(np.float32))
    if return_history:
        return cb, history
    return cb


def fit_mcq(vectors, num_sub_codebooks: int, num_entries: int, seed: int = 0, **kw):
    """Fit an MCQ quantizer: independent k-means per contiguous chunk.

    With one sub-codebook this is exactly `fit_kmeans` with the same seed, so
    MCQ(n=1) coincides with plain VQ.
    """
    x = np.asarray(vectors)
    if x.ndim != 2:
        raise ShapeError(f"vectors must be 2-d, got shape {x.shape}")
    d = x.shape[1]
    if d % num_sub_codebooks != 0:
        raise ShapeError(f"dim {d} not divisible by {num_sub_codebooks} sub-codebooks")
    if num_sub_codebooks == 1:
        return MultiCodebookQuantizer(
            sub_codebooks=[fit_kmeans(x, num_entries, seed=seed, **kw)], token_dim=d
        )
    chunk = d // num_sub_codebooks
    subs = [
        fit_kmeans(x[:, j * chunk : (j + 1) * chunk], num_entries, seed=seed * 1000 + j, **kw)
        for j in range(num_sub_codebooks)
    ]
    return MultiCodebookQuantizer(sub_codebooks=subs, token_dim=d)


def fit_rq(
    vectors,
    num_levels: int,
    num_entries: int,
    seed: int = 0,
    shared: bool = True,
    refine_rounds: int = 4,
    **kw,
):
    """Fit a residual quantizer.

    Per-level mode runs greedy stage-wise k-means on the residuals. Shared
    mode fits one codebook on the raw vectors, then refines it with Lloyd
    rounds over the pooled assignments from every level.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"vectors must be 2-d, got shape {x.shape}")
    if not shared:
        residual = x.copy()
        levels = []
        for j in range(num_levels):
            cb = fit_kmeans(residual, num_entries, seed=seed * 1000 + j, **kw)
            levels.append(cb)
            idx, _ = _fast_assign(residual, cb.entries.astype(np.float64))
            residual -= cb.entries[idx].astype(np.float64)
        return ResidualQuantizer(levels=levels, shared=False)

    cb = fit_kmeans(x, num_entries, seed=seed, **kw)
    for _ in range(refine_rounds):
        centers = cb.entries.astype(np.float64)
        sums = np.zeros_like(centers)
        counts = np.zeros(num_entries, dtype=np.int64)
        residual = x.copy()
        for _level in range(num_levels):
            idx, _ = _fast_assign(residual, centers)
            sums += _grouped_sums(residual, idx, num_entries)
            counts += np.bincount(idx, minlength=num_entries)
            residual -= centers[idx]
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        cb.entries[:] = centers.astype(np.float32)
        cb.ema_embed_sum[:] = cb.entries.astype(np.float64)
    return ResidualQuantizer.with_shared_codebook(cb, num_levels)


def ema_update(codebook: Codebook, vectors, indices, decay: float) -> Codebook:
    """Exponential-moving-average codebook update from one batch of assignments.

    ema_cluster_size[i] <- g*size + (1-g)*n_i,
    ema_embed_sum[i]    <- g*sum  + (1-g)*sum of vectors assigned to i,
    entries[i]          <- ema_embed_sum[i] / (ema_cluster_size[i] + 1e-5).
    """
    if not 0.0 < decay < 1.0:
        raise ShapeError(f"decay must be in (0, 1), got {decay}")
    k, c = codebook.num_entries, codebook.code_dim
    if len(indices) == 0:
        counts = np.zeros(k, dtype=np.float64)
        sums = np.zeros((k, c), dtype=np.float64)
    else:
        v = _check_queries(vectors, c, "assigned vectors").astype(np.float64)
        idx = np.asarray(indices, dtype=np.int64)
        if idx.shape[0] != v.shape[0]:
            raise ShapeError("vectors and indices lengths differ")
        counts = np.bincount(idx, minlength=k).astype(np.float64)
        sums = _grouped_sums(v, idx, k)
    codebook.ema_cluster_size *= decay
    codebook.ema_cluster_size += (1.0 - decay) * counts
    codebook.ema_embed_sum *= decay
    codebook.ema_embed_sum += (1.0 - decay) * sums
    codebook.entries[:] = (
        codebook.ema_embed_sum / (codebook.ema_cluster_size[:, None] + EMA_EPS)
    ).astype(np.float32)
    return codebook


def revive_dead_codes(codebook: Codebook, batch, threshold: float, seed: int = 0) -> int:
    """Relocate entries whose EMA cluster size fell below `threshold`.

    Each dead entry moves to a batch vector sampled with probability
    proportional to that vector's current quantization error. Returns the
    number of entries revived. Deterministic given `seed`.
    """
    b = np.asarray(batch)
    if b.size == 0:
        warnings.warn("revive_dead_codes called with an empty batch; no-op")
        return 0
    b = _check_queries(b, codebook.code_dim, "batch")
    dead = np.flatnonzero(codebook.ema_cluster_size < threshold)
    if dead.size == 0:
        return 0
    _, err = lookup_batch(codebook, b, count_usage=False)
    total = err.sum()
    if total > 0:
        p = err / total
    else:
        p = np.full(b.shape[0], 1.0 / b.shape[0])
    rng = substream(seed, "revive")
    picks = rng.choice(b.shape[0], size=dead.size, p=p)
    for j, pick in zip(dead, picks):
        codebook.entries[j] = b[pick].astype(np.float32)
        codebook.ema_cluster_size[j] = 1.0
        codebook.ema_embed_sum[j] = codebook.entries[j].astype(np.float64)
    return int(dead.size)


def stats_from_histogram(histogram) -> CodebookStats:
    """Utilization and perplexity of an assignment histogram."""
    h = np.asarray(histogram, dtype=np.float64)
    total = h.sum()
    if total <= 0:
        return CodebookStats(histogram=h.astype(np.int64), utilization=0.0, perplexity=1.0)
    p = h[h > 0] / total
    entropy = float(-(p * np.log(p)).sum())
    return CodebookStats(
        histogram=h.astype(np.int64),
        utilization=float((h > 0).mean()),
        perplexity=float(np.exp(entropy)),
    )


def stats(codebook: Codebook) -> CodebookStats:
    """Diagnostics over the usage counts recorded since the last reset."""
    return stats_from_histogram(codebook.usage_counts)
