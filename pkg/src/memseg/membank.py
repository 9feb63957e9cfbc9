"""The class memory: per-class embedding records, clustering, alignment.

Each learned class owns one record holding a mutable category embedding
(its exclusive semantics) and an immutable hyperclass embedding (the
semantics it shares with similar classes, found by k-means over stored
category embeddings).  Raw embedding pairs are aligned by a gated
cross-alignment block - two small FC branches whose sigmoid outputs are
fused multiplicatively and used to reweight both raw vectors - before
insertion.  The pool is the engine's persistent state; hyperclass
values are frozen at insertion and never change afterwards.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk


class PoolError(ValueError):
    """Invalid memory-pool operation (duplicate/unknown class, empty pool)."""


@dataclass
class Embedding:
    """Fixed-length real vector with category or hyperclass semantics."""

    values: np.ndarray
    kind: str = "category"  # "category" | "hyperclass"
    stage: str = "raw"  # "raw" | "aligned"

    def __post_init__(self):
        self.values = nk.as_f64(self.values)
        if self.values.ndim != 1:
            raise nk.DimensionError("embedding values must be a vector")
        nk.check_finite(self.values, "embedding")
        if self.kind not in ("category", "hyperclass"):
            raise ValueError(f"unknown embedding kind {self.kind!r}")
        if self.stage not in ("raw", "aligned"):
            raise ValueError(f"unknown embedding stage {self.stage!r}")

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def copy(self) -> "Embedding":
        return Embedding(self.values.copy(), self.kind, self.stage)


@dataclass
class ClassRecord:
    class_id: int
    category: Embedding
    hyper: Embedding
    session_id: int


class MemoryPool:
    """Ordered collection of per-class records, keyed by class id.

    Single-writer: all mutation goes through `insert_class` and
    `set_category`; hyper embeddings are write-protected at insertion.
    """

    def __init__(self, embed_dim: int | None = None):
        self.embed_dim = embed_dim
        self._records: dict[int, ClassRecord] = {}

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, class_id: int) -> bool:
        return class_id in self._records

    def ids(self) -> list[int]:
        return list(self._records.keys())

    def records(self) -> list[ClassRecord]:
        return list(self._records.values())

    def get(self, class_id: int) -> ClassRecord:
        if class_id not in self._records:
            raise PoolError(f"unknown class id {class_id}")
        return self._records[class_id]

    def category_matrix(self) -> np.ndarray:
        """Stacked category embeddings (|P|, D) in record order."""
        if not self._records:
            raise PoolError("memory pool is empty")
        return np.stack([r.category.values for r in self._records.values()])

    def set_category(self, class_id: int, values: np.ndarray) -> None:
        rec = self.get(class_id)
        values = nk.as_f64(values)
        if values.shape != (self.embed_dim,):
            raise nk.DimensionError(f"category vector shape {values.shape} vs dim {self.embed_dim}")
        nk.check_finite(values, "category embedding")
        rec.category = Embedding(values, "category", rec.category.stage)

    def clone(self) -> "MemoryPool":
        out = MemoryPool(self.embed_dim)
        for rec in self._records.values():
            out._records[rec.class_id] = ClassRecord(
                rec.class_id, rec.category.copy(), rec.hyper, rec.session_id
            )
        return out


def insert_class(
    pool: MemoryPool, class_id: int, e_c: Embedding, e_h: Embedding, session_id: int
) -> MemoryPool:
    """Add a class record; the stored hyper embedding is frozen for good."""
    if class_id in pool:
        raise PoolError(f"class id {class_id} already present")
    if e_c.dim != e_h.dim:
        raise nk.DimensionError("category/hyper dims differ")
    if pool.embed_dim is None:
        pool.embed_dim = e_c.dim
    if e_c.dim != pool.embed_dim:
        raise nk.DimensionError(f"embedding dim {e_c.dim} vs pool dim {pool.embed_dim}")
    hyper = Embedding(e_h.values.copy(), "hyperclass", e_h.stage)
    hyper.values.setflags(write=False)
    pool._records[class_id] = ClassRecord(class_id, e_c.copy(), hyper, session_id)
    return pool


# ---------------------------------------------------------------------------
# k-means over embeddings
# ---------------------------------------------------------------------------


def _as_points(points) -> np.ndarray:
    if isinstance(points, np.ndarray):
        pts = nk.as_f64(points)
    else:
        pts = np.stack([p.values if isinstance(p, Embedding) else nk.as_f64(p) for p in points])
    if pts.ndim != 2:
        raise nk.DimensionError("points must form an (N, D) array")
    return pts


def kmeans(points, k: int, restarts: int = 50, seed: int = 0):
    """Lloyd's algorithm, best of `restarts` seeded runs by within-cluster SSE.

    The seed stream is re-derived from a canonical (sorted) view of the
    point set, so results do not depend on input order.  Empty clusters
    are reseeded with the point farthest from its assigned centroid.
    Returns (assignments aligned to the input order, centroids (k, D)).
    """
    pts = _as_points(points)
    n = pts.shape[0]
    if k <= 0:
        raise PoolError(f"cluster count must be positive, got {k}")
    if k > n:
        raise PoolError(f"cluster count {k} exceeds point count {n}")
    order = np.lexsort(pts.T[::-1])
    spts = pts[order]
    digest = zlib.crc32(spts.tobytes())
    rng = np.random.default_rng([seed & 0xFFFFFFFF, digest])

    best = None
    for _ in range(max(1, restarts)):
        centroids = spts[rng.choice(n, size=k, replace=False)].copy()
        assign = np.full(n, -1, dtype=np.int64)
        for _ in range(100):
            d2 = ((spts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
            new_assign = np.argmin(d2, axis=1)
            for c in range(k):
                sel = new_assign == c
                if np.any(sel):
                    centroids[c] = spts[sel].mean(axis=0)
                else:
                    far = np.argmax(d2[np.arange(n), new_assign])
                    centroids[c] = spts[far]
                    new_assign[far] = c
            if np.array_equal(new_assign, assign):
                break
            assign = new_assign
        sse = float(((spts - centroids[assign]) ** 2).sum())
        if best is None or sse < best[0] - 1e-15:
            best = (sse, assign.copy(), centroids.copy())

    _, assign_sorted, centroids = best
    assignments = np.empty(n, dtype=np.int64)
    assignments[order] = assign_sorted
    return assignments, centroids


def raw_hyperclass(
    ec_raw: Embedding, pool: MemoryPool, k: int, restarts: int = 50, seed: int = 0
) -> Embedding:
    """Cluster the stored category embeddings; return the centroid nearest
    to the new class's raw category embedding as its raw hyperclass."""
    if len(pool) == 0:
        raise PoolError("cannot derive a hyperclass from an empty pool")
    pts = pool.category_matrix()
    _, centroids = kmeans(pts, k, restarts, seed)
    d2 = ((centroids - ec_raw.values[None, :]) ** 2).sum(axis=1)
    return Embedding(centroids[int(np.argmin(d2))].copy(), kind="hyperclass", stage="raw")


# ---------------------------------------------------------------------------
# gated cross-alignment of raw embedding pairs
# ---------------------------------------------------------------------------


@dataclass
class AlignerParams:
    """Two-layer FC branch per embedding; sigmoid gates fused by product."""

    hyper_fc1: nk.AffineParams
    hyper_fc2: nk.AffineParams
    cat_fc1: nk.AffineParams
    cat_fc2: nk.AffineParams


def make_aligner(rng: np.random.Generator, dim: int, gate_bias: float = 2.0) -> AlignerParams:
    """Gate branches start open (positive second-layer bias): alignment
    begins as a mild reweighting and training closes channels that turn
    out to be irrelevant, rather than starting half-shut and strangling
    the embedding pathway before it becomes informative."""
    p = AlignerParams(
        nk.make_affine(rng, dim, dim),
        nk.make_affine(rng, dim, dim),
        nk.make_affine(rng, dim, dim),
        nk.make_affine(rng, dim, dim),
    )
    p.hyper_fc2.bias[:] = gate_bias
    p.cat_fc2.bias[:] = gate_bias
    return p


def _gate_forward(x: np.ndarray, fc1: nk.AffineParams, fc2: nk.AffineParams):
    z1 = nk.affine_batch(x, fc1)
    a1 = nk.relu(z1)
    z2 = nk.affine_batch(a1, fc2)
    g = nk.sigmoid(z2)
    return g, {"x": x, "z1": z1, "a1": a1, "g": g}


def _gate_backward(cache: dict, fc1: nk.AffineParams, fc2: nk.AffineParams, g_gate: np.ndarray):
    g_z2 = nk.sigmoid_backward(cache["g"], g_gate)
    g_a1, g_w2, g_b2 = nk.affine_batch_backward(cache["a1"], fc2, g_z2)
    g_z1 = nk.relu_backward(cache["z1"], g_a1)
    g_x, g_w1, g_b1 = nk.affine_batch_backward(cache["x"], fc1, g_z1)
    return g_x, (g_w1, g_b1, g_w2, g_b2)


def align_batch(eh_raw: np.ndarray, ec_raw: np.ndarray, p: AlignerParams):
    """Batched alignment of raw pairs: (N, D), (N, D) -> aligned (E_h, E_c)."""
    if eh_raw.shape != ec_raw.shape:
        raise nk.DimensionError("raw embedding shapes differ")
    gh, cache_h = _gate_forward(eh_raw, p.hyper_fc1, p.hyper_fc2)
    gc, cache_c = _gate_forward(ec_raw, p.cat_fc1, p.cat_fc2)
    fused = gh * gc
    out_h = fused * eh_raw
    out_c = fused * ec_raw
    cache = {"h": cache_h, "c": cache_c, "fused": fused, "eh": eh_raw, "ec": ec_raw, "p": p}
    return out_h, out_c, cache


def align_batch_backward(cache: dict, g_h: np.ndarray, g_c: np.ndarray):
    """Returns (g_eh_raw, g_ec_raw, grads dict keyed like AlignerParams fields)."""
    p: AlignerParams = cache["p"]
    fused, eh, ec = cache["fused"], cache["eh"], cache["ec"]
    gh, gc = cache["h"]["g"], cache["c"]["g"]
    g_fused = g_h * eh + g_c * ec
    g_eh = g_h * fused
    g_ec = g_c * fused
    g_gh = g_fused * gc
    g_gc = g_fused * gh
    g_eh_gate, gr_h = _gate_backward(cache["h"], p.hyper_fc1, p.hyper_fc2, g_gh)
    g_ec_gate, gr_c = _gate_backward(cache["c"], p.cat_fc1, p.cat_fc2, g_gc)
    grads = {
        "hyper_fc1": (gr_h[0], gr_h[1]),
        "hyper_fc2": (gr_h[2], gr_h[3]),
        "cat_fc1": (gr_c[0], gr_c[1]),
        "cat_fc2": (gr_c[2], gr_c[3]),
    }
    return g_eh + g_eh_gate, g_ec + g_ec_gate, grads


def align_embeddings(eh_raw: Embedding, ec_raw: Embedding, p: AlignerParams):
    """Align a raw hyperclass/category pair; returns (E_h, E_c) aligned."""
    if eh_raw.dim != ec_raw.dim:
        raise nk.DimensionError("raw embedding dims differ")
    out_h, out_c, _ = align_batch(eh_raw.values[None], ec_raw.values[None], p)
    return (
        Embedding(out_h[0], kind="hyperclass", stage="aligned"),
        Embedding(out_c[0], kind="category", stage="aligned"),
    )


# ---------------------------------------------------------------------------
# pool checkpointing (bit-exact text format)
# ---------------------------------------------------------------------------

_POOL_MAGIC = "memseg-pool v1"


def save_pool(pool: MemoryPool, path) -> None:
    """Write the pool as a text record stream; floats as C99 hex literals."""
    lines = [_POOL_MAGIC, f"dim {pool.embed_dim}"]
    for rec in pool.records():
        lines.append(f"class {rec.class_id} session {rec.session_id}")
        lines.append("ec " + " ".join(float(v).hex() for v in rec.category.values))
        lines.append("eh " + " ".join(float(v).hex() for v in rec.hyper.values))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_pool(path) -> MemoryPool:
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != _POOL_MAGIC:
        raise PoolError(f"not a pool checkpoint: {path}")
    dim = int(lines[1].split()[1])
    pool = MemoryPool(dim)
    i = 2
    while i < len(lines) and lines[i]:
        head = lines[i].split()
        class_id, session_id = int(head[1]), int(head[3])
        ec = np.array([float.fromhex(t) for t in lines[i + 1].split()[1:]])
        eh = np.array([float.fromhex(t) for t in lines[i + 2].split()[1:]])
        insert_class(
            pool,
            class_id,
            Embedding(ec, "category", "aligned"),
            Embedding(eh, "hyperclass", "aligned"),
            session_id,
        )
        i += 3
    return pool
