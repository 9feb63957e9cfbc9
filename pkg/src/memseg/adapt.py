"""Attention-based adaptive update of category embeddings.

Every pair of stored classes gets a relation coefficient - the inner
product of their category embeddings after two learned linear maps -
and a softmax over each row turns the coefficients into attention
weights.  A class's displacement is the attention-weighted sum of its
linearly transformed subtraction vectors against every stored class,
computed from a frozen snapshot and applied simultaneously, so the
update is deterministic and independent of record order.  Hyperclass
embeddings are never touched.

Extra support shots of an already-stored class are absorbed through the
same machinery: the shot joins the attention computation as a temporary
same-class entry whose subtraction vector is sign-reversed, pulling the
stored embedding toward the shot while cross-class terms keep pushing
it away from other classes.

Three update strategies are provided for benchmarking: `non-update`
(store and never touch), `linear-transform` (one shared trainable map
applied to in-scope records), and `attention` (the adaptive update
above, restricted to in-scope records).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .membank import Embedding, MemoryPool

STRATEGY_KINDS = ("non-update", "linear-transform", "attention")
STRATEGY_SCOPES = ("base-only", "new-only", "both")


@dataclass
class UpdateMaps:
    """The three bias-free square maps of the update rule."""

    phi: nk.AffineParams
    psi: nk.AffineParams
    w: nk.AffineParams

    def __post_init__(self):
        for m in (self.phi, self.psi, self.w):
            if m.weight.shape[0] != m.weight.shape[1]:
                raise nk.DimensionError("update maps must be square")
            if m.bias is not None:
                raise nk.DimensionError("update maps carry no bias")


def make_update_maps(rng: np.random.Generator, dim: int, scale: float = 1.0) -> UpdateMaps:
    """Identity-anchored init: I * scale plus small seeded noise.

    The identity anchor makes the raw relation coefficient a plain inner
    product and the displacement a direct repulsion at initialization;
    training refines from there.
    """
    def near_identity(s):
        return nk.AffineParams(np.eye(dim) * s + rng.uniform(-0.01, 0.01, (dim, dim)), None)

    return UpdateMaps(near_identity(1.0), near_identity(1.0), near_identity(scale))


@dataclass
class UpdateTrace:
    """Applied displacement per class plus the attention used to build it."""

    displacements: dict[int, np.ndarray]
    attention: np.ndarray


@dataclass
class UpdateStrategy:
    kind: str = "attention"
    scope: str = "both"

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.scope not in STRATEGY_SCOPES:
            raise ValueError(f"unknown strategy scope {self.scope!r}")


# ---------------------------------------------------------------------------
# core batched update rule (differentiable)
# ---------------------------------------------------------------------------


def update_rows(e: np.ndarray, pool_e: np.ndarray, sign: np.ndarray, maps: UpdateMaps):
    """Displace rows of ``e`` against the snapshot rows ``pool_e``.

    sign[n, l] is +1 for a cross-class pair (push apart) and -1 for a
    same-class pair (pull together).  Returns (updated rows, cache).
    """
    if e.ndim != 2 or pool_e.ndim != 2 or e.shape[1] != pool_e.shape[1]:
        raise nk.DimensionError("update_rows expects (N, D) and (P, D)")
    x = e @ maps.phi.weight.T
    y = pool_e @ maps.psi.weight.T
    scores = x @ y.T
    attn = nk.softmax(scores)
    signed = attn * sign
    coef = signed.sum(axis=1)
    m = coef[:, None] * e - signed @ pool_e
    disp = m @ maps.w.weight.T
    out = e + disp
    cache = {
        "e": e, "pool_e": pool_e, "sign": sign, "x": x, "y": y,
        "attn": attn, "coef": coef, "m": m, "maps": maps,
    }
    return out, cache


def update_rows_backward(cache: dict, g_out: np.ndarray):
    """Gradients (g_e, g_phi, g_psi, g_w) of the update_rows forward."""
    maps: UpdateMaps = cache["maps"]
    e, pool_e, sign = cache["e"], cache["pool_e"], cache["sign"]
    attn, coef, m, x, y = cache["attn"], cache["coef"], cache["m"], cache["x"], cache["y"]

    g_w = g_out.T @ m
    g_m = g_out @ maps.w.weight
    g_e = g_out.copy()  # identity path
    g_e += coef[:, None] * g_m
    g_coef = (g_m * e).sum(axis=1)
    g_signed = g_coef[:, None] - g_m @ pool_e.T
    g_attn = g_signed * sign
    g_scores = nk.softmax_backward(attn, g_attn)
    g_x = g_scores @ y
    g_e += g_x @ maps.phi.weight
    g_phi = g_x.T @ e
    g_y = g_scores.T @ x
    g_psi = g_y.T @ pool_e
    return g_e, g_phi, g_psi, g_w


# ---------------------------------------------------------------------------
# public operations over the pool
# ---------------------------------------------------------------------------


def relation_coeff(e_i: Embedding, e_j: Embedding, maps: UpdateMaps) -> float:
    """Inner product of the two embeddings after the phi/psi maps."""
    if e_i.dim != e_j.dim:
        raise nk.DimensionError("embedding dims differ")
    return float(np.dot(maps.phi.weight @ e_i.values, maps.psi.weight @ e_j.values))


def attention_matrix(pool: MemoryPool, maps: UpdateMaps) -> np.ndarray:
    """Row-stochastic (|P|, |P|) attention over stored category embeddings."""
    e = pool.category_matrix()
    scores = (e @ maps.phi.weight.T) @ (e @ maps.psi.weight.T).T
    return nk.softmax(scores)


def adaptive_update(pool: MemoryPool, maps: UpdateMaps):
    """Simultaneously displace every category embedding from a snapshot.

    Returns (new pool, trace); the input pool is left untouched and
    hyper embeddings are carried over unchanged.
    """
    e = pool.category_matrix()
    sign = np.ones((e.shape[0], e.shape[0]))
    out, cache = update_rows(e, e, sign, maps)
    new_pool = pool.clone()
    ids = pool.ids()
    for i, cid in enumerate(ids):
        new_pool.set_category(cid, out[i])
    trace = UpdateTrace(
        displacements={cid: out[i] - e[i] for i, cid in enumerate(ids)},
        attention=cache["attn"],
    )
    return new_pool, trace


def absorb_shot(pool: MemoryPool, class_id: int, new_ec: Embedding, maps: UpdateMaps) -> MemoryPool:
    """Fuse one extra support shot into a stored class.

    The shot joins the attention computation as a temporary same-class
    entry; only the stored record is updated, and the temporary entry is
    discarded afterwards.
    """
    rec = pool.get(class_id)
    if new_ec.dim != pool.embed_dim:
        raise nk.DimensionError("shot embedding dim mismatch")
    e_pool = pool.category_matrix()
    extended = np.vstack([e_pool, new_ec.values[None, :]])
    ids = pool.ids()
    row = ids.index(class_id)
    sign = np.ones((1, extended.shape[0]))
    sign[0, row] = -1.0  # self entry (zero difference anyway)
    sign[0, -1] = -1.0  # the temporary same-class shot
    out, _ = update_rows(rec.category.values[None, :], extended, sign, maps)
    new_pool = pool.clone()
    new_pool.set_category(class_id, out[0])
    return new_pool


def apply_strategy(
    pool: MemoryPool,
    strategy: UpdateStrategy,
    maps: UpdateMaps | None = None,
    lt_map: nk.AffineParams | None = None,
    current_session: int = 0,
) -> MemoryPool:
    """Run one update under the given strategy.

    Scope restricts which records change ("base-only": inserted before
    the current session, "new-only": inserted in it); under the
    attention strategy every record still participates in the attention
    computation regardless of scope.
    """
    def in_scope(rec) -> bool:
        if strategy.scope == "both":
            return True
        if strategy.scope == "base-only":
            return rec.session_id < current_session
        return rec.session_id == current_session

    if strategy.kind == "non-update":
        return pool

    if strategy.kind == "linear-transform":
        if lt_map is None:
            raise ValueError("linear-transform strategy needs its shared map")
        new_pool = pool.clone()
        for rec in pool.records():
            if in_scope(rec):
                new_pool.set_category(rec.class_id, lt_map.weight @ rec.category.values)
        return new_pool

    if maps is None:
        raise ValueError("attention strategy needs its update maps")
    updated, _ = adaptive_update(pool, maps)
    new_pool = pool.clone()
    for rec in pool.records():
        if in_scope(rec):
            new_pool.set_category(rec.class_id, updated.get(rec.class_id).category.values)
    return new_pool
