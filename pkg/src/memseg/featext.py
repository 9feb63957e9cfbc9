"""Feature extraction: image -> feature map -> masked pyramid embedding.

A small two-stage convolutional extractor stands in for a pretrained
backbone: each stage is conv3x3 + activation + optional 2x2 average
pool, for a total spatial downsample of 4.  Support masks are applied
at feature resolution (nearest-neighbor, top-left tap), and the masked
map is compressed by a three-scale average pyramid (1x1, 2x2, 4x4
adaptive grids over unmasked cells only) followed by a learned linear
projection to the embedding dimension.

The batched entry points (`forward_stages_batch`, `embed_batch`, ...)
carry caches for the hand-derived backward passes; the single-instance
functions mirror their contracts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .membank import Embedding

DOWNSAMPLE = 4
PYRAMID_SCALES = (1, 2, 4)
N_CELLS = sum(s * s for s in PYRAMID_SCALES)


class EmptyMaskError(ValueError):
    """A support mask selects no pixels; the object must be present."""


@dataclass
class Stage:
    conv: nk.ConvParams
    activation: str = "relu"  # "relu" | "identity"
    pool: bool = True


@dataclass
class ExtractorParams:
    """Stage parameters plus the pyramid projection.

    Raw embeddings are length-normalized to `embed_scale`, so sample
    brightness and texture-energy fluctuations cannot masquerade as
    class identity.
    """

    stages: list[Stage] = field(default_factory=list)
    projection: nk.AffineParams = None
    embed_scale: float = 3.0

    def __post_init__(self):
        if len(self.stages) < 2:
            raise nk.DimensionError("extractor needs at least two stages")
        factor = 1
        for st in self.stages:
            if st.activation not in ("relu", "identity"):
                raise nk.DimensionError(f"unknown activation {st.activation!r}")
            if st.pool:
                factor *= 2
        if factor != DOWNSAMPLE:
            raise nk.DimensionError(f"stage pools give downsample {factor}, expected {DOWNSAMPLE}")
        if self.embed_scale <= 0:
            raise nk.DimensionError("embed_scale must be positive")

    @property
    def c_feat(self) -> int:
        return self.stages[-1].conv.c_out

    @property
    def embed_dim(self) -> int:
        return self.projection.out_dim


def make_extractor(
    rng: np.random.Generator,
    c_img: int = 3,
    c_hidden: int = 8,
    c_feat: int = 8,
    embed_dim: int = 32,
    embed_scale: float = 3.0,
) -> ExtractorParams:
    stages = [
        Stage(nk.make_conv(rng, c_hidden, c_img), "relu", True),
        Stage(nk.make_conv(rng, c_feat, c_hidden), "relu", True),
    ]
    pooled = c_feat * sum(s * s for s in PYRAMID_SCALES)
    return ExtractorParams(stages, nk.make_affine(rng, embed_dim, pooled), embed_scale)


def global_block(p: ExtractorParams) -> np.ndarray:
    """View of the projection columns fed by the global-average cells.

    These columns map a single feature vector into embedding space, so
    they double as the per-pixel feature embedding used by the dense
    similarity channels downstream.
    """
    return p.projection.weight[:, 0::N_CELLS]


def calibrate_projection(
    p: ExtractorParams,
    pooled: np.ndarray,
    rng: np.random.Generator,
    fine_scale_weight: float = 0.0,
) -> None:
    """Calibrated projection init from a sample of pooled support vectors.

    The position-invariant global-average block of the pyramid carries
    the class signal; the finer cells mostly encode object placement.
    The projection starts as a random map over the global block (the
    finer blocks scaled by `fine_scale_weight`, typically 0, and grown
    by training as useful) with a bias that centers the supplied pooled
    statistics, so raw embeddings start out spread around the origin
    rather than collapsed along a shared mean direction.
    """
    d, n_in = p.projection.out_dim, p.projection.in_dim
    cells = sum(s * s for s in PYRAMID_SCALES)
    c = n_in // cells
    scale_of_cell = np.concatenate([[s] * (s * s) for s in PYRAMID_SCALES])
    col_w = np.tile(np.where(scale_of_cell == 1, 1.0, fine_scale_weight), c)
    n_active = max(1, int(np.count_nonzero(col_w)))
    w = rng.normal(size=(d, n_in)) / np.sqrt(n_active)
    w *= col_w[None, :]
    p.projection.weight[...] = w
    p.projection.bias[...] = -w @ pooled.mean(axis=0)


def normalize_rows(x: np.ndarray, scale: float):
    """Row-wise length normalization to `scale`; returns (out, cache)."""
    norms = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    unit = x / norms
    return scale * unit, {"unit": unit, "norms": norms, "scale": scale}


def normalize_rows_backward(cache: dict, g_out: np.ndarray) -> np.ndarray:
    unit, norms, scale = cache["unit"], cache["norms"], cache["scale"]
    dot = np.sum(g_out * unit, axis=1, keepdims=True)
    return scale / norms * (g_out - dot * unit)


# ---------------------------------------------------------------------------
# extractor stages
# ---------------------------------------------------------------------------


def forward_stages_batch(imgs: np.ndarray, p: ExtractorParams):
    """(N, C_img, H, W) images -> channel-major (C_feat, N, H/4, W/4) maps.

    All batched feature maps downstream use the channel-major layout
    (see numkit.conv3x3_batch); images enter in natural batch-major
    order and are transposed once here.
    """
    if imgs.ndim != 4:
        raise nk.DimensionError("expected batched images (N, C, H, W)")
    if imgs.shape[2] % DOWNSAMPLE or imgs.shape[3] % DOWNSAMPLE:
        raise nk.DimensionError(f"image extents {imgs.shape[2:]} not divisible by {DOWNSAMPLE}")
    x = np.ascontiguousarray(imgs.transpose(1, 0, 2, 3))
    caches = []
    for st in p.stages:
        z, conv_cache = nk.conv3x3_batch(x, st.conv)
        a = nk.relu(z) if st.activation == "relu" else z
        out = nk.avgpool2_batch(a) if st.pool else a
        caches.append({"conv": conv_cache, "z": z, "stage": st})
        x = out
    return x, caches


def backward_stages_batch(caches: list, g_out: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Walk stages in reverse; returns per-stage (g_kernels, g_bias)."""
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(caches)
    g = g_out
    for i in range(len(caches) - 1, -1, -1):
        c = caches[i]
        st: Stage = c["stage"]
        if st.pool:
            g = nk.avgpool2_batch_backward(g)
        if st.activation == "relu":
            g = nk.relu_backward(c["z"], g)
        g, g_k, g_b = nk.conv3x3_batch_backward(c["conv"], g)
        grads[i] = (g_k, g_b)
    return grads


def extract_features(img: np.ndarray, p: ExtractorParams) -> np.ndarray:
    """Single image (C, H, W) with values in [0, 1] -> feature map (C_feat, H/4, W/4)."""
    img = nk.as_f64(img)
    if img.ndim != 3:
        raise nk.DimensionError("expected a single image (C, H, W)")
    if img.min() < 0.0 or img.max() > 1.0:
        raise nk.DimensionError("image values must lie in [0, 1]")
    out, _ = forward_stages_batch(img[None], p)
    return out[:, 0]


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------


def downsample_mask(mask: np.ndarray, feat_hw: tuple[int, int]) -> np.ndarray:
    h, w = mask.shape
    fh, fw = feat_hw
    if h % fh or w % fw or h // fh != w // fw:
        raise nk.DimensionError(f"mask {mask.shape} incompatible with feature grid {feat_hw}")
    return nk.downsample_nearest(np.asarray(mask, dtype=np.float64), h // fh)


def mask_features(fmap: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Multiply every channel by the mask downsampled to feature resolution."""
    fmap = nk.as_f64(fmap)
    if fmap.ndim != 3 or mask.ndim != 2:
        raise nk.DimensionError("mask_features expects (C, H', W') map and (H, W) mask")
    if not np.any(mask):
        raise EmptyMaskError("support mask is empty")
    m = downsample_mask(mask, fmap.shape[1:])
    return fmap * m[None, :, :]


# ---------------------------------------------------------------------------
# pyramid pooling + projection
# ---------------------------------------------------------------------------


def _pyramid_cells(h: int, w: int):
    """Adaptive cell boundaries for every pyramid scale, row-major."""
    cells = []
    for s in PYRAMID_SCALES:
        for a in range(s):
            r0, r1 = (a * h) // s, -((-(a + 1) * h) // s)
            for b in range(s):
                c0, c1 = (b * w) // s, -((-(b + 1) * w) // s)
                cells.append((r0, r1, c0, c1))
    return cells


def pyramid_pool_batch(masked: np.ndarray, mask_ds: np.ndarray):
    """Masked multi-scale averages: (C, N, H', W') -> (N, C * 21).

    Each cell averages the already-masked map over the cell's unmasked
    positions; cells with no unmasked position contribute zeros.  The
    output vector is ordered channel-major: all 21 cells of channel 0,
    then channel 1, and so on.
    """
    c, n, h, w = masked.shape
    cells = _pyramid_cells(h, w)
    pooled = np.empty((c, len(cells), n), dtype=np.float64)
    denoms = np.empty((len(cells), n), dtype=np.float64)
    for k, (r0, r1, c0, c1) in enumerate(cells):
        cnt = mask_ds[:, r0:r1, c0:c1].sum(axis=(1, 2))
        denom = np.maximum(cnt, 1.0)
        pooled[:, k] = masked[:, :, r0:r1, c0:c1].sum(axis=(2, 3)) / denom[None, :]
        denoms[k] = denom
    cache = {"cells": cells, "denoms": denoms, "shape": masked.shape}
    return np.ascontiguousarray(pooled.reshape(c * len(cells), n).T), cache


def pyramid_pool_batch_backward(cache: dict, g_pooled: np.ndarray) -> np.ndarray:
    c, n, h, w = cache["shape"]
    cells = cache["cells"]
    g = g_pooled.T.reshape(c, len(cells), n)
    g_masked = np.zeros((c, n, h, w), dtype=np.float64)
    for k, (r0, r1, c0, c1) in enumerate(cells):
        g_masked[:, :, r0:r1, c0:c1] += (g[:, k] / cache["denoms"][k][None, :])[:, :, None, None]
    return g_masked


def pyramid_embed(fmap: np.ndarray, mask: np.ndarray, p: ExtractorParams) -> Embedding:
    """Compress an already-masked feature map into a raw category embedding."""
    fmap = nk.as_f64(fmap)
    m = downsample_mask(mask, fmap.shape[1:])
    if not np.any(m):
        raise EmptyMaskError("mask covers no feature cells")
    pooled, _ = pyramid_pool_batch(fmap[:, None], m[None])
    vec, _ = normalize_rows(nk.affine_batch(pooled, p.projection), p.embed_scale)
    return Embedding(vec[0], kind="category", stage="raw")


# ---------------------------------------------------------------------------
# full support-embedding pipeline (used by training)
# ---------------------------------------------------------------------------


def embed_batch(fmaps: np.ndarray, masks: np.ndarray, p: ExtractorParams):
    """Masked pyramid embedding of precomputed feature maps.

    fmaps are channel-major (C, N, H', W'); masks are (N, H, W) at
    image resolution.  Returns (E_raw (N, D), cache).  Any sample whose
    downsampled mask is empty raises EmptyMaskError.
    """
    n = fmaps.shape[1]
    fh, fw = fmaps.shape[2:]
    m = np.stack([downsample_mask(masks[i], (fh, fw)) for i in range(n)])
    if np.any(m.sum(axis=(1, 2)) == 0):
        raise EmptyMaskError("a support mask covers no feature cells")
    masked = fmaps * m[None, :, :, :]
    pooled, pool_cache = pyramid_pool_batch(masked, m)
    proj = nk.affine_batch(pooled, p.projection)
    e_raw, norm_cache = normalize_rows(proj, p.embed_scale)
    cache = {"pool": pool_cache, "pooled": pooled, "norm": norm_cache, "mask_ds": m, "p": p}
    return e_raw, cache


def embed_batch_backward(cache: dict, g_e: np.ndarray):
    """Returns (g_fmaps channel-major, g_proj_weight, g_proj_bias)."""
    p: ExtractorParams = cache["p"]
    g_proj = normalize_rows_backward(cache["norm"], g_e)
    g_pooled, g_w, g_b = nk.affine_batch_backward(cache["pooled"], p.projection, g_proj)
    g_masked = pyramid_pool_batch_backward(cache["pool"], g_pooled)
    g_fmaps = g_masked * cache["mask_ds"][None, :, :, :]
    return g_fmaps, g_w, g_b


def embed_support(img: np.ndarray, mask: np.ndarray, p: ExtractorParams) -> Embedding:
    """Image + mask -> raw category embedding (extract, mask, pool, project)."""
    fmap = extract_features(img, p)
    return pyramid_embed(mask_features(fmap, mask), mask, p)
