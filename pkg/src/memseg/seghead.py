"""Class-agnostic segmentation head and the training step.

One class at a time: the class's category and hyperclass embeddings are
tiled to every spatial position of the query feature map, concatenated
channel-wise, and passed through a residual 3x3 block to form the dense
comparison features F.  A confidence map is then refined iteratively -
each step concatenates the current mask onto F, convolves, adds the
result back onto F, and squashes through a small dilated-convolution
pyramid projected to one channel.  Per-pixel fusion across classes
takes the argmax confidence, with a background threshold.

The head never sees class ids, only embeddings, so swapping two
records' ids swaps their outputs exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import adapt, featext, membank, numkit as nk
from .membank import ClassRecord, MemoryPool

ASPP_DILATIONS = (1, 2, 4)


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""


N_SIM = 2  # parameter-free dense-similarity channels (category, hyperclass)


@dataclass
class SegHeadParams:
    """Residual comparison block, refinement conv, dilated pyramid, projection.

    The output projection consumes the summed dilated-conv channels plus
    two parameter-free dense-similarity channels (per-pixel feature
    embeddings dotted with the class's category and hyperclass vectors);
    those channels carry no weights of their own.
    """

    compare_conv: nk.ConvParams
    inner_conv: nk.ConvParams
    aspp: list[nk.ConvParams] = field(default_factory=list)
    proj: nk.AffineParams = None
    iterations: int = 4

    def __post_init__(self):
        c = self.compare_conv.c_out
        if self.compare_conv.c_in != c:
            raise nk.DimensionError("compare block must preserve channels")
        if self.inner_conv.c_in != c + 1 or self.inner_conv.c_out != c:
            raise nk.DimensionError("refinement conv must map C+1 -> C channels")
        if len(self.aspp) != len(ASPP_DILATIONS):
            raise nk.DimensionError(f"expected {len(ASPP_DILATIONS)} pyramid convs")
        for conv, d in zip(self.aspp, ASPP_DILATIONS):
            if conv.dilation != d:
                raise nk.DimensionError(f"pyramid conv dilation {conv.dilation} != {d}")
            if conv.c_in != c or conv.c_out != self.aspp[0].c_out:
                raise nk.DimensionError("pyramid conv channels inconsistent")
        if self.proj.in_dim != self.aspp[0].c_out + N_SIM or self.proj.out_dim != 1:
            raise nk.DimensionError("projection must map pyramid+similarity channels to 1")
        if self.iterations < 0:
            raise nk.DimensionError("iteration count must be >= 0")

    @property
    def channels(self) -> int:
        return self.compare_conv.c_out


def make_seghead(
    rng: np.random.Generator,
    c_feat: int,
    embed_dim: int,
    c_aspp: int = 8,
    iterations: int = 4,
    bias_init: float = -1.0,
) -> SegHeadParams:
    c = c_feat + 2 * embed_dim
    head = SegHeadParams(
        compare_conv=nk.make_conv(rng, c, c),
        inner_conv=nk.make_conv(rng, c, c + 1),
        aspp=[nk.make_conv(rng, c_aspp, c, dilation=d) for d in ASPP_DILATIONS],
        proj=nk.make_affine(rng, 1, c_aspp + N_SIM),
        iterations=iterations,
    )
    # start the confidence output near the foreground base rate instead
    # of 0.5, so early training is not dominated by background pixels
    head.proj.bias[:] = bias_init
    # the dense-similarity channels start with solid positive weight:
    # the head conditions on the embeddings from the first step, and the
    # loss immediately shapes the feature/prototype metric instead of
    # settling into an embedding-blind objectness detector
    head.proj.weight[0, c_aspp] = 2.0
    head.proj.weight[0, c_aspp + 1] = 1.0
    return head


# ---------------------------------------------------------------------------
# dense similarity channels
# ---------------------------------------------------------------------------


_NORM_FLOOR = 0.25  # soft floor on squared norms; keeps cosine gradients tame


def similarity_channels(qmaps: np.ndarray, ec: np.ndarray, eh: np.ndarray, w1: np.ndarray):
    """Per-pixel feature-vs-prototype cosine similarities.

    Each query cell's feature vector is mapped into embedding space by
    ``w1`` - the global-pool block of the pyramid projection, so the
    masked average of the per-pixel embeddings is exactly that block's
    contribution to a support embedding - and compared with the class's
    category and hyperclass vectors by softened cosine similarity.
    Returns ((2, N, H, W), cache).
    """
    t = np.einsum("dc,cnhw->dnhw", w1, qmaps, optimize=True)
    nt = np.sqrt((t * t).sum(axis=0) + _NORM_FLOOR)  # (N, H, W)
    ne = np.sqrt((ec * ec).sum(axis=1) + _NORM_FLOOR)  # (N,)
    nh = np.sqrt((eh * eh).sum(axis=1) + _NORM_FLOOR)
    dot_c = np.einsum("dnhw,nd->nhw", t, ec, optimize=True)
    dot_h = np.einsum("dnhw,nd->nhw", t, eh, optimize=True)
    sim = np.stack([dot_c / (nt * ne[:, None, None]), dot_h / (nt * nh[:, None, None])])
    cache = {
        "t": t, "qmaps": qmaps, "ec": ec, "eh": eh, "w1": w1,
        "nt": nt, "ne": ne, "nh": nh, "dot_c": dot_c, "dot_h": dot_h,
    }
    return sim, cache


def similarity_channels_backward(cache: dict, g_sim: np.ndarray):
    """Returns (g_qmaps, g_ec, g_eh, g_w1)."""
    t, qmaps, ec, eh, w1 = cache["t"], cache["qmaps"], cache["ec"], cache["eh"], cache["w1"]
    nt, ne, nh = cache["nt"], cache["ne"], cache["nh"]
    dot_c, dot_h = cache["dot_c"], cache["dot_h"]
    g_c, g_h = g_sim[0], g_sim[1]
    ne_b = ne[:, None, None]
    nh_b = nh[:, None, None]

    # d(dot/(nt*ne))/dt = e/(nt*ne) - dot * t / (nt^3 * ne)
    g_t = (
        ec.T[:, :, None, None] * (g_c / (nt * ne_b))[None]
        + eh.T[:, :, None, None] * (g_h / (nt * nh_b))[None]
        - t * ((g_c * dot_c / (nt ** 3 * ne_b)) + (g_h * dot_h / (nt ** 3 * nh_b)))[None]
    )
    # d(dot/(nt*ne))/de = t/(nt*ne) - dot * e / (nt * ne^3)
    g_ec = (
        np.einsum("dnhw,nhw->nd", t, g_c / (nt * ne_b), optimize=True)
        - ec * np.einsum("nhw->n", g_c * dot_c / (nt * ne_b ** 3))[:, None]
    )
    g_eh = (
        np.einsum("dnhw,nhw->nd", t, g_h / (nt * nh_b), optimize=True)
        - eh * np.einsum("nhw->n", g_h * dot_h / (nt * nh_b ** 3))[:, None]
    )
    g_qmaps = np.einsum("dc,dnhw->cnhw", w1, g_t, optimize=True)
    g_w1 = np.einsum("dnhw,cnhw->dc", g_t, qmaps, optimize=True)
    return g_qmaps, g_ec, g_eh, g_w1


# ---------------------------------------------------------------------------
# dense comparison
# ---------------------------------------------------------------------------


def dense_compare_batch(qmaps: np.ndarray, ec: np.ndarray, eh: np.ndarray, p: SegHeadParams):
    """Tile embeddings over the grid, concat with features, residual conv.

    qmaps are channel-major (C_feat, N, H, W); ec, eh are (N, D).  The
    output keeps C_feat + 2D channels, preserved by the residual block.
    """
    c_feat, n, h, w = qmaps.shape
    if ec.shape != eh.shape or ec.shape[0] != n:
        raise nk.DimensionError("embedding batch shapes inconsistent with qmaps")
    if c_feat + 2 * ec.shape[1] != p.channels:
        raise nk.DimensionError(
            f"feature+embedding channels {c_feat + 2 * ec.shape[1]} vs head {p.channels}"
        )
    d = ec.shape[1]
    x = np.empty((p.channels, n, h, w), dtype=np.float64)
    x[:c_feat] = qmaps
    x[c_feat : c_feat + d] = ec.T[:, :, None, None]
    x[c_feat + d :] = eh.T[:, :, None, None]
    z, conv_cache = nk.conv3x3_batch(x, p.compare_conv)
    f = x + nk.relu(z)
    return f, {"conv": conv_cache, "z": z, "c_feat": c_feat, "d": d}


def dense_compare_batch_backward(cache: dict, g_f: np.ndarray):
    """Returns (g_qmaps, g_ec, g_eh, g_kernels, g_bias)."""
    g_z = nk.relu_backward(cache["z"], g_f)
    g_x_conv, g_k, g_b = nk.conv3x3_batch_backward(cache["conv"], g_z)
    g_x = g_f + g_x_conv
    c_feat, d = cache["c_feat"], cache["d"]
    g_qmaps = g_x[:c_feat]
    g_ec = g_x[c_feat : c_feat + d].sum(axis=(2, 3)).T
    g_eh = g_x[c_feat + d :].sum(axis=(2, 3)).T
    return g_qmaps, g_ec, g_eh, g_k, g_b


def dense_compare(qmap: np.ndarray, record: ClassRecord, p: SegHeadParams) -> np.ndarray:
    """Single query map + class record -> dense comparison features."""
    f, _ = dense_compare_batch(
        nk.as_f64(qmap)[:, None], record.category.values[None], record.hyper.values[None], p
    )
    return f[:, 0]


# ---------------------------------------------------------------------------
# iterative refinement
# ---------------------------------------------------------------------------


def refine_step_batch(
    f: np.ndarray,
    m: np.ndarray,
    p: SegHeadParams,
    sim: np.ndarray | None = None,
    want_cache: bool = True,
):
    """One mask refinement: conv the (F, mask) concat, add back onto F,
    squash through the dilated pyramid plus the dense-similarity
    channels to a fresh confidence map.

    f is channel-major (C, N, H, W); masks are (N, H, W); sim carries
    the (2, N, H, W) similarity channels (zeros when absent).
    """
    c, n, h, w = f.shape
    if m.shape != (n, h, w):
        raise nk.DimensionError(f"mask batch {m.shape} vs features {(n, h, w)}")
    if sim is None:
        sim = np.zeros((N_SIM, n, h, w))
    g = np.concatenate([f, m[None]], axis=0)
    z, inner_cache = nk.conv3x3_batch(g, p.inner_conv)
    r = f + nk.relu(z)
    s = None
    aspp_caches = []
    zs = []
    for conv in p.aspp:
        az, c_cache = nk.conv3x3_batch(r, conv)
        a = nk.relu(az)
        s = a if s is None else s + a
        aspp_caches.append(c_cache)
        zs.append(az)
    c_a = s.shape[0]
    w_aspp = p.proj.weight[0, :c_a]
    w_sim = p.proj.weight[0, c_a:]
    logits = (
        np.tensordot(w_aspp, s, axes=(0, 0))
        + np.tensordot(w_sim, sim, axes=(0, 0))
        + p.proj.bias[0]
    )
    m_next = nk.sigmoid(logits)
    cache = None
    if want_cache:
        cache = {
            "inner": inner_cache, "z": z, "aspp": aspp_caches, "aspp_z": zs,
            "s": s, "sim": sim, "m_next": m_next, "p": p,
        }
    return m_next, logits, cache


def refine_step_batch_backward(cache: dict, g_logits: np.ndarray):
    """Returns (g_f, g_m, g_sim, grads) for one refinement step.

    grads keys: inner_kernels, inner_bias, aspp[i]_kernels, aspp[i]_bias,
    proj_weight, proj_bias.
    """
    p: SegHeadParams = cache["p"]
    s = cache["s"]
    c_a = s.shape[0]
    g_pw_aspp = np.tensordot(g_logits, s, axes=([0, 1, 2], [1, 2, 3]))
    g_pw_sim = np.tensordot(g_logits, cache["sim"], axes=([0, 1, 2], [1, 2, 3]))
    g_pw = np.concatenate([g_pw_aspp, g_pw_sim])[None, :]
    g_pb = np.array([g_logits.sum()])
    g_sim = p.proj.weight[0, c_a:][:, None, None, None] * g_logits[None]
    g_s = p.proj.weight[0, :c_a][:, None, None, None] * g_logits[None]
    grads = {"proj_weight": g_pw, "proj_bias": g_pb}
    g_r = None
    for i, c_cache in enumerate(cache["aspp"]):
        g_az = nk.relu_backward(cache["aspp_z"][i], g_s)
        g_r_i, g_k, g_b = nk.conv3x3_batch_backward(c_cache, g_az)
        g_r = g_r_i if g_r is None else g_r + g_r_i
        grads[f"aspp[{i}]_kernels"] = g_k
        grads[f"aspp[{i}]_bias"] = g_b
    g_f = g_r.copy()
    g_z = nk.relu_backward(cache["z"], g_r)
    g_g, g_ik, g_ib = nk.conv3x3_batch_backward(cache["inner"], g_z)
    grads["inner_kernels"] = g_ik
    grads["inner_bias"] = g_ib
    g_f += g_g[:-1]
    g_m = g_g[-1]
    return g_f, g_m, g_sim, grads


def refine_step(
    f: np.ndarray, m_t: np.ndarray, p: SegHeadParams, sim: np.ndarray | None = None
) -> np.ndarray:
    m_next, _, _ = refine_step_batch(
        nk.as_f64(f)[:, None],
        nk.as_f64(m_t)[None],
        p,
        sim=None if sim is None else nk.as_f64(sim)[:, None],
        want_cache=False,
    )
    return m_next[0]


def segment_batch(
    f: np.ndarray,
    iterations: int,
    p: SegHeadParams,
    sim: np.ndarray | None = None,
    want_cache: bool = False,
):
    """Apply the refinement `iterations + 1` times from an all-zero mask.

    f is channel-major (C, N, H, W); returns (confidence maps (N, H, W),
    final logits, per-step caches or None).
    """
    if iterations < 0:
        raise nk.DimensionError("iteration count must be >= 0")
    _, n, h, w = f.shape
    m = np.zeros((n, h, w), dtype=np.float64)
    caches = [] if want_cache else None
    logits = None
    for _ in range(iterations + 1):
        m, logits, cache = refine_step_batch(f, m, p, sim=sim, want_cache=want_cache)
        if want_cache:
            caches.append(cache)
    return m, logits, caches


def segment_batch_backward(caches: list, g_logits_final: np.ndarray):
    """Backward through the unrolled refinement.

    Returns (g_f, g_sim, head grads); F and the similarity channels feed
    every step, so their gradients accumulate across the unroll.
    """
    total: dict[str, np.ndarray] = {}
    g_f_total = None
    g_sim_total = None
    g_logits = g_logits_final
    for t in range(len(caches) - 1, -1, -1):
        g_f, g_m, g_sim, grads = refine_step_batch_backward(caches[t], g_logits)
        g_f_total = g_f if g_f_total is None else g_f_total + g_f
        g_sim_total = g_sim if g_sim_total is None else g_sim_total + g_sim
        for k, v in grads.items():
            total[k] = v if k not in total else total[k] + v
        if t > 0:
            # the incoming mask was the previous step's sigmoid output
            g_logits = nk.sigmoid_backward(caches[t - 1]["m_next"], g_m)
    return g_f_total, g_sim_total, total


def segment_class(
    f: np.ndarray, iterations: int, p: SegHeadParams, sim: np.ndarray | None = None
) -> np.ndarray:
    """Confidence map in [0, 1] for one class's dense features."""
    m, _, _ = segment_batch(
        nk.as_f64(f)[:, None],
        iterations,
        p,
        sim=None if sim is None else nk.as_f64(sim)[:, None],
        want_cache=False,
    )
    return m[0]


# ---------------------------------------------------------------------------
# per-pixel fusion
# ---------------------------------------------------------------------------

BACKGROUND = -1


def nms_fuse(conf: dict[int, np.ndarray], tau: float = 0.5) -> np.ndarray:
    """Per-pixel argmax over class confidence maps.

    Pixels whose best confidence falls below ``tau`` become background
    (-1); ties go to the smallest class id.
    """
    if not conf:
        raise nk.DimensionError("no confidence maps to fuse")
    ids = sorted(conf.keys())
    maps = [nk.as_f64(conf[i]) for i in ids]
    shape = maps[0].shape
    for m in maps:
        if m.shape != shape:
            raise nk.DimensionError("confidence map extents differ")
    stack = np.stack(maps)
    best = np.argmax(stack, axis=0)  # first max == smallest id
    best_val = np.max(stack, axis=0)
    labels = np.asarray(ids, dtype=np.int64)[best]
    labels[best_val < tau] = BACKGROUND
    return labels


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainableParams:
    """Every trainable parameter group in the pipeline."""

    extractor: featext.ExtractorParams
    aligner: membank.AlignerParams
    maps: adapt.UpdateMaps
    lt_map: nk.AffineParams
    head: SegHeadParams


def bce_with_logits(logits: np.ndarray, target: np.ndarray, weights: np.ndarray | None = None):
    """Weighted mean binary cross-entropy; returns (loss, g_logits).

    `weights` rescales per-pixel terms (foreground emphasis, negative-pair
    damping); the loss is normalized by the total weight.
    """
    with np.errstate(invalid="ignore", over="ignore"):
        elem = np.logaddexp(0.0, logits) - target * logits
        if weights is None:
            loss = float(elem.mean())
            g = (nk.sigmoid(logits) - target) / logits.size
        else:
            total = float(weights.sum())
            loss = float((weights * elem).sum() / total)
            g = weights * (nk.sigmoid(logits) - target) / total
    return loss, g


def soft_target(mask: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean downsample of a {0,1} mask to feature resolution."""
    h, w = mask.shape
    return np.asarray(mask, dtype=np.float64).reshape(
        h // factor, factor, w // factor, factor
    ).mean(axis=(1, 3))


def _strategy_step(ec: np.ndarray, pool_e: np.ndarray, sign, params: TrainableParams, kind: str):
    if kind == "attention":
        return adapt.update_rows(ec, pool_e, sign, params.maps)
    if kind == "linear-transform":
        return ec @ params.lt_map.weight.T, {"ec": ec}
    return ec, None


def train_step_batch(
    images: np.ndarray,
    masks: np.ndarray,
    class_ids: np.ndarray,
    pool: MemoryPool,
    hyper_raws: np.ndarray,
    params: TrainableParams,
    lr: float,
    strategy_kind: str = "attention",
    negative_src: np.ndarray | None = None,
    train_featext: bool = True,
    neg_weight: float = 1.0,
    pos_weight: float = 1.0,
    loo_prototypes: bool = True,
    maps_only: bool = False,
) -> float:
    """One SGD step over a batch of (image, mask, class) samples.

    Each sample's class embedding is the mean of its class's *other*
    in-batch supports (leave-one-out prototype; its own embedding when
    it has no siblings), aligned against the given raw hyperclass
    vector, run through the strategy's update step against the pool
    snapshot, and segmented on the sample's own query features with
    pixel-wise BCE against the mask.  The leave-one-out form keeps the
    training-time embedding distribution identical to the stored
    prototypes used at evaluation, so the head cannot key on "the
    embedding came from this very image".

    With ``maps_only`` the step updates just the strategy's own maps
    (the attention update maps or the shared linear transform), leaving
    extractor, aligner, and head frozen - the dedicated fitting phase
    that follows shared base training.

    ``negative_src[i]``, when given, names another in-batch sample of a
    different class: sample i is additionally segmented under that
    class's in-batch prototype with an all-background target.  Both
    branches are differentiable end to end, so the negatives teach the
    head to condition on the embeddings *and* push the extractor to
    separate classes.  Returns the scalar loss.
    """
    n = images.shape[0]
    pool_e = pool.category_matrix()
    ids = pool.ids()

    # forward: shared extractor, support embedding, alignment
    fmaps, stage_caches = featext.forward_stages_batch(images, params.extractor)
    e_own, embed_cache = featext.embed_batch(fmaps, masks, params.extractor)
    if loo_prototypes:
        mix = np.zeros((n, n))
        for i in range(n):
            sib = [j for j in range(n) if j != i and class_ids[j] == class_ids[i]]
            if sib:
                mix[i, sib] = 1.0 / len(sib)
            else:
                mix[i, i] = 1.0
    else:
        mix = np.eye(n)
    # prototypes are renormalized so every embedding the head ever sees
    # (training, storage, evaluation) lives on the same sphere
    e_raw, proto_norm_cache = featext.normalize_rows(
        mix @ e_own, params.extractor.embed_scale
    )
    eh_out, ec_out, align_cache = membank.align_batch(hyper_raws, e_raw, params.aligner)

    def class_sign(cids):
        s = np.ones((len(cids), len(ids)))
        for i, cid in enumerate(cids):
            if cid in pool:
                s[i, ids.index(int(cid))] = -1.0
        return s

    ec_upd, upd_cache = _strategy_step(ec_out, pool_e, class_sign(class_ids), params, strategy_kind)

    w1 = featext.global_block(params.extractor)
    f_pos, dc_pos = dense_compare_batch(fmaps, ec_upd, eh_out, params.head)
    sim_pos, sim_cache_p = similarity_channels(fmaps, ec_upd, eh_out, w1)
    factor = images.shape[2] // fmaps.shape[2]
    targets = [soft_target(masks[i], factor) for i in range(n)]

    f_all, sim_all, dc_neg = f_pos, sim_pos, None
    if negative_src is not None:
        # the wrong class's prototype is another sample's own prototype,
        # so positive and negative embeddings are statistically identical
        src = np.asarray(negative_src, dtype=int)
        neg_cids = []
        for i, s in enumerate(src):
            if class_ids[int(s)] == class_ids[i]:
                raise nk.DimensionError("negative source must have a different class")
            neg_cids.append(class_ids[int(s)])
        e_neg_raw = e_raw[src]
        h_neg = hyper_raws[src]
        eh_neg, ec_neg, align_cache_n = membank.align_batch(h_neg, e_neg_raw, params.aligner)
        ec_neg_upd, upd_cache_n = _strategy_step(
            ec_neg, pool_e, class_sign(neg_cids), params, strategy_kind
        )
        f_neg, dc_neg = dense_compare_batch(fmaps, ec_neg_upd, eh_neg, params.head)
        sim_neg, sim_cache_n = similarity_channels(fmaps, ec_neg_upd, eh_neg, w1)
        f_all = np.concatenate([f_pos, f_neg], axis=1)
        sim_all = np.concatenate([sim_pos, sim_neg], axis=1)
        targets += [np.zeros_like(targets[0]) for _ in range(n)]

    target = np.stack(targets)
    _, logits, seg_caches = segment_batch(
        f_all, params.head.iterations, params.head, sim=sim_all, want_cache=True
    )
    weights = 1.0 + (pos_weight - 1.0) * target
    if negative_src is not None:
        weights[n:] *= neg_weight
    loss, g_logits = bce_with_logits(logits, target, weights)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite training loss {loss!r}")

    # backward
    g_f_all, g_sim_all, head_grads = segment_batch_backward(seg_caches, g_logits)
    g_f_pos = g_f_all[:, :n]
    g_qmaps, g_ec_upd, g_eh, g_ck, g_cb = dense_compare_batch_backward(dc_pos, g_f_pos)
    g_qm_s, g_ec_s, g_eh_s, g_w1 = similarity_channels_backward(sim_cache_p, g_sim_all[:, :n])
    g_qmaps = g_qmaps + g_qm_s
    g_ec_upd = g_ec_upd + g_ec_s
    g_eh = g_eh + g_eh_s
    head_grads["compare_kernels"] = g_ck
    head_grads["compare_bias"] = g_cb
    maps_grads: dict = {}
    g_e_own_extra = 0.0
    align_grads_n = None
    if dc_neg is not None:
        g_qm_n, g_ec_n, g_eh_n, g_ck_n, g_cb_n = dense_compare_batch_backward(dc_neg, g_f_all[:, n:])
        g_qm_ns, g_ec_ns, g_eh_ns, g_w1_n = similarity_channels_backward(
            sim_cache_n, g_sim_all[:, n:]
        )
        g_qm_n = g_qm_n + g_qm_ns
        g_ec_n = g_ec_n + g_ec_ns
        g_eh_n = g_eh_n + g_eh_ns
        g_w1 = g_w1 + g_w1_n
        g_qmaps = g_qmaps + g_qm_n
        head_grads["compare_kernels"] += g_ck_n
        head_grads["compare_bias"] += g_cb_n
        if strategy_kind == "attention":
            g_ec_neg, g_phi_n, g_psi_n, g_w_n = adapt.update_rows_backward(upd_cache_n, g_ec_n)
            maps_grads = {"phi": g_phi_n, "psi": g_psi_n, "w": g_w_n}
        elif strategy_kind == "linear-transform":
            g_ec_neg = g_ec_n @ params.lt_map.weight
            maps_grads = {"lt": g_ec_n.T @ upd_cache_n["ec"]}
        else:
            g_ec_neg = g_ec_n
        _, g_e_neg_raw, align_grads_n = membank.align_batch_backward(align_cache_n, g_eh_n, g_ec_neg)
        g_e_own_extra = np.zeros_like(e_raw)
        np.add.at(g_e_own_extra, src, g_e_neg_raw)

    if strategy_kind == "attention":
        g_ec_out, g_phi, g_psi, g_w = adapt.update_rows_backward(upd_cache, g_ec_upd)
        maps_grads["phi"] = maps_grads.get("phi", 0) + g_phi
        maps_grads["psi"] = maps_grads.get("psi", 0) + g_psi
        maps_grads["w"] = maps_grads.get("w", 0) + g_w
    elif strategy_kind == "linear-transform":
        g_ec_out = g_ec_upd @ params.lt_map.weight
        maps_grads["lt"] = maps_grads.get("lt", 0) + g_ec_upd.T @ upd_cache["ec"]
    else:
        g_ec_out = g_ec_upd

    _, g_e_raw, align_grads = membank.align_batch_backward(align_cache, g_eh, g_ec_out)
    g_e_raw = g_e_raw + g_e_own_extra  # negatives index the same prototype rows
    g_e_own = mix.T @ featext.normalize_rows_backward(proto_norm_cache, g_e_raw)
    g_fmaps_embed, g_pw, g_pb = featext.embed_batch_backward(embed_cache, g_e_own)

    # parameter updates
    if "phi" in maps_grads:
        params.maps.phi.weight -= lr * maps_grads["phi"]
        params.maps.psi.weight -= lr * maps_grads["psi"]
        params.maps.w.weight -= lr * maps_grads["w"]
    if "lt" in maps_grads:
        params.lt_map.weight -= lr * maps_grads["lt"]
    if maps_only:
        return loss
    _apply_head_grads(params.head, head_grads, lr)
    for name, (g_w_a, g_b_a) in align_grads.items():
        if align_grads_n is not None:
            g_w_a = g_w_a + align_grads_n[name][0]
            g_b_a = g_b_a + align_grads_n[name][1]
        fc = getattr(params.aligner, name)
        fc.weight -= lr * g_w_a
        if fc.bias is not None:
            fc.bias -= lr * g_b_a
    if train_featext:
        g_fmaps = g_fmaps_embed + g_qmaps
        stage_grads = featext.backward_stages_batch(stage_caches, g_fmaps)
        for st, (g_k, g_b) in zip(params.extractor.stages, stage_grads):
            st.conv.kernels -= lr * g_k
            st.conv.bias -= lr * g_b
        g_pw[:, 0 :: featext.N_CELLS] += g_w1  # similarity path reuses these columns
        params.extractor.projection.weight -= lr * g_pw
        params.extractor.projection.bias -= lr * g_pb
    return loss


def _apply_head_grads(head: SegHeadParams, grads: dict, lr: float) -> None:
    head.compare_conv.kernels -= lr * grads["compare_kernels"]
    head.compare_conv.bias -= lr * grads["compare_bias"]
    head.inner_conv.kernels -= lr * grads["inner_kernels"]
    head.inner_conv.bias -= lr * grads["inner_bias"]
    for i, conv in enumerate(head.aspp):
        conv.kernels -= lr * grads[f"aspp[{i}]_kernels"]
        conv.bias -= lr * grads[f"aspp[{i}]_bias"]
    head.proj.weight -= lr * grads["proj_weight"]
    head.proj.bias -= lr * grads["proj_bias"]


def train_step(
    sample: tuple[np.ndarray, np.ndarray, int],
    pool: MemoryPool,
    params: TrainableParams,
    lr: float,
    hyper_raw: np.ndarray,
    strategy_kind: str = "attention",
    train_featext: bool = True,
) -> float:
    """Single-sample convenience wrapper around `train_step_batch`."""
    image, mask, class_id = sample
    if class_id not in pool:
        raise nk.DimensionError(f"class {class_id} not present in pool")
    return train_step_batch(
        nk.as_f64(image)[None],
        np.asarray(mask)[None],
        np.asarray([class_id]),
        pool,
        nk.as_f64(hyper_raw)[None],
        params,
        lr,
        strategy_kind=strategy_kind,
        train_featext=train_featext,
    )
