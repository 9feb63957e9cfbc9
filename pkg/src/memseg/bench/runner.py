"""Experiment runner: base-session training, incremental sessions,
query evaluation, repeats, ablation sweeps, CSV reports.

A run is fully determined by (config, seed): the taxonomy, schedule,
parameter initialization, training order, and evaluation are all driven
by seeds derived with a deterministic mixer, and reports are formatted
with shortest round-trip floats, so identical configs produce identical
bytes.  Per-frame timing is only measured when `measure_timing` is on
(the timing column is left empty otherwise, keeping default reports
byte-stable).

Trained base stacks and per-seed results are memoized in-process, so
ablation sweeps that only change evaluation-time knobs (embedding
setting, iteration count) reuse the expensive base training.
"""

from __future__ import annotations

import io as _io
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .. import adapt, featext, membank, numkit as nk, seghead
from . import metrics
from .metrics import IouAccumulator, RunResult, SessionResult, summarize_session
from .schedule import ScheduleError, SessionSchedule, build_schedule, mix64, tag
from .taxonomy import Taxonomy, TaxonomySpec, generate_taxonomy, render_sample

SETTINGS = (
    "hyper-only",
    "category-only",
    "update-both",
    "update-hyper-keep-category",
    "update-category-keep-hyper",
)
ABLATION_AXES = ("embeddings", "strategy", "iterations")

REPORT_HEADER = "session,class_id,group,iou,base_miou,new_miou,mean_miou,ms_per_frame"
ABLATION_HEADER = "label,session,base_miou,new_miou,old_miou,mean_miou,ms_per_frame"

CONFIG_SCHEMA = 1


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    seed: int = 0
    repeat: int = 1
    # data
    groups: int = 4
    classes_per_group: int = 4
    image_size: int = 32
    base_count: int = 8
    incremental_sessions: int = 3
    base_support: int = 4
    query_per_class: int = 3
    shots: int = 1
    # model
    embed_dim: int = 32
    c_hidden: int = 8
    c_feat: int = 8
    c_aspp: int = 8
    iterations: int = 4
    eval_iterations: int | None = None  # override at evaluation time only
    tau: float = 0.5
    hyper_k: int = 3
    kmeans_restarts: int = 8
    update_maps_scale: float = 0.3
    # training
    epochs: int = 120
    lr: float = 0.05
    lr_decay: float = 0.9
    lr_decay_every: int = 40
    batch_size: int = 12
    pool_refresh: int = 4  # epochs between pool/centering rebuilds
    neg_per_sample: int = 1
    pos_weight: float = 3.0
    neg_weight: float = 1.0
    # strategy-map fitting phase (after shared base training)
    fit_epochs: int = 12
    fit_lr: float = 0.02
    update_cadence: str = "per-insertion"  # or "per-session"
    # strategy under test
    strategy: str = "attention"
    scope: str = "both"
    embedding_setting: str = "update-category-keep-hyper"
    # measurement
    measure_timing: bool = False
    timing_repeats: int = 2

    def __post_init__(self):
        if self.strategy not in adapt.STRATEGY_KINDS:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.scope not in adapt.STRATEGY_SCOPES:
            raise ConfigError(f"unknown scope {self.scope!r}")
        if self.embedding_setting not in SETTINGS:
            raise ConfigError(f"unknown embedding setting {self.embedding_setting!r}")
        for name in ("repeat", "groups", "classes_per_group", "image_size", "base_count",
                     "base_support", "query_per_class", "shots", "embed_dim", "c_hidden",
                     "c_feat", "c_aspp", "hyper_k", "kmeans_restarts", "epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.incremental_sessions < 0 or self.iterations < 0:
            raise ConfigError("session and iteration counts must be >= 0")
        if self.eval_iterations is not None and self.eval_iterations < 0:
            raise ConfigError("eval_iterations must be >= 0")
        if not (0.0 <= self.tau <= 1.0):
            raise ConfigError("tau must lie in [0, 1]")
        if self.lr <= 0 or not (0 < self.lr_decay <= 1) or self.lr_decay_every < 1:
            raise ConfigError("invalid learning-rate schedule")
        if self.neg_per_sample not in (0, 1):
            raise ConfigError("neg_per_sample must be 0 or 1")
        if self.update_cadence not in ("per-insertion", "per-session"):
            raise ConfigError(f"unknown update cadence {self.update_cadence!r}")

    def taxonomy_spec(self) -> TaxonomySpec:
        return TaxonomySpec(
            groups=self.groups,
            classes_per_group=self.classes_per_group,
            image_size=self.image_size,
        )

    def canonical(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def config_to_json(config: ExperimentConfig) -> str:
    doc = {"schema": CONFIG_SCHEMA}
    doc.update(asdict(config))
    return json.dumps(doc, indent=2, sort_keys=True)


def config_from_json(text: str) -> ExperimentConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    schema = doc.pop("schema", None)
    if schema != CONFIG_SCHEMA:
        raise ConfigError(f"unsupported config schema {schema!r} (expected {CONFIG_SCHEMA})")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return ExperimentConfig(**doc)
    except TypeError as e:
        raise ConfigError(str(e)) from e


# ---------------------------------------------------------------------------
# rendering helpers
# ---------------------------------------------------------------------------


def render_refs(taxonomy: Taxonomy, refs, image_size: int):
    """Materialize sample references into stacked image/mask arrays."""
    imgs = np.empty((len(refs), 3, image_size, image_size))
    masks = np.empty((len(refs), image_size, image_size), dtype=np.uint8)
    for i, ref in enumerate(refs):
        img, mask = render_sample(taxonomy.by_id(ref.class_id), ref.seed, image_size)
        imgs[i] = img
        masks[i] = mask
    return imgs, masks


# ---------------------------------------------------------------------------
# base-session training
# ---------------------------------------------------------------------------


@dataclass
class BaseStack:
    """Everything frozen at the end of the base session."""

    taxonomy: Taxonomy
    schedule: SessionSchedule
    params: seghead.TrainableParams
    pool: membank.MemoryPool
    hyper_raw: dict[int, np.ndarray]  # per base class, before alignment
    losses: list[float] = field(default_factory=list)


def _build_params(config: ExperimentConfig, rng: np.random.Generator) -> seghead.TrainableParams:
    extractor = featext.make_extractor(
        rng, c_img=3, c_hidden=config.c_hidden, c_feat=config.c_feat, embed_dim=config.embed_dim
    )
    return seghead.TrainableParams(
        extractor=extractor,
        aligner=membank.make_aligner(rng, config.embed_dim),
        maps=adapt.make_update_maps(rng, config.embed_dim, scale=config.update_maps_scale),
        lt_map=nk.AffineParams(np.eye(config.embed_dim), None),
        head=seghead.make_seghead(
            rng, config.c_feat, config.embed_dim, c_aspp=config.c_aspp, iterations=config.iterations
        ),
    )


def _build_base_pool(
    config: ExperimentConfig,
    run_seed: int,
    params: seghead.TrainableParams,
    base_ids: list[int],
    imgs: np.ndarray,
    masks: np.ndarray,
    class_ids: np.ndarray,
):
    """Embed every base class (mean over its supports), cluster for
    hyperclasses, align, and assemble the session-0 pool."""
    fmaps, _ = featext.forward_stages_batch(imgs, params.extractor)
    e_raw, _ = featext.embed_batch(fmaps, masks, params.extractor)
    class_raw, _ = featext.normalize_rows(
        np.stack([e_raw[class_ids == cid].mean(axis=0) for cid in base_ids]),
        params.extractor.embed_scale,
    )
    assign, centroids = membank.kmeans(
        class_raw,
        k=min(config.hyper_k, len(base_ids)),
        restarts=config.kmeans_restarts,
        seed=mix64(run_seed, tag("base-kmeans")),
    )
    hyper_raw_mat = centroids[assign]
    eh_al, ec_al, _ = membank.align_batch(hyper_raw_mat, class_raw, params.aligner)
    pool = membank.MemoryPool()
    hyper_raw = {}
    for i, cid in enumerate(base_ids):
        membank.insert_class(
            pool,
            cid,
            membank.Embedding(ec_al[i], "category", "aligned"),
            membank.Embedding(eh_al[i], "hyperclass", "aligned"),
            session_id=0,
        )
        hyper_raw[cid] = hyper_raw_mat[i].copy()
    return pool, hyper_raw


def _recenter_projection(params: seghead.TrainableParams, imgs, masks) -> None:
    """Refresh the projection bias so pooled support statistics stay
    centered as the extractor stages drift during training (the weight
    part keeps training via gradients)."""
    fmaps, _ = featext.forward_stages_batch(imgs, params.extractor)
    m = np.stack([featext.downsample_mask(masks[i], fmaps.shape[2:]) for i in range(len(masks))])
    pooled, _ = featext.pyramid_pool_batch(fmaps * m[None], m)
    params.extractor.projection.bias[...] = -params.extractor.projection.weight @ pooled.mean(axis=0)


def _epoch_negatives(sub_cids: np.ndarray, erng: np.random.Generator):
    """In-batch negative source per sample, or None for single-class batches."""
    neg_src = np.zeros(len(sub_cids), dtype=int)
    for i in range(len(sub_cids)):
        cand = np.flatnonzero(sub_cids != sub_cids[i])
        if cand.size == 0:
            return None
        neg_src[i] = cand[erng.integers(0, cand.size)]
    return neg_src


def train_base_stack(config: ExperimentConfig, run_seed: int) -> BaseStack:
    """Train extractor, aligner, and head on the base session.

    Training is strategy-agnostic (embeddings enter the loss without an
    update step), so one trained stack serves every update strategy;
    the strategy's own maps are fitted afterwards by `fit_strategy_maps`
    with the rest of the stack frozen.
    """
    taxonomy = generate_taxonomy(mix64(run_seed, tag("taxonomy")), config.taxonomy_spec())
    schedule = build_schedule(
        taxonomy,
        base_count=config.base_count,
        incremental_sessions=config.incremental_sessions,
        shots=config.shots,
        seed=mix64(run_seed, tag("schedule")),
        base_support=config.base_support,
        query_per_class=config.query_per_class,
    )
    base = schedule.sessions[0]
    base_ids = list(base.class_ids)
    refs = [r for cid in base_ids for r in base.support[cid]]
    imgs, masks = render_refs(taxonomy, refs, config.image_size)
    class_ids = np.array([r.class_id for r in refs])

    params = _build_params(config, np.random.default_rng([run_seed, tag("init")]))
    fmaps0, _ = featext.forward_stages_batch(imgs, params.extractor)
    m0 = np.stack([featext.downsample_mask(masks[i], fmaps0.shape[2:]) for i in range(len(refs))])
    pooled0, _ = featext.pyramid_pool_batch(fmaps0 * m0[None], m0)
    featext.calibrate_projection(
        params.extractor, pooled0, np.random.default_rng([run_seed, tag("calibrate")])
    )
    losses = []
    n_samples = len(refs)
    pool_t, hyper_raw = None, None
    for epoch in range(config.epochs):
        lr = config.lr * config.lr_decay ** (epoch // config.lr_decay_every)
        if epoch % config.pool_refresh == 0:
            _recenter_projection(params, imgs, masks)
            pool_t, hyper_raw = _build_base_pool(
                config, run_seed, params, base_ids, imgs, masks, class_ids
            )
            hyper_raws = np.stack([hyper_raw[int(c)] for c in class_ids])
        erng = np.random.default_rng([run_seed, tag("epoch"), epoch])
        order = erng.permutation(n_samples)
        bs = config.batch_size if config.batch_size else n_samples
        epoch_loss = 0.0
        for lo in range(0, n_samples, bs):
            sel = order[lo : lo + bs]
            neg_src = _epoch_negatives(class_ids[sel], erng) if config.neg_per_sample else None
            loss = seghead.train_step_batch(
                imgs[sel], masks[sel], class_ids[sel], pool_t, hyper_raws[sel], params, lr,
                strategy_kind="non-update",
                negative_src=neg_src,
                train_featext=True,
                neg_weight=config.neg_weight, pos_weight=config.pos_weight,
            )
            epoch_loss += loss * len(sel)
        losses.append(epoch_loss / n_samples)

    _recenter_projection(params, imgs, masks)
    pool, hyper_raw = _build_base_pool(config, run_seed, params, base_ids, imgs, masks, class_ids)
    return BaseStack(taxonomy, schedule, params, pool, hyper_raw, losses)


def fit_strategy_maps(stack: BaseStack, config: ExperimentConfig, run_seed: int):
    """Fit the strategy's own maps with the trained stack frozen.

    Runs the same segmentation loss with the strategy's update step in
    the path, but applies gradients only to the attention update maps or
    the shared linear transform.  Returns fresh (update_maps, lt_map);
    the stack itself is never modified.
    """
    params = seghead.TrainableParams(
        extractor=stack.params.extractor,
        aligner=stack.params.aligner,
        maps=adapt.make_update_maps(
            np.random.default_rng([run_seed, tag("maps")]),
            config.embed_dim,
            scale=config.update_maps_scale,
        ),
        lt_map=nk.AffineParams(np.eye(config.embed_dim), None),
        head=stack.params.head,
    )
    if config.strategy == "non-update" or config.fit_epochs == 0:
        return params.maps, params.lt_map
    base = stack.schedule.sessions[0]
    base_ids = list(base.class_ids)
    refs = [r for cid in base_ids for r in base.support[cid]]
    imgs, masks = render_refs(stack.taxonomy, refs, config.image_size)
    class_ids = np.array([r.class_id for r in refs])
    hyper_raws = np.stack([stack.hyper_raw[int(c)] for c in class_ids])
    n_samples = len(refs)
    for epoch in range(config.fit_epochs):
        erng = np.random.default_rng([run_seed, tag("fit"), epoch])
        order = erng.permutation(n_samples)
        bs = config.batch_size if config.batch_size else n_samples
        for lo in range(0, n_samples, bs):
            sel = order[lo : lo + bs]
            neg_src = _epoch_negatives(class_ids[sel], erng) if config.neg_per_sample else None
            seghead.train_step_batch(
                imgs[sel], masks[sel], class_ids[sel], stack.pool, hyper_raws[sel],
                params, config.fit_lr,
                strategy_kind=config.strategy,
                negative_src=neg_src,
                train_featext=False,
                neg_weight=config.neg_weight, pos_weight=config.pos_weight,
                maps_only=True,
            )
    return params.maps, params.lt_map


# ---------------------------------------------------------------------------
# incremental sessions and evaluation
# ---------------------------------------------------------------------------


def _setting_flags(setting: str):
    """(feed_category, feed_hyper, update_category, update_hyper)."""
    return {
        "hyper-only": (False, True, False, True),
        "category-only": (True, False, True, False),
        "update-both": (True, True, True, True),
        "update-hyper-keep-category": (True, True, False, True),
        "update-category-keep-hyper": (True, True, True, False),
    }[setting]


def _apply_hyper_update(
    pool: membank.MemoryPool,
    eff_hyper: dict[int, np.ndarray],
    strategy: adapt.UpdateStrategy,
    maps: adapt.UpdateMaps,
    lt_map: nk.AffineParams,
    current_session: int,
) -> dict[int, np.ndarray]:
    """Run the configured update over the *hyper* vectors (ablation paths
    that deliberately let hyperclass memory drift).  Implemented on a
    scratch pool so stored records keep their immutability guarantee."""
    scratch = membank.MemoryPool()
    for rec in pool.records():
        membank.insert_class(
            scratch,
            rec.class_id,
            membank.Embedding(eff_hyper[rec.class_id].copy(), "category", "aligned"),
            membank.Embedding(np.zeros(pool.embed_dim), "hyperclass", "aligned"),
            rec.session_id,
        )
    updated = adapt.apply_strategy(
        scratch, strategy, maps=maps, lt_map=lt_map, current_session=current_session
    )
    return {rec.class_id: updated.get(rec.class_id).category.values.copy() for rec in pool.records()}


def _eval_matrices(pool, eff_hyper, union_ids, setting):
    feed_cat, feed_hyp, _, _ = _setting_flags(setting)
    d = pool.embed_dim
    ec = np.stack(
        [pool.get(cid).category.values if feed_cat else np.zeros(d) for cid in union_ids]
    )
    eh = np.stack([eff_hyper[cid] if feed_hyp else np.zeros(d) for cid in union_ids])
    return ec, eh


def _fuse_batch(conf: np.ndarray, union_ids: list[int], tau: float) -> np.ndarray:
    """(Nf, C, S, S) upsampled confidences -> (Nf, S, S) label maps."""
    idx = np.argmax(conf, axis=1)
    val = np.max(conf, axis=1)
    labels = np.asarray(union_ids, dtype=np.int64)[idx]
    labels[val < tau] = seghead.BACKGROUND
    return labels


def evaluate_session(
    stack: BaseStack,
    config: ExperimentConfig,
    pool: membank.MemoryPool,
    eff_hyper: dict[int, np.ndarray],
    session_id: int,
) -> SessionResult:
    schedule = stack.schedule
    union_ids = schedule.union_ids(session_id)
    refs = schedule.sessions[session_id].query
    imgs, masks = render_refs(stack.taxonomy, refs, config.image_size)
    gts = np.where(
        masks.astype(bool),
        np.array([r.class_id for r in refs], dtype=np.int64)[:, None, None],
        seghead.BACKGROUND,
    )
    ec_mat, eh_mat = _eval_matrices(pool, eff_hyper, union_ids, config.embedding_setting)
    iters = config.iterations if config.eval_iterations is None else config.eval_iterations
    n_f, n_c = len(refs), len(union_ids)
    acc = IouAccumulator(union_ids)
    ms = None

    if config.measure_timing:
        per_frame_ms = []
        for rep in range(config.timing_repeats):
            t_total = 0.0
            for i in range(n_f):
                t0 = time.perf_counter()
                qmap, _ = featext.forward_stages_batch(imgs[i : i + 1], stack.params.extractor)
                f, sim = dense_pairs(qmap, ec_mat, eh_mat, stack.params)
                conf, _, _ = seghead.segment_batch(f, iters, stack.params.head, sim=sim)
                up = nk.upsample_nearest(conf, featext.DOWNSAMPLE)
                labels = _fuse_batch(up[None], union_ids, config.tau)[0]
                t_total += time.perf_counter() - t0
                if rep == 0:
                    acc.add(labels, gts[i])
            per_frame_ms.append(1000.0 * t_total / n_f)
        ms = min(per_frame_ms)
    else:
        qmaps, _ = featext.forward_stages_batch(imgs, stack.params.extractor)
        # chunk frames so each head pass stays cache-friendly
        frames_per_chunk = max(1, 64 // n_c)
        for lo in range(0, n_f, frames_per_chunk):
            hi = min(lo + frames_per_chunk, n_f)
            nf_c = hi - lo
            f, sim = dense_pairs(
                np.repeat(qmaps[:, lo:hi], n_c, axis=1),
                np.tile(ec_mat, (nf_c, 1)),
                np.tile(eh_mat, (nf_c, 1)),
                stack.params,
                tiled=True,
            )
            conf, _, _ = seghead.segment_batch(f, iters, stack.params.head, sim=sim)
            conf = conf.reshape(nf_c, n_c, *conf.shape[1:])
            up = nk.upsample_nearest(conf, featext.DOWNSAMPLE)
            labels = _fuse_batch(up, union_ids, config.tau)
            for i in range(nf_c):
                acc.add(labels[i], gts[lo + i])

    base_ids = set(schedule.sessions[0].class_ids)
    new_ids = set(schedule.sessions[session_id].class_ids)
    old_ids = [c for c in union_ids if c not in base_ids and c not in new_ids]
    if session_id == 0:
        base_list = new_list = sorted(base_ids)
    else:
        base_list, new_list = sorted(base_ids), sorted(new_ids)
    return summarize_session(session_id, acc.per_class(), base_list, new_list, old_ids, ms)


def dense_pairs(qmaps, ec_rows, eh_rows, params: seghead.TrainableParams, tiled=False):
    """Dense comparison features plus similarity channels for
    (frame, class) pairs.

    qmaps are channel-major (C, N, H, W).  With tiled=False, ec/eh carry
    one row per class and frames are repeated per class here; with
    tiled=True the caller already repeated/tiled everything.
    """
    if not tiled:
        n_c = ec_rows.shape[0]
        qmaps = np.repeat(qmaps, n_c, axis=1)
        ec_rows = np.tile(ec_rows, (qmaps.shape[1] // n_c, 1))
        eh_rows = np.tile(eh_rows, (qmaps.shape[1] // n_c, 1))
    f, _ = seghead.dense_compare_batch(qmaps, ec_rows, eh_rows, params.head)
    sim, _ = seghead.similarity_channels(
        qmaps, ec_rows, eh_rows, featext.global_block(params.extractor)
    )
    return f, sim


def _embed_shots(stack: BaseStack, config: ExperimentConfig, refs):
    imgs, masks = render_refs(stack.taxonomy, refs, config.image_size)
    fmaps, _ = featext.forward_stages_batch(imgs, stack.params.extractor)
    e_raw, _ = featext.embed_batch(fmaps, masks, stack.params.extractor)
    return e_raw


def run_sessions(
    stack: BaseStack,
    config: ExperimentConfig,
    run_seed: int,
    maps: adapt.UpdateMaps | None = None,
    lt_map: nk.AffineParams | None = None,
) -> RunResult:
    """Insert new classes session by session, applying the configured
    update strategy, and evaluate the query union after each session."""
    if maps is None:
        maps = stack.params.maps
    if lt_map is None:
        lt_map = stack.params.lt_map
    strategy = adapt.UpdateStrategy(config.strategy, config.scope)
    _, _, upd_cat, upd_hyp = _setting_flags(config.embedding_setting)
    pool = stack.pool.clone()
    eff_hyper = {rec.class_id: rec.hyper.values.copy() for rec in pool.records()}

    result = RunResult(run_seed)
    result.sessions.append(evaluate_session(stack, config, pool, eff_hyper, 0))

    for sess in stack.schedule.sessions[1:]:
        i = sess.session_id
        for cid in sess.class_ids:
            e_raw = _embed_shots(stack, config, sess.support[cid])
            hyper_raw = membank.raw_hyperclass(
                membank.Embedding(e_raw[0], "category", "raw"),
                pool,
                k=min(config.hyper_k, len(pool)),
                restarts=config.kmeans_restarts,
                seed=mix64(run_seed, tag("hyper"), i, cid),
            )
            if config.strategy != "attention" and len(e_raw) > 1:
                # no attention-based fusion: the stored class prototype is
                # the renormalized mean of the shots' raw embeddings
                e_raw, _ = featext.normalize_rows(
                    e_raw.mean(axis=0, keepdims=True), stack.params.extractor.embed_scale
                )
            eh_al, ec_al, _ = membank.align_batch(
                np.tile(hyper_raw.values, (len(e_raw), 1)), e_raw, stack.params.aligner
            )
            store_ec, store_eh = ec_al[0], eh_al[0]
            membank.insert_class(
                pool,
                cid,
                membank.Embedding(store_ec, "category", "aligned"),
                membank.Embedding(store_eh, "hyperclass", "aligned"),
                session_id=i,
            )
            eff_hyper[cid] = store_eh.copy()
            if config.update_cadence == "per-insertion":
                if upd_cat:
                    pool = adapt.apply_strategy(
                        pool, strategy, maps=maps, lt_map=lt_map, current_session=i
                    )
                if upd_hyp:
                    eff_hyper = _apply_hyper_update(pool, eff_hyper, strategy, maps, lt_map, i)
            if config.strategy == "attention":
                for s in range(1, len(e_raw)):
                    pool = adapt.absorb_shot(
                        pool, cid, membank.Embedding(ec_al[s], "category", "aligned"), maps
                    )
        if config.update_cadence == "per-session":
            if upd_cat:
                pool = adapt.apply_strategy(
                    pool, strategy, maps=maps, lt_map=lt_map, current_session=i
                )
            if upd_hyp:
                eff_hyper = _apply_hyper_update(pool, eff_hyper, strategy, maps, lt_map, i)
        result.sessions.append(evaluate_session(stack, config, pool, eff_hyper, i))
    return result


# ---------------------------------------------------------------------------
# experiment orchestration, caching, aggregation
# ---------------------------------------------------------------------------

_STACK_CACHE: dict = {}
_MAPS_CACHE: dict = {}
_RESULT_CACHE: dict = {}

_TRAIN_FIELDS = (
    "groups", "classes_per_group", "image_size", "base_count", "incremental_sessions",
    "base_support", "query_per_class", "shots", "embed_dim", "c_hidden", "c_feat",
    "c_aspp", "iterations", "hyper_k", "kmeans_restarts",
    "epochs", "lr", "lr_decay", "lr_decay_every", "batch_size", "pool_refresh",
    "neg_per_sample", "pos_weight", "neg_weight",
)


def _train_key(config: ExperimentConfig, run_seed: int):
    return (run_seed,) + tuple(getattr(config, f) for f in _TRAIN_FIELDS)


def get_base_stack(config: ExperimentConfig, run_seed: int) -> BaseStack:
    key = _train_key(config, run_seed)
    if key not in _STACK_CACHE:
        _STACK_CACHE[key] = train_base_stack(config, run_seed)
    return _STACK_CACHE[key]


def get_strategy_maps(config: ExperimentConfig, run_seed: int):
    key = _train_key(config, run_seed) + (
        config.strategy, config.fit_epochs, config.fit_lr, config.update_maps_scale
    )
    if key not in _MAPS_CACHE:
        stack = get_base_stack(config, run_seed)
        _MAPS_CACHE[key] = fit_strategy_maps(stack, config, run_seed)
    return _MAPS_CACHE[key]


def run_single(config: ExperimentConfig, run_seed: int) -> RunResult:
    key = (config.canonical(), run_seed)
    if key not in _RESULT_CACHE:
        stack = get_base_stack(config, run_seed)
        maps, lt_map = get_strategy_maps(config, run_seed)
        _RESULT_CACHE[key] = run_sessions(stack, config, run_seed, maps=maps, lt_map=lt_map)
    return _RESULT_CACHE[key]


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    runs: list[RunResult]
    mean_sessions: list[SessionResult]

    def session(self, session_id: int) -> SessionResult:
        return self.mean_sessions[session_id]


def _mean_or_none(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def aggregate_runs(runs: list[RunResult]) -> list[SessionResult]:
    """Arithmetic mean over runs, per session; None propagates as exclusion."""
    n_sessions = len(runs[0].sessions)
    out = []
    for s in range(n_sessions):
        per = [r.sessions[s] for r in runs]
        class_ids = per[0].per_class_iou.keys()
        out.append(
            SessionResult(
                session_id=s,
                per_class_iou={
                    cid: _mean_or_none([p.per_class_iou[cid] for p in per]) for cid in class_ids
                },
                base_miou=_mean_or_none([p.base_miou for p in per]),
                new_miou=_mean_or_none([p.new_miou for p in per]),
                old_miou=_mean_or_none([p.old_miou for p in per]),
                mean_miou=_mean_or_none([p.mean_miou for p in per]),
                ms_per_frame=_mean_or_none([p.ms_per_frame for p in per]),
            )
        )
    return out


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run `config.repeat` seeded repetitions and aggregate their mean."""
    run_seeds = [mix64(config.seed, tag("run"), i) for i in range(config.repeat)]
    runs = [run_single(config, rs) for rs in run_seeds]
    return ExperimentResult(config, runs, aggregate_runs(runs))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report_csv(result: ExperimentResult, taxonomy: Taxonomy | None = None) -> str:
    """Fixed-layout CSV: one row per (session, class), then per-session
    aggregate rows ALL (base/new/mean) and OLDINC (earlier-incremental)."""
    if taxonomy is None:
        taxonomy = generate_taxonomy(
            mix64(mix64(result.config.seed, tag("run"), 0), tag("taxonomy")),
            result.config.taxonomy_spec(),
        )
    buf = _io.StringIO()
    buf.write(REPORT_HEADER + "\n")
    for sess in result.mean_sessions:
        for cid in sorted(sess.per_class_iou):
            row = [
                str(sess.session_id), str(cid), str(taxonomy.group_of(cid)),
                _fmt(sess.per_class_iou[cid]), "", "", "", "",
            ]
            buf.write(",".join(row) + "\n")
        buf.write(
            ",".join(
                [
                    str(sess.session_id), "ALL", "", "",
                    _fmt(sess.base_miou), _fmt(sess.new_miou), _fmt(sess.mean_miou),
                    _fmt(sess.ms_per_frame),
                ]
            )
            + "\n"
        )
        buf.write(
            ",".join(
                [str(sess.session_id), "OLDINC", "", "", "", "", _fmt(sess.old_miou), ""]
            )
            + "\n"
        )
    return buf.getvalue()


def displacement_csv(trace: adapt.UpdateTrace, session_id: int) -> str:
    """Update-trace rows (session, class, displacement norm) for diagnostics."""
    lines = ["session,class_id,displacement_norm"]
    for cid in sorted(trace.displacements):
        lines.append(f"{session_id},{cid},{repr(float(np.linalg.norm(trace.displacements[cid])))}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------


def strategy_rows() -> list[tuple[str, str, str]]:
    """(label, kind, scope) rows of the strategy comparison table."""
    rows = [("non-update", "non-update", "both")]
    for kind in ("linear-transform", "attention"):
        for scope in ("base-only", "new-only", "both"):
            rows.append((f"{kind}/{scope}", kind, scope))
    return rows


def run_ablation(config: ExperimentConfig, axis: str) -> list[tuple[str, ExperimentResult]]:
    """Sweep one axis, holding everything else fixed."""
    if axis == "embeddings":
        variants = [
            (setting, replace(config, embedding_setting=setting)) for setting in SETTINGS
        ]
    elif axis == "strategy":
        variants = [
            (label, replace(config, strategy=kind, scope=scope))
            for label, kind, scope in strategy_rows()
        ]
    elif axis == "iterations":
        variants = [
            (f"T={t}", replace(config, eval_iterations=t, measure_timing=True))
            for t in range(6)
        ]
    else:
        raise ConfigError(f"unknown ablation axis {axis!r} (choose from {ABLATION_AXES})")
    return [(label, run_experiment(c)) for label, c in variants]


def ablation_csv(rows: list[tuple[str, ExperimentResult]]) -> str:
    buf = _io.StringIO()
    buf.write(ABLATION_HEADER + "\n")
    for label, result in rows:
        for sess in result.mean_sessions:
            buf.write(
                ",".join(
                    [
                        label, str(sess.session_id),
                        _fmt(sess.base_miou), _fmt(sess.new_miou), _fmt(sess.old_miou),
                        _fmt(sess.mean_miou), _fmt(sess.ms_per_frame),
                    ]
                )
                + "\n"
            )
    return buf.getvalue()


def clear_caches() -> None:
    _STACK_CACHE.clear()
    _MAPS_CACHE.clear()
    _RESULT_CACHE.clear()
