"""Session scheduling: disjoint label spaces, shots, query unions.

One schedule describes the whole run: session 0 carries the base
classes with many support samples, each later session introduces fresh
classes with exactly `shots` supports apiece, and each session's query
set spans every class seen so far.  Samples are stored as (class, seed)
references and rendered lazily, so schedules stay tiny and fully
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .taxonomy import Taxonomy

_MASK64 = (1 << 64) - 1


def mix64(*parts: int) -> int:
    """Deterministic 64-bit seed combiner (boost-style hash chain)."""
    h = 0x9E3779B97F4A7C15
    for p in parts:
        p &= _MASK64
        h ^= (p + 0x9E3779B97F4A7C15 + ((h << 6) & _MASK64) + (h >> 2)) & _MASK64
        h &= _MASK64
    return h


def tag(name: str) -> int:
    """Stable integer tag for a seed-stream name."""
    h = 1469598103934665603
    for ch in name.encode():
        h = ((h ^ ch) * 1099511628211) & _MASK64
    return h


class ScheduleError(ValueError):
    """Invalid or corrupted session schedule."""


@dataclass(frozen=True)
class SampleRef:
    class_id: int
    seed: int


@dataclass
class Session:
    session_id: int
    class_ids: list[int]
    support: dict[int, list[SampleRef]] = field(default_factory=dict)
    query: list[SampleRef] = field(default_factory=list)


@dataclass
class SessionSchedule:
    sessions: list[Session]
    shots: int

    def union_ids(self, upto: int) -> list[int]:
        ids: list[int] = []
        for s in self.sessions[: upto + 1]:
            ids.extend(s.class_ids)
        return sorted(ids)


def build_schedule(
    taxonomy: Taxonomy,
    base_count: int,
    incremental_sessions: int,
    shots: int,
    seed: int,
    base_support: int = 4,
    query_per_class: int = 3,
) -> SessionSchedule:
    """Carve the taxonomy into one base session plus incremental sessions.

    Base classes are taken round-robin across groups (so every group is
    represented in memory before incremental learning starts); the rest
    are shuffled deterministically and dealt out as evenly as possible.
    """
    n_classes = len(taxonomy.classes)
    if base_count < 1 or base_count > n_classes:
        raise ScheduleError(f"base count {base_count} out of range")
    remaining_count = n_classes - base_count
    if incremental_sessions < 0 or (incremental_sessions > 0 and remaining_count < incremental_sessions):
        raise ScheduleError(
            f"{remaining_count} classes cannot fill {incremental_sessions} sessions"
        )

    by_slot = sorted(
        taxonomy.classes,
        key=lambda c: (c.class_id % taxonomy.spec.classes_per_group, c.group_id),
    )
    base_ids = sorted(c.class_id for c in by_slot[:base_count])
    rest = sorted(c.class_id for c in by_slot[base_count:])
    rng = np.random.default_rng([seed & 0xFFFFFFFF, tag("schedule")])
    rest = [int(x) for x in np.array(rest)[rng.permutation(len(rest))]]

    sizes = []
    for i in range(incremental_sessions):
        q, r = divmod(remaining_count, incremental_sessions)
        sizes.append(q + (1 if i < r else 0))

    def support_refs(cid: int, session: int, count: int) -> list[SampleRef]:
        return [
            SampleRef(cid, mix64(seed, tag("support"), session, cid, j)) for j in range(count)
        ]

    sessions = [Session(0, base_ids)]
    for cid in base_ids:
        sessions[0].support[cid] = support_refs(cid, 0, base_support)
    pos = 0
    for i in range(1, incremental_sessions + 1):
        ids = sorted(rest[pos : pos + sizes[i - 1]])
        pos += sizes[i - 1]
        sess = Session(i, ids)
        for cid in ids:
            sess.support[cid] = support_refs(cid, i, shots)
        sessions.append(sess)

    union: list[int] = []
    for sess in sessions:
        union = sorted(union + sess.class_ids)
        sess.query = [
            SampleRef(cid, mix64(seed, tag("query"), sess.session_id, cid, j))
            for cid in union
            for j in range(query_per_class)
        ]

    sched = SessionSchedule(sessions, shots)
    validate_schedule(sched)
    return sched


def validate_schedule(sched: SessionSchedule) -> None:
    """Reject overlapping label spaces, broken query unions, wrong shot counts."""
    seen: set[int] = set()
    union: set[int] = set()
    for sess in sched.sessions:
        ids = set(sess.class_ids)
        if not ids:
            raise ScheduleError(f"session {sess.session_id} introduces no classes")
        overlap = ids & seen
        if overlap:
            raise ScheduleError(f"label spaces overlap on classes {sorted(overlap)}")
        seen |= ids
        union |= ids
        if set(sess.support) != ids:
            raise ScheduleError(f"session {sess.session_id} support classes != label space")
        if sess.session_id > 0:
            for cid, refs in sess.support.items():
                if len(refs) != sched.shots:
                    raise ScheduleError(
                        f"class {cid} has {len(refs)} shots, expected {sched.shots}"
                    )
        query_ids = {ref.class_id for ref in sess.query}
        if query_ids != union:
            raise ScheduleError(
                f"session {sess.session_id} query space {sorted(query_ids)} != union {sorted(union)}"
            )
