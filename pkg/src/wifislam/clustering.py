"""Incremental Wi-Fi clusters over keyframe signatures.

A cluster stands in for a spatially separate region: it keeps the signature
it was created with (frozen forever) and the keyframes assigned to it. A new
keyframe joins an existing cluster only when that cluster is similar to the
keyframe's signature AND the keyframe gained a graph edge into one of the
cluster's members this step; otherwise it seeds a new cluster.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .signature import Signature, cosine_similarity


class DuplicateAssignment(ValueError):
    """A keyframe was assigned to a cluster twice."""


@dataclass
class Cluster:
    id: int
    representative: Signature  # frozen at creation, never updated
    members: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class SimilarClusters:
    """(cluster id, similarity) pairs, descending score, ties by ascending id."""

    entries: tuple[tuple[int, float], ...]

    def ids(self) -> list[int]:
        return [cid for cid, _ in self.entries]

    def best(self) -> tuple[int, float] | None:
        return self.entries[0] if self.entries else None

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class AssignmentOutcome:
    cluster_id: int
    created: bool


class ClusterStore:
    """Ordered clusters plus a keyframe -> cluster index; single writer."""

    def __init__(self) -> None:
        self.clusters: list[Cluster] = []
        self._cluster_of: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self.clusters)

    def cluster_of(self, keyframe_id: int) -> int | None:
        return self._cluster_of.get(keyframe_id)

    def _new_cluster(self, representative: Signature) -> Cluster:
        c = Cluster(id=len(self.clusters), representative=representative)
        self.clusters.append(c)
        return c

    def _add_member(self, cluster_id: int, keyframe_id: int) -> None:
        if keyframe_id in self._cluster_of:
            raise DuplicateAssignment(f"keyframe {keyframe_id} already assigned")
        self.clusters[cluster_id].members.append(keyframe_id)
        self._cluster_of[keyframe_id] = cluster_id


def similar_clusters(store: ClusterStore, sig: Signature, threshold: float) -> SimilarClusters:
    """All clusters whose representative scores >= threshold against sig."""
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    scored = []
    for c in store.clusters:
        s = cosine_similarity(sig, c.representative)
        if s >= threshold:
            scored.append((c.id, s))
    scored.sort(key=lambda e: (-e[1], e[0]))
    return SimilarClusters(entries=tuple(scored))


def assign(
    store: ClusterStore,
    keyframe_id: int,
    sig: Signature,
    edges_gained: Iterable[int],
    similar: SimilarClusters,
) -> AssignmentOutcome:
    """Assign a keyframe to a cluster, creating one if no similar cluster is linked.

    The keyframe joins the highest-similarity similar cluster containing one
    of its new edge neighbors (ties break to the lowest cluster id, which the
    sort order of ``similar`` already provides). Without such a cluster a new
    one is created with ``sig`` as its frozen representative.
    """
    if store.cluster_of(keyframe_id) is not None:
        raise DuplicateAssignment(f"keyframe {keyframe_id} already assigned")
    neighbor_clusters = {store.cluster_of(n) for n in edges_gained}
    neighbor_clusters.discard(None)
    for cid, _score in similar.entries:
        if cid in neighbor_clusters:
            store._add_member(cid, keyframe_id)
            return AssignmentOutcome(cluster_id=cid, created=False)
    c = store._new_cluster(sig)
    store._add_member(c.id, keyframe_id)
    return AssignmentOutcome(cluster_id=c.id, created=True)


def members_of(store: ClusterStore, similar: SimilarClusters) -> list[int]:
    """Union of member keyframes of the listed clusters, score order then insertion order."""
    seen: set[int] = set()
    out: list[int] = []
    for cid, _ in similar.entries:
        for kf in store.clusters[cid].members:
            if kf not in seen:
                seen.add(kf)
                out.append(kf)
    return out


def write_cluster_dump(store: ClusterStore, csv_path: str | Path, jsonl_path: str | Path) -> None:
    """Dump membership as `cluster_id,keyframe_id` CSV plus JSONL representatives."""
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster_id", "keyframe_id"])
        for c in store.clusters:
            for kf in c.members:
                w.writerow([c.id, kf])
    with open(jsonl_path, "w") as fh:
        for c in store.clusters:
            rec = {
                "cluster_id": c.id,
                "collected_at": c.representative.collected_at,
                "pause_index": c.representative.pause_index,
                "entries": dict(c.representative.entries),
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_cluster_dump(csv_path: str | Path) -> dict[int, list[int]]:
    """Read membership back as cluster_id -> member list (eval-side consumer)."""
    out: dict[int, list[int]] = {}
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            out.setdefault(int(row["cluster_id"]), []).append(int(row["keyframe_id"]))
    return out
