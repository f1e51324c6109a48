"""Metrics over completed runs: loop-closure FP/FN counts, aligned trajectory
error, deterministic compute ledgers, the similarity-vs-distance curve, and
the cluster-gated map-image localizer with its error CDF.

Loop scoring is adjudicated against the simulator's ground-truth pairs with
an index tolerance: an accepted edge is a true detection when some ground
truth pair lies within ``match_radius`` frames on both endpoints, and a
ground-truth pair is missed (a false negative) when no accepted edge lies
within the same tolerance. TP + FN always equals the ground-truth pair count;
FN% is relative to all true closures and FP% to all detections.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import spearmanr

from .clustering import ClusterStore, assign, members_of, similar_clusters
from .frontend import shared_word_count
from .gating import RunRecord
from .posegraph import kabsch_align, apply_rigid, rmse
from .signature import Signature, associate_frames, cosine_similarity
from .simworld import Dataset, Frame, dwell_positions


class NoCorrespondence(ValueError):
    """Estimate and ground truth share no keyframe ids."""


class EmptyMap(ValueError):
    """Localization was attempted with an empty map split."""


@dataclass(frozen=True)
class LoopScore:
    true_positives: int
    false_positives: int
    false_negatives: int
    fp_pct: float
    fn_pct: float


def score_loops(
    edges: Sequence[tuple[int, int]],
    gt_pairs: Iterable[tuple[int, int]],
    match_radius: int = 5,
) -> LoopScore:
    """Adjudicate accepted loop edges against ground-truth pairs.

    A ground-truth pair counts as detected when any edge covers it within the
    tolerance, never more than once however many edges land nearby, so the
    result is invariant to event order.
    """
    if match_radius <= 0:
        raise ValueError("match_radius must be positive")
    gt = sorted({(min(a, b), max(a, b)) for a, b in gt_pairs})
    ed = [(min(a, b), max(a, b)) for a, b in edges]
    if not gt:
        fp = len(ed)
        return LoopScore(0, fp, 0, 100.0 if fp else 0.0, 0.0)
    if not ed:
        return LoopScore(0, 0, len(gt), 0.0, 100.0)
    g = np.array(gt)
    e = np.array(ed)
    near = (np.abs(e[:, None, 0] - g[None, :, 0]) <= match_radius) & (
        np.abs(e[:, None, 1] - g[None, :, 1]) <= match_radius
    )
    covered = near.any(axis=0)
    edge_good = near.any(axis=1)
    tp = int(covered.sum())
    fn = len(gt) - tp
    fp = int((~edge_good).sum())
    fp_pct = 100.0 * fp / len(ed)
    fn_pct = 100.0 * fn / (tp + fn)
    return LoopScore(tp, fp, fn, fp_pct, fn_pct)


def trajectory_error(
    est: Sequence[tuple[int, float, object]], gt: Sequence[tuple[int, float, object]]
) -> float:
    """Kabsch-align the estimate onto ground truth and return positional RMSE."""
    gt_by_id = {kf: pose for kf, _t, pose in gt}
    pairs = [(pose, gt_by_id[kf]) for kf, _t, pose in est if kf in gt_by_id]
    if not pairs:
        raise NoCorrespondence("no common keyframe ids between estimate and ground truth")
    p = [(e.x, e.y) for e, _ in pairs]
    q = [(g.x, g.y) for _, g in pairs]
    rot, t = kabsch_align(p, q)
    return rmse(apply_rigid(rot, t, p), q)


@dataclass(frozen=True)
class ComputeLedger:
    loop_closure_cost: float
    loop_closure_wall_s: float
    clustering_overhead: float
    clustering_wall_s: float
    management_overhead: float
    management_wall_s: float

    @property
    def overhead_cost(self) -> float:
        return self.clustering_overhead + self.management_overhead


def ledger(record: RunRecord) -> ComputeLedger:
    return ComputeLedger(
        loop_closure_cost=record.loop_cost,
        loop_closure_wall_s=record.wall.get("loop_closure_s", 0.0),
        clustering_overhead=record.clustering_cost,
        clustering_wall_s=record.wall.get("clustering_s", 0.0),
        management_overhead=record.management_cost,
        management_wall_s=record.wall.get("management_s", 0.0),
    )


# ---------------------------------------------------------------------------
# similarity vs distance


def similarity_distance_curve(
    dataset: Dataset, signatures: Sequence[Signature]
) -> tuple[list[tuple[float, float]], float]:
    """All dwell pairs as (gt distance, cosine similarity) plus Spearman rank correlation."""
    if len(signatures) < 2:
        raise ValueError("need at least 2 dwell signatures")
    pos = dwell_positions(dataset)
    pts = []
    for i in range(len(signatures)):
        for j in range(i + 1, len(signatures)):
            pi = pos[signatures[i].pause_index]
            pj = pos[signatures[j].pause_index]
            d = math.hypot(pi[1] - pj[1], pi[2] - pj[2])
            pts.append((d, cosine_similarity(signatures[i], signatures[j])))
    rho = float(spearmanr([p[0] for p in pts], [p[1] for p in pts]).statistic)
    return pts, rho


# ---------------------------------------------------------------------------
# cluster-gated localization


@dataclass(frozen=True)
class CdfCurve:
    errors: tuple[float, ...]  # sorted ascending
    fractions: tuple[float, ...]  # non-decreasing, ends at 1.0

    @classmethod
    def from_errors(cls, errors: Sequence[float]) -> "CdfCurve":
        e = sorted(float(x) for x in errors)
        n = len(e)
        return cls(errors=tuple(e), fractions=tuple((k + 1) / n for k in range(n)))

    def fraction_within(self, x: float) -> float:
        f = 0.0
        for e, frac in zip(self.errors, self.fractions):
            if e <= x:
                f = frac
            else:
                break
        return f


def build_map_clusters(
    map_frames: Sequence[Frame], frame_sig: dict[int, Signature], threshold: float
) -> ClusterStore:
    """Cluster the mapping split: consecutive map frames act as the linking edge."""
    store = ClusterStore()
    prev: int | None = None
    for f in map_frames:
        sims = similar_clusters(store, frame_sig[f.id], threshold)
        linked = {prev} if prev is not None else set()
        assign(store, f.id, frame_sig[f.id], linked, sims)
        prev = f.id
    return store


def localize_queries(
    map_frames: Sequence[Frame],
    map_store: ClusterStore,
    frame_sig: dict[int, Signature],
    query_frames: Sequence[Frame],
    threshold: float,
) -> tuple[CdfCurve, int]:
    """Locate each query at the best map frame within its similar clusters.

    The winner is the map frame with the highest shared-word count (ties go
    to the lowest frame id); queries whose signature matches no cluster fall
    back to a global scan and are counted.
    """
    if not map_frames:
        raise EmptyMap("no map frames")
    by_id = {f.id: f for f in map_frames}
    fallbacks = 0
    errors = []
    for q in query_frames:
        sims = similar_clusters(map_store, frame_sig[q.id], threshold)
        cand_ids = members_of(map_store, sims)
        if not cand_ids:
            fallbacks += 1
            cand_ids = [f.id for f in map_frames]
        best = max(cand_ids, key=lambda kf: (shared_word_count(q.appearance, by_id[kf].appearance), -kf))
        chosen = by_id[best]
        errors.append(
            math.hypot(chosen.gt_pose.x - q.gt_pose.x, chosen.gt_pose.y - q.gt_pose.y)
        )
    return CdfCurve.from_errors(errors), fallbacks


def localize_dataset(
    dataset: Dataset, split: float = 0.4, threshold: float = 0.85
) -> tuple[CdfCurve, int, int, int]:
    """Split the dataset by time into map/query phases and run the localizer."""
    from .gating import build_signatures

    if not 0 < split < 1:
        raise ValueError("split must be in (0, 1)")
    frames = dataset.frames
    if not frames:
        raise EmptyMap("dataset has no frames")
    n_map = int(round(split * len(frames)))
    if n_map < 1 or n_map >= len(frames):
        raise EmptyMap("split leaves an empty map or query phase")
    sigs = build_signatures(dataset)
    frame_sig = associate_frames([(f.id, f.t) for f in frames], sigs)
    map_frames = frames[:n_map]
    query_frames = frames[n_map:]
    store = build_map_clusters(map_frames, frame_sig, threshold)
    curve, fallbacks = localize_queries(map_frames, store, frame_sig, query_frames, threshold)
    return curve, fallbacks, len(map_frames), len(query_frames)


# ---------------------------------------------------------------------------
# report files


REPORT_COLUMNS = [
    "dataset",
    "policy",
    "gated",
    "seed",
    "min_matches",
    "inlier_distance",
    "wifi_threshold",
    "real_time_threshold",
    "rmse_m",
    "fp",
    "fn",
    "fp_pct",
    "fn_pct",
    "loop_cost",
    "overhead_cost",
    "wall_ms",
]


def _fmt_threshold(v: float) -> str:
    return "inf" if math.isinf(v) else repr(float(v))


def report_row(record: RunRecord, dataset: Dataset, match_radius: int = 5) -> dict[str, str]:
    score = score_loops(
        [(a, b) for _s, a, b in record.loop_edges], dataset.gt_loop_pairs, match_radius
    )
    err = trajectory_error(record.est, record.gt)
    led = ledger(record)
    p = record.params
    return {
        "dataset": record.dataset_name,
        "policy": p.policy,
        "gated": str(p.gated).lower(),
        "seed": str(p.seed),
        "min_matches": str(p.min_matches),
        "inlier_distance": repr(float(p.inlier_distance)),
        "wifi_threshold": repr(float(p.wifi_threshold)),
        "real_time_threshold": _fmt_threshold(p.rtab.real_time_threshold),
        "rmse_m": repr(float(err)),
        "fp": str(score.false_positives),
        "fn": str(score.false_negatives),
        "fp_pct": repr(float(score.fp_pct)),
        "fn_pct": repr(float(score.fn_pct)),
        "loop_cost": repr(float(led.loop_closure_cost)),
        "overhead_cost": repr(float(led.overhead_cost)),
        "wall_ms": repr(float(sum(record.wall.values()) * 1000.0)),
    }


def row_key(row: dict[str, str]) -> tuple:
    return tuple(
        row[k]
        for k in (
            "dataset",
            "policy",
            "gated",
            "seed",
            "min_matches",
            "inlier_distance",
            "wifi_threshold",
            "real_time_threshold",
        )
    )


def write_report(path: str | Path, rows: Sequence[dict[str, str]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow(row)


def read_report(path: str | Path) -> list[dict[str, str]]:
    if not Path(path).exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_cdf_csv(path: str | Path, curve: CdfCurve, fallbacks: int = 0) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("error_m,fraction\n")
        for e, f in zip(curve.errors, curve.fractions):
            fh.write(f"{e!r},{f!r}\n")
        fh.write(f"# fallback_queries={fallbacks}\n")


def write_similarity_curve_csv(
    path: str | Path, points: Sequence[tuple[float, float]], rho: float
) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("distance_m,similarity\n")
        for d, s in points:
            fh.write(f"{d!r},{s!r}\n")
        fh.write(f"# spearman_rho={rho!r}\n")
