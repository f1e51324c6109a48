"""Loop-closure candidate selection under three policy variants, each in
vanilla and Wi-Fi-gated mode, plus the frame-by-frame pipeline driver.

Policies:
  rgbd - predecessors + geodesic neighbors + a seeded random keyframe subset;
         gating replaces the random subset with members of similar clusters.
  rtab - short-term/working/long-term memory pools with a real-time budget;
         gating immunizes working-memory members of similar clusters and
         retrieves their long-term members back before the candidate scan.
  orb  - inverted visual-word index; gating queries only the per-cluster
         indexes of similar clusters instead of the global index.

Costs are deterministic: one visual comparison costs 1 unit, one Wi-Fi
cluster comparison 0.02 units, one optimizer iteration 0.1 units. Wall-clock
times are recorded alongside but never drive any decision.
"""

from __future__ import annotations

import json
import math
import time
from collections import deque
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .clustering import (
    AssignmentOutcome,
    ClusterStore,
    SimilarClusters,
    assign,
    members_of,
    similar_clusters,
    write_cluster_dump,
)
from .frontend import (
    Appearance,
    Covisibility,
    FrameTruth,
    InvertedIndex,
    MatchParams,
    MatchResult,
    covis_update,
    match_frames,
    match_information,
)
from .posegraph import GraphEdge, PoseGraph, compose, optimize, write_trajectory
from .signature import Signature, associate_frames, signature_from_window, EmptyScanWindow
from .simworld import Dataset, template_pose_of

VISUAL_COMPARE_COST = 1.0
WIFI_COMPARE_COST = 0.02
OPT_ITERATION_COST = 0.1

POLICIES = ("rgbd", "rtab", "orb")


class BadDataset(ValueError):
    """The dataset violates the expected schema; message carries a frame index."""


class MemoryCorruption(RuntimeError):
    """An rtab memory invariant broke (disjointness or immune scope)."""


@dataclass(frozen=True)
class RgbdParams:
    n_predecessors: int = 3
    geodesic_depth: int = 2
    n_random_keyframes: int = 8


@dataclass(frozen=True)
class RtabParams:
    stm_capacity: int = 15
    real_time_threshold: float = math.inf
    wm_transfer_batch: int = 10


@dataclass(frozen=True)
class PolicyParams:
    policy: str = "orb"
    gated: bool = True
    min_matches: int = 20
    inlier_distance: float = 3.0
    wifi_threshold: float = 0.85
    seed: int = 0
    rgbd: RgbdParams = RgbdParams()
    rtab: RtabParams = RtabParams()
    dropout_keep: float = 0.8
    noise_xy: float = 0.05
    noise_theta: float = 0.01
    loop_gap_s: float = 30.0
    opt_every: int = 25
    opt_min_spacing: int = 14
    opt_max_iters: int = 2
    final_opt_max_iters: int = 100

    def __post_init__(self) -> None:
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")
        if self.min_matches <= 0 or self.inlier_distance <= 0:
            raise ValueError("min_matches and inlier_distance must be positive")
        if not 0 < self.wifi_threshold <= 1:
            raise ValueError("wifi_threshold must be in (0, 1]")
        for v in (self.rgbd.n_predecessors, self.rgbd.geodesic_depth, self.rgbd.n_random_keyframes,
                  self.rtab.stm_capacity, self.rtab.wm_transfer_batch):
            if v < 0:
                raise ValueError("counts must be >= 0")
        if self.rtab.real_time_threshold <= 0:
            raise ValueError("real_time_threshold must be positive")

    def match_params(self) -> MatchParams:
        return MatchParams(
            min_matches=self.min_matches,
            inlier_distance=self.inlier_distance,
            dropout_keep=self.dropout_keep,
            noise_xy=self.noise_xy,
            noise_theta=self.noise_theta,
        )


@dataclass
class MemoryState:
    stm: deque = field(default_factory=deque)
    wm: set = field(default_factory=set)
    ltm: set = field(default_factory=set)
    immune: set = field(default_factory=set)

    def check(self) -> None:
        stm = set(self.stm)
        if stm & self.wm or stm & self.ltm or self.wm & self.ltm:
            raise MemoryCorruption("memory pools are not disjoint")
        if not self.immune <= self.wm:
            raise MemoryCorruption("immune frames must live in WM")


@dataclass(frozen=True)
class LoopEvent:
    step: int
    from_id: int
    to_id: int  # best accepted loop candidate, -1 when none
    accepted: bool
    candidate_count: int
    comparisons_cost: float
    accepted_edges: tuple[int, ...] = ()


@dataclass(frozen=True)
class MemoryTraceRow:
    step: int
    stm: int
    wm: int
    ltm: int
    immune: int
    transfers: int
    retrievals: int


@dataclass
class RunRecord:
    dataset_name: str
    dataset_seed: int
    params: PolicyParams
    graph: PoseGraph
    est: list  # (keyframe_id, t, Pose2)
    gt: list
    store: ClusterStore | None
    events: list
    loop_edges: list  # (step, from_id, to_id), time gap > loop_gap_s
    memory_trace: list
    loop_cost: float
    clustering_cost: float
    management_cost: float
    opt_iterations: int
    subset_violations: int
    gating_violations: int
    wall: dict


# ---------------------------------------------------------------------------
# policy candidate selection


def _geodesic_neighbors(graph: PoseGraph, start: int, depth: int) -> set[int]:
    if start not in graph.nodes or depth <= 0:
        return set()
    adj: dict[int, list[int]] = {}
    for e in graph.edges:
        adj.setdefault(e.from_id, []).append(e.to_id)
        adj.setdefault(e.to_id, []).append(e.from_id)
    seen = {start}
    frontier = [start]
    for _ in range(depth):
        nxt = []
        for n in frontier:
            for m in adj.get(n, ()):
                if m not in seen:
                    seen.add(m)
                    nxt.append(m)
        frontier = nxt
    return seen


def rgbd_candidates(
    graph: PoseGraph,
    current: int,
    store: ClusterStore | None,
    params: PolicyParams,
    sims: SimilarClusters | None,
) -> list[int]:
    """Predecessors + geodesic neighbors + (random subset | similar-cluster members).

    The current keyframe must not be in the graph yet; candidates are
    returned sorted ascending.
    """
    if current in graph.nodes:
        raise ValueError(f"keyframe {current} already in graph")
    prior = sorted(graph.nodes)
    if not prior:
        return []
    preds = prior[-params.rgbd.n_predecessors:] if params.rgbd.n_predecessors else []
    geo = _geodesic_neighbors(graph, prior[-1], params.rgbd.geodesic_depth)
    base = set(preds) | geo
    if params.gated:
        extra = [k for k in members_of(store, sims) if k not in base] if sims is not None else []
    else:
        pool = [k for k in prior if k not in base]
        rng = np.random.default_rng((params.seed, 7, current))
        n = min(params.rgbd.n_random_keyframes, len(pool))
        extra = sorted(int(k) for k in rng.choice(pool, size=n, replace=False)) if n else []
    return sorted(base | set(extra))


def rtab_step(
    state: MemoryState,
    current: int,
    store: ClusterStore | None,
    params: PolicyParams,
    step_cost: float,
    *,
    graph: PoseGraph,
    sims: SimilarClusters | None,
    recent_matches: Sequence[int] = (),
) -> tuple[list[int], MemoryState, list[int], list[int]]:
    """One memory-management step; mutates and returns the state.

    ``step_cost`` is the measured deterministic cost of the previously
    processed frame (the budget check is necessarily retrospective). Order:
    the current frame enters STM and overflow spills to WM; in gated mode
    WM members of similar clusters become immune and LTM members are
    retrieved back (and made immune); candidates are the WM (gated: only
    similar-cluster members of it); finally, if the budget was exceeded,
    the lowest-priority non-immune WM frames move to LTM in batches until
    the projected next-step cost fits.
    """
    state.stm.append(current)
    while len(state.stm) > params.rtab.stm_capacity:
        state.wm.add(state.stm.popleft())

    retrieved: list[int] = []
    if params.gated and sims is not None:
        similar_members = set(members_of(store, sims))
        state.immune &= similar_members  # immunity lapses once the cluster stops being similar
        state.immune |= state.wm & similar_members
        back = sorted(state.ltm & similar_members)
        for k in back:
            state.ltm.discard(k)
            state.wm.add(k)
            state.immune.add(k)
        retrieved = back
        candidates = sorted(state.wm & similar_members)
    else:
        candidates = sorted(state.wm)

    transferred: list[int] = []
    if step_cost > params.rtab.real_time_threshold:
        sources = [n for n in recent_matches if n in graph.nodes]
        newest = max(graph.nodes) if graph.nodes else None
        if newest is not None:
            sources.append(newest)
        hops = _hops_from(graph, sources)
        order = sorted(
            (k for k in state.wm if k not in state.immune),
            key=lambda k: (-hops.get(k, 1 << 30), k),
        )
        pos = 0
        while (
            len(state.wm) * VISUAL_COMPARE_COST > params.rtab.real_time_threshold
            and pos < len(order)
        ):
            batch = order[pos : pos + params.rtab.wm_transfer_batch]
            pos += len(batch)
            for k in batch:
                state.wm.discard(k)
                state.ltm.add(k)
            transferred.extend(batch)

    state.check()
    return candidates, state, transferred, retrieved


def _hops_from(graph: PoseGraph, sources: Sequence[int]) -> dict[int, int]:
    adj: dict[int, list[int]] = {}
    for e in graph.edges:
        adj.setdefault(e.from_id, []).append(e.to_id)
        adj.setdefault(e.to_id, []).append(e.from_id)
    hops = {s: 0 for s in sources}
    frontier = list(sources)
    d = 0
    while frontier:
        d += 1
        nxt = []
        for n in frontier:
            for m in adj.get(n, ()):
                if m not in hops:
                    hops[m] = d
                    nxt.append(m)
        frontier = nxt
    return hops


def orb_candidates(
    appearance: Appearance,
    store: ClusterStore | None,
    cluster_indexes: dict[int, InvertedIndex] | None,
    global_index: InvertedIndex | None,
    params: PolicyParams,
    sims: SimilarClusters | None,
) -> list[int]:
    """Word-sharing keyframes: whole map in vanilla mode, similar clusters' indexes when gated."""
    if not params.gated:
        return global_index.query(appearance)
    if sims is None or not sims.entries:
        return []
    counts: dict[int, int] = {}
    for cid, _ in sims.entries:
        idx = cluster_indexes.get(cid)
        if idx is None:
            continue
        counts.update(idx.query_scored(appearance))  # cluster indexes are disjoint
    ranked = sorted(counts.items(), key=lambda e: (-e[1], e[0]))
    return [kf for kf, _ in ranked]


def orb_cluster_management(
    current: int,
    appearance: Appearance,
    sig: Signature,
    accepted_matches: Sequence[int],
    covis: Covisibility,
    store: ClusterStore,
    cluster_indexes: dict[int, InvertedIndex],
    sims: SimilarClusters,
) -> AssignmentOutcome:
    """Assign the keyframe to a similar cluster linked by an edge or co-visibility,
    else create a fresh cluster with its own index; insert into exactly one index."""
    linked = set(accepted_matches) | covis.neighbors(current)
    outcome = assign(store, current, sig, linked, sims)
    idx = cluster_indexes.setdefault(outcome.cluster_id, InvertedIndex())
    idx.insert(current, appearance)
    return outcome


# ---------------------------------------------------------------------------
# pipeline


def build_signatures(dataset: Dataset) -> list[Signature]:
    """One signature per non-empty dwell, in time order."""
    sigs = []
    for di, scans in enumerate(dataset.dwell_scans):
        try:
            sigs.append(signature_from_window(list(scans), di))
        except EmptyScanWindow:
            continue
    return sigs


def _validate(dataset: Dataset) -> None:
    prev_t = -math.inf
    for k, f in enumerate(dataset.frames):
        if f.id != k:
            raise BadDataset(f"frame index {k}: ids must be dense ascending, got {f.id}")
        if f.t < prev_t:
            raise BadDataset(f"frame index {k}: timestamps must be non-decreasing")
        if not f.appearance.words:
            raise BadDataset(f"frame index {k}: empty word bag")
        prev_t = f.t


def run_pipeline(dataset: Dataset, params: PolicyParams) -> RunRecord:
    """Drive the full per-frame loop; deterministic for a fixed (dataset, params)."""
    _validate(dataset)
    frames = dataset.frames
    mp = params.match_params()
    loop_info = match_information(mp)
    sigs = build_signatures(dataset)
    frame_sig = associate_frames([(f.id, f.t) for f in frames], sigs)
    truths = [
        FrameTruth(
            gt_pose=f.gt_pose,
            template_pose=template_pose_of(dataset.world, f.gt_pose, f.appearance.place_template),
        )
        for f in frames
    ]
    onoise = dataset.world.config.odom_noise

    graph = PoseGraph()
    store: ClusterStore | None = ClusterStore() if params.gated else None
    cluster_indexes: dict[int, InvertedIndex] = {}
    global_index = InvertedIndex()  # vanilla candidates; shadow superset check when gated
    covis = Covisibility()
    memory = MemoryState()

    events: list[LoopEvent] = []
    loop_edges: list[tuple[int, int, int]] = []
    memory_trace: list[MemoryTraceRow] = []
    loop_cost = clustering_cost = management_cost = 0.0
    opt_iterations = 0
    subset_violations = 0
    gating_violations = 0
    wall = {"loop_closure_s": 0.0, "clustering_s": 0.0, "management_s": 0.0, "optimize_s": 0.0}

    prev_step_cost = 0.0
    prev_matches: list[int] = []
    pending_opt = False
    last_opt = -(1 << 30)

    for f in frames:
        i = f.id
        sig = frame_sig[i]

        sims: SimilarClusters | None = None
        if params.gated:
            t0 = time.perf_counter()
            sims = similar_clusters(store, sig, params.wifi_threshold)
            clustering_cost += len(store) * WIFI_COMPARE_COST
            wall["clustering_s"] += time.perf_counter() - t0

        # candidate selection happens before the frame enters the graph
        transfers: list[int] = []
        retrievals: list[int] = []
        if params.policy == "rgbd":
            cands = rgbd_candidates(graph, i, store, params, sims)
        elif params.policy == "rtab":
            cands, memory, transfers, retrievals = rtab_step(
                memory, i, store, params, prev_step_cost,
                graph=graph, sims=sims, recent_matches=prev_matches,
            )
        else:
            cands = orb_candidates(f.appearance, store, cluster_indexes, global_index, params, sims)
            if params.gated:
                superset = set(global_index.query(f.appearance))
                if not set(cands) <= superset:
                    subset_violations += 1

        if params.gated and sims is not None:
            allowed = set(members_of(store, sims))
            if params.policy == "rgbd":
                prior = sorted(graph.nodes)
                allowed |= set(prior[-params.rgbd.n_predecessors:])
                allowed |= _geodesic_neighbors(graph, prior[-1], params.rgbd.geodesic_depth) if prior else set()
            if not set(cands) <= allowed:
                gating_violations += 1

        # the keyframe joins the graph on its composed odometry estimate
        if i == 0:
            graph.add_node(0, f.gt_pose)
        else:
            graph.add_node(i, compose(graph.nodes[i - 1], f.odom_delta))
            step = math.hypot(f.odom_delta.x, f.odom_delta.y)
            sxy = onoise.sigma_xy_per_m * math.sqrt(max(step, 1e-6))
            sth = onoise.sigma_theta_per_m * math.sqrt(max(step, 1e-6))
            info = np.diag([1.0 / sxy**2, 1.0 / sxy**2, 1.0 / sth**2])
            graph.add_edge(GraphEdge(from_id=i - 1, to_id=i, relative=f.odom_delta, information=info))

        t0 = time.perf_counter()
        accepted: list[tuple[int, MatchResult]] = []
        for c in cands:
            mr = match_frames(i, c, f.appearance, frames[c].appearance, truths[i], truths[c], mp, params.seed)
            if mr.accepted:
                accepted.append((c, mr))
        loop_cost += len(cands) * VISUAL_COMPARE_COST
        wall["loop_closure_s"] += time.perf_counter() - t0

        # commit one transformation per category per keyframe event, like the
        # host systems: the strongest match wins, ties to the lowest id
        loop_hits = [(c, mr) for c, mr in accepted if f.t - frames[c].t > params.loop_gap_s]
        local_hits = [(c, mr) for c, mr in accepted if f.t - frames[c].t <= params.loop_gap_s]
        committed: list[tuple[int, MatchResult]] = []
        for group in (local_hits, loop_hits):
            if group:
                committed.append(max(group, key=lambda cm: (cm[1].num_matches, -cm[0])))
        for c, mr in committed:
            graph.add_edge(
                GraphEdge(from_id=i, to_id=c, relative=mr.relative, information=loop_info, kind="loop")
            )

        best_to = -1
        if loop_hits:
            best_to = max(loop_hits, key=lambda cm: (cm[1].num_matches, -cm[0]))[0]
            loop_edges.append((i, i, best_to))
            pending_opt = True
        events.append(
            LoopEvent(
                step=i,
                from_id=i,
                to_id=best_to,
                accepted=bool(loop_hits),
                candidate_count=len(cands),
                comparisons_cost=len(cands) * VISUAL_COMPARE_COST,
                accepted_edges=(best_to,) if loop_hits else (),
            )
        )

        accepted_ids = [c for c, _ in committed]
        if params.policy == "orb":
            covis_update(covis, i, accepted_ids)
        if params.gated:
            t0 = time.perf_counter()
            edges_gained = set(accepted_ids) | ({i - 1} if i > 0 else set())
            if params.policy == "orb":
                orb_cluster_management(
                    i, f.appearance, sig, sorted(edges_gained), covis, store, cluster_indexes, sims
                )
                global_index.insert(i, f.appearance)
            else:
                assign(store, i, sig, edges_gained, sims)
            management_cost += (len(sims) + 1) * WIFI_COMPARE_COST
            wall["management_s"] += time.perf_counter() - t0
        elif params.policy == "orb":
            global_index.insert(i, f.appearance)

        opt_iters_now = 0
        periodic = params.opt_every > 0 and i > 0 and i % params.opt_every == 0
        if graph.edges and (periodic or (pending_opt and i - last_opt >= params.opt_min_spacing)):
            t0 = time.perf_counter()
            stats: dict = {}
            graph = optimize(graph, max_iters=params.opt_max_iters, stats=stats)
            opt_iters_now = stats.get("iterations", 0)
            opt_iterations += opt_iters_now
            wall["optimize_s"] += time.perf_counter() - t0
            pending_opt = False
            last_opt = i

        prev_step_cost = len(cands) * VISUAL_COMPARE_COST + opt_iters_now * OPT_ITERATION_COST
        prev_matches = accepted_ids
        if params.policy == "rtab":
            memory_trace.append(
                MemoryTraceRow(
                    step=i,
                    stm=len(memory.stm),
                    wm=len(memory.wm),
                    ltm=len(memory.ltm),
                    immune=len(memory.immune),
                    transfers=len(transfers),
                    retrievals=len(retrievals),
                )
            )

    if graph.edges:
        t0 = time.perf_counter()
        stats = {}
        graph = optimize(graph, max_iters=params.final_opt_max_iters, stats=stats)
        opt_iterations += stats.get("iterations", 0)
        wall["optimize_s"] += time.perf_counter() - t0

    est = [(f.id, f.t, graph.nodes[f.id]) for f in frames]
    gt = [(f.id, f.t, f.gt_pose) for f in frames]
    return RunRecord(
        dataset_name=dataset.name,
        dataset_seed=dataset.seed,
        params=params,
        graph=graph,
        est=est,
        gt=gt,
        store=store,
        events=events,
        loop_edges=loop_edges,
        memory_trace=memory_trace,
        loop_cost=loop_cost,
        clustering_cost=clustering_cost,
        management_cost=management_cost,
        opt_iterations=opt_iterations,
        subset_violations=subset_violations,
        gating_violations=gating_violations,
        wall=wall,
    )


# ---------------------------------------------------------------------------
# serialization


def params_to_json(params: PolicyParams) -> dict:
    d = asdict(params)
    if math.isinf(d["rtab"]["real_time_threshold"]):
        d["rtab"]["real_time_threshold"] = "inf"
    return d


def params_from_json(d: dict) -> PolicyParams:
    d = dict(d)
    rgbd = RgbdParams(**d.pop("rgbd"))
    rt = dict(d.pop("rtab"))
    if rt["real_time_threshold"] == "inf":
        rt["real_time_threshold"] = math.inf
    return PolicyParams(rgbd=rgbd, rtab=RtabParams(**rt), **d)


def save_run(record: RunRecord, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(
            {
                "dataset": record.dataset_name,
                "dataset_seed": record.dataset_seed,
                "params": params_to_json(record.params),
                "cost_units": {
                    "visual_compare": VISUAL_COMPARE_COST,
                    "wifi_compare": WIFI_COMPARE_COST,
                    "opt_iteration": OPT_ITERATION_COST,
                },
            },
            fh,
            indent=1,
            sort_keys=True,
        )
        fh.write("\n")
    write_trajectory(out / "trajectory_est.csv", record.est)
    write_trajectory(out / "trajectory_gt.csv", record.gt)
    with open(out / "loop_events.jsonl", "w") as fh:
        for e in record.events:
            fh.write(
                json.dumps(
                    {
                        "step": e.step,
                        "from": e.from_id,
                        "to": e.to_id,
                        "accepted": e.accepted,
                        "candidate_count": e.candidate_count,
                        "comparisons_cost": e.comparisons_cost,
                        "accepted_edges": list(e.accepted_edges),
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    with open(out / "memory_trace.csv", "w", newline="") as fh:
        fh.write("step,stm,wm,ltm,immune,transfers,retrievals\n")
        for r in record.memory_trace:
            fh.write(f"{r.step},{r.stm},{r.wm},{r.ltm},{r.immune},{r.transfers},{r.retrievals}\n")
    if record.store is not None:
        write_cluster_dump(record.store, out / "clusters.csv", out / "cluster_representatives.jsonl")
    with open(out / "timings.json", "w") as fh:
        json.dump(record.wall, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return out
