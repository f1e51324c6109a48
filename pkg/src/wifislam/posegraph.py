"""SE(2) pose graph: group operations, Levenberg-Marquardt optimization,
and the trajectory alignment/error primitives used by evaluation.

Residual convention for an edge (i -> j) with measurement z:
    pred = between(x_i, x_j)          # pose of j expressed in i's frame
    r    = [pred.x - z.x, pred.y - z.y, wrap(pred.theta - z.theta)]
which gives simple closed-form Jacobians:
    d r / d x_i = [[-c, -s,  py], [ s, -c, -px], [0, 0, -1]]
    d r / d x_j = [[ c,  s,   0], [-s,  c,   0], [0, 0,  1]]
with c = cos(theta_i), s = sin(theta_i) and (px, py) the predicted relative
translation. The gauge is fixed by holding the lowest node id constant.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve


class DanglingEdge(ValueError):
    """An edge references a node id missing from the graph."""


class DisconnectedGraph(ValueError):
    """The graph is not connected from the gauge-fixed node."""


class BadInformation(ValueError):
    """An edge carries a non-symmetric-positive-definite information matrix."""


class LengthMismatch(ValueError):
    """Paired point lists have different lengths."""


class DegenerateAlignment(ValueError):
    """Alignment input is degenerate (all points coincident)."""


def wrap_angle(a: float) -> float:
    """Wrap into (-pi, pi]."""
    r = a - math.tau * round(a / math.tau)
    if r <= -math.pi:
        r += math.tau
    return r


@dataclass(frozen=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


IDENTITY = Pose2(0.0, 0.0, 0.0)


def compose(a: Pose2, b: Pose2) -> Pose2:
    """a then b: returns a * b."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(
        a.x + c * b.x - s * b.y,
        a.y + s * b.x + c * b.y,
        a.theta + b.theta,
    )


def inverse(a: Pose2) -> Pose2:
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(-(c * a.x + s * a.y), -(-s * a.x + c * a.y), -a.theta)


def between(a: Pose2, b: Pose2) -> Pose2:
    """Pose of b expressed in a's frame: inverse(a) * b."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    dx, dy = b.x - a.x, b.y - a.y
    return Pose2(c * dx + s * dy, -s * dx + c * dy, b.theta - a.theta)


@dataclass(frozen=True)
class GraphEdge:
    from_id: int
    to_id: int
    relative: Pose2
    information: np.ndarray  # 3x3 SPD
    kind: str = "odometry"  # {"odometry", "loop"}

    def __post_init__(self) -> None:
        if self.from_id == self.to_id:
            raise ValueError("self edges are not allowed")
        info = np.asarray(self.information, dtype=float)
        object.__setattr__(self, "information", info)


class PoseGraph:
    """Keyframe poses plus odometry/loop constraints."""

    def __init__(self) -> None:
        self.nodes: dict[int, Pose2] = {}
        self.edges: list[GraphEdge] = []

    def add_node(self, node_id: int, pose: Pose2) -> None:
        if node_id in self.nodes:
            raise ValueError(f"node {node_id} already present")
        self.nodes[node_id] = pose

    def add_edge(self, edge: GraphEdge) -> None:
        if edge.from_id not in self.nodes or edge.to_id not in self.nodes:
            raise DanglingEdge(f"edge {edge.from_id}->{edge.to_id} references a missing node")
        self.edges.append(edge)

    def copy(self) -> "PoseGraph":
        g = PoseGraph()
        g.nodes = dict(self.nodes)
        g.edges = list(self.edges)
        return g


def residual(edge: GraphEdge, nodes: dict[int, Pose2]) -> np.ndarray:
    if edge.from_id not in nodes or edge.to_id not in nodes:
        raise DanglingEdge(f"edge {edge.from_id}->{edge.to_id} references a missing node")
    pred = between(nodes[edge.from_id], nodes[edge.to_id])
    return np.array(
        [
            pred.x - edge.relative.x,
            pred.y - edge.relative.y,
            wrap_angle(pred.theta - edge.relative.theta),
        ]
    )


def residual_jacobians(edge: GraphEdge, nodes: dict[int, Pose2]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residual and its Jacobians wrt the from- and to-node parameters."""
    a = nodes[edge.from_id]
    b = nodes[edge.to_id]
    c, s = math.cos(a.theta), math.sin(a.theta)
    dx, dy = b.x - a.x, b.y - a.y
    px = c * dx + s * dy
    py = -s * dx + c * dy
    r = np.array([px - edge.relative.x, py - edge.relative.y, wrap_angle(b.theta - a.theta - edge.relative.theta)])
    ja = np.array([[-c, -s, py], [s, -c, -px], [0.0, 0.0, -1.0]])
    jb = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    return r, ja, jb


def total_error(graph: PoseGraph) -> float:
    e = 0.0
    for edge in graph.edges:
        r = residual(edge, graph.nodes)
        e += float(r @ edge.information @ r)
    return e


def _check_information(edges: Sequence[GraphEdge]) -> None:
    for edge in edges:
        if edge.information.shape != (3, 3):
            raise BadInformation(f"edge {edge.from_id}->{edge.to_id}: information must be 3x3")
    stacked = np.array([e.information for e in edges])
    if not np.allclose(stacked, np.transpose(stacked, (0, 2, 1)), atol=1e-9):
        raise BadInformation("information matrices must be symmetric")
    try:
        np.linalg.cholesky(stacked)  # batched; fails on any non-PD member
    except np.linalg.LinAlgError:
        raise BadInformation("information matrices must be positive definite") from None


def _check_connected(graph: PoseGraph, anchor: int) -> None:
    adj: dict[int, list[int]] = {n: [] for n in graph.nodes}
    for e in graph.edges:
        adj[e.from_id].append(e.to_id)
        adj[e.to_id].append(e.from_id)
    seen = {anchor}
    stack = [anchor]
    while stack:
        n = stack.pop()
        for m in adj[n]:
            if m not in seen:
                seen.add(m)
                stack.append(m)
    if len(seen) != len(graph.nodes):
        missing = sorted(set(graph.nodes) - seen)[:5]
        raise DisconnectedGraph(f"nodes unreachable from {anchor}: {missing}...")


def _stack_state(graph: PoseGraph, order: list[int]) -> np.ndarray:
    return np.array([[graph.nodes[n].x, graph.nodes[n].y, graph.nodes[n].theta] for n in order])


def _edge_arrays(graph: PoseGraph, index: dict[int, int]):
    ii = np.array([index[e.from_id] for e in graph.edges], dtype=int)
    jj = np.array([index[e.to_id] for e in graph.edges], dtype=int)
    z = np.array([[e.relative.x, e.relative.y, e.relative.theta] for e in graph.edges])
    omega = np.array([e.information for e in graph.edges])
    return ii, jj, z, omega


def _residuals_vec(x: np.ndarray, ii: np.ndarray, jj: np.ndarray, z: np.ndarray):
    """Vectorized residuals plus the predicted relative translations (for Jacobians)."""
    ti = x[ii, 2]
    c, s = np.cos(ti), np.sin(ti)
    dx = x[jj, 0] - x[ii, 0]
    dy = x[jj, 1] - x[ii, 1]
    px = c * dx + s * dy
    py = -s * dx + c * dy
    dth = x[jj, 2] - x[ii, 2] - z[:, 2]
    dth = dth - math.tau * np.round(dth / math.tau)
    dth = np.where(dth <= -math.pi, dth + math.tau, dth)
    r = np.stack([px - z[:, 0], py - z[:, 1], dth], axis=1)
    return r, px, py, c, s


def _weighted_error(r: np.ndarray, omega: np.ndarray) -> float:
    return float(np.einsum("ei,eij,ej->", r, omega, r))


def optimize(
    graph: PoseGraph,
    max_iters: int = 50,
    damping_init: float = 1e-4,
    stats: dict | None = None,
) -> PoseGraph:
    """Levenberg-Marquardt over the whole graph; the lowest node id stays fixed.

    Accepted steps strictly decrease the weighted error; rejected steps raise
    the damping tenfold and are retried. Terminates on max_iters (accepted or
    rejected) or when the relative error improvement drops below 1e-9. When a
    ``stats`` dict is supplied it receives the iteration count and the initial
    and final errors.
    """
    if not graph.edges:
        raise ValueError("optimize requires at least one edge")
    _check_information(graph.edges)
    order = sorted(graph.nodes)
    anchor = order[0]
    _check_connected(graph, anchor)

    index = {n: k for k, n in enumerate(order)}
    # variable layout: 3 slots per node, anchor's removed
    var_of = {}
    v = 0
    for n in order:
        if n == anchor:
            var_of[n] = -1
        else:
            var_of[n] = v
            v += 1
    nvars = 3 * v

    ii, jj, z, omega = _edge_arrays(graph, index)
    vi = np.array([var_of[e.from_id] for e in graph.edges], dtype=int)
    vj = np.array([var_of[e.to_id] for e in graph.edges], dtype=int)

    x = _stack_state(graph, order)
    r, px, py, c, s = _residuals_vec(x, ii, jj, z)
    err = _weighted_error(r, omega)
    lam = damping_init
    err_initial = err
    iters_done = 0
    accepted_errors = [err]

    n_edges = len(graph.edges)
    zeros = np.zeros(n_edges)
    ones = np.ones(n_edges)

    for _ in range(max_iters):
        if err == 0.0:
            break
        iters_done += 1
        # block Jacobians per edge
        ja = np.empty((n_edges, 3, 3))
        ja[:, 0, 0] = -c
        ja[:, 0, 1] = -s
        ja[:, 0, 2] = py
        ja[:, 1, 0] = s
        ja[:, 1, 1] = -c
        ja[:, 1, 2] = -px
        ja[:, 2, 0] = zeros
        ja[:, 2, 1] = zeros
        ja[:, 2, 2] = -ones
        jb = np.empty((n_edges, 3, 3))
        jb[:, 0, 0] = c
        jb[:, 0, 1] = s
        jb[:, 0, 2] = zeros
        jb[:, 1, 0] = -s
        jb[:, 1, 1] = c
        jb[:, 1, 2] = zeros
        jb[:, 2, 0] = zeros
        jb[:, 2, 1] = zeros
        jb[:, 2, 2] = ones

        # normal equation blocks
        oa = np.einsum("eij,ejk->eik", omega, ja)
        ob = np.einsum("eij,ejk->eik", omega, jb)
        haa = np.einsum("eji,ejk->eik", ja, oa)
        hab = np.einsum("eji,ejk->eik", ja, ob)
        hbb = np.einsum("eji,ejk->eik", jb, ob)
        ga = np.einsum("eji,ej->ei", oa, r)
        gb = np.einsum("eji,ej->ei", ob, r)

        rows: list[np.ndarray] = []
        cols: list[np.ndarray] = []
        vals: list[np.ndarray] = []
        g = np.zeros(nvars)
        off = np.arange(3)

        mask_i = vi >= 0
        mask_j = vj >= 0
        bi = 3 * vi
        bj = 3 * vj

        def add_blocks(block: np.ndarray, rbase: np.ndarray, cbase: np.ndarray, mask: np.ndarray) -> None:
            if not mask.any():
                return
            rr = (rbase[mask, None, None] + off[None, :, None]) * np.ones((1, 1, 3), dtype=int)
            cc = (cbase[mask, None, None] + off[None, None, :]) * np.ones((1, 3, 1), dtype=int)
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            vals.append(block[mask].ravel())

        add_blocks(haa, bi, bi, mask_i)
        add_blocks(hbb, bj, bj, mask_j)
        both = mask_i & mask_j
        add_blocks(hab, bi, bj, both)
        add_blocks(np.transpose(hab, (0, 2, 1)), bj, bi, both)
        np.add.at(g, (bi[mask_i, None] + off[None, :]).ravel(), ga[mask_i].ravel())
        np.add.at(g, (bj[mask_j, None] + off[None, :]).ravel(), gb[mask_j].ravel())

        h = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(nvars, nvars),
        ).tocsr()

        improved = False
        while True:
            hd = h + lam * sp.identity(nvars, format="csr")
            try:
                delta = spsolve(hd, -g)
            except RuntimeError:
                delta = None
            if delta is not None and np.all(np.isfinite(delta)):
                xc = x.copy()
                upd = delta.reshape(-1, 3)
                free = np.array([k for k, n in enumerate(order) if n != anchor], dtype=int)
                xc[free, 0] += upd[:, 0]
                xc[free, 1] += upd[:, 1]
                xc[free, 2] += upd[:, 2]
                rc, pxc, pyc, cc2, sc2 = _residuals_vec(xc, ii, jj, z)
                errc = _weighted_error(rc, omega)
                if errc < err:
                    rel = (err - errc) / err if err > 0 else 0.0
                    x, r, px, py, c, s = xc, rc, pxc, pyc, cc2, sc2
                    err = errc
                    accepted_errors.append(err)
                    lam = max(lam / 10.0, 1e-12)
                    improved = True
                    if rel < 1e-9:
                        improved = False  # converged; stop outer loop
                    break
            lam *= 10.0
            if lam > 1e12:
                break
        if not improved:
            break

    if stats is not None:
        stats["iterations"] = iters_done
        stats["error_initial"] = err_initial
        stats["error_final"] = err
        stats["accepted_errors"] = accepted_errors

    out = PoseGraph()
    for k, n in enumerate(order):
        out.nodes[n] = Pose2(float(x[k, 0]), float(x[k, 1]), float(x[k, 2]))
    out.edges = list(graph.edges)
    return out


def kabsch_align(est: Sequence[Sequence[float]], gt: Sequence[Sequence[float]]) -> tuple[np.ndarray, np.ndarray]:
    """Rigid transform (R, t) minimizing sum |R*est_i + t - gt_i|^2.

    A proper rotation is enforced by flipping the sign of the smallest
    singular direction when the raw solution is a reflection.
    """
    p = np.asarray(est, dtype=float)
    q = np.asarray(gt, dtype=float)
    if p.shape != q.shape:
        raise LengthMismatch(f"est has {len(p)} points, gt has {len(q)}")
    if len(p) < 2:
        raise LengthMismatch("alignment needs at least 2 points")
    cp = p.mean(axis=0)
    cq = q.mean(axis=0)
    p0 = p - cp
    q0 = q - cq
    if float(np.abs(p0).max(initial=0.0)) < 1e-12 or float(np.abs(q0).max(initial=0.0)) < 1e-12:
        raise DegenerateAlignment("all points coincide; rotation is unobservable")
    h = p0.T @ q0
    u, _sv, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, d]) @ u.T
    t = cq - rot @ cp
    return rot, t


def apply_rigid(rot: np.ndarray, t: np.ndarray, pts: Sequence[Sequence[float]]) -> np.ndarray:
    return np.asarray(pts, dtype=float) @ rot.T + t


def rmse(est: Sequence[Sequence[float]], gt: Sequence[Sequence[float]]) -> float:
    """Root-mean-square positional distance between corresponding points."""
    p = np.asarray(est, dtype=float)
    q = np.asarray(gt, dtype=float)
    if p.shape != q.shape:
        raise LengthMismatch(f"est has {len(p)} points, gt has {len(q)}")
    if len(p) == 0:
        raise LengthMismatch("rmse needs at least 1 point")
    d2 = ((p - q) ** 2).sum(axis=1)
    return float(np.sqrt(d2.mean()))


def write_trajectory(path: str | Path, rows: Iterable[tuple[int, float, Pose2]]) -> None:
    """CSV `keyframe_id,t_s,x_m,y_m,theta_rad`; shared by estimates and ground truth."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["keyframe_id", "t_s", "x_m", "y_m", "theta_rad"])
        for kf, t, pose in rows:
            w.writerow([kf, repr(float(t)), repr(pose.x), repr(pose.y), repr(pose.theta)])


def read_trajectory(path: str | Path) -> list[tuple[int, float, Pose2]]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            out.append(
                (
                    int(row["keyframe_id"]),
                    float(row["t_s"]),
                    Pose2(float(row["x_m"]), float(row["y_m"]), float(row["theta_rad"])),
                )
            )
    return out
