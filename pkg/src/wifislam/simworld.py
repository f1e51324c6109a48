"""Synthetic indoor worlds: floor plans, access points, wall-attenuated RSSI,
dwelled trajectories, aliased appearances, and noisy odometry.

The appearance model lays a stream of visual words along each corridor
(one bag per meter-sized bin, a frame sees its bin plus a window around it).
Every corridor owns a mostly-unique word stream; corridors assigned the same
scene template additionally share a small per-bin word subset. Two frames at
the same along-corridor position in template twins therefore match well
enough to pass low min-matches thresholds while true revisits share far
more words - which is exactly the perceptual-aliasing regime the gating
layer is meant to fix.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .frontend import Appearance
from .posegraph import Pose2, between
from .signature import ScanReading

FRAME_RATE_HZ = 2.0  # simulated keyframe rate while moving
LOOP_PAIR_RADIUS_M = 2.0  # gt loop pairs: closer than this ...
LOOP_PAIR_GAP_S = 30.0  # ... and further apart in time than this

# word-id spaces (disjoint by construction; see _corridor_word/_alias_word)
_ALIAS_WORD_BASE = 1 << 28
_JITTER_WORD_BASE = 1 << 29


class BadWorld(ValueError):
    """A world configuration violates a structural limit."""


@dataclass(frozen=True)
class Wall:
    x1: float
    y1: float
    x2: float
    y2: float


@dataclass(frozen=True)
class FloorPlan:
    walls: tuple[Wall, ...]
    bounds: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax


@dataclass(frozen=True)
class AccessPoint:
    ap_id: str  # masked MAC
    x: float
    y: float
    tx_power_at_1m: float


@dataclass(frozen=True)
class PropagationParams:
    path_loss_exponent: float = 3.0
    wall_loss_db: float = 5.0
    noise_sigma_db: float = 2.0
    visibility_floor_dbm: float = -95.0

    def __post_init__(self) -> None:
        if self.path_loss_exponent <= 0 or self.wall_loss_db < 0 or self.noise_sigma_db < 0:
            raise BadWorld("invalid propagation parameters")


@dataclass(frozen=True)
class Corridor:
    x1: float
    y1: float
    x2: float
    y2: float
    template: int

    @property
    def length(self) -> float:
        return math.hypot(self.x2 - self.x1, self.y2 - self.y1)

    @property
    def heading(self) -> float:
        return math.atan2(self.y2 - self.y1, self.x2 - self.x1)

    @property
    def origin_pose(self) -> Pose2:
        return Pose2(self.x1, self.y1, self.heading)

    def point_at(self, arc: float) -> tuple[float, float]:
        f = arc / self.length
        return (self.x1 + f * (self.x2 - self.x1), self.y1 + f * (self.y2 - self.y1))


@dataclass(frozen=True)
class TrajectorySpec:
    shape: str  # {square_loop, figure_eight, nine_loop, long_track}
    scale: float
    speed: float = 1.4
    pause_every: float = 3.5
    pause_duration: float = 10.0
    laps: float = 1.0

    def __post_init__(self) -> None:
        if min(self.scale, self.speed, self.pause_every, self.pause_duration, self.laps) <= 0:
            raise BadWorld("trajectory magnitudes must be positive")


@dataclass(frozen=True)
class AppearanceModel:
    bin_meters: float = 1.0
    window_bins: int = 1
    unique_words_per_bin: int = 38
    alias_words_per_bin: int = 6
    jitter_words: int = 4


@dataclass(frozen=True)
class OdomNoise:
    sigma_xy_per_m: float = 0.01
    sigma_theta_per_m: float = 0.002


@dataclass(frozen=True)
class WorldConfig:
    name: str
    trajectory: TrajectorySpec
    template_of: dict[int, int]  # corridor index -> scene template
    ap_count: int
    tx_power_at_1m: float = -30.0
    propagation: PropagationParams = PropagationParams()
    extra_walls: tuple[Wall, ...] = ()
    margin: float = 4.0
    odom_noise: OdomNoise = OdomNoise()
    appearance: AppearanceModel = AppearanceModel()
    scans_per_dwell: int = 5
    bssids_per_ap: int = 2


@dataclass(frozen=True)
class TrajectorySample:
    t: float
    pose: Pose2
    corridor: int
    corridor_arc: float


@dataclass(frozen=True)
class DwellMark:
    index: int
    arc: float
    t_arrival: float
    x: float
    y: float


@dataclass(frozen=True)
class Trajectory:
    samples: tuple[TrajectorySample, ...]
    dwells: tuple[DwellMark, ...]
    corridors: tuple[Corridor, ...]
    path_length: float


@dataclass(frozen=True)
class Frame:
    id: int
    t: float
    gt_pose: Pose2
    odom_delta: Pose2
    appearance: Appearance


@dataclass(frozen=True)
class World:
    """Everything about the generated world needed to interpret a dataset."""

    config: WorldConfig
    plan: FloorPlan
    aps: tuple[AccessPoint, ...]
    corridors: tuple[Corridor, ...]


@dataclass(frozen=True)
class Dataset:
    name: str
    seed: int
    frames: tuple[Frame, ...]
    dwell_scans: tuple[tuple[ScanReading, ...], ...]  # index = dwell index
    gt_loop_pairs: frozenset[tuple[int, int]]
    world: World


# ---------------------------------------------------------------------------
# geometry


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(v) < 1e-12:
            return 0
        return 1 if v > 0 else -1

    def on_seg(a, b, c):
        return (
            min(a[0], b[0]) - 1e-12 <= c[0] <= max(a[0], b[0]) + 1e-12
            and min(a[1], b[1]) - 1e-12 <= c[1] <= max(a[1], b[1]) + 1e-12
        )

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and on_seg(p1, p2, q1):
        return True
    if o2 == 0 and on_seg(p1, p2, q2):
        return True
    if o3 == 0 and on_seg(q1, q2, p1):
        return True
    if o4 == 0 and on_seg(q1, q2, p2):
        return True
    return False


def count_wall_crossings(plan: FloorPlan, p: tuple[float, float], q: tuple[float, float]) -> int:
    n = 0
    for w in plan.walls:
        if _segments_cross(p, q, (w.x1, w.y1), (w.x2, w.y2)):
            n += 1
    return n


def rssi_at(
    ap: AccessPoint,
    pos: tuple[float, float],
    plan: FloorPlan,
    params: PropagationParams,
    rng: np.random.Generator | None = None,
) -> float | None:
    """Log-distance path loss with per-wall attenuation; None below the floor."""
    d = math.hypot(ap.x - pos[0], ap.y - pos[1])
    crossings = count_wall_crossings(plan, (ap.x, ap.y), pos)
    p = (
        ap.tx_power_at_1m
        - 10.0 * params.path_loss_exponent * math.log10(max(d, 1.0))
        - params.wall_loss_db * crossings
    )
    if rng is not None and params.noise_sigma_db > 0:
        p += params.noise_sigma_db * float(rng.normal())
    if p < params.visibility_floor_dbm:
        return None
    return p


# ---------------------------------------------------------------------------
# trajectory shapes

def _square(scale: float, origin=(0.0, 0.0)) -> list[tuple[tuple[float, float], tuple[float, float]]]:
    x0, y0 = origin
    s = scale
    pts = [(x0, y0), (x0 + s, y0), (x0 + s, y0 + s), (x0, y0 + s), (x0, y0)]
    return list(zip(pts[:-1], pts[1:]))


def _shape_corridors(spec: TrajectorySpec, template_of: dict[int, int]) -> tuple[list[Corridor], list[tuple[int, float, float]]]:
    """Corridor geometry plus a route of (corridor index, arc_from, arc_to) legs."""
    s = spec.scale
    segs: list[tuple[tuple[float, float], tuple[float, float]]]
    if spec.shape == "square_loop":
        segs = _square(s)
        loop = [0, 1, 2, 3]
        tail: list[tuple[int, float, float]] = []
    elif spec.shape == "figure_eight":
        segs = _square(s) + [
            ((0.0, 0.0), (0.0, -s)),
            ((0.0, -s), (-s, -s)),
            ((-s, -s), (-s, 0.0)),
            ((-s, 0.0), (0.0, 0.0)),
        ]
        loop = [0, 1, 2, 3, 4, 5, 6, 7]
        tail = []
    elif spec.shape == "nine_loop":
        junction = 0.3 * s
        segs = _square(s) + [((junction, 0.0), (junction, -0.5 * s))]
        loop = [0, 1, 2, 3]
        # after the final lap, re-enter the first corridor up to the junction,
        # then take the adjoining tail out
        tail = [(0, 0.0, junction), (4, 0.0, 0.5 * s)]
    elif spec.shape == "long_track":
        pts = [(0.0, 0.0), (3 * s, 0.0), (3 * s, s), (0.0, s), (0.0, 0.0)]
        segs = list(zip(pts[:-1], pts[1:]))
        loop = [0, 1, 2, 3]
        tail = []
    else:
        raise BadWorld(f"unknown trajectory shape {spec.shape!r}")

    corridors = [
        Corridor(a[0], a[1], b[0], b[1], template_of.get(i, i)) for i, (a, b) in enumerate(segs)
    ]
    if len(corridors) > 64:
        raise BadWorld("at most 64 corridors supported")

    route: list[tuple[int, float, float]] = []
    lap_len = sum(corridors[i].length for i in loop)
    full, frac = int(spec.laps), spec.laps - int(spec.laps)
    for _ in range(full):
        route.extend((i, 0.0, corridors[i].length) for i in loop)
    remaining = frac * lap_len
    for i in loop:
        if remaining <= 1e-9:
            break
        take = min(remaining, corridors[i].length)
        route.append((i, 0.0, take))
        remaining -= take
    route.extend(tail)
    return corridors, route


def generate_trajectory(spec: TrajectorySpec, template_of: dict[int, int] | None = None) -> Trajectory:
    """Constant-speed traversal with a dwell every pause_every meters of arc.

    Samples are emitted every speed/frame_rate meters of arc plus one at the
    exact path end; no samples are emitted while dwelling (the pose would not
    change), dwells only advance the clock.
    """
    corridors, route = _shape_corridors(spec, template_of or {})
    leg_arc: list[tuple[float, float, int, float]] = []  # start_arc, end_arc, corridor, corridor_arc_offset
    total = 0.0
    for cid, a0, a1 in route:
        length = a1 - a0
        leg_arc.append((total, total + length, cid, a0))
        total += length

    n_dwells = int(math.floor(total / spec.pause_every + 1e-9))
    dwell_arcs = [k * spec.pause_every for k in range(1, n_dwells + 1)]

    def locate(arc: float) -> tuple[int, float]:
        for start, end, cid, off in leg_arc:
            if start - 1e-9 <= arc < end - 1e-9:
                return cid, off + (arc - start)
        start, end, cid, off = leg_arc[-1]
        return cid, off + (arc - start)

    spacing = spec.speed / FRAME_RATE_HZ
    arcs = [k * spacing for k in range(int(total / spacing) + 1) if k * spacing <= total + 1e-9]
    if total - arcs[-1] > 1e-9:
        arcs.append(total)

    samples = []
    for arc in arcs:
        cid, carc = locate(arc)
        x, y = corridors[cid].point_at(carc)
        pauses_before = sum(1 for d in dwell_arcs if d < arc - 1e-9)
        t = arc / spec.speed + pauses_before * spec.pause_duration
        samples.append(
            TrajectorySample(t=t, pose=Pose2(x, y, corridors[cid].heading), corridor=cid, corridor_arc=carc)
        )

    dwells = []
    for k, darc in enumerate(dwell_arcs):
        cid, carc = locate(darc)
        x, y = corridors[cid].point_at(carc)
        pauses_before = sum(1 for d in dwell_arcs if d < darc - 1e-9)
        dwells.append(
            DwellMark(index=k, arc=darc, t_arrival=darc / spec.speed + pauses_before * spec.pause_duration, x=x, y=y)
        )

    return Trajectory(
        samples=tuple(samples), dwells=tuple(dwells), corridors=tuple(corridors), path_length=total
    )


# ---------------------------------------------------------------------------
# appearance model


def _corridor_word(corridor: int, word_bin: int, j: int) -> int:
    return (corridor * 2048 + word_bin) * 256 + j


def _alias_word(template: int, word_bin: int, j: int) -> int:
    return _ALIAS_WORD_BASE + (template * 2048 + word_bin) * 256 + j


def _frame_words(model: AppearanceModel, corridor: Corridor, corridor_idx: int, corridor_arc: float, frame_id: int) -> tuple[int, ...]:
    n_bins = max(1, math.ceil(corridor.length / model.bin_meters))
    center = min(int(corridor_arc / model.bin_meters), n_bins - 1)
    words: list[int] = []
    for b in range(center - model.window_bins, center + model.window_bins + 1):
        if not 0 <= b < n_bins:
            continue
        words.extend(_corridor_word(corridor_idx, b, j) for j in range(model.unique_words_per_bin))
        words.extend(_alias_word(corridor.template, b, j) for j in range(model.alias_words_per_bin))
    words.extend(_JITTER_WORD_BASE + frame_id * 64 + j for j in range(model.jitter_words))
    return tuple(sorted(words))


# ---------------------------------------------------------------------------
# synthesis


def _make_plan(config: WorldConfig, corridors: Sequence[Corridor]) -> FloorPlan:
    xs = [c.x1 for c in corridors] + [c.x2 for c in corridors]
    ys = [c.y1 for c in corridors] + [c.y2 for c in corridors]
    for w in config.extra_walls:
        xs.extend([w.x1, w.x2])
        ys.extend([w.y1, w.y2])
    m = config.margin
    bounds = (min(xs) - m, min(ys) - m, max(xs) + m, max(ys) + m)
    return FloorPlan(walls=tuple(config.extra_walls), bounds=bounds)


def _ap_mac(i: int) -> str:
    return f"0A:00:{(i >> 8) & 0xFF:02X}:00:{i & 0xFF:02X}:00"


def _place_aps(config: WorldConfig, plan: FloorPlan, rng: np.random.Generator) -> tuple[AccessPoint, ...]:
    """Jittered-grid placement: even coverage with per-seed variation."""
    xmin, ymin, xmax, ymax = plan.bounds
    w, h = xmax - xmin, ymax - ymin
    cols = max(1, round(math.sqrt(config.ap_count * w / h)))
    rows = max(1, math.ceil(config.ap_count / cols))
    cells = [(r, c) for r in range(rows) for c in range(cols)]
    order = rng.permutation(len(cells))
    aps = []
    for i in range(config.ap_count):
        r, c = cells[order[i % len(cells)]]
        cw, ch = w / cols, h / rows
        x = xmin + (c + 0.5) * cw + rng.uniform(-0.4, 0.4) * cw
        y = ymin + (r + 0.5) * ch + rng.uniform(-0.4, 0.4) * ch
        aps.append(AccessPoint(ap_id=_ap_mac(i), x=float(x), y=float(y), tx_power_at_1m=config.tx_power_at_1m))
    return tuple(aps)


def synthesize(config: WorldConfig, seed: int) -> Dataset:
    """Generate a full dataset: frames, dwell scans, gt loop pairs, world snapshot.

    Pure function of (config, seed): one rng stream drives AP placement,
    RSSI noise, and odometry drift in a fixed order.
    """
    traj = generate_trajectory(config.trajectory, config.template_of)
    plan = _make_plan(config, traj.corridors)
    rng_aps = np.random.default_rng((seed, 1))
    rng_scan = np.random.default_rng((seed, 2))
    rng_odom = np.random.default_rng((seed, 3))
    aps = _place_aps(config, plan, rng_aps)

    frames: list[Frame] = []
    prev_pose: Pose2 | None = None
    for i, s in enumerate(traj.samples):
        corridor = traj.corridors[s.corridor]
        words = _frame_words(config.appearance, corridor, s.corridor, s.corridor_arc, i)
        appearance = Appearance(words=words, place_template=corridor.template)
        if prev_pose is None:
            delta = Pose2()
        else:
            true_delta = between(prev_pose, s.pose)
            step = math.hypot(true_delta.x, true_delta.y)
            sxy = config.odom_noise.sigma_xy_per_m * math.sqrt(max(step, 1e-6))
            sth = config.odom_noise.sigma_theta_per_m * math.sqrt(max(step, 1e-6))
            ex, ey, eth = rng_odom.normal(0.0, 1.0, size=3)
            delta = Pose2(true_delta.x + sxy * ex, true_delta.y + sxy * ey, true_delta.theta + sth * eth)
        frames.append(Frame(id=i, t=s.t, gt_pose=s.pose, odom_delta=delta, appearance=appearance))
        prev_pose = s.pose

    dwell_scans: list[tuple[ScanReading, ...]] = []
    for d in traj.dwells:
        crossings = [count_wall_crossings(plan, (ap.x, ap.y), (d.x, d.y)) for ap in aps]
        base = [
            ap.tx_power_at_1m
            - 10.0 * config.propagation.path_loss_exponent
            * math.log10(max(math.hypot(ap.x - d.x, ap.y - d.y), 1.0))
            - config.propagation.wall_loss_db * crossings[k]
            for k, ap in enumerate(aps)
        ]
        readings: list[ScanReading] = []
        for sidx in range(config.scans_per_dwell):
            t = d.t_arrival + (sidx + 0.5) * config.trajectory.pause_duration / config.scans_per_dwell
            for k, ap in enumerate(aps):
                for radio in range(1, config.bssids_per_ap + 1):
                    rssi = base[k] + config.propagation.noise_sigma_db * float(rng_scan.normal())
                    if rssi < config.propagation.visibility_floor_dbm:
                        continue
                    bssid = ap.ap_id[:-1] + f"{radio:X}"
                    readings.append(ScanReading(timestamp=t, bssid=bssid, rssi=min(rssi, 0.0)))
        dwell_scans.append(tuple(readings))

    gt_loop_pairs = _loop_pairs(frames)
    world = World(config=config, plan=plan, aps=aps, corridors=traj.corridors)
    return Dataset(
        name=config.name,
        seed=seed,
        frames=tuple(frames),
        dwell_scans=tuple(dwell_scans),
        gt_loop_pairs=frozenset(gt_loop_pairs),
        world=world,
    )


def _loop_pairs(frames: Sequence[Frame]) -> set[tuple[int, int]]:
    """All frame pairs closer than LOOP_PAIR_RADIUS_M with a time gap above LOOP_PAIR_GAP_S."""
    pos = np.array([[f.gt_pose.x, f.gt_pose.y] for f in frames])
    ts = np.array([f.t for f in frames])
    d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=2)
    dt = np.abs(ts[:, None] - ts[None, :])
    ii, jj = np.nonzero((d2 < LOOP_PAIR_RADIUS_M**2) & (dt > LOOP_PAIR_GAP_S))
    return {(int(a), int(b)) for a, b in zip(ii, jj) if a < b}


def dwell_positions(dataset: Dataset) -> list[tuple[float, float, float]]:
    """(t_mean, x, y) per dwell, recovered from the stationary frame preceding the scans.

    Exact when pause_every is a multiple of the frame spacing (true for all
    presets); otherwise off by at most one frame spacing.
    """
    frames = dataset.frames
    times = [f.t for f in frames]
    out = []
    for scans in dataset.dwell_scans:
        if not scans:
            out.append((math.nan, math.nan, math.nan))
            continue
        tm = sum(r.timestamp for r in scans) / len(scans)
        k = 0
        for idx, t in enumerate(times):
            if t <= tm:
                k = idx
            else:
                break
        out.append((tm, frames[k].gt_pose.x, frames[k].gt_pose.y))
    return out


def corridor_of_frame(world: World, gt_pose: Pose2, template: int) -> int:
    """Recover which corridor a frame was taken in from its pose and template.

    Frames lie exactly on their corridor in ground truth, so the nearest
    corridor among those carrying the frame's template is the original one.
    """
    best = None
    for idx, c in enumerate(world.corridors):
        if c.template != template:
            continue
        d = _point_segment_distance((gt_pose.x, gt_pose.y), c)
        if best is None or d < best[0] - 1e-12:
            best = (d, idx)
    if best is None:
        raise BadWorld(f"no corridor carries template {template}")
    return best[1]


def _point_segment_distance(p: tuple[float, float], c: Corridor) -> float:
    vx, vy = c.x2 - c.x1, c.y2 - c.y1
    wx, wy = p[0] - c.x1, p[1] - c.y1
    L2 = vx * vx + vy * vy
    f = 0.0 if L2 == 0 else max(0.0, min(1.0, (wx * vx + wy * vy) / L2))
    return math.hypot(p[0] - (c.x1 + f * vx), p[1] - (c.y1 + f * vy))


def template_pose_of(world: World, gt_pose: Pose2, template: int) -> Pose2:
    """The frame's pose expressed in its scene template's local frame."""
    corridor = world.corridors[corridor_of_frame(world, gt_pose, template)]
    return between(corridor.origin_pose, gt_pose)


# ---------------------------------------------------------------------------
# presets


def _box_walls(x0: float, y0: float, x1: float, y1: float) -> list[Wall]:
    return [
        Wall(x0, y0, x1, y0),
        Wall(x1, y0, x1, y1),
        Wall(x1, y1, x0, y1),
        Wall(x0, y1, x0, y0),
    ]


def preset_worlds() -> dict[str, WorldConfig]:
    """The four named worlds mirroring the measurement campaigns' shape, AP
    density, and openness (square loop / figure eight / nine / open track)."""
    indoor = PropagationParams(
        path_loss_exponent=3.4, wall_loss_db=7.0, noise_sigma_db=2.0, visibility_floor_dbm=-82.0
    )
    square_hall = PropagationParams(
        path_loss_exponent=3.4, wall_loss_db=7.0, noise_sigma_db=2.0, visibility_floor_dbm=-85.0
    )
    open_hall = PropagationParams(
        path_loss_exponent=2.9, wall_loss_db=5.0, noise_sigma_db=2.0, visibility_floor_dbm=-84.0
    )
    c_hall = WorldConfig(
        name="c_hall",
        trajectory=TrajectorySpec(shape="square_loop", scale=20.0, laps=2.5),
        template_of={0: 0, 1: 1, 2: 0, 3: 2},  # opposite corridors alias
        ap_count=35,
        tx_power_at_1m=-35.0,
        propagation=square_hall,
        extra_walls=tuple(_box_walls(3, 3, 17, 17) + _box_walls(-2, -2, 22, 22)),
    )
    b_hall = WorldConfig(
        name="b_hall",
        trajectory=TrajectorySpec(shape="figure_eight", scale=12.0, laps=1.0),
        template_of={0: 0, 1: 1, 2: 2, 3: 3, 4: 4, 5: 0, 6: 5, 7: 6},  # 0 and 5 alias
        ap_count=40,
        tx_power_at_1m=-35.0,
        propagation=indoor,
        extra_walls=tuple(
            _box_walls(2.5, 2.5, 9.5, 9.5) + _box_walls(-9.5, -9.5, -2.5, -2.5) + _box_walls(-14, -14, 14, 14)
        ),
    )
    j_hall = WorldConfig(
        name="j_hall",
        trajectory=TrajectorySpec(shape="nine_loop", scale=35.0, laps=2.0),
        template_of={0: 0, 1: 1, 2: 0, 3: 2, 4: 3},  # loop corridors 0 and 2 alias
        ap_count=70,
        tx_power_at_1m=-35.0,
        propagation=indoor,
        extra_walls=tuple(
            _box_walls(5, 5, 30, 30)
            + [Wall(8.5, -2.0, 8.5, -28.0), Wall(12.5, -2.0, 12.5, -28.0)]
            + _box_walls(-4, -32, 39, 39)
        ),
        # the long loop accumulates odometry error, so a missed closure hurts
        odom_noise=OdomNoise(sigma_xy_per_m=0.025, sigma_theta_per_m=0.006),
    )
    a_hall = WorldConfig(
        name="a_hall",
        trajectory=TrajectorySpec(shape="long_track", scale=25.0, laps=1.1),
        template_of={0: 0, 1: 1, 2: 2, 3: 3},  # no aliasing on the open track
        ap_count=45,
        tx_power_at_1m=-35.0,
        propagation=open_hall,
        extra_walls=(Wall(25.0, 8.0, 25.0, 17.0), Wall(50.0, 8.0, 50.0, 17.0)),
    )
    return {w.name: w for w in (c_hall, b_hall, j_hall, a_hall)}


# ---------------------------------------------------------------------------
# serialization


def save_dataset(dataset: Dataset, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "frames.csv", "w", newline="") as fh:
        fh.write("id,t_s,gt_x,gt_y,gt_theta,odo_dx,odo_dy,odo_dtheta,template_id,words\n")
        for f in dataset.frames:
            words = "|".join(str(w) for w in f.appearance.words)
            fh.write(
                f"{f.id},{f.t!r},{f.gt_pose.x!r},{f.gt_pose.y!r},{f.gt_pose.theta!r},"
                f"{f.odom_delta.x!r},{f.odom_delta.y!r},{f.odom_delta.theta!r},"
                f"{f.appearance.place_template},{words}\n"
            )
    with open(out / "scans.csv", "w", newline="") as fh:
        fh.write("timestamp_s,bssid,rssi_dbm,dwell_index\n")
        for di, scans in enumerate(dataset.dwell_scans):
            for r in scans:
                fh.write(f"{r.timestamp!r},{r.bssid},{r.rssi!r},{di}\n")
    with open(out / "loops_gt.csv", "w", newline="") as fh:
        fh.write("id_a,id_b\n")
        for a, b in sorted(dataset.gt_loop_pairs):
            fh.write(f"{a},{b}\n")
    with open(out / "world.json", "w") as fh:
        json.dump(_world_to_json(dataset), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return out


def _world_to_json(dataset: Dataset) -> dict:
    w = dataset.world
    cfg = w.config
    return {
        "name": dataset.name,
        "seed": dataset.seed,
        "bounds": list(w.plan.bounds),
        "walls": [[wl.x1, wl.y1, wl.x2, wl.y2] for wl in w.plan.walls],
        "aps": [{"mac": a.ap_id, "x": a.x, "y": a.y, "tx_power_at_1m": a.tx_power_at_1m} for a in w.aps],
        "propagation": asdict(cfg.propagation),
        "corridors": [
            {"x1": c.x1, "y1": c.y1, "x2": c.x2, "y2": c.y2, "template": c.template} for c in w.corridors
        ],
        "trajectory": asdict(cfg.trajectory),
        "odom_noise": asdict(cfg.odom_noise),
        "appearance": asdict(cfg.appearance),
        "template_of": {str(k): v for k, v in cfg.template_of.items()},
        "ap_count": cfg.ap_count,
        "tx_power_at_1m": cfg.tx_power_at_1m,
        "scans_per_dwell": cfg.scans_per_dwell,
        "bssids_per_ap": cfg.bssids_per_ap,
        "margin": cfg.margin,
    }


def load_dataset(path: str | Path) -> Dataset:
    """Load a dataset directory written by save_dataset."""
    root = Path(path)
    with open(root / "world.json") as fh:
        wj = json.load(fh)
    config = WorldConfig(
        name=wj["name"],
        trajectory=TrajectorySpec(**wj["trajectory"]),
        template_of={int(k): v for k, v in wj["template_of"].items()},
        ap_count=wj["ap_count"],
        tx_power_at_1m=wj["tx_power_at_1m"],
        propagation=PropagationParams(**wj["propagation"]),
        extra_walls=tuple(Wall(*w) for w in wj["walls"]),
        margin=wj["margin"],
        odom_noise=OdomNoise(**wj["odom_noise"]),
        appearance=AppearanceModel(**wj["appearance"]),
        scans_per_dwell=wj["scans_per_dwell"],
        bssids_per_ap=wj["bssids_per_ap"],
    )
    plan = FloorPlan(walls=tuple(Wall(*w) for w in wj["walls"]), bounds=tuple(wj["bounds"]))
    aps = tuple(
        AccessPoint(ap_id=a["mac"], x=a["x"], y=a["y"], tx_power_at_1m=a["tx_power_at_1m"])
        for a in wj["aps"]
    )
    corridors = tuple(Corridor(c["x1"], c["y1"], c["x2"], c["y2"], c["template"]) for c in wj["corridors"])

    frames: list[Frame] = []
    with open(root / "frames.csv", newline="") as fh:
        header = fh.readline()
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 10:
                raise BadWorld(f"frames.csv line {lineno}: expected 10 fields")
            words = tuple(int(x) for x in parts[9].split("|")) if parts[9] else ()
            frames.append(
                Frame(
                    id=int(parts[0]),
                    t=float(parts[1]),
                    gt_pose=Pose2(float(parts[2]), float(parts[3]), float(parts[4])),
                    odom_delta=Pose2(float(parts[5]), float(parts[6]), float(parts[7])),
                    appearance=Appearance(words=words, place_template=int(parts[8])),
                )
            )

    groups: dict[int, list[ScanReading]] = {}
    with open(root / "scans.csv", newline="") as fh:
        fh.readline()
        for line in fh:
            line = line.strip()
            if not line:
                continue
            t_s, bssid, rssi, dwell = line.split(",")
            groups.setdefault(int(dwell), []).append(
                ScanReading(timestamp=float(t_s), bssid=bssid, rssi=float(rssi))
            )
    n_dwells = max(groups) + 1 if groups else 0
    dwell_scans = tuple(tuple(groups.get(i, ())) for i in range(n_dwells))

    pairs: set[tuple[int, int]] = set()
    with open(root / "loops_gt.csv", newline="") as fh:
        fh.readline()
        for line in fh:
            line = line.strip()
            if not line:
                continue
            a, b = line.split(",")
            pairs.add((int(a), int(b)))

    world = World(config=config, plan=plan, aps=aps, corridors=corridors)
    return Dataset(
        name=wj["name"],
        seed=wj["seed"],
        frames=tuple(frames),
        dwell_scans=dwell_scans,
        gt_loop_pairs=frozenset(pairs),
        world=world,
    )
