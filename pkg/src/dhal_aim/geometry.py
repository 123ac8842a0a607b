"""Intersection layout: predefined trajectories and their conflict points.

Coordinates are meters with the intersection center at the origin, x east,
y north. Traffic drives on the right. Every approach carries three inbound
lanes (left-turn innermost, straight, right-turn outermost) that feed the
matching outbound lane of the receiving road, so the standard layout has
4 x 3 = 12 trajectories.

Arc length along a trajectory is measured from the preparation-zone entry,
100 m upstream of the stop line. Negative arc lengths (the spawn road) and
arc lengths past the crossing-zone exit extrapolate the end tangents.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

APPROACHES = ("N", "E", "S", "W")
MOVEMENTS = ("left", "straight", "right")

# unit heading of a vehicle entering from each side
_HEADING = {"N": (0.0, -1.0), "E": (-1.0, 0.0), "S": (0.0, 1.0), "W": (1.0, 0.0)}
# approach lying on the right-hand side of a vehicle entering from the key
RIGHT_OF = {"S": "E", "E": "N", "N": "W", "W": "S"}
OPPOSITE = {"N": "S", "S": "N", "E": "W", "W": "E"}

_LANE_INDEX = {"left": 0, "straight": 1, "right": 2}
_EPS = 1e-9


class LayoutError(ValueError):
    """Raised for geometrically invalid layout configurations."""


@dataclass(frozen=True)
class LayoutConfig:
    lane_width: float = 3.5
    # distance from the intersection center to every stop line
    stop_line_offset: float = 14.0
    prep_depth: float = 100.0
    crossing_margin: float = 5.0
    # None means the largest radius tangent to both lane centerlines
    left_radius: float | None = None
    right_radius: float | None = None
    vehicle_width: float = 1.8

    @classmethod
    def from_dict(cls, d: dict | None) -> "LayoutConfig":
        d = dict(d or {})
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def _rot90(v, sign=1.0):
    """Rotate a 2-vector by +90 degrees (sign=1) or -90 degrees (sign=-1)."""
    return np.array([-sign * v[1], sign * v[0]])


@dataclass(frozen=True)
class Line:
    p0: np.ndarray
    p1: np.ndarray

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.p1 - self.p0))

    @property
    def direction(self) -> np.ndarray:
        return (self.p1 - self.p0) / self.length

    def point(self, u):
        u = np.asarray(u, dtype=float)
        return self.p0 + np.multiply.outer(u, self.direction)

    def tangent(self, u):
        u = np.asarray(u, dtype=float)
        return np.broadcast_to(self.direction, u.shape + (2,)).copy()


@dataclass(frozen=True)
class Arc:
    center: np.ndarray
    radius: float
    start_angle: float
    # signed sweep in radians, positive = counter-clockwise
    sweep: float

    @property
    def length(self) -> float:
        return abs(self.sweep) * self.radius

    def angle_at(self, u):
        return self.start_angle + np.sign(self.sweep) * np.asarray(u, dtype=float) / self.radius

    def point(self, u):
        ang = self.angle_at(u)
        return self.center + self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=-1)

    def tangent(self, u):
        ang = self.angle_at(u)
        sgn = np.sign(self.sweep)
        return sgn * np.stack([-np.sin(ang), np.cos(ang)], axis=-1)


@dataclass(frozen=True)
class TrajectoryPath:
    id: int
    approach: str
    movement: str
    pieces: tuple
    stop_line_s: float
    crossing_entry_s: float
    exit_s: float
    _cum: tuple = field(repr=False, default=())

    def __post_init__(self):
        cum = np.concatenate([[0.0], np.cumsum([p.length for p in self.pieces])])
        object.__setattr__(self, "_cum", tuple(cum))

    @property
    def length(self) -> float:
        return self._cum[-1]

    def _locate(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        cum = np.asarray(self._cum)
        idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(self.pieces) - 1)
        return s, idx, s - cum[idx]

    def point_at(self, s):
        """Exact position of arc length ``s``; extrapolates linearly beyond the ends."""
        scalar = np.ndim(s) == 0
        s, idx, u = self._locate(s)
        out = np.empty(s.shape + (2,))
        for k, piece in enumerate(self.pieces):
            m = idx == k
            if not m.any():
                continue
            uk = u[m]
            inside = np.clip(uk, 0.0, piece.length)
            out[m] = piece.point(inside)
            over = uk - inside
            if np.any(over != 0):
                out[m] += over[:, None] * piece.tangent(inside)
        return out[0] if scalar else out

    def tangent_at(self, s):
        scalar = np.ndim(s) == 0
        s, idx, u = self._locate(s)
        out = np.empty(s.shape + (2,))
        for k, piece in enumerate(self.pieces):
            m = idx == k
            if m.any():
                out[m] = piece.tangent(np.clip(u[m], 0.0, piece.length))
        return out[0] if scalar else out

    def polyline(self, step: float = 0.1, s0: float = 0.0, s1: float | None = None) -> np.ndarray:
        """Sample the path every ``step`` meters, always including both ends."""
        s1 = self.exit_s if s1 is None else s1
        n = max(int(math.ceil((s1 - s0) / step)), 1)
        return self.point_at(np.linspace(s0, s1, n + 1))

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "approach": self.approach,
            "movement": self.movement,
            "stop_line_s": self.stop_line_s,
            "crossing_entry_s": self.crossing_entry_s,
            "exit_s": self.exit_s,
            "polyline": self.polyline(1.0).round(4).tolist(),
        }


@dataclass(frozen=True)
class ConflictPoint:
    id: int
    position: tuple
    # {trajectory id: arc length of the point on that trajectory}
    members: dict
    theta: float

    @property
    def trajectories(self) -> tuple:
        return tuple(sorted(self.members))

    def other(self, traj_id: int) -> int:
        a, b = self.trajectories
        return b if traj_id == a else a

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "position": list(self.position),
            "members": {str(k): v for k, v in self.members.items()},
            "theta": self.theta,
        }


@dataclass
class ConflictMap:
    points: list
    # C_rj: conflict ids on each trajectory, ordered by arc length
    by_trajectory: dict
    # R_cj: trajectories crossing each trajectory
    conflicting: dict

    def __len__(self):
        return len(self.points)


@dataclass
class Layout:
    config: LayoutConfig
    trajectories: list
    conflicts: ConflictMap

    @property
    def n_r(self) -> int:
        return len(self.trajectories)

    @property
    def n_c(self) -> int:
        return len(self.conflicts)

    def trajectory(self, approach: str, movement: str) -> TrajectoryPath:
        for t in self.trajectories:
            if t.approach == approach and t.movement == movement:
                return t
        raise KeyError((approach, movement))

    def to_json(self) -> str:
        return json.dumps(
            {
                "config": self.config.__dict__,
                "trajectories": [t.to_dict() for t in self.trajectories],
                "conflict_points": [c.to_dict() for c in self.conflicts.points],
            },
            indent=1,
        )


def _make_trajectory(tid, approach, movement, cfg: LayoutConfig) -> TrajectoryPath:
    w, B = cfg.lane_width, cfg.stop_line_offset
    h = np.array(_HEADING[approach])
    right = _rot90(h, -1.0)
    lane = _LANE_INDEX[movement]
    offset = (lane + 0.5) * w
    stop_pt = -B * h + offset * right
    start = stop_pt - cfg.prep_depth * h
    out_dist = B + cfg.crossing_margin

    if movement == "straight":
        end = out_dist * h + offset * right
        pieces = (Line(start, end),)
    else:
        turn = 1.0 if movement == "left" else -1.0
        h2 = _rot90(h, turn)
        right2 = _rot90(h2, -1.0)
        out_offset = offset
        # corner where the inbound and outbound lane centerlines meet
        # inbound line: offset*right + t*h; outbound line: out_offset*right2 + u*h2
        corner = offset * right + out_offset * right2
        r_max = B + float(np.dot(corner, h))
        default = r_max
        r = {"left": cfg.left_radius, "right": cfg.right_radius}[movement]
        r = default if r is None else float(r)
        if r <= 0 or r > r_max + 1e-9:
            raise LayoutError(
                f"{approach}-{movement}: radius {r:.3f} m outside (0, {r_max:.3f}] keeps arc out of the crossing zone"
            )
        t1 = corner - r * h
        t2 = corner + r * h2
        center = t1 + r * h2
        a0 = math.atan2(*(t1 - center)[::-1])
        end = out_dist * h2 + out_offset * right2
        pieces = [Line(start, t1) if np.linalg.norm(t1 - start) > _EPS else None,
                  Arc(center, r, a0, turn * math.pi / 2)]
        if np.linalg.norm(end - t2) > _EPS:
            pieces.append(Line(t2, end))
        pieces = tuple(p for p in pieces if p is not None)

    total = sum(p.length for p in pieces)
    stop_s = cfg.prep_depth
    return TrajectoryPath(
        id=tid,
        approach=approach,
        movement=movement,
        pieces=pieces,
        stop_line_s=stop_s,
        crossing_entry_s=stop_s - cfg.crossing_margin,
        exit_s=total,
    )


def _line_line(a: Line, b: Line):
    r, q = a.p1 - a.p0, b.p1 - b.p0
    den = r[0] * q[1] - r[1] * q[0]
    qp = b.p0 - a.p0
    if abs(den) < _EPS * a.length * b.length:
        # parallel: reject genuine overlaps
        if abs(qp[0] * r[1] - qp[1] * r[0]) < 1e-6 * a.length:
            ta = np.dot(b.p0 - a.p0, r) / np.dot(r, r)
            tb = np.dot(b.p1 - a.p0, r) / np.dot(r, r)
            lo, hi = min(ta, tb), max(ta, tb)
            if min(hi, 1.0) - max(lo, 0.0) > 1e-9:
                raise LayoutError("collinear overlapping segments between distinct trajectories")
        return []
    t = (qp[0] * q[1] - qp[1] * q[0]) / den
    u = (qp[0] * r[1] - qp[1] * r[0]) / den
    if -_EPS <= t <= 1 + _EPS and -_EPS <= u <= 1 + _EPS:
        return [(t * a.length, u * b.length)]
    return []


def _arc_param(arc: Arc, p):
    """Arc-length parameter of point ``p`` on the arc's circle, or None when off the arc."""
    ang = math.atan2(p[1] - arc.center[1], p[0] - arc.center[0])
    delta = (ang - arc.start_angle) * np.sign(arc.sweep)
    delta = delta % (2 * math.pi)
    if delta > abs(arc.sweep) + 1e-9:
        if 2 * math.pi - delta < 1e-9:
            delta = 0.0
        else:
            return None
    return min(delta, abs(arc.sweep)) * arc.radius


def _line_arc(a: Line, b: Arc):
    d = a.direction
    f = a.p0 - b.center
    bq = 2 * np.dot(f, d)
    c = np.dot(f, f) - b.radius**2
    disc = bq * bq - 4 * c
    if disc < 0:
        return []
    out = []
    for sgn in ((-1.0, 1.0) if disc > 0 else (1.0,)):
        t = (-bq + sgn * math.sqrt(disc)) / 2
        if -1e-9 <= t <= a.length + 1e-9:
            u = _arc_param(b, a.p0 + t * d)
            if u is not None:
                out.append((t, u))
    return out


def _arc_arc(a: Arc, b: Arc):
    dv = b.center - a.center
    dist = float(np.linalg.norm(dv))
    if dist < _EPS:
        if abs(a.radius - b.radius) < 1e-9:
            raise LayoutError("concentric coincident arcs between distinct trajectories")
        return []
    if dist > a.radius + b.radius or dist < abs(a.radius - b.radius):
        return []
    x = (dist**2 + a.radius**2 - b.radius**2) / (2 * dist)
    hh = math.sqrt(max(a.radius**2 - x**2, 0.0))
    base = a.center + x * dv / dist
    perp = np.array([-dv[1], dv[0]]) / dist
    out = []
    for p in ((base + hh * perp, base - hh * perp) if hh > 0 else (base,)):
        ua, ub = _arc_param(a, p), _arc_param(b, p)
        if ua is not None and ub is not None:
            out.append((ua, ub))
    return out


def _piece_intersections(a, b):
    if isinstance(a, Line) and isinstance(b, Line):
        return _line_line(a, b)
    if isinstance(a, Line) and isinstance(b, Arc):
        return _line_arc(a, b)
    if isinstance(a, Arc) and isinstance(b, Line):
        return [(u, t) for t, u in _line_arc(b, a)]
    return _arc_arc(a, b)


def crossing_angle(a: TrajectoryPath, b: TrajectoryPath, sa: float, sb: float) -> float:
    ta, tb = a.tangent_at(sa), b.tangent_at(sb)
    return float(math.acos(float(np.clip(np.dot(ta, tb), -1.0, 1.0))))


def conflict_points(a: TrajectoryPath, b: TrajectoryPath, min_theta: float = 0.1) -> list:
    """All crossings of ``a`` and ``b`` inside the crossing zone, ordered along ``a``.

    Returned points carry ``id = -1``; ids are assigned by :func:`build_layout`.
    """
    if a.id == b.id:
        raise ValueError("conflict_points needs two distinct trajectories")
    found = []
    ca, cb = a._cum, b._cum
    for i, pa in enumerate(a.pieces):
        for j, pb in enumerate(b.pieces):
            for ua, ub in _piece_intersections(pa, pb):
                sa, sb = ca[i] + ua, cb[j] + ub
                if any(abs(sa - fa) < 1e-6 and abs(sb - fb) < 1e-6 for fa, fb in found):
                    continue
                found.append((sa, sb))
    out = []
    for sa, sb in sorted(found):
        if not (a.stop_line_s < sa < a.exit_s and b.stop_line_s < sb < b.exit_s):
            continue
        theta = crossing_angle(a, b, sa, sb)
        theta = min(max(theta, min_theta), math.pi - min_theta)
        pos = a.point_at(sa)
        out.append(
            ConflictPoint(
                id=-1,
                position=(float(pos[0]), float(pos[1])),
                members={a.id: float(sa), b.id: float(sb)},
                theta=theta,
            )
        )
    return out


def distance_to_conflict(v_pos: float, cp: ConflictPoint, traj_id: int) -> float:
    """Arc distance from a front bumper at ``v_pos`` to ``cp``; negative once passed."""
    return cp.members[traj_id] - v_pos


def _validate(cfg: LayoutConfig):
    if cfg.lane_width <= cfg.vehicle_width:
        raise LayoutError("lane width must exceed vehicle width")
    if cfg.stop_line_offset < 3 * cfg.lane_width:
        raise LayoutError("stop lines must clear the three inbound lanes of the crossing road")
    if cfg.prep_depth <= cfg.crossing_margin:
        raise LayoutError("preparation zone must extend beyond the crossing-zone margin")


def build_layout(config: LayoutConfig | None = None) -> Layout:
    """Build the 12 trajectories and the complete conflict map (deterministic)."""
    cfg = config or LayoutConfig()
    _validate(cfg)
    trajs = []
    for ap in APPROACHES:
        for mv in MOVEMENTS:
            trajs.append(_make_trajectory(len(trajs), ap, mv, cfg))

    points = []
    by_traj = {t.id: [] for t in trajs}
    conflicting = {t.id: [] for t in trajs}
    for i, a in enumerate(trajs):
        for b in trajs[i + 1:]:
            cps = conflict_points(a, b)
            for cp in cps:
                cp = ConflictPoint(len(points), cp.position, cp.members, cp.theta)
                points.append(cp)
                by_traj[a.id].append(cp.id)
                by_traj[b.id].append(cp.id)
            if cps:
                conflicting[a.id].append(b.id)
                conflicting[b.id].append(a.id)
    for tid, ids in by_traj.items():
        ids.sort(key=lambda c: points[c].members[tid])
    return Layout(cfg, trajs, ConflictMap(points, by_traj, conflicting))


@lru_cache(maxsize=8)
def standard_layout(config: LayoutConfig | None = None) -> Layout:
    return build_layout(config)


def footprint(path: TrajectoryPath, s, length: float):
    """Center and unit heading of vehicle rectangles with front bumpers at ``s``.

    The body is the chord from the rear point ``s - length`` to the front
    point, so on tight arcs it stays on the roadway instead of pivoting about
    the bumper.
    """
    front = path.point_at(s)
    rear = path.point_at(np.asarray(s, dtype=float) - length)
    chord = front - rear
    norm = np.linalg.norm(chord, axis=-1, keepdims=True)
    heading = chord / np.maximum(norm, _EPS)
    center = front - 0.5 * length * heading
    return center, heading


def rects_overlap(c1, u1, c2, u2, half_l, half_w, half_l2=None, half_w2=None):
    """Separating-axis test for oriented rectangles, broadcast over leading axes.

    Rectangles that only touch are not overlapping.
    """
    half_l2 = half_l if half_l2 is None else half_l2
    half_w2 = half_w if half_w2 is None else half_w2
    c1, u1, c2, u2 = (np.asarray(x, dtype=float) for x in (c1, u1, c2, u2))
    n1 = np.stack([-u1[..., 1], u1[..., 0]], axis=-1)
    n2 = np.stack([-u2[..., 1], u2[..., 0]], axis=-1)
    d = c2 - c1
    sep = np.zeros(np.broadcast(c1[..., 0], c2[..., 0]).shape, dtype=bool)
    for axis in (u1, n1, u2, n2):
        r1 = half_l * np.abs(np.sum(u1 * axis, -1)) + half_w * np.abs(np.sum(n1 * axis, -1))
        r2 = half_l2 * np.abs(np.sum(u2 * axis, -1)) + half_w2 * np.abs(np.sum(n2 * axis, -1))
        sep |= np.abs(np.sum(d * axis, -1)) >= r1 + r2
    return ~sep


@dataclass(frozen=True)
class ClearanceZone:
    """Front-bumper arc intervals inside which two trajectories' vehicles can touch.

    Two vehicles can only overlap while both front bumpers lie inside their
    respective intervals, so disjoint time windows over the zone are a
    sufficient separation condition.
    """

    trajectories: tuple
    # {trajectory id: (s_in, s_out)}
    intervals: dict
    conflict_ids: tuple


def clearance_zones(layout: Layout, length: float, width: float, step: float = 0.2) -> list:
    """Footprint-overlap zones for every trajectory pair.

    Each pair is rasterized over front-bumper positions from 10 m before the
    crossing-zone entry to the exit, with rectangles inflated by one grid step
    so the padded intervals cover the continuous overlap set.
    """
    from scipy import ndimage

    pad = step
    hl, hw = 0.5 * length + pad, 0.5 * width + pad
    reach = 2 * math.hypot(hl, hw)
    grids = {}
    for t in layout.trajectories:
        s = np.arange(t.crossing_entry_s - 10.0, t.exit_s + step / 2, step)
        c, u = footprint(t, s, length)
        grids[t.id] = (s, c, u)

    zones = []
    for i, a in enumerate(layout.trajectories):
        for b in layout.trajectories[i + 1:]:
            sa, ca, ua = grids[a.id]
            sb, cb, ub = grids[b.id]
            dist = np.linalg.norm(ca[:, None, :] - cb[None, :, :], axis=-1)
            near = dist < reach
            if not near.any():
                continue
            hit = np.zeros_like(near)
            ii, jj = np.nonzero(near)
            hit[ii, jj] = rects_overlap(ca[ii], ua[ii], cb[jj], ub[jj], hl, hw)
            if not hit.any():
                continue
            labels, n = ndimage.label(hit, structure=np.ones((3, 3)))
            for k in range(1, n + 1):
                ia, ib = np.nonzero(labels == k)
                ia_lo, ia_hi = sa[ia.min()] - step, sa[ia.max()] + step
                ib_lo, ib_hi = sb[ib.min()] - step, sb[ib.max()] + step
                cps = tuple(
                    c for c in layout.conflicts.by_trajectory[a.id]
                    if b.id in layout.conflicts.points[c].members
                    and ia_lo <= layout.conflicts.points[c].members[a.id] <= ia_hi
                )
                zones.append(
                    ClearanceZone(
                        trajectories=(a.id, b.id),
                        intervals={a.id: (float(ia_lo), float(ia_hi)), b.id: (float(ib_lo), float(ib_hi))},
                        conflict_ids=cps,
                    )
                )
    return zones
