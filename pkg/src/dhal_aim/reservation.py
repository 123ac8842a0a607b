"""Reservation table, occupancy windows, priority rules and conflict labels.

The table is an ``N_c x N_t`` grid of vehicle-id sets. It is stored sparsely:
every (vehicle, conflict point) pair contributes one contiguous run of cells
``[k1, k2)``, which is all Alg. 1 ever writes. Dense cell views are built on
demand for debugging and tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import OPPOSITE, RIGHT_OF, Layout

V_FLOOR = 0.1
_TIE = 1e-9


@dataclass(frozen=True)
class OccupancyWindow:
    t1: float
    t2: float
    eps: float
    flagged: bool = False


def occupancy_window(d, l, v, eps=1.0, T_r=100.0, v_floor=V_FLOOR) -> OccupancyWindow:
    """Time interval during which a vehicle holds a conflict point at constant speed."""
    if l <= 0:
        raise ValueError("vehicle length must be positive")
    if v < v_floor:
        return OccupancyWindow(0.0, T_r, eps, True)
    t1 = min(max((d - eps) / v, 0.0), T_r)
    t2 = min(max((d + l + eps) / v, 0.0), T_r)
    return OccupancyWindow(t1, t2, eps)


def window_arrays(d, l, v, eps=1.0, T_r=100.0, v_floor=V_FLOOR):
    """Vectorized :func:`occupancy_window`; returns ``(t1, t2, flagged)``."""
    d, v = np.asarray(d, dtype=float), np.asarray(v, dtype=float)
    slow = v < v_floor
    vs = np.where(slow, 1.0, v)
    t1 = np.clip((d - eps) / vs, 0.0, T_r)
    t2 = np.clip((d + l + eps) / vs, 0.0, T_r)
    t1 = np.where(slow, 0.0, t1)
    t2 = np.where(slow, T_r, t2)
    return t1, t2, slow


def exact_window_arrays(d, l, v, w_self, w_other, theta, T_r=100.0, v_floor=V_FLOOR, min_theta=0.1):
    """Width-and-angle buffer variant of the windows (``w/2 cot(theta)`` terms).

    ``theta`` is folded to the acute crossing angle and clamped away from zero.
    """
    theta = np.asarray(theta, dtype=float)
    acute = np.maximum(np.minimum(theta, np.pi - theta), min_theta)
    buf = 0.5 * np.asarray(w_self) / np.tan(acute) + 0.5 * np.asarray(w_other)
    d, v = np.asarray(d, dtype=float), np.asarray(v, dtype=float)
    slow = v < v_floor
    vs = np.where(slow, 1.0, v)
    t1 = np.where(slow, 0.0, np.clip((d - buf) / vs, 0.0, T_r))
    t2 = np.where(slow, T_r, np.clip((d + l + buf) / vs, 0.0, T_r))
    return t1, t2, slow


def cell_range(t1, t2, dt):
    """Cells ``[k1, k2)`` touched by ``[t1, t2]``; empty when the window is degenerate."""
    t1, t2 = np.asarray(t1, dtype=float), np.asarray(t2, dtype=float)
    k1 = np.floor(t1 / dt + _TIE).astype(np.int64)
    k2 = np.ceil(t2 / dt - _TIE).astype(np.int64)
    k2 = np.where(t2 > t1, np.maximum(k2, k1 + 1), k1)
    return k1, k2


@dataclass
class VehicleView:
    """Minimal vehicle description consumed by the table."""

    id: int
    traj: int
    s: float
    v: float
    length: float = 5.0


@dataclass
class ReservationTable:
    n_c: int
    dt: float = 0.2
    T_r: float = 100.0
    time: float = 0.0
    veh: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    traj: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    cid: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    k1: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    k2: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    # {(id_a, id_b) with id_a < id_b: sorted conflict ids where they share cells}
    pairs: dict = field(default_factory=dict)
    traj_of: dict = field(default_factory=dict)
    _index: dict = field(default_factory=dict, repr=False)

    @property
    def n_t(self) -> int:
        return int(math.ceil(self.T_r / self.dt - _TIE))

    def window(self, vid: int, cid: int):
        """``(k1, k2)`` of a vehicle at a conflict point, or None when absent."""
        if not self._index:
            self._index = {
                (int(a), int(c)): (int(x), int(y))
                for a, c, x, y in zip(self.veh, self.cid, self.k1, self.k2)
            }
        return self._index.get((vid, cid))

    def cell(self, c: int, k: int) -> set:
        m = (self.cid == c) & (self.k1 <= k) & (k < self.k2)
        return set(int(x) for x in self.veh[m])

    def dense(self) -> list:
        grid = [[set() for _ in range(self.n_t)] for _ in range(self.n_c)]
        for v, c, a, b in zip(self.veh, self.cid, self.k1, self.k2):
            for k in range(int(a), int(min(b, self.n_t))):
                grid[int(c)][k].add(int(v))
        return grid

    def dump(self) -> list:
        """Sparse ``(conflict id, step index, vehicle ids)`` triples of occupied cells."""
        out = []
        grid = self.dense()
        for c, row in enumerate(grid):
            for k, ids in enumerate(row):
                if ids:
                    out.append((c, k, sorted(ids)))
        return out

    @property
    def conflicted(self) -> set:
        return {v for p in self.pairs for v in p}


def _arrays(vehicles):
    ids = np.fromiter((v.id for v in vehicles), np.int64, len(vehicles))
    traj = np.fromiter((v.traj for v in vehicles), np.int64, len(vehicles))
    s = np.fromiter((v.s for v in vehicles), float, len(vehicles))
    v = np.fromiter((v.v for v in vehicles), float, len(vehicles))
    ln = np.fromiter((getattr(x, "length", 5.0) for x in vehicles), float, len(vehicles))
    return ids, traj, s, v, ln


class ConflictIndex:
    """Per-trajectory conflict-point arrays, flattened for vectorized lookups."""

    def __init__(self, layout: Layout):
        cm = layout.conflicts
        self.n_c = len(cm)
        self.offsets = np.zeros(layout.n_r + 1, np.int64)
        cids, arcs, thetas = [], [], []
        for t in layout.trajectories:
            ids = cm.by_trajectory[t.id]
            self.offsets[t.id + 1] = self.offsets[t.id] + len(ids)
            cids += ids
            arcs += [cm.points[c].members[t.id] for c in ids]
            thetas += [cm.points[c].theta for c in ids]
        self.cid = np.asarray(cids, np.int64)
        self.arc = np.asarray(arcs, float)
        self.theta = np.asarray(thetas, float)

    def expand(self, traj):
        """Row index into per-vehicle arrays and flat conflict index for every entry."""
        traj = np.asarray(traj, np.int64)
        counts = self.offsets[traj + 1] - self.offsets[traj]
        rows = np.repeat(np.arange(len(traj)), counts)
        starts = np.repeat(self.offsets[traj], counts)
        within = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        return rows, starts + within


_INDEX_CACHE: dict = {}


def conflict_index(layout: Layout) -> ConflictIndex:
    key = id(layout)
    hit = _INDEX_CACHE.get(key)
    if hit is None or hit[0] is not layout:
        hit = (layout, ConflictIndex(layout))
        _INDEX_CACHE[key] = hit
    return hit[1]


def overlapping_pairs(veh, traj, cid, k1, k2):
    """Entry index pairs ``(e, f)``, ``e < f``, sharing at least one cell.

    Entries on the same trajectory never conflict with each other: conflict
    points are defined between two distinct trajectories, and same-lane
    spacing is the car-following layer's job.
    """
    if len(veh) < 2:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    same_c = cid[:, None] == cid[None, :]
    cross = traj[:, None] != traj[None, :]
    ov = (k1[:, None] < k2[None, :]) & (k1[None, :] < k2[:, None])
    m = np.triu(same_c & cross & ov, 1)
    return np.nonzero(m)


def update_table(vehicles, layout: Layout, eps=1.0, dt=0.2, T_r=100.0, time=0.0,
                 exact=False, width=1.8):
    """Rebuild the table from scratch and return ``(table, conflicted ids)``."""
    ids, traj, s, v, ln = _arrays(vehicles)
    idx = conflict_index(layout)
    rows, flat = idx.expand(traj)
    d = idx.arc[flat] - s[rows]
    if exact:
        t1, t2, _ = exact_window_arrays(d, ln[rows], v[rows], width, width, idx.theta[flat], T_r)
    else:
        t1, t2, _ = window_arrays(d, ln[rows], v[rows], eps, T_r)
    k1, k2 = cell_range(t1, t2, dt)
    n_t = int(math.ceil(T_r / dt - _TIE))
    k1, k2 = np.minimum(k1, n_t), np.minimum(k2, n_t)
    table = ReservationTable(
        n_c=idx.n_c, dt=dt, T_r=T_r, time=time,
        veh=ids[rows], traj=traj[rows], cid=idx.cid[flat], k1=k1, k2=k2,
        traj_of={int(a): int(b) for a, b in zip(ids, traj)},
    )
    e, f = overlapping_pairs(table.veh, table.traj, table.cid, k1, k2)
    pairs: dict = {}
    for a, b, c in zip(table.veh[e], table.veh[f], table.cid[e]):
        key = (int(a), int(b)) if a < b else (int(b), int(a))
        pairs.setdefault(key, set()).add(int(c))
    table.pairs = {k: sorted(v) for k, v in sorted(pairs.items())}
    return table, table.conflicted


@dataclass(frozen=True)
class PriorityDecision:
    leader: int
    follower: int
    rule: int
    # Rule 1 could not be evaluated (no usable previous window)
    fresh: bool = False


def _shared_point(table: ReservationTable, hi: int, hj: int) -> int:
    key = (hi, hj) if hi < hj else (hj, hi)
    cids = table.pairs.get(key)
    if not cids:
        raise ValueError(f"vehicles {hi} and {hj} do not conflict in the current table")
    # earliest contested point decides
    return min(cids, key=lambda c: (max(table.window(hi, c)[0], table.window(hj, c)[0]), c))


def assign_priority(hi: int, hj: int, table: ReservationTable, prev: ReservationTable | None,
                    layout: Layout) -> PriorityDecision:
    """Right of way for a conflicting pair (Rules 1-3, deterministic tie-break)."""
    c = _shared_point(table, hi, hj)
    wi = prev.window(hi, c) if prev is not None else None
    wj = prev.window(hj, c) if prev is not None else None
    fresh = wi is None or wj is None or wi[0] == wi[1] or wj[0] == wj[1]
    if not fresh:
        # arrival step of one strictly after the last occupied step of the other
        if wj[0] > wi[1] - 1:
            return PriorityDecision(hi, hj, 1)
        if wi[0] > wj[1] - 1:
            return PriorityDecision(hj, hi, 1)

    ti = layout.trajectories[table.traj_of[hi]]
    tj = layout.trajectories[table.traj_of[hj]]
    if ti.approach != tj.approach and OPPOSITE[ti.approach] != tj.approach:
        if RIGHT_OF[ti.approach] == tj.approach:
            return PriorityDecision(hj, hi, 2, fresh)
        return PriorityDecision(hi, hj, 2, fresh)
    if OPPOSITE[ti.approach] == tj.approach:
        si, sj = ti.movement == "straight", tj.movement == "straight"
        if si != sj:
            return PriorityDecision(hi, hj, 3, fresh) if si else PriorityDecision(hj, hi, 3, fresh)
    if (ti.id, hi) < (tj.id, hj):
        return PriorityDecision(hi, hj, 3, fresh)
    return PriorityDecision(hj, hi, 3, fresh)


@dataclass(frozen=True)
class ConflictLabels:
    L_C: int
    L_AC: int
    L_PC: int


def conflict_labels(vid: int, conflicted, decisions) -> ConflictLabels:
    lead = any(d.leader == vid for d in decisions)
    follow = any(d.follower == vid for d in decisions)
    return ConflictLabels(int(vid in conflicted), int(follow), int(lead))


def label_all(table: ReservationTable, prev: ReservationTable | None, layout: Layout):
    """Priorities for every conflicting pair and labels for every vehicle in the table."""
    decisions = [assign_priority(a, b, table, prev, layout) for a, b in table.pairs]
    lead, follow = set(), set()
    for d in decisions:
        lead.add(d.leader)
        follow.add(d.follower)
    conflicted = table.conflicted
    labels = {
        vid: ConflictLabels(int(vid in conflicted), int(vid in follow), int(vid in lead))
        for vid in table.traj_of
    }
    return labels, decisions
