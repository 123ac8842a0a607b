"""Microscopic world model: spawning, kinematics, crossing gate and collisions.

Vehicles are point masses moving along predefined trajectories with
longitudinal control only. One action step (0.2 s) holds the commanded
acceleration for two 0.1 s substeps of semi-implicit Euler integration.

A vehicle may enter the crossing zone only after the gate has admitted it.
Admission fixes its crossing speed; from then on it ignores commands. Until
admission every vehicle keeps the ability to stop before its hold line just
upstream of the crossing-zone boundary, which is what makes a Hold decision
enforceable.
"""

from __future__ import annotations

import bisect
import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import APPROACHES, Layout, clearance_zones, rects_overlap
from .metrics import C0, C1, IDLE_RATE, MASS, ML_PER_J

log = logging.getLogger(__name__)

UPSTREAM, PREPARATION, CROSSING, DONE = "upstream", "preparation", "crossing", "done"
_ZONE_ORDER = {UPSTREAM: 0, PREPARATION: 1, CROSSING: 2, DONE: 3}


@dataclass(frozen=True)
class SimParams:
    dt: float = 0.1
    action_dt: float = 0.2
    v_max: float = 15.0
    a_max: float = 4.0
    a_min: float = -4.0
    length: float = 5.0
    width: float = 1.8
    spawn_distance: float = 200.0
    v_min_cross: float = 3.0
    # highest crossing speed granted to a vehicle launching from below v_min_cross
    v_launch: float = 10.0
    follow_margin: float = 2.0
    gate_time_margin: float = 0.1
    stop_speed: float = 0.1

    @property
    def substeps(self) -> int:
        return int(round(self.action_dt / self.dt))

    @property
    def brake(self) -> float:
        return -self.a_min

    @property
    def hold_back(self) -> float:
        """Distance of the hold line upstream of the crossing-zone boundary."""
        return self.v_launch**2 / (2 * self.a_max) + 0.25

    def stopping_distance(self, v):
        return np.asarray(v) ** 2 / (2 * self.brake)


@dataclass
class TripRecord:
    vehicle_id: int
    trajectory: int
    spawn_time: float
    t_enter_prep: float | None
    t_exit_cross: float | None
    stopped: bool
    outcome: str
    fuel_ml: float
    refused: int = 0
    speeds: np.ndarray | None = None
    accels: np.ndarray | None = None

    @property
    def travel_time(self) -> float | None:
        if self.t_enter_prep is None or self.t_exit_cross is None:
            return None
        return self.t_exit_cross - self.t_enter_prep

    CSV_FIELDS = (
        "vehicle_id", "trajectory", "spawn_time", "t_enter_prep", "t_exit_cross",
        "travel_time", "stopped", "outcome", "fuel_ml", "refused",
    )

    def csv_row(self) -> list:
        def f(x):
            return "" if x is None else repr(float(x))

        return [
            self.vehicle_id, self.trajectory, f(self.spawn_time), f(self.t_enter_prep),
            f(self.t_exit_cross), f(self.travel_time), int(self.stopped), self.outcome,
            f(self.fuel_ml), self.refused,
        ]


@dataclass
class VehicleState:
    id: int
    traj: int
    s: float
    v: float
    spawn_time: float
    length: float = 5.0
    width: float = 1.8
    zone: str = UPSTREAM
    crossing_speed: float | None = None
    t_enter_prep: float | None = None
    stopped: bool = False
    # gate refusals caused by cross traffic, and all refusals
    refused: int = 0
    held: int = 0
    request_time: float | None = None
    request_seq: int | None = None
    a_last: float = 0.0
    fuel_ml: float = 0.0
    _fuel_rate: float | None = None
    speeds: list = field(default_factory=list)
    accels: list = field(default_factory=list)

    @property
    def admitted(self) -> bool:
        return self.crossing_speed is not None


class ArrivalProcess:
    """Poisson arrivals per trajectory with piecewise-constant directional shares.

    Every ``profile_period`` seconds the per-approach shares are redrawn as
    ``uniform * (1 + U(-imbalance, imbalance))`` and renormalized, so the total
    rate stays at ``total_rate`` while the directional loading drifts.
    Movements split evenly within an approach.
    """

    def __init__(self, layout: Layout, total_rate: float, rng, imbalance=0.3,
                 profile_period: float | None = 600.0, shares=None):
        self.layout = layout
        self.total_rate = float(total_rate)
        self.rng = rng
        self.imbalance = imbalance
        self.profile_period = profile_period
        self.n_r = layout.n_r
        self._fixed = None if shares is None else np.asarray(shares, float) / np.sum(shares)
        self._segments: list = []
        self._next = np.full(self.n_r, np.nan)
        self._cursor = 0.0

    def _draw_shares(self):
        if self._fixed is not None:
            return self._fixed
        per_app = 1 + self.rng.uniform(-self.imbalance, self.imbalance, len(APPROACHES))
        per_app /= per_app.sum()
        out = np.empty(self.n_r)
        for t in self.layout.trajectories:
            out[t.id] = per_app[APPROACHES.index(t.approach)] / 3.0
        return out / out.sum()

    def rates_at(self, t: float) -> np.ndarray:
        """Per-trajectory rate (veh/s) at time ``t``."""
        self._extend(t)
        starts = [s for s, _ in self._segments]
        k = bisect.bisect_right(starts, t) - 1
        return self._segments[k][1] * self.total_rate / 3600.0

    def _extend(self, t: float):
        period = self.profile_period or math.inf
        if not self._segments:
            self._segments.append((0.0, self._draw_shares()))
        while self._segments[-1][0] + period <= t:
            self._segments.append((self._segments[-1][0] + period, self._draw_shares()))

    def _segment_end(self, t: float) -> float:
        period = self.profile_period or math.inf
        return (math.floor(t / period) + 1) * period if math.isfinite(period) else math.inf

    def arrivals_until(self, t_end: float) -> list:
        """All ``(time, trajectory)`` arrivals in ``[cursor, t_end)``, time-ordered."""
        out = []
        if self.total_rate <= 0:
            self._cursor = t_end
            return out
        for j in range(self.n_r):
            t = self._next[j] if not np.isnan(self._next[j]) else self._draw_after(j, 0.0)
            while t < t_end:
                out.append((t, j))
                t = self._draw_after(j, t)
            self._next[j] = t
        self._cursor = t_end
        out.sort()
        return out

    def _draw_after(self, j: int, t: float) -> float:
        # memoryless: restart the exponential clock at each profile boundary
        while True:
            rate = self.rates_at(t)[j]
            end = self._segment_end(t)
            if rate <= 0:
                if not math.isfinite(end) or self._fixed is not None:
                    return math.inf
                t = end
                continue
            gap = self.rng.exponential(1.0 / rate)
            if t + gap < end:
                return t + gap
            t = end


class PathTables:
    """Dense per-trajectory position tables for fast vectorized lookups."""

    def __init__(self, layout: Layout, s_lo: float, step: float = 0.05):
        self.step = step
        self.s_lo = s_lo
        s_hi = max(t.exit_s for t in layout.trajectories) + 10.0
        self.grid = np.arange(s_lo, s_hi + step, step)
        self.xy = np.stack([t.point_at(self.grid) for t in layout.trajectories])
        self.n = len(self.grid)

    def point(self, traj, s):
        traj = np.asarray(traj, np.int64)
        u = (np.asarray(s, float) - self.s_lo) / self.step
        i = np.clip(np.floor(u).astype(np.int64), 0, self.n - 2)
        f = (u - i)[..., None]
        return self.xy[traj, i] * (1 - f) + self.xy[traj, i + 1] * f


def profile_positions(s0: float, v0: float, vc: float, n: int, p: SimParams):
    """Substep positions and speeds of an admitted vehicle for ``n`` substeps.

    The vehicle launches at ``a_max`` until it reaches ``vc``, then cruises;
    this mirrors the world integrator exactly.
    """
    s = np.empty(n + 1)
    v = np.empty(n + 1)
    s[0], v[0] = s0, v0
    cur_s, cur_v = s0, v0
    k = 0
    while k < n and cur_v < vc:
        cur_v = min(cur_v + p.a_max * p.dt, vc)
        cur_s += cur_v * p.dt
        k += 1
        s[k], v[k] = cur_s, cur_v
    if k < n:
        steps = np.arange(1, n - k + 1)
        s[k + 1:] = cur_s + vc * p.dt * steps
        v[k + 1:] = vc
    return s, v


def arrival_times(s0: float, v0: float, vc: float, targets, p: SimParams):
    """Time from now until the front bumper reaches each target arc length."""
    targets = np.atleast_1d(np.asarray(targets, float))
    # launch phase is at most a handful of substeps
    n_launch = int(math.ceil(max(vc - v0, 0.0) / (p.a_max * p.dt))) + 1
    s, _ = profile_positions(s0, v0, vc, n_launch, p)
    t_grid = np.arange(n_launch + 1) * p.dt
    out = np.where(targets <= s0, 0.0, np.inf)
    inside = (targets > s0) & (targets <= s[-1])
    if inside.any():
        out[inside] = np.interp(targets[inside], s, t_grid)
    beyond = targets > s[-1]
    if beyond.any():
        out[beyond] = t_grid[-1] + (targets[beyond] - s[-1]) / vc
    return out


def _max_accel_to_stop(s, v, target, p: SimParams, iters: int = 24):
    """Largest acceleration keeping a stop before ``target`` possible after one action step."""
    s, v, target = (np.asarray(x, float) for x in (s, v, target))
    n_sub, dt, v_max, two_b = p.substeps, p.dt, p.v_max, 2 * p.brake

    def stop_point(a, ss, vv):
        for _ in range(n_sub):
            vv = np.minimum(np.maximum(vv + a * dt, 0.0), v_max)
            ss = ss + vv * dt
        return ss + vv**2 / two_b

    out = np.full(s.shape, p.a_max)
    need = ~(stop_point(out, s, v) <= target)
    if not need.any():
        return out
    # bisection is elementwise, so only the constrained entries are refined
    s, v, target = s[need], v[need], target[need]
    lo = np.full(s.shape, p.a_min)
    hi = np.full(s.shape, p.a_max)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        good = stop_point(mid, s, v) <= target
        lo = np.where(good, mid, lo)
        hi = np.where(good, hi, mid)
    out[need] = lo
    return out


class World:
    """Single-owner simulation state; mutate only through :meth:`spawn` and :meth:`step`."""

    def __init__(self, layout: Layout, params: SimParams | None = None, seed: int = 0,
                 total_rate: float = 0.0, arrival: ArrivalProcess | None = None,
                 record_series: bool = False, imbalance: float = 0.3,
                 profile_period: float | None = 600.0):
        self.layout = layout
        self.p = params or SimParams()
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.arrival = arrival or ArrivalProcess(
            layout, total_rate, np.random.default_rng([seed, 1]), imbalance, profile_period)
        self.t = 0.0
        self.vehicles: dict[int, VehicleState] = {}
        self.trip_log: list[TripRecord] = []
        self.collisions: list = []
        self.events: list = []
        self.request_order: list = []
        self.record_series = record_series
        self.arrival_log: list = []
        self._pending = {t.id: deque() for t in layout.trajectories}
        self._next_id = 0
        self._leaders = None
        self._sub_clock = 0.0
        self.on_finish = None
        self.last_accel: dict = {}
        self.spawn_s = layout.trajectories[0].stop_line_s - self.p.spawn_distance
        self.tables = PathTables(layout, self.spawn_s - 2 * self.p.length - 5.0)
        self._zones_by_traj = {t.id: [] for t in layout.trajectories}
        for z in _cached_zones(layout, self.p.length, self.p.width):
            a, b = z.trajectories
            self._zones_by_traj[a].append((z, b))
            self._zones_by_traj[b].append((z, a))

    # ------------------------------------------------------------------ queries
    def active(self) -> list:
        return list(self.vehicles.values())

    def in_zone(self, *zones) -> list:
        return [v for v in self.vehicles.values() if v.zone in zones]

    def lane(self, traj: int) -> list:
        """Vehicles on a trajectory, front-most first."""
        return sorted((v for v in self.vehicles.values() if v.traj == traj), key=lambda v: -v.s)

    def leader_of(self, veh: VehicleState):
        """Nearest vehicle ahead on the same trajectory."""
        if self._leaders is None:
            self._leaders = {}
            lanes: dict = {}
            for o in self.vehicles.values():
                lanes.setdefault(o.traj, []).append(o)
            for lane in lanes.values():
                lane.sort(key=lambda o: (o.s, -o.id))
                for back, front in zip(lane, lane[1:]):
                    self._leaders[back.id] = front
        return self._leaders.get(veh.id)

    def zones_of(self, traj: int) -> list:
        """``(ClearanceZone, other trajectory)`` pairs touching ``traj``."""
        return self._zones_by_traj[traj]

    def hold_line(self, veh: VehicleState) -> float:
        return self.layout.trajectories[veh.traj].crossing_entry_s - self.p.hold_back

    def positions(self, vehicles=None):
        vehicles = self.active() if vehicles is None else vehicles
        if not vehicles:
            return np.zeros((0, 2)), np.zeros((0, 2))
        traj = np.fromiter((v.traj for v in vehicles), np.int64, len(vehicles))
        s = np.fromiter((v.s for v in vehicles), float, len(vehicles))
        front = self.tables.point(traj, s)
        rear = self.tables.point(traj, s - self.p.length)
        chord = front - rear
        heading = chord / np.maximum(np.linalg.norm(chord, axis=1, keepdims=True), 1e-9)
        return front - 0.5 * self.p.length * heading, heading

    # ------------------------------------------------------------------ spawning
    def spawn(self, arrivals: bool = True) -> list:
        """Insert vehicles whose arrival time has come, deferring blocked spawns.

        With ``arrivals`` False no new arrivals are drawn and only the queue
        of deferred vehicles is served (used while draining).
        """
        for t_arr, j in (self.arrival.arrivals_until(self.t + 1e-9) if arrivals else ()):
            self._pending[j].append(t_arr)
            self.arrival_log.append((t_arr, j))
        born = []
        need = self.p.stopping_distance(self.p.v_max) + self.p.follow_margin
        for j, queue in self._pending.items():
            if not queue:
                continue
            last = min((v for v in self.vehicles.values() if v.traj == j), key=lambda v: v.s, default=None)
            if last is not None and last.s - last.length - self.spawn_s < need:
                continue
            queue.popleft()
            veh = VehicleState(self._next_id, j, self.spawn_s, self.p.v_max, self.t,
                               self.p.length, self.p.width)
            self._next_id += 1
            self.vehicles[veh.id] = veh
            self._leaders = None
            born.append(veh)
        return born

    # ------------------------------------------------------------------ safety layers
    def safety_override(self, veh: VehicleState, proposed: float) -> float:
        """Same-lane rear-end guard for vehicles not yet admitted."""
        leader = self.leader_of(veh)
        if leader is None:
            return proposed
        return float(self._follow_guard(
            np.array([veh.s]), np.array([veh.v]), np.array([leader.s - leader.length]),
            np.array([proposed]))[0])

    def _follow_guard(self, s, v, leader_rear, proposed, cap=None):
        gap = leader_rear - s
        env = self.p.stopping_distance(v) + self.p.follow_margin
        if cap is None:
            cap = _max_accel_to_stop(s, v, leader_rear - self.p.follow_margin, self.p)
        out = np.minimum(proposed, cap)
        return np.where(gap < env, self.p.a_min, out)

    def _gate_profile(self, veh: VehicleState):
        """Crossing speed the gate would grant now, or None when it cannot.

        A vehicle keeps its speed, or launches at ``a_max`` toward
        ``v_launch`` when the remaining room before the boundary allows it.
        """
        room = self.layout.trajectories[veh.traj].crossing_entry_s - veh.s - 0.25
        reach = math.sqrt(veh.v**2 + 2 * self.p.a_max * max(room, 0.0))
        vc = max(veh.v, min(reach, self.p.v_launch, self.p.v_max))
        return vc if vc >= self.p.v_min_cross else None

    def occupancy(self, veh: VehicleState, zone, vc=None):
        """Time window of ``veh`` inside a clearance zone; None once it has left."""
        s_in, s_out = zone.intervals[veh.traj]
        if veh.s >= s_out:
            return None
        vc = veh.crossing_speed if vc is None else vc
        t_in, t_out = arrival_times(veh.s, veh.v, vc, [s_in, s_out], self.p)
        return float(t_in), float(t_out)

    def gate_conflict(self, veh: VehicleState, vc: float, tentative=()):
        """Why ``veh`` crossing at ``vc`` cannot be admitted now.

        Returns ``"lane"`` when the same-lane leader is not committed or would
        be too close, ``"cross"`` when a clearance zone is double-booked, and
        None when the vehicle is separated from every admitted vehicle.
        """
        p = self.p
        admitted = {o.id: (o, o.crossing_speed) for o in self.vehicles.values() if o.admitted}
        for o, ovc in tentative:
            admitted[o.id] = (o, ovc)
        leader = self.leader_of(veh)
        if leader is not None:
            if leader.id not in admitted:
                return "lane"
            lv, lvc = admitted[leader.id]
            exit_s = self.layout.trajectories[veh.traj].exit_s
            horizon = int(math.ceil((exit_s - lv.s) / (lvc * p.dt))) + 2
            ls, _ = profile_positions(lv.s, lv.v, lvc, horizon, p)
            fs, _ = profile_positions(veh.s, veh.v, vc, horizon, p)
            if np.any(ls - lv.length - fs < p.follow_margin * 0.5):
                return "lane"
        for zone, other in self._zones_by_traj[veh.traj]:
            mine = None
            for o, ovc in admitted.values():
                if o.traj != other or o.id == veh.id:
                    continue
                theirs = self.occupancy(o, zone, ovc)
                if theirs is None:
                    continue
                if mine is None:
                    mine = self.occupancy(veh, zone, vc)
                    if mine is None:
                        break
                m = p.gate_time_margin
                if mine[0] < theirs[1] + m and theirs[0] < mine[1] + m:
                    return "cross"
        return None

    def gate_check(self, veh: VehicleState, vc: float, tentative=()) -> bool:
        return self.gate_conflict(veh, vc, tentative) is None

    def crossing_gate(self, veh: VehicleState, policy=None):
        """Admit with a crossing speed, or return None (Hold)."""
        vc = self._gate_profile(veh)
        if vc is None:
            return None
        if policy is not None and not policy(self, veh):
            return None
        why = self.gate_conflict(veh, vc)
        if why == "cross":
            veh.refused += 1
        return vc if why is None else None

    def admit(self, veh: VehicleState, vc: float):
        if veh.admitted:
            raise RuntimeError(f"vehicle {veh.id} admitted twice")
        veh.crossing_speed = float(vc)
        self.events.append((self.t, "admit", veh.id, float(vc)))

    def try_admit_group(self, group: list) -> bool:
        """All-or-nothing admission of vehicles that must cross together."""
        tentative = []
        for veh in group:
            vc = self._gate_profile(veh)
            if vc is None or not self.gate_check(veh, vc, tentative):
                return False
            tentative.append((veh, vc))
        for veh, vc in tentative:
            self.admit(veh, vc)
        return True

    # ------------------------------------------------------------------ dynamics
    def step(self, actions: dict | None = None, policy=None, group_fn=None):
        """Advance one action step.

        ``actions`` maps vehicle id to commanded acceleration for vehicles not
        yet admitted; missing entries cruise toward the speed limit.
        ``policy(world, veh) -> bool`` adds controller-specific admission
        conditions; ``group_fn(world, veh) -> list`` returns the set of vehicles
        to admit jointly (empty to defer the request).
        """
        p = self.p
        actions = actions or {}
        free = [v for v in self.vehicles.values() if not v.admitted]
        accel = {}
        for veh in free:
            a = actions.get(veh.id)
            if a is None:
                a = min(p.a_max, (p.v_max - veh.v) / p.action_dt)
            if not (p.a_min - 1e-9 <= a <= p.a_max + 1e-9) or not math.isfinite(a):
                self.events.append((self.t, "action_clamped", veh.id, float(a)))
                a = float(np.clip(np.nan_to_num(a), p.a_min, p.a_max))
            accel[veh.id] = a

        if free:
            s = np.array([v.s for v in free])
            vv = np.array([v.v for v in free])
            prop = np.array([accel[v.id] for v in free])
            lead_rear = np.full(len(free), np.inf)
            for i, veh in enumerate(free):
                ld = self.leader_of(veh)
                if ld is not None:
                    lead_rear[i] = ld.s - ld.length
            has = np.isfinite(lead_rear)
            hold = np.array([self.hold_line(v) for v in free])
            # one batched solve for the follow caps and the hold-line caps
            nh = int(has.sum())
            caps = _max_accel_to_stop(np.concatenate([s[has], s]), np.concatenate([vv[has], vv]),
                                      np.concatenate([lead_rear[has] - p.follow_margin, hold]), p)
            cap = caps[nh:]
            if nh:
                prop[has] = self._follow_guard(s[has], vv[has], lead_rear[has], prop[has], caps[:nh])
            for i, veh in enumerate(free):
                accel[veh.id] = float(prop[i])
            # gate requests: closest to the boundary first
            want = [i for i, veh in enumerate(free)
                    if veh.zone == PREPARATION and (prop[i] > cap[i] + 1e-9 or hold[i] - veh.s < 0.5)]
            want.sort(key=lambda i: (hold[i] - free[i].s, free[i].id))
            for i in want:
                veh = free[i]
                if veh.admitted:
                    continue
                if veh.request_time is None:
                    veh.request_time = self.t
                    veh.request_seq = len(self.request_order)
                    self.request_order.append(veh.id)
                group = group_fn(self, veh) if group_fn is not None else [veh]
                if not group:
                    continue
                if len(group) == 1 and group[0] is veh:
                    vc = self.crossing_gate(veh, policy)
                    if vc is not None:
                        self.admit(veh, vc)
                elif policy is None or policy(self, group[0]):
                    self.try_admit_group(group)
                if not veh.admitted:
                    veh.held += 1
            for i, veh in enumerate(free):
                if not veh.admitted:
                    accel[veh.id] = float(min(accel[veh.id], cap[i]))
        self.last_accel = accel

        for _ in range(p.substeps):
            self._substep(accel)
        self.t = round(self.t + p.action_dt, 9)

    def _substep(self, accel: dict):
        p = self.p
        self._leaders = None
        t0 = self.t + self._sub_clock
        t1 = t0 + p.dt
        finished = []
        for veh in self.vehicles.values():
            if veh.admitted:
                a = p.a_max if veh.v < veh.crossing_speed else 0.0
                v_new = min(veh.v + a * p.dt, veh.crossing_speed)
                if veh.v >= veh.crossing_speed:
                    v_new = veh.crossing_speed
            else:
                a = accel.get(veh.id, 0.0)
                v_new = min(max(veh.v + a * p.dt, 0.0), p.v_max)
            a_eff = (v_new - veh.v) / p.dt
            s_old = veh.s
            veh.v = v_new
            veh.s = s_old + v_new * p.dt
            veh.a_last = a_eff
            self._zones(veh, s_old, t0, t1)
            if veh.zone in (PREPARATION, CROSSING, DONE):
                self._account(veh, a_eff)
            if veh.zone == PREPARATION and veh.v < p.stop_speed:
                veh.stopped = True
            if veh.zone == DONE:
                finished.append(veh)
        for veh in finished:
            self._finish(veh, "passed")
        self._sub_clock += p.dt
        if self._sub_clock >= p.action_dt - 1e-9:
            self._sub_clock = 0.0
        pairs = self.detect_collisions()
        if pairs:
            hit = set()
            for a, b in sorted(pairs):
                self.collisions.append((round(t1, 9), a, b))
                hit.update((a, b))
            for vid in sorted(hit):
                if vid in self.vehicles:
                    self._finish(self.vehicles[vid], "collided", t1)

    def _zones(self, veh: VehicleState, s_old: float, t0: float, t1: float):
        tr = self.layout.trajectories[veh.traj]

        def when(x):
            if veh.s == s_old:
                return t1
            return t0 + (x - s_old) / (veh.s - s_old) * (t1 - t0)

        if veh.zone == UPSTREAM and veh.s >= 0.0:
            veh.zone = PREPARATION
            veh.t_enter_prep = when(0.0)
        if veh.zone == PREPARATION and veh.s >= tr.crossing_entry_s:
            if not veh.admitted:
                # unreachable while the hold-line cap holds
                self.events.append((t1, "gate_breach", veh.id, veh.s))
                log.error("vehicle %d entered the crossing zone without admission", veh.id)
            veh.zone = CROSSING
        if veh.zone == CROSSING and veh.s >= tr.exit_s:
            veh.zone = DONE
            veh._t_exit = when(tr.exit_s)

    def _account(self, veh: VehicleState, a: float):
        rate = _fuel_scalar(veh.v, a)
        if veh._fuel_rate is not None:
            veh.fuel_ml += 0.5 * (veh._fuel_rate + rate) * self.p.dt
        veh._fuel_rate = rate
        if self.record_series:
            veh.speeds.append(veh.v)
            veh.accels.append(a)

    def _finish(self, veh: VehicleState, outcome: str, t=None):
        self.vehicles.pop(veh.id, None)
        self._leaders = None
        rec = TripRecord(
            vehicle_id=veh.id,
            trajectory=veh.traj,
            spawn_time=veh.spawn_time,
            t_enter_prep=veh.t_enter_prep,
            t_exit_cross=getattr(veh, "_t_exit", None) if outcome == "passed" else None,
            stopped=veh.stopped,
            outcome=outcome,
            fuel_ml=veh.fuel_ml,
            refused=veh.refused,
            speeds=np.asarray(veh.speeds, np.float32) if self.record_series else None,
            accels=np.asarray(veh.accels, np.float32) if self.record_series else None,
        )
        self.trip_log.append(rec)
        self.events.append((self.t if t is None else t, outcome, veh.id, veh.s))
        if self.on_finish is not None:
            self.on_finish(veh, rec)

    def close(self):
        """Log every remaining vehicle as unfinished, including arrivals still queued at the spawn point."""
        for veh in sorted(self.vehicles.values(), key=lambda v: v.id):
            self._finish(veh, "unfinished")
        for j in sorted(self._pending):
            while self._pending[j]:
                t_arr = self._pending[j].popleft()
                self.trip_log.append(TripRecord(self._next_id, j, t_arr, None, None, False, "unfinished", 0.0))
                self._next_id += 1

    def detect_collisions(self) -> set:
        vehicles = self.active()
        if len(vehicles) < 2:
            return set()
        c, u = self.positions(vehicles)
        reach = 2 * math.hypot(self.p.length / 2, self.p.width / 2)
        cand = cKDTree(c).query_pairs(reach, output_type="ndarray")
        if len(cand) == 0:
            return set()
        ii, jj = cand[:, 0], cand[:, 1]
        hit = rects_overlap(c[ii], u[ii], c[jj], u[jj], self.p.length / 2, self.p.width / 2)
        out = set()
        for i, j in zip(ii[hit], jj[hit]):
            a, b = vehicles[i].id, vehicles[j].id
            out.add((min(a, b), max(a, b)))
        return out


def _fuel_scalar(v: float, a: float) -> float:
    # scalar twin of metrics.fuel_rate, used in the hot loop
    return IDLE_RATE + ML_PER_J * max(0.0, MASS * a * v + (C0 + C1 * v * v) * v)


_ZONE_CACHE: dict = {}


def _cached_zones(layout: Layout, length: float, width: float):
    key = (id(layout), length, width)
    hit = _ZONE_CACHE.get(key)
    if hit is None or hit[0] is not layout:
        hit = (layout, clearance_zones(layout, length, width))
        _ZONE_CACHE[key] = hit
    return hit[1]
