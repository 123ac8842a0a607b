"""Rule-based controllers: fixed-time signal, longest queue first, FCFS and FCFS with platoons.

Every controller exposes the same three hooks consumed by ``World.step``:
``actions(world)`` for commanded accelerations, ``policy(world, veh)`` for
extra admission conditions and ``group_fn(world, veh)`` for joint admission.
The world's crossing gate still has the final word on safety.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Layout
from .simcore import PREPARATION, UPSTREAM, World

COMFORT_DECEL = 3.0


def ctg_accel(gap, v, v_lead, headway=1.5, s0=2.0, v_max=15.0, a_max=4.0, a_min=-4.0,
              k_gap=0.45, k_speed=0.25, action_dt=0.2):
    """Constant-time-gap following with a kinematic braking term.

    ``gap`` is bumper-to-bumper distance to the leader (or to a stop target,
    with ``v_lead`` = 0). Braking is held to the comfort level unless the
    kinematics demand more.
    """
    a_free = min(a_max, (v_max - v) / action_dt)
    if gap is None or not math.isfinite(gap):
        return float(a_free)
    a_ctg = k_gap * (gap - s0 - headway * v) + k_speed * (v_lead - v)
    room = max(gap - s0, 0.1)
    a_kin = -(max(v * v - v_lead * v_lead, 0.0)) / (2 * room)
    a = min(a_free, a_ctg)
    if a_kin < -1.0:
        a = min(a, a_kin)
    lo = a_min if a_kin < -COMFORT_DECEL else -COMFORT_DECEL
    return float(min(max(a, lo), a_max))


def _lane_gap(world: World, veh):
    ld = world.leader_of(veh)
    if ld is None:
        return None, 0.0
    return ld.s - ld.length - veh.s, ld.v


# ---------------------------------------------------------------- signal plans
@dataclass
class SignalPlan:
    phases: list  # each a frozenset of trajectory ids
    green: list
    yellow: float = 3.0

    @property
    def cycle(self) -> float:
        return float(sum(self.green) + self.yellow * len(self.phases))

    def phase_at(self, t: float):
        """``(phase index, is_green)`` at time ``t``."""
        u = t % self.cycle
        for k, g in enumerate(self.green):
            if u < g:
                return k, True
            u -= g
            if u < self.yellow:
                return k, False
            u -= self.yellow
        return len(self.phases) - 1, False


def four_phases(layout: Layout) -> list:
    """(N+S through/right), (N+S left), (E+W through/right), (E+W left)."""
    def ids(apps, moves):
        return frozenset(t.id for t in layout.trajectories if t.approach in apps and t.movement in moves)

    return [
        ids("NS", ("straight", "right")),
        ids("NS", ("left",)),
        ids("EW", ("straight", "right")),
        ids("EW", ("left",)),
    ]


def check_phases(layout: Layout, phases) -> None:
    for ph in phases:
        for a in ph:
            bad = set(layout.conflicts.conflicting[a]) & ph
            if bad:
                raise ValueError(f"phase contains conflicting trajectories {a} and {sorted(bad)}")


def uniform_plan(layout: Layout, cycle: float, yellow: float = 3.0) -> SignalPlan:
    phases = four_phases(layout)
    check_phases(layout, phases)
    g = cycle / len(phases) - yellow
    if g <= 0:
        raise ValueError("cycle too short for the yellow time")
    return SignalPlan(phases, [g] * len(phases), yellow)


class _SignalBase:
    """Shared car following for signal controllers: stop at the hold line on red."""

    headway = 1.5

    def green_set(self, world: World) -> frozenset:
        raise NotImplementedError

    def actions(self, world: World) -> dict:
        green = self.green_set(world)
        out = {}
        for veh in world.vehicles.values():
            if veh.admitted:
                continue
            gap, v_lead = _lane_gap(world, veh)
            a = ctg_accel(gap, veh.v, v_lead, self.headway)
            if veh.traj not in green:
                stop_gap = world.hold_line(veh) + world.p.follow_margin - veh.s
                if gap is None or stop_gap < gap:
                    a = min(a, ctg_accel(stop_gap, veh.v, 0.0, self.headway))
            out[veh.id] = a
        return out

    def policy(self, world: World, veh) -> bool:
        return veh.traj in self.green_set(world)

    group_fn = None


class FixedTimeController(_SignalBase):
    name = "ft"

    def __init__(self, layout: Layout, cycle: float = 60.0, yellow: float = 3.0):
        self.plan = uniform_plan(layout, cycle, yellow)

    def green_set(self, world: World) -> frozenset:
        k, is_green = self.plan.phase_at(world.t)
        return self.plan.phases[k] if is_green else frozenset()


def stopped_census(world: World, phases) -> list:
    """Stopped (v < 0.1 m/s), not yet admitted vehicles behind the stop line, per phase."""
    out = []
    for ph in phases:
        n = 0
        for veh in world.vehicles.values():
            if veh.traj in ph and not veh.admitted and veh.v < world.p.stop_speed:
                if veh.s < world.layout.trajectories[veh.traj].stop_line_s:
                    n += 1
        out.append(n)
    return out


def lqf_choice(queues, current: int) -> int:
    """Phase with the longest queue; the current phase keeps green on ties."""
    best = max(queues)
    if queues[current] == best:
        return current
    return int(np.argmax(queues))


class LqfController(_SignalBase):
    name = "lqf"

    def __init__(self, layout: Layout, min_green: float = 5.0, yellow: float = 3.0):
        self.phases = four_phases(layout)
        check_phases(layout, self.phases)
        self.min_green = min_green
        self.yellow = yellow
        self.current = 0
        self.green_since = 0.0
        self.yellow_until = None
        self.next_phase = 0
        self.history: list = []

    def update(self, world: World):
        t = world.t
        if self.yellow_until is not None:
            if t + 1e-9 >= self.yellow_until:
                self.current = self.next_phase
                self.green_since = t
                self.yellow_until = None
            return
        if t - self.green_since + 1e-9 < self.min_green:
            return
        q = stopped_census(world, self.phases)
        choice = lqf_choice(q, self.current)
        if choice != self.current:
            self.next_phase = choice
            self.yellow_until = t + self.yellow
            self.history.append((t, self.current, choice, tuple(q)))

    def green_set(self, world: World) -> frozenset:
        return frozenset() if self.yellow_until is not None else self.phases[self.current]

    def actions(self, world: World) -> dict:
        self.update(world)
        return super().actions(world)


# ---------------------------------------------------------------- reservation baselines
class FcfsController:
    """Priority is the order of requests at the crossing-zone boundary."""

    name = "fcfs"
    group_fn = None

    def __init__(self, layout: Layout, headway: float = 1.5):
        self.conflicting = {t.id: set(layout.conflicts.conflicting[t.id]) for t in layout.trajectories}
        self.headway = headway

    def actions(self, world: World) -> dict:
        out = {}
        for veh in world.vehicles.values():
            if not veh.admitted:
                gap, v_lead = _lane_gap(world, veh)
                out[veh.id] = ctg_accel(gap, veh.v, v_lead, self.headway)
        return out

    def blocked_by(self, world: World, veh) -> list:
        """Higher-priority vehicles that still hold a zone ``veh`` needs.

        A conflicting vehicle earlier in the sequence blocks while it waits
        and, once admitted, until its front bumper has left every clearance
        zone it shares with ``veh``.
        """
        seq = veh.request_seq
        mine = self.conflicting[veh.traj]
        out = []
        for o in world.vehicles.values():
            if o.traj not in mine or o.request_seq is None or o.request_seq >= seq:
                continue
            if not o.admitted:
                out.append(o.id)
                continue
            for zone, other in world.zones_of(veh.traj):
                if other == o.traj and o.s < zone.intervals[o.traj][1]:
                    out.append(o.id)
                    break
        return out

    def policy(self, world: World, veh) -> bool:
        return not self.blocked_by(world, veh)


@dataclass(frozen=True)
class PlatoonConfig:
    max_size: int = 8
    join_gap: float = 20.0
    headway: float = 1.0

    def __post_init__(self):
        if self.max_size < 1:
            raise ValueError("platoon size must be at least 1")


def form_platoons(lane: list, cfg: PlatoonConfig) -> list:
    """Split front-first vehicles of one lane into platoons by gap and size.

    ``lane`` holds objects with ``s`` and ``length``; returns lists of them.
    """
    out: list = []
    for veh in lane:
        if out:
            prev = out[-1][-1]
            gap = prev.s - prev.length - veh.s
            if gap < cfg.join_gap and len(out[-1]) < cfg.max_size:
                out[-1].append(veh)
                continue
        out.append([veh])
    return out


class PlatoonController(FcfsController):
    name = "platoon"

    def __init__(self, layout: Layout, cfg: PlatoonConfig | None = None):
        super().__init__(layout)
        self.cfg = cfg or PlatoonConfig()
        self.platoon_of: dict = {}
        self.sizes: list = []

    def _refresh(self, world: World):
        self.platoon_of = {}
        for j in range(world.layout.n_r):
            lane = [v for v in world.lane(j) if not v.admitted and v.zone in (PREPARATION, UPSTREAM)]
            for pl in form_platoons(lane, self.cfg):
                for v in pl:
                    self.platoon_of[v.id] = pl

    def actions(self, world: World) -> dict:
        self._refresh(world)
        out = {}
        for veh in world.vehicles.values():
            if veh.admitted:
                continue
            pl = self.platoon_of.get(veh.id)
            gap, v_lead = _lane_gap(world, veh)
            h = self.cfg.headway if pl is not None and pl[0] is not veh else self.headway
            out[veh.id] = ctg_accel(gap, veh.v, v_lead, h)
        return out

    def group_fn(self, world: World, veh) -> list:
        pl = self.platoon_of.get(veh.id)
        if pl is None:
            return [veh]
        if pl[0] is not veh:
            # followers ride on their leader's request
            return []
        # members may have been admitted or removed since the refresh
        members = [v for v in pl if v.id in world.vehicles and not v.admitted]
        if members and members[0] is veh:
            return members
        return [veh]

    def policy(self, world: World, veh) -> bool:
        pl = self.platoon_of.get(veh.id) or [veh]
        ok = super().policy(world, veh)
        if ok and len(pl) > 1:
            self.sizes.append(len(pl))
        return ok


def make_controller(name: str, layout: Layout, **kw):
    if name == "ft":
        return FixedTimeController(layout, kw.get("cycle", 60.0), kw.get("yellow", 3.0))
    if name == "lqf":
        return LqfController(layout, kw.get("min_green", 5.0), kw.get("yellow", 3.0))
    if name == "fcfs":
        return FcfsController(layout)
    if name == "platoon":
        return PlatoonController(layout, PlatoonConfig(
            kw.get("max_size", 8), kw.get("join_gap", 20.0), kw.get("headway", 1.0)))
    raise ValueError(f"unknown baseline controller {name!r}")
