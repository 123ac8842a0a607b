"""Independent reference implementations shared by the unit and acceptance suites."""
import math

import numpy as np

from dhal_aim.reservation import ReservationTable, VehicleView


def random_vehicles(rng, layout, n):
    out = []
    for i in range(n):
        out.append(VehicleView(i, int(rng.integers(layout.n_r)), float(rng.uniform(-10, 130)),
                               float(rng.uniform(0, 15))))
    return out


def oracle_conflicts(vehicles, layout, eps=1.0, dt=0.2, T_r=100.0):
    """Pairwise, point-by-point interval overlap, written without numpy."""
    n_t = math.ceil(T_r / dt - 1e-9)

    def cells(veh, cid):
        d = layout.conflicts.points[cid].members[veh.traj] - veh.s
        if veh.v < 0.1:
            t1, t2 = 0.0, T_r
        else:
            t1 = min(max((d - eps) / veh.v, 0.0), T_r)
            t2 = min(max((d + veh.length + eps) / veh.v, 0.0), T_r)
        if not t2 > t1:
            return set()
        k1 = math.floor(t1 / dt + 1e-9)
        k2 = max(math.ceil(t2 / dt - 1e-9), k1 + 1)
        return set(range(min(k1, n_t), min(k2, n_t)))

    out = set()
    for a in vehicles:
        for b in vehicles:
            if a.id >= b.id or a.traj == b.traj:
                continue
            shared = set(layout.conflicts.by_trajectory[a.traj]) & set(layout.conflicts.by_trajectory[b.traj])
            for c in shared:
                if cells(a, c) & cells(b, c):
                    out.add((a.id, b.id))
                    break
    return out


def synthetic_table(layout, entries, pairs, traj_of):
    """Table from explicit ``(vehicle, conflict id, k1, k2)`` entries."""
    veh, cid, k1, k2 = zip(*entries)
    tr = [traj_of[v] for v in veh]
    return ReservationTable(layout.n_c, veh=np.array(veh), traj=np.array(tr), cid=np.array(cid),
                            k1=np.array(k1), k2=np.array(k2), pairs=pairs, traj_of=traj_of)
