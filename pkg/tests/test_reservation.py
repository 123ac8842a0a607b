import numpy as np
import pytest
from oracles import oracle_conflicts, random_vehicles, synthetic_table

from dhal_aim.reservation import (
    ConflictLabels,
    VehicleView,
    assign_priority,
    cell_range,
    conflict_labels,
    label_all,
    occupancy_window,
    update_table,
)


# ---------------------------------------------------------------- windows
def test_window_substitution():
    w = occupancy_window(10, 5, 5, eps=0.5)
    assert (w.t1, w.t2) == pytest.approx((1.9, 3.1))


def test_window_passed_point_clamps():
    w = occupancy_window(-2, 5, 5, eps=0.5)
    assert w.t1 == 0.0
    assert w.t2 == pytest.approx(0.7)


def test_window_horizon_clamp():
    w = occupancy_window(600, 5, 5, eps=0.5)
    assert (w.t1, w.t2) == (100.0, 100.0)


def test_window_slow_vehicle_is_worst_case():
    w = occupancy_window(10, 5, 0.05)
    assert (w.t1, w.t2) == (0.0, 100.0)


def test_window_duration_monotone_in_speed():
    vs = np.linspace(0.5, 15, 50)
    ws = [occupancy_window(80, 5, v, T_r=1e9) for v in vs]
    dur = [w.t2 - w.t1 for w in ws]
    assert all(a >= b - 1e-12 for a, b in zip(dur, dur[1:]))


def test_cell_range_half_open():
    k1, k2 = cell_range(np.array([0.4, 1.0]), np.array([1.0, 1.0]), 0.2)
    assert (k1[0], k2[0]) == (2, 5)
    assert k1[1] == k2[1]


# ---------------------------------------------------------------- table
def test_single_vehicle_no_conflicts(layout):
    table, conf = update_table([VehicleView(0, 0, 90.0, 10.0)], layout)
    assert conf == set()
    assert table.n_t == 500


def test_two_vehicles_overlapping(layout):
    cp = layout.conflicts.points[0]
    a, b = cp.trajectories
    vs = [VehicleView(1, a, cp.members[a] - 20, 10.0), VehicleView(2, b, cp.members[b] - 20, 10.0)]
    table, conf = update_table(vs, layout)
    assert conf == {1, 2}
    assert cp.id in table.pairs[(1, 2)]


def test_table_matches_oracle(layout, rng):
    for _ in range(200):
        vs = random_vehicles(rng, layout, int(rng.integers(1, 21)))
        table, conf = update_table(vs, layout)
        ref = oracle_conflicts(vs, layout)
        assert set(table.pairs) == ref
        assert conf == {v for p in ref for v in p}


def test_dense_matches_cells(layout, rng):
    vs = random_vehicles(rng, layout, 8)
    table, _ = update_table(vs, layout)
    grid = table.dense()
    for c, k, ids in table.dump():
        assert set(ids) == grid[c][k] == table.cell(c, k)


# ---------------------------------------------------------------- priorities
def _pair_point(layout, ap_i, mv_i, ap_j, mv_j):
    ti, tj = layout.trajectory(ap_i, mv_i), layout.trajectory(ap_j, mv_j)
    shared = set(layout.conflicts.by_trajectory[ti.id]) & set(layout.conflicts.by_trajectory[tj.id])
    assert shared
    return ti.id, tj.id, min(shared)


def test_rule1_earlier_vehicle_leads(layout):
    ti, tj, c = _pair_point(layout, "S", "straight", "E", "straight")
    traj_of = {1: ti, 2: tj}
    cur = synthetic_table(layout, [(1, c, 10, 20), (2, c, 12, 22)], {(1, 2): [c]}, traj_of)
    prev = synthetic_table(layout, [(1, c, 10, 16), (2, c, 18, 24)], {}, traj_of)
    d = assign_priority(1, 2, cur, prev, layout)
    assert (d.leader, d.follower, d.rule) == (1, 2, 1)
    assert assign_priority(2, 1, cur, prev, layout) == d


def test_rule2_right_hand_vehicle_leads(layout):
    # northbound vehicle comes from the south approach; its right is the east approach
    ti, tj, c = _pair_point(layout, "S", "straight", "E", "straight")
    traj_of = {1: ti, 2: tj}
    cur = synthetic_table(layout, [(1, c, 10, 20), (2, c, 12, 22)], {(1, 2): [c]}, traj_of)
    d = assign_priority(1, 2, cur, cur, layout)
    assert (d.leader, d.rule) == (2, 2)


def test_rule3_straight_beats_opposing_left(layout):
    ti, tj, c = _pair_point(layout, "N", "straight", "S", "left")
    traj_of = {1: ti, 2: tj}
    cur = synthetic_table(layout, [(1, c, 10, 20), (2, c, 12, 22)], {(1, 2): [c]}, traj_of)
    d = assign_priority(1, 2, cur, cur, layout)
    assert (d.leader, d.rule) == (1, 3)


def test_fresh_entry_falls_through_to_rule2(layout):
    ti, tj, c = _pair_point(layout, "W", "left", "N", "straight")
    traj_of = {7: ti, 3: tj}
    cur = synthetic_table(layout, [(7, c, 10, 20), (3, c, 12, 22)], {(3, 7): [c]}, traj_of)
    d = assign_priority(7, 3, cur, None, layout)
    # the west approach's right-hand neighbour is the south approach, so the
    # northern vehicle sits on the west vehicle's left
    assert (d.leader, d.rule, d.fresh) == (7, 2, True)


def test_no_opposite_pair_needs_tie_break(layout):
    from dhal_aim.geometry import OPPOSITE

    for cp in layout.conflicts.points:
        a, b = (layout.trajectories[t] for t in cp.trajectories)
        if OPPOSITE[a.approach] == b.approach:
            assert (a.movement == "straight") != (b.movement == "straight")


def test_priority_requires_conflict(layout):
    table, _ = update_table([VehicleView(0, 0, 0.0, 10.0), VehicleView(1, 1, 0.0, 10.0)], layout)
    with pytest.raises(ValueError):
        assign_priority(0, 1, table, None, layout)


# ---------------------------------------------------------------- labels
def test_labels_from_decisions():
    from dhal_aim.reservation import PriorityDecision

    assert conflict_labels(5, set(), []) == ConflictLabels(0, 0, 0)
    d = [PriorityDecision(5, 6, 2)]
    assert conflict_labels(5, {5, 6}, d) == ConflictLabels(1, 0, 1)
    assert conflict_labels(6, {5, 6}, d) == ConflictLabels(1, 1, 0)
    d = [PriorityDecision(5, 6, 2), PriorityDecision(4, 5, 3)]
    assert conflict_labels(5, {4, 5, 6}, d) == ConflictLabels(1, 1, 1)


def test_label_consistency_single_pair(layout, rng):
    for _ in range(50):
        vs = random_vehicles(rng, layout, 12)
        table, _ = update_table(vs, layout)
        labels, decisions = label_all(table, None, layout)
        n_pairs = {}
        for a, b in table.pairs:
            n_pairs[a] = n_pairs.get(a, 0) + 1
            n_pairs[b] = n_pairs.get(b, 0) + 1
        for vid, lab in labels.items():
            if n_pairs.get(vid, 0) <= 1:
                assert lab.L_C == lab.L_AC + lab.L_PC
            assert min(lab.L_AC + lab.L_PC, 1) == lab.L_C
