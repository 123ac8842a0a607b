"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict that is printed in the terminal summary.
The 100-epoch training run behind criteria 5 to 7 is cached under
``.acceptance_cache`` keyed by config and source hash (see ``_trained.py``).
"""
import csv
import json
import time

import numpy as np
import pytest
from oracles import oracle_conflicts, random_vehicles, synthetic_table
from scipy import stats

from _trained import train_config, trained_run
from dhal_aim.dhal import (
    DhalNets,
    Encoder,
    actor_loss,
    actor_loss_grads,
    check_actor_gradient,
    epoch_summary,
    fuse_labels,
)
from dhal_aim.harness import CONTROLLERS, ExperimentConfig, evaluate_seed, run_experiment
from dhal_aim.reservation import assign_priority, update_table
from dhal_aim.simcore import World

pytestmark = pytest.mark.acceptance

SEEDS = [0, 1, 2]


@pytest.fixture(scope="session")
def trained():
    return trained_run()


@pytest.fixture(scope="session")
def trained_nets(trained):
    return DhalNets.load(trained / "final.ckpt")[0]


# ---------------------------------------------------------------- 1
def test_reservation_matches_brute_force(layout, acceptance):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        vs = random_vehicles(rng, layout, int(rng.integers(1, 21)))
        table, conf = update_table(vs, layout)
        ref = oracle_conflicts(vs, layout)
        if set(table.pairs) != ref or conf != {v for p in ref for v in p}:
            mismatches += 1
    dt = time.perf_counter() - t0
    ok = acceptance(1, mismatches == 0 and dt < 60, f"1000 instances, {mismatches} mismatches, {dt:.1f} s")
    assert ok


# ---------------------------------------------------------------- 2
def _random_prev_entry(rng, vid, c):
    r = rng.uniform()
    if r < 0.1:
        return None
    k1 = int(rng.integers(0, 60))
    if r < 0.2:
        return (vid, c, k1, k1)
    return (vid, c, k1, k1 + int(rng.integers(1, 25)))


def test_priority_total_and_antisymmetric(layout, acceptance):
    rng = np.random.default_rng(99)
    points = layout.conflicts.points
    t0 = time.perf_counter()
    bad = []
    rule1_checked = 0
    for trial in range(10_000):
        cp = points[int(rng.integers(len(points)))]
        ta, tb = cp.trajectories
        hi, hj = (int(x) for x in rng.choice(1000, 2, replace=False))
        c = cp.id
        k1i = int(rng.integers(0, 40))
        k2i = k1i + int(rng.integers(1, 20))
        k1j = int(rng.integers(max(0, k1i - 15), k2i))
        k2j = max(k1j + 1, k1i + 1) + int(rng.integers(0, 15))
        traj_of = {hi: ta, hj: tb}
        key = (min(hi, hj), max(hi, hj))
        cur = synthetic_table(layout, [(hi, c, k1i, k2i), (hj, c, k1j, k2j)], {key: [c]}, traj_of)
        prev_entries = [e for e in (_random_prev_entry(rng, hi, c), _random_prev_entry(rng, hj, c)) if e]
        prev = synthetic_table(layout, prev_entries, {}, traj_of) if prev_entries else None
        d1 = assign_priority(hi, hj, cur, prev, layout)
        d2 = assign_priority(hi, hj, cur, prev, layout)
        rev = assign_priority(hj, hi, cur, prev, layout)
        if d1 != d2 or {d1.leader, d1.follower} != {hi, hj} or (rev.leader, rev.follower) != (d1.leader, d1.follower):
            bad.append(trial)
            continue
        wins = {e[0]: e[2:] for e in prev_entries}
        if len(wins) == 2 and all(b > a for a, b in wins.values()):
            (ai, bi), (aj, bj) = wins[hi], wins[hj]
            rule1_checked += 1
            # hand rule: disjoint previous windows, the earlier one goes first
            if bi <= aj:
                ok = d1.rule == 1 and d1.leader == hi
            elif bj <= ai:
                ok = d1.rule == 1 and d1.leader == hj
            else:
                ok = d1.rule != 1
            if not ok:
                bad.append(trial)
    dt = time.perf_counter() - t0
    ok = acceptance(2, not bad and rule1_checked > 1000 and dt < 60,
                    f"10000 pairs, {len(bad)} violations, {rule1_checked} rule-1 cases, {dt:.1f} s")
    assert ok, bad[:10]


# ---------------------------------------------------------------- 3
def test_composite_actor_gradient(layout, acceptance):
    enc = Encoder(layout)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng(i)
        nets = DhalNets.create(enc, i, dtype=np.float64)
        # spread discriminator outputs so the fusion clamps are exercised too
        for d in nets.discs.values():
            last = d.j.layers[-1]
            last.W *= rng.uniform(0.5, 4.0)
            last.b += rng.normal(0.0, 1.0, last.b.shape)
        n = 8
        G = rng.uniform(-1, 1, (n, enc.g_dim))
        X = enc.ego(rng.integers(0, 12, n), rng.uniform(0, 120, n), rng.uniform(0, 15, n)).astype(np.float64)
        d_stop = rng.uniform(-10, 100, n)
        err = check_actor_gradient(nets, G, X, d_stop, float(rng.uniform(0.2, 0.9)), n_coords=2, rng=i)
        worst = max(worst, err)
    dt = time.perf_counter() - t0
    ok = acceptance(3, worst < 1e-4 and dt < 300, f"100 parameter points, max rel err {worst:.2e}, {dt:.1f} s")
    assert ok


# ---------------------------------------------------------------- 4
def test_actor_loss_fixtures(acceptance):
    vals = [float(actor_loss(1.0, 0, 0, 0, 0.1)), float(actor_loss(1.0, 1, 0, 1, 0.1))]
    const = [float(actor_loss(a, 1, 1, 1, 0.0)) for a in np.linspace(-4, 4, 17)]
    slope = actor_loss_grads(np.linspace(-4, 4, 17), 1.0, 1.0, 1.0, 0.0)[0]
    ok = (abs(vals[0] - 0.3) <= 1e-6 and abs(vals[1] - 2.7) <= 1e-6
          and all(abs(c - 8.0) <= 1e-6 for c in const) and np.all(slope == 0.0))
    acceptance(4, ok, f"l = {vals[0]:.6f}, {vals[1]:.6f}, {const[0]:.6f}; constant-sum slope max |{np.abs(slope).max()}|")
    assert ok


# ---------------------------------------------------------------- 5
def test_zero_collisions_every_controller(layout, trained_nets, acceptance):
    t0 = time.perf_counter()
    counts = {}
    for ctl in CONTROLLERS:
        cfg = ExperimentConfig(controller=ctl, flow="medium", desk_scale=0.5, seeds=SEEDS)
        counts[ctl] = [len(evaluate_seed(cfg, s, layout, trained_nets if ctl == "dhal" else None).collisions)
                       for s in SEEDS]
    dt = time.perf_counter() - t0
    total = sum(sum(c) for c in counts.values())
    ok = acceptance(5, total == 0 and dt <= 3600,
                    f"collisions {counts} over 10000 s x 3 seeds at 3600 veh/h, {dt / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------- 6
def _peak_drop(series):
    ma = np.convolve(series, np.ones(5) / 5, mode="valid")
    peak = ma.max()
    return 1.0 - ma[-1] / peak, peak, ma[-1]


def test_training_convergence(trained, acceptance):
    with open(trained / "curves.csv") as fh:
        rows = [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
    cfg = train_config()
    summ = epoch_summary(rows, cfg.epochs)
    actor = np.array([e["actor_loss"] for e in summ])
    final = np.array([e["final_bce"] for e in summ])
    wall = json.loads((trained / "done.json").read_text()).get("wall_seconds")
    da, pa, la = _peak_drop(actor)
    df, pf, lf = _peak_drop(final)
    ok = da >= 0.8 and df >= 0.8 and wall is not None and wall <= 4 * 3600
    acceptance(6, ok, f"actor loss {pa:.3f} -> {la:.3f} ({da:.0%} drop), final BCE {pf:.3f} -> {lf:.3f} "
                      f"({df:.0%} drop), training {wall / 3600 if wall else float('nan'):.2f} h")
    assert ok


# ---------------------------------------------------------------- 7
def test_low_flow_ordering_against_fcfs(layout, trained_nets, acceptance):
    reps, times = {}, {}
    for ctl in ("dhal", "fcfs"):
        t0 = time.perf_counter()
        cfg = ExperimentConfig(controller=ctl, flow="low", desk_scale=0.5, seeds=SEEDS)
        art = run_experiment(cfg, nets=trained_nets if ctl == "dhal" else None)
        reps[ctl] = art.aggregate
        times[ctl] = time.perf_counter() - t0
    d, f = reps["dhal"], reps["fcfs"]
    ok = d.SR < f.SR and d.ATT <= 0.5 * f.ATT and d.DTT < f.DTT and max(times.values()) <= 3600
    acceptance(7, ok, f"SR {d.SR:.1f} vs {f.SR:.1f}, ATT {d.ATT:.2f} vs {f.ATT:.2f}, DTT {d.DTT:.2f} vs {f.DTT:.2f} "
                      f"(D-HAL vs FCFS, 2700 veh/h, 3 seeds)")
    assert ok


# ---------------------------------------------------------------- 8
def test_poisson_arrivals(layout, acceptance):
    rate = 3600.0
    t0 = time.perf_counter()
    world = World(layout, seed=8, total_rate=rate)
    arr = world.arrival.arrivals_until(10_000.0)
    t = np.array([a for a, _ in arr])
    emp = len(t) / 10_000.0 * 3600.0
    gaps = np.diff(np.sort(t))
    # equiprobable bins under the configured exponential
    k = 40
    edges = stats.expon.ppf(np.linspace(0, 1, k + 1), scale=3600.0 / rate)
    obs, _ = np.histogram(gaps, edges)
    chi2, p = stats.chisquare(obs)
    dt = time.perf_counter() - t0
    ok = abs(emp - rate) / rate <= 0.05 and p > 0.01 and dt < 60
    acceptance(8, ok, f"rate {emp:.0f} vs {rate:.0f} veh/h, chi-square {chi2:.1f} on {k - 1} dof, p = {p:.3f}")
    assert ok


# ---------------------------------------------------------------- 9
def test_trip_logs_byte_identical(tmp_path, trained, acceptance):
    t0 = time.perf_counter()
    same = {}
    for ctl in CONTROLLERS:
        cfg = ExperimentConfig(controller=ctl, flow="medium", desk_scale=0.5, seeds=[11], test_episode=500.0,
                               checkpoint=str(trained / "final.ckpt") if ctl == "dhal" else None)
        blobs = []
        for run in ("a", "b"):
            run_experiment(cfg, tmp_path / ctl / run)
            blobs.append((tmp_path / ctl / run / "trips_seed11.csv").read_bytes())
        same[ctl] = blobs[0] == blobs[1] and blobs[0].count(b"\n") > 100
    dt = time.perf_counter() - t0
    ok = all(same.values()) and dt < 300
    acceptance(9, ok, f"identical trip CSVs {same}, {dt:.1f} s")
    assert ok


# ---------------------------------------------------------------- 10
def test_label_fusion_truncation(acceptance):
    rng = np.random.default_rng(10)
    t0 = time.perf_counter()
    c, ac, pc = rng.uniform(0, 1, (3, 10**6))
    fac, fpc = fuse_labels(c, ac, pc, 0.6)
    in_range = bool(np.all((fac >= 0) & (fac <= 1) & (fpc >= 0) & (fpc <= 1)))
    wac, wpc = (float(x) for x in fuse_labels(0.9, 0.8, 0.1, 0.6))
    exact = abs(wac - 0.80) < 1e-12 and abs(wpc - 0.10) < 1e-12
    dt = time.perf_counter() - t0
    ok = in_range and exact and dt < 60
    acceptance(10, ok, f"1e6 triples in [0, 1]: {in_range}; worked example ({wac:.2f}, {wpc:.2f}); {dt:.1f} s")
    assert ok
