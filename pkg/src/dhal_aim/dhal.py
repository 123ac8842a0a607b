"""Hierarchical adversarial learning for intersection speed control.

An actor maps a vehicle's state to an acceleration. Three immediate
discriminators predict whether the (state, action) pair produces a
reservation conflict at the next step and which side of it the vehicle is on;
a final discriminator predicts whether the vehicle's crossing ends badly. The
actor is trained against the frozen discriminators, no reward or value
function involved.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Layout
from .nnet import AdamState, Mlp, load_checkpoint, save_checkpoint
from .reservation import (
    cell_range,
    conflict_index,
    label_all,
    update_table,
    window_arrays,
)
from .simcore import CROSSING, PREPARATION, World

log = logging.getLogger(__name__)

A_MIN, A_MAX = -4.0, 4.0
D_MIN, D_MAX = 0.0, 100.0
ALPHA = 0.6
FEATURES = 4
SENTINEL = (-1.0, -1.0, -1.0, 0.0)


# ---------------------------------------------------------------- state encoding
@dataclass
class StateEncoding:
    G: np.ndarray  # (n_r, n_seg, 4)
    x_r: np.ndarray
    x_d: np.ndarray  # one-hot bins + scalar
    x_v: np.ndarray

    @property
    def ego(self) -> np.ndarray:
        return np.concatenate([self.x_r, self.x_d, self.x_v]).astype(np.float32)

    def flat(self):
        """``(G flattened, ego vector)`` as fed to the networks."""
        return self.G.reshape(-1).astype(np.float32), self.ego


class Encoder:
    """Trajectory raster and ego one-hots, all scaled into [-1, 1]."""

    def __init__(self, layout: Layout, seg: float = 5.0, d_bins: int = 25, d_bin_w: float = 5.0,
                 v_bins: int = 15, v_max: float = 15.0):
        self.layout = layout
        self.n_r = layout.n_r
        self.seg = seg
        self.exit_s = np.array([t.exit_s for t in layout.trajectories])
        self.stop_s = np.array([t.stop_line_s for t in layout.trajectories])
        self.n_seg = int(math.ceil(self.exit_s.max() / seg))
        self.n_cells = self.n_r * self.n_seg
        self.d_bins, self.d_bin_w = d_bins, d_bin_w
        self.v_bins, self.v_max = v_bins, v_max
        self.d_norm = float(self.exit_s.max())
        # heading lookup on a fine grid, radians scaled by pi
        self._hs = 0.05
        grid = np.arange(0.0, self.exit_s.max() + self._hs, self._hs)
        self._head = np.stack([
            np.arctan2(*t.tangent_at(grid).T[::-1]) / np.pi for t in layout.trajectories
        ]).astype(np.float32)

    @property
    def g_dim(self) -> int:
        return self.n_cells * FEATURES

    @property
    def x_dim(self) -> int:
        return self.n_r + self.d_bins + 1 + self.v_bins + 1

    def cells_of(self, traj, s):
        """Flat raster cell of each front bumper, -1 outside the raster."""
        traj, s = np.asarray(traj, np.int64), np.asarray(s, float)
        k = np.floor(s / self.seg).astype(np.int64)
        ok = (s >= 0) & (s < self.exit_s[traj]) & (k < self.n_seg)
        return np.where(ok, traj * self.n_seg + k, -1)

    def raster(self, traj, s, v):
        """Per-cell (distance to stop line, speed, heading) with sentinel for empty cells.

        When two bumpers share a cell the one further along wins.
        """
        traj, s, v = np.asarray(traj, np.int64), np.asarray(s, float), np.asarray(v, float)
        feats = np.tile(np.asarray(SENTINEL[:3], np.float32), (self.n_cells, 1))
        cells = self.cells_of(traj, s)
        ok = cells >= 0
        if ok.any():
            order = np.argsort(s[ok], kind="stable")
            c = cells[ok][order]
            tr, ss, vv = traj[ok][order], s[ok][order], v[ok][order]
            hi = np.clip(np.round(ss / self._hs).astype(np.int64), 0, self._head.shape[1] - 1)
            feats[c, 0] = np.clip((self.stop_s[tr] - ss) / D_MAX, -1, 1)
            feats[c, 1] = np.clip(vv / self.v_max, -1, 1)
            feats[c, 2] = self._head[tr, hi]
        return feats, cells

    def ego(self, traj, s, v):
        traj, s, v = np.atleast_1d(traj).astype(np.int64), np.atleast_1d(s).astype(float), np.atleast_1d(v).astype(float)
        n = len(traj)
        out = np.zeros((n, self.x_dim), np.float32)
        rows = np.arange(n)
        out[rows, traj] = 1.0
        de = self.exit_s[traj] - s
        o = self.n_r
        db = np.clip(np.floor(de / self.d_bin_w), 0, self.d_bins - 1).astype(np.int64)
        out[rows, o + db] = 1.0
        out[:, o + self.d_bins] = np.clip(2 * de / self.d_norm - 1, -1, 1)
        o += self.d_bins + 1
        vb = np.clip(np.floor(v), 0, self.v_bins - 1).astype(np.int64)
        out[rows, o + vb] = 1.0
        out[:, o + self.v_bins] = np.clip(2 * v / self.v_max - 1, -1, 1)
        return out

    def assemble(self, feats, flags):
        """Stack per-ego conflict flags onto shared raster features.

        ``feats`` is (n_cells, 3) or (B, n_cells, 3); ``flags`` is (B, n_cells).
        """
        flags = np.asarray(flags, np.float32)
        B = flags.shape[0]
        if feats.ndim == 2:
            feats = np.broadcast_to(feats, (B,) + feats.shape)
        G = np.empty((B, self.n_cells, FEATURES), np.float32)
        G[..., :3] = feats
        G[..., 3] = flags
        return G.reshape(B, -1)

    def split(self, x):
        o = self.n_r
        return x[:o], x[o:o + self.d_bins + 1], x[o + self.d_bins + 1:]


def encode_state(world: World, vehicle, enc: Encoder, conflicting_ids=()) -> StateEncoding:
    """Encoding of one vehicle; ``conflicting_ids`` are vehicles it conflicts with now."""
    vs = [v for v in world.vehicles.values()]
    traj = [v.traj for v in vs]
    feats, cells = enc.raster(traj, [v.s for v in vs], [v.v for v in vs])
    flags = np.zeros((1, enc.n_cells), np.float32)
    conf = set(conflicting_ids)
    for veh, c in zip(vs, cells):
        if c >= 0 and veh.id in conf:
            flags[0, c] = 1.0
    G = enc.assemble(feats, flags).reshape(enc.n_r, enc.n_seg, FEATURES)
    x = enc.ego(vehicle.traj, vehicle.s, vehicle.v)[0]
    x_r, x_d, x_v = enc.split(x)
    return StateEncoding(G, x_r, x_d, x_v)


# ---------------------------------------------------------------- networks
class BranchNet:
    """Raster branch MLP, concatenated with the ego vector (and action), then a joint MLP."""

    def __init__(self, g: Mlp, j: Mlp):
        self.g, self.j = g, j

    @classmethod
    def create(cls, g_dim, x_dim, out_act, rng, g_sizes=(512, 256, 128), j_sizes=(256, 128),
               with_action=False, dtype=np.float32):
        g = Mlp.create([g_dim, *g_sizes], ["relu"] * len(g_sizes), rng, dtype)
        jin = g_sizes[-1] + x_dim + int(with_action)
        j = Mlp.create([jin, *j_sizes, 1], ["relu"] * len(j_sizes) + [out_act], rng, dtype)
        return cls(g, j)

    @property
    def version(self):
        return (self.g.version, self.j.version)

    def params(self) -> list:
        return self.g.params() + self.j.params()

    def astype(self, dtype) -> "BranchNet":
        return BranchNet(self.g.astype(dtype), self.j.astype(dtype))

    def forward(self, G, X):
        hg, cg = self.g.forward(np.atleast_2d(G))
        z = np.concatenate([hg, np.atleast_2d(X).astype(hg.dtype)], axis=1)
        out, cj = self.j.forward(z)
        return out[:, 0], (cg, cj)

    def __call__(self, G, X):
        return self.forward(G, X)[0]

    def backward(self, cache, grad_out, pre=False, params=True):
        """Parameter gradients (``None`` when ``params`` is False) and the ego/action input gradient."""
        cg, cj = cache
        gj, gz = self.j.backward(cj, np.asarray(grad_out)[:, None], pre=pre)
        n_h = self.g.out_dim
        if not params:
            return None, gz[:, n_h:]
        gg, _ = self.g.backward(cg, gz[:, :n_h])
        return gg + gj, gz[:, n_h:]

    def step(self, state: AdamState, grads) -> bool:
        from .nnet import adam_step

        ok = adam_step(self.params(), state, grads)
        if ok:
            self.g.version += 1
            self.j.version += 1
        return ok

    def signature(self, cache) -> bytes:
        return self.g.relu_signature(cache[0]) + self.j.relu_signature(cache[1])


DISCS = ("c", "ac", "pc", "final")


@dataclass
class DhalNets:
    actor: BranchNet
    discs: dict  # name -> BranchNet with sigmoid output
    alpha: float = ALPHA
    a_min: float = A_MIN
    a_max: float = A_MAX
    d_min: float = D_MIN
    d_max: float = D_MAX

    @classmethod
    def create(cls, enc: Encoder, rng=0, dtype=np.float32, **kw):
        rng = np.random.default_rng(rng)
        actor = BranchNet.create(enc.g_dim, enc.x_dim, "tanh", rng, dtype=dtype)
        discs = {k: BranchNet.create(enc.g_dim, enc.x_dim, "sigmoid", rng, with_action=True, dtype=dtype)
                 for k in DISCS}
        return cls(actor, discs, **kw)

    def astype(self, dtype) -> "DhalNets":
        return DhalNets(self.actor.astype(dtype), {k: d.astype(dtype) for k, d in self.discs.items()},
                        self.alpha, self.a_min, self.a_max, self.d_min, self.d_max)

    def action_input(self, a):
        # discriminators see the action scaled into [-1, 1]
        return np.asarray(a, float)[:, None] / self.a_max

    def as_dict(self) -> dict:
        out = {"actor.g": self.actor.g, "actor.j": self.actor.j}
        for k, d in self.discs.items():
            out[f"{k}.g"], out[f"{k}.j"] = d.g, d.j
        return out

    def save(self, path, meta: dict | None = None):
        save_checkpoint(path, self.as_dict(), json.dumps(meta or {}, sort_keys=True).encode())

    @classmethod
    def load(cls, path):
        nets, meta = load_checkpoint(path)
        actor = BranchNet(nets["actor.g"], nets["actor.j"])
        discs = {k: BranchNet(nets[f"{k}.g"], nets[f"{k}.j"]) for k in DISCS}
        return cls(actor, discs), json.loads(meta.decode() or "{}")


def project_action(y, a_min=A_MIN, a_max=A_MAX):
    """Map a tanh output to an acceleration."""
    return a_min + (a_max - a_min) * (np.asarray(y) + 1.0) / 2.0


def act(nets: DhalNets, G, X):
    y = nets.actor(G, X)
    return project_action(y, nets.a_min, nets.a_max)


def fuse_labels(L_C, L_AC_p, L_PC_p, alpha=ALPHA):
    """Fused active/passive labels, each built from the raw primed predictions."""
    L_C, L_AC_p, L_PC_p = (np.asarray(x, float) for x in (L_C, L_AC_p, L_PC_p))
    ac = np.clip(alpha * L_AC_p + (1 - alpha) * (L_C - L_PC_p), 0.0, 1.0)
    pc = np.clip(alpha * L_PC_p + (1 - alpha) * (L_C - L_AC_p), 0.0, 1.0)
    return ac, pc


def beta(d_t, d_min=D_MIN, d_max=D_MAX, gamma=0.2):
    if d_max == d_min:
        raise ValueError("d_max must differ from d_min")
    d = np.clip(np.asarray(d_t, float), min(d_min, d_max), max(d_min, d_max))
    return gamma * (d - d_min) / (d_max - d_min)


def actor_loss(a, L_PC, L_AC, delta, b, a_min=A_MIN, a_max=A_MAX):
    """Per-sample loss: an efficiency term plus a priority-aware safety term."""
    a, L_PC, L_AC, delta, b = (np.asarray(x, float) for x in (a, L_PC, L_AC, delta, b))
    eff = b * (1 - L_PC) * (1 - L_AC) * (a_max - a)
    safe = (1 - b) * delta * ((a_max - a) * L_PC + (a - a_min) * L_AC)
    return eff + safe


def actor_loss_grads(a, L_PC, L_AC, delta, b, a_min=A_MIN, a_max=A_MAX):
    """Partial derivatives of :func:`actor_loss` w.r.t. ``(a, L_PC, L_AC, delta)``."""
    da = -b * (1 - L_PC) * (1 - L_AC) + (1 - b) * delta * (L_AC - L_PC)
    dpc = -b * (1 - L_AC) * (a_max - a) + (1 - b) * delta * (a_max - a)
    dac = -b * (1 - L_PC) * (a_max - a) + (1 - b) * delta * (a - a_min)
    dd = (1 - b) * ((a_max - a) * L_PC + (a - a_min) * L_AC)
    return da, dpc, dac, dd


def composite_actor_loss(nets: DhalNets, G, X, d_stop, gamma, grads=True):
    """Mean actor loss through the frozen discriminators.

    Returns ``(loss, actor param grads or None, info)``.
    """
    y, ca = nets.actor.forward(G, X)
    a = project_action(y, nets.a_min, nets.a_max)
    Xa = np.concatenate([np.atleast_2d(X), nets.action_input(a).astype(X.dtype)], axis=1)
    outs, caches = {}, {}
    for k, d in nets.discs.items():
        outs[k], caches[k] = d.forward(G, Xa)
    al = nets.alpha
    raw_ac = al * outs["ac"] + (1 - al) * (outs["c"] - outs["pc"])
    raw_pc = al * outs["pc"] + (1 - al) * (outs["c"] - outs["ac"])
    AC, PC = np.clip(raw_ac, 0, 1), np.clip(raw_pc, 0, 1)
    b = beta(d_stop, nets.d_min, nets.d_max, gamma)
    dl = outs["final"]
    losses = actor_loss(a, PC, AC, dl, b, nets.a_min, nets.a_max)
    n = len(losses)
    loss = float(losses.mean())
    info = {"a": a, "AC": AC, "PC": PC, "delta": dl, "sig": (ca, caches, raw_ac, raw_pc)}
    if not grads:
        return loss, None, info
    da, dpc, dac, dd = actor_loss_grads(a, PC, AC, dl, b, nets.a_min, nets.a_max)
    m_ac = ((raw_ac > 0) & (raw_ac < 1)).astype(float)
    m_pc = ((raw_pc > 0) & (raw_pc < 1)).astype(float)
    g_out = {
        "c": dac * (1 - al) * m_ac + dpc * (1 - al) * m_pc,
        "ac": dac * al * m_ac - dpc * (1 - al) * m_pc,
        "pc": -dac * (1 - al) * m_ac + dpc * al * m_pc,
        "final": dd,
    }
    total = da.copy()
    for k, d in nets.discs.items():
        _, gin = d.backward(caches[k], (g_out[k] / n).astype(X.dtype), params=False)
        total += gin[:, -1] * n / nets.a_max
    gy = total / n * (nets.a_max - nets.a_min) / 2.0
    pgrads, _ = nets.actor.backward(ca, gy.astype(X.dtype))
    return loss, pgrads, info


def composite_signature(nets: DhalNets, info) -> bytes:
    """Relu patterns and clamp regions; finite differences must not cross them."""
    ca, caches, raw_ac, raw_pc = info["sig"]
    parts = [nets.actor.signature(ca)] + [nets.discs[k].signature(caches[k]) for k in DISCS]
    parts.append(((raw_ac > 0) & (raw_ac < 1)).tobytes())
    parts.append(((raw_pc > 0) & (raw_pc < 1)).tobytes())
    return b"".join(parts)


def check_actor_gradient(nets: DhalNets, G, X, d_stop, gamma, n_coords=100, h=1e-5, rng=None) -> float:
    """Max relative error of the actor gradient against central differences.

    Use float64 nets; coordinates whose perturbation crosses a relu kink or a
    fusion clamp boundary are resampled.
    """
    from .nnet import grad_check

    _, grads, _ = composite_actor_loss(nets, G, X, d_stop, gamma)

    def loss():
        return composite_actor_loss(nets, G, X, d_stop, gamma, grads=False)[0]

    def sig():
        return composite_signature(nets, composite_actor_loss(nets, G, X, d_stop, gamma, grads=False)[2])

    return grad_check(nets.actor.params(), loss, grads, n_coords, h, rng, signature=sig)


def bce(p, y, eps=1e-7):
    p = np.clip(np.asarray(p, float), eps, 1 - eps)
    y = np.asarray(y, float)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


# ---------------------------------------------------------------- behavior mechanisms
def gamma_schedule(progress: float, start=0.9, end=0.2, frac=0.5) -> float:
    """Linear from ``start`` to ``end`` over the first ``frac`` of training."""
    if progress >= frac:
        return end
    return start + (end - start) * max(progress, 0.0) / frac


def state_maintenance(L_C, v, a_proposed, v_keep=3.0):
    """Hold speed when conflict-free and moving at least ``v_keep``."""
    L_C, v, a = np.asarray(L_C), np.asarray(v, float), np.asarray(a_proposed, float)
    out = np.where((L_C == 0) & (v >= v_keep), 0.0, a)
    return float(out) if out.ndim == 0 else out


def _roll(s, v, a, k, dt=0.1, substeps=2, v_max=15.0):
    for _ in range(k * substeps):
        v = np.clip(v + a * dt, 0.0, v_max)
        s = s + v * dt
    return s, v


def action_mask(table, vehicles, egos, a_proposed, layout: Layout, K=5, eps=1.0, dt_cell=0.2,
                T_r=100.0, action_dt=0.2):
    """Zero out actions that create a conflict pair persisting through the lookahead.

    ``vehicles`` are all table members (id, traj, s, v, length); ``egos`` the
    ids under control with ``a_proposed`` aligned to them. Opponents move at
    constant speed. Returns the final actions and the masked flags.
    """
    a_proposed = np.asarray(a_proposed, float)
    masked = np.zeros(len(egos), bool)
    if len(egos) == 0 or len(vehicles) < 2:
        return a_proposed.copy(), masked
    idx = conflict_index(layout)
    ids = np.array([v.id for v in vehicles], np.int64)
    traj = np.array([v.traj for v in vehicles], np.int64)
    s = np.array([v.s for v in vehicles], float)
    vv = np.array([v.v for v in vehicles], float)
    ln = np.array([getattr(v, "length", 5.0) for v in vehicles], float)
    pos = {int(x): i for i, x in enumerate(ids)}
    ego_rows = np.array([pos[e] for e in egos], np.int64)
    acc = np.zeros(len(vehicles))
    is_ego = np.zeros(len(vehicles), bool)
    acc[ego_rows] = a_proposed
    is_ego[ego_rows] = True

    rows, flat = idx.expand(traj)
    cid = idx.cid[flat]
    arc = idx.arc[flat]
    # join entries sharing a conflict point: ego entry x any other-trajectory entry
    order = np.argsort(cid, kind="stable")
    e_list, f_list = [], []
    cs = cid[order]
    bounds = np.flatnonzero(np.diff(cs)) + 1
    for grp in np.split(order, bounds):
        if len(grp) < 2:
            continue
        g_rows = rows[grp]
        ego_m = is_ego[g_rows]
        if not ego_m.any():
            continue
        ee, ff = np.meshgrid(grp[ego_m], grp, indexing="ij")
        ee, ff = ee.ravel(), ff.ravel()
        keep = traj[rows[ee]] != traj[rows[ff]]
        e_list.append(ee[keep])
        f_list.append(ff[keep])
    if not e_list:
        return a_proposed.copy(), masked
    E, F = np.concatenate(e_list), np.concatenate(f_list)
    if len(E) == 0:
        return a_proposed.copy(), masked
    re, rf = rows[E], rows[F]
    key = ids[re] * (ids.max() + 1) + ids[rf]
    ukey, inv = np.unique(key, return_inverse=True)
    current = set(table.pairs)
    a_id, b_id = ids[re], ids[rf]
    is_new = np.array([(min(x, y), max(x, y)) not in current
                       for x, y in zip(ukey // (ids.max() + 1), ukey % (ids.max() + 1))])
    persist = is_new.copy()
    for k in range(1, K + 1):
        if not persist.any():
            break
        s_k = np.where(is_ego, 0.0, s + vv * action_dt * k)
        v_k = vv.copy()
        if is_ego.any():
            se, ve = _roll(s[is_ego], vv[is_ego], acc[is_ego], k)
            s_k[is_ego], v_k[is_ego] = se, ve
        t1e, t2e, _ = window_arrays(arc[E] - s_k[re], ln[re], v_k[re], eps, T_r)
        t1f, t2f, _ = window_arrays(arc[F] - s_k[rf], ln[rf], v_k[rf], eps, T_r)
        k1e, k2e = cell_range(t1e, t2e, dt_cell)
        k1f, k2f = cell_range(t1f, t2f, dt_cell)
        ov = (k1e < k2f) & (k1f < k2e)
        hit = np.bincount(inv, weights=ov.astype(float), minlength=len(ukey)) > 0
        persist &= hit
    bad_egos = set(int(x) for x in (ukey[persist] // (ids.max() + 1)))
    out = a_proposed.copy()
    for i, e in enumerate(egos):
        if e in bad_egos:
            masked[i] = True
            out[i] = 0.0
    del a_id, b_id
    return out, masked


# ---------------------------------------------------------------- memory palace
@dataclass
class StepRecord:
    """One control step of one vehicle, labels filled in at the next step."""

    snap: int
    flags: np.ndarray  # packed bits over raster cells
    traj: int
    s: float
    v: float
    a: float
    L_AC: int | None = None
    L_PC: int | None = None


@dataclass
class Batch:
    G: np.ndarray
    X: np.ndarray
    a: np.ndarray
    L_C: np.ndarray
    L_AC: np.ndarray
    L_PC: np.ndarray
    delta: np.ndarray
    d_stop: np.ndarray


class MemoryPalace:
    """Ring buffer of experiences with raster snapshots shared across vehicles.

    Each experience keeps its ego kinematics, a packed conflict-flag mask and
    a reference to the raster snapshot of its step; batches are rebuilt on
    sampling. Experiences whose snapshot has been recycled are skipped.
    """

    def __init__(self, enc: Encoder, capacity: int = 10**6, snap_capacity: int = 50_000):
        self.enc = enc
        self.capacity = capacity
        self.snap_capacity = snap_capacity
        nb = (enc.n_cells + 7) // 8
        self._snap = np.zeros(capacity, np.int64)
        self._flags = np.zeros((capacity, nb), np.uint8)
        self._traj = np.zeros(capacity, np.int16)
        self._s = np.zeros(capacity, np.float32)
        self._v = np.zeros(capacity, np.float32)
        self._a = np.zeros(capacity, np.float32)
        self._ac = np.zeros(capacity, np.uint8)
        self._pc = np.zeros(capacity, np.uint8)
        self._delta = np.zeros(capacity, np.uint8)
        self._feats = np.zeros((snap_capacity, enc.n_cells, 3), np.float16)
        self.n_snaps = 0
        self.size = 0
        self.head = 0  # next write slot
        self.total = 0

    def add_snapshot(self, feats) -> int:
        sid = self.n_snaps
        self._feats[sid % self.snap_capacity] = feats
        self.n_snaps += 1
        return sid

    @property
    def min_valid_snap(self) -> int:
        return max(0, self.n_snaps - self.snap_capacity)

    def __len__(self):
        return self.size

    def push_trajectory(self, records, delta: int):
        """Append every step of one vehicle with the shared outcome label."""
        for r in records:
            i = self.head
            self._snap[i] = r.snap
            self._flags[i] = r.flags
            self._traj[i] = r.traj
            self._s[i] = r.s
            self._v[i] = r.v
            self._a[i] = r.a
            self._ac[i] = r.L_AC or 0
            self._pc[i] = r.L_PC or 0
            self._delta[i] = int(delta)
            self.head = (i + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)
            self.total += 1

    def order(self) -> np.ndarray:
        """Slot indices from oldest to newest."""
        start = (self.head - self.size) % self.capacity
        return (start + np.arange(self.size)) % self.capacity

    def _valid(self, slots):
        return self._snap[slots] >= self.min_valid_snap

    def sample(self, rng, n: int, recent: int | None = None) -> Batch:
        """Uniform batch, optionally from the ``recent`` newest experiences only."""
        if self.size == 0:
            raise ValueError("empty memory palace")
        span = self.size if recent is None else min(recent, self.size)
        start = (self.head - span) % self.capacity
        slots = (start + rng.integers(0, span, n)) % self.capacity
        bad = ~self._valid(slots)
        if bad.any():
            pool = (start + np.arange(span)) % self.capacity
            pool = pool[self._valid(pool)]
            if len(pool) == 0:
                raise ValueError("no experience with a live snapshot")
            slots[bad] = pool[rng.integers(0, len(pool), int(bad.sum()))]
        return self.batch(slots)

    def batch(self, slots) -> Batch:
        enc = self.enc
        feats = self._feats[self._snap[slots] % self.snap_capacity].astype(np.float32)
        flags = np.unpackbits(self._flags[slots], axis=1, count=enc.n_cells)
        G = enc.assemble(feats, flags)
        traj = self._traj[slots].astype(np.int64)
        s, v = self._s[slots].astype(float), self._v[slots].astype(float)
        X = enc.ego(traj, s, v)
        ac, pc = self._ac[slots].astype(np.float32), self._pc[slots].astype(np.float32)
        return Batch(G, X, self._a[slots].copy(), np.minimum(ac + pc, 1), ac, pc,
                     self._delta[slots].astype(np.float32), enc.stop_s[traj] - s)


def push_trajectory(palace: MemoryPalace, records, delta: int) -> MemoryPalace:
    palace.push_trajectory(records, delta)
    return palace


# ---------------------------------------------------------------- training steps
@dataclass
class Optimizers:
    actor: AdamState
    discs: dict

    @classmethod
    def for_nets(cls, nets: DhalNets, lr_actor=1e-5, lr_disc=1e-5):
        return cls(AdamState.for_params(nets.actor.params(), lr=lr_actor),
                   {k: AdamState.for_params(d.params(), lr=lr_disc) for k, d in nets.discs.items()})


def train_discriminators(nets: DhalNets, opt: Optimizers, batch: Batch) -> dict:
    """One BCE/Adam step per discriminator; returns the pre-update losses."""
    Xa = np.concatenate([batch.X, nets.action_input(batch.a).astype(np.float32)], axis=1)
    targets = {"c": batch.L_C, "ac": batch.L_AC, "pc": batch.L_PC, "final": batch.delta}
    out = {}
    for k, d in nets.discs.items():
        p, cache = d.forward(batch.G, Xa)
        y = targets[k]
        out[k] = bce(p, y)
        g, _ = d.backward(cache, ((p - y) / len(y)).astype(p.dtype), pre=True)
        d.step(opt.discs[k], g)
    return out


def train_actor(nets: DhalNets, opt: Optimizers, batch: Batch, gamma: float) -> float:
    """One Adam step on the actor; discriminators stay frozen."""
    loss, grads, _ = composite_actor_loss(nets, batch.G, batch.X, batch.d_stop, gamma)
    if not math.isfinite(loss):
        return loss
    nets.actor.step(opt.actor, grads)
    return loss


# ---------------------------------------------------------------- controller
class DhalController:
    """Runs the actor inside a world; optionally records experiences for training."""

    name = "dhal"
    policy = None
    group_fn = None

    def __init__(self, nets: DhalNets, layout: Layout, enc: Encoder | None = None, palace=None,
                 rng=None, noise: float = 0.0, v_keep: float = 3.0, K: int = 5, eps: float = 1.0,
                 dt_cell: float = 0.2, T_r: float = 100.0, use_mask: bool = True,
                 use_maintenance: bool = True):
        self.nets = nets
        self.layout = layout
        self.enc = enc or Encoder(layout)
        self.palace = palace
        self.rng = np.random.default_rng(rng)
        self.noise = noise
        self.v_keep, self.K, self.eps, self.dt_cell, self.T_r = v_keep, K, eps, dt_cell, T_r
        self.use_mask, self.use_maintenance = use_mask, use_maintenance
        self.prev_table = None
        self.pending: dict = {}  # vehicle id -> list[StepRecord]
        self._awaiting: list = []  # records from the last step, labels not yet known
        self.stats = {"masked": 0, "maintained": 0, "controlled": 0}

    def attach(self, world: World):
        world.on_finish = self.on_finish

    def _members(self, world):
        return [v for v in world.vehicles.values() if v.zone in (PREPARATION, CROSSING)]

    def actions(self, world: World) -> dict:
        members = self._members(world)
        table, conflicted = update_table(members, self.layout, self.eps, self.dt_cell, self.T_r, world.t)
        if self._awaiting:
            labels, _ = label_all(table, self.prev_table, self.layout)
            for r_vid, rec in self._awaiting:
                lab = labels.get(r_vid)
                rec.L_AC = lab.L_AC if lab else 0
                rec.L_PC = lab.L_PC if lab else 0
            self._awaiting = []
        self.prev_table = table

        egos = [v for v in members if v.zone == PREPARATION and not v.admitted]
        if not egos:
            return {}
        feats, cells = self.enc.raster([v.traj for v in world.vehicles.values()],
                                       [v.s for v in world.vehicles.values()],
                                       [v.v for v in world.vehicles.values()])
        cell_of = {v.id: c for v, c in zip(world.vehicles.values(), cells)}
        partners: dict = {}
        for a, b in table.pairs:
            partners.setdefault(a, []).append(b)
            partners.setdefault(b, []).append(a)
        flags = np.zeros((len(egos), self.enc.n_cells), np.uint8)
        for i, e in enumerate(egos):
            for o in partners.get(e.id, ()):
                c = cell_of.get(o, -1)
                if c >= 0:
                    flags[i, c] = 1
        G = self.enc.assemble(feats, flags)
        X = self.enc.ego([e.traj for e in egos], [e.s for e in egos], [e.v for e in egos])
        a = np.asarray(act(self.nets, G, X), float)
        if self.noise > 0:
            a = np.clip(a + self.rng.normal(0.0, self.noise, len(a)), self.nets.a_min, self.nets.a_max)
        if self.use_maintenance:
            L_C = np.array([int(e.id in conflicted) for e in egos])
            v = np.array([e.v for e in egos])
            keep = (L_C == 0) & (v >= self.v_keep)
            self.stats["maintained"] += int(keep.sum())
            a = np.where(keep, 0.0, a)
        if self.use_mask:
            a, masked = action_mask(table, members, [e.id for e in egos], a, self.layout, self.K,
                                    self.eps, self.dt_cell, self.T_r)
            self.stats["masked"] += int(masked.sum())
        self.stats["controlled"] += len(egos)
        if self.palace is not None:
            snap = self.palace.add_snapshot(feats)
            packed = np.packbits(flags, axis=1)
            self._step_records = [
                (e.id, StepRecord(snap, packed[i], e.traj, e.s, e.v, float(a[i])))
                for i, e in enumerate(egos)
            ]
        return {e.id: float(a[i]) for i, e in enumerate(egos)}

    def post_step(self, world: World):
        """Store the acceleration actually applied and queue records for labelling."""
        recs = getattr(self, "_step_records", None)
        if not recs:
            return
        for vid, rec in recs:
            rec.a = float(np.clip(world.last_accel.get(vid, rec.a), self.nets.a_min, self.nets.a_max))
            self.pending.setdefault(vid, []).append(rec)
            self._awaiting.append((vid, rec))
        self._step_records = []

    def on_finish(self, veh, trip):
        recs = self.pending.pop(veh.id, [])
        if self.palace is None or not recs:
            return
        delta = int(trip.outcome == "collided")
        self.palace.push_trajectory(recs, delta)


# ---------------------------------------------------------------- training loop
@dataclass
class TrainConfig:
    epochs: int = 100
    episode: float = 300.0
    cycle: int = 15
    # (first epoch in cycle, last epoch in cycle, rate lo, rate hi) in veh/h
    curriculum: tuple = ((1, 9, 6000.0, 7200.0), (10, 12, 7200.0, 8400.0), (13, 15, 8400.0, 9600.0))
    desk_scale: float = 1.0
    batch: int = 256
    buffer: int = 10**6
    lr_actor: float = 1e-5
    lr_disc: float = 1e-5
    alpha: float = ALPHA
    gamma_start: float = 0.9
    gamma_end: float = 0.2
    gamma_frac: float = 0.5
    update_every: int = 8
    fresh_window: int = 20_000
    noise_start: float = 1.0
    noise_end: float = 0.3
    v_keep: float = 3.0
    K: int = 5
    seed: int = 0
    net_seed: int = 0

    def rate_range(self, epoch: int):
        pos = (epoch - 1) % self.cycle + 1
        for lo_e, hi_e, lo, hi in self.curriculum:
            if lo_e <= pos <= hi_e:
                return lo * self.desk_scale, hi * self.desk_scale
        raise ValueError(f"epoch position {pos} not covered by the curriculum")


CURVE_FIELDS = ("step", "epoch", "gamma", "actor_loss", "imm_bce", "final_bce", "bce_c", "bce_ac", "bce_pc")


@dataclass
class TrainResult:
    nets: DhalNets
    curves: list = field(default_factory=list)
    epochs: list = field(default_factory=list)


def epoch_summary(curves: list, n_epochs: int) -> list:
    """Per-epoch mean actor loss and final BCE from curve rows."""
    out = []
    for e in range(1, n_epochs + 1):
        rows = [r for r in curves if r["epoch"] == e]
        if not rows:
            out.append({"epoch": e, "actor_loss": None, "final_bce": None, "imm_bce": None})
            continue
        out.append({
            "epoch": e,
            "actor_loss": float(np.mean([r["actor_loss"] for r in rows])),
            "final_bce": float(np.mean([r["final_bce"] for r in rows])),
            "imm_bce": float(np.mean([r["imm_bce"] for r in rows])),
        })
    return out


def run_training(cfg: TrainConfig, layout: Layout, out_dir=None, nets: DhalNets | None = None,
                 progress=None) -> TrainResult:
    """Curriculum training; writes curves and checkpoints under ``out_dir`` when given."""
    from pathlib import Path

    enc = Encoder(layout)
    nets = nets or DhalNets.create(enc, cfg.net_seed, alpha=cfg.alpha)
    opt = Optimizers.for_nets(nets, cfg.lr_actor, cfg.lr_disc)
    palace = MemoryPalace(enc, cfg.buffer)
    rng = np.random.default_rng([cfg.seed, 7])
    steps_per_epoch = int(round(cfg.episode / 0.2))
    total_steps = max(cfg.epochs * steps_per_epoch, 1)
    result = TrainResult(nets)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    gstep = 0
    for epoch in range(1, cfg.epochs + 1):
        lo, hi = cfg.rate_range(epoch)
        rate = float(rng.uniform(lo, hi))
        world = World(layout, seed=cfg.seed * 100_003 + epoch, total_rate=rate)
        frac0 = (epoch - 1) / cfg.epochs
        noise = cfg.noise_start + (cfg.noise_end - cfg.noise_start) * frac0
        ctl = DhalController(nets, layout, enc, palace, rng=[cfg.seed, epoch, 3], noise=noise,
                             v_keep=cfg.v_keep, K=cfg.K)
        ctl.attach(world)
        for _ in range(steps_per_epoch):
            world.spawn()
            acts = ctl.actions(world)
            world.step(acts)
            ctl.post_step(world)
            gstep += 1
            if gstep % cfg.update_every == 0 and len(palace) >= cfg.batch:
                gamma = gamma_schedule(gstep / total_steps, cfg.gamma_start, cfg.gamma_end, cfg.gamma_frac)
                d_loss = train_discriminators(nets, opt, palace.sample(rng, cfg.batch))
                a_loss = train_actor(nets, opt, palace.sample(rng, cfg.batch, cfg.fresh_window), gamma)
                row = {
                    "step": gstep, "epoch": epoch, "gamma": gamma, "actor_loss": a_loss,
                    "imm_bce": (d_loss["c"] + d_loss["ac"] + d_loss["pc"]) / 3,
                    "final_bce": d_loss["final"], "bce_c": d_loss["c"], "bce_ac": d_loss["ac"],
                    "bce_pc": d_loss["pc"],
                }
                if not all(math.isfinite(v) for v in row.values()):
                    if out is not None:
                        nets.save(out / "abort.ckpt", {"epoch": epoch, "step": gstep})
                    raise FloatingPointError(f"non-finite training loss at step {gstep}")
                result.curves.append(row)
        world.close()
        summ = {"epoch": epoch, "rate": rate, "collisions": len(world.collisions),
                "refused": int(sum(t.refused > 0 for t in world.trip_log)),
                "trips": len(world.trip_log), "palace": len(palace), **ctl.stats}
        result.epochs.append(summ)
        log.info("epoch %d rate %.0f trips %d refused %d palace %d", epoch, rate, summ["trips"],
                 summ["refused"], len(palace))
        if progress is not None:
            progress(summ)
        if out is not None:
            nets.save(out / "latest.ckpt", {"epoch": epoch, "step": gstep})
    if out is not None:
        nets.save(out / "final.ckpt", {"epoch": cfg.epochs, "step": gstep})
        with open(out / "curves.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, CURVE_FIELDS, lineterminator="\n")
            w.writeheader()
            for r in result.curves:
                w.writerow(r)
    return result
