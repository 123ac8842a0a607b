"""Experiment orchestration and the ``dhal-aim`` command line.

    dhal-aim train --desk-scale 0.5 --out runs/train
    dhal-aim test --controller fcfs --flow low --seeds 0 1 2 --out runs/fcfs
    dhal-aim test --controller dhal --checkpoint runs/train/final.ckpt --out runs/dhal
    dhal-aim layout-dump --out runs/layout.json
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .baselines import make_controller
from .dhal import DhalController, DhalNets, Encoder, TrainConfig, run_training
from .geometry import LayoutConfig, build_layout
from .metrics import MetricsReport, aggregate, compute_report
from .simcore import SimParams, TripRecord, World

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CONTROLLERS = ("dhal", "ft", "lqf", "fcfs", "platoon")
FLOWS = {"low": 5400.0, "medium": 7200.0, "high": 9000.0}
FT_CYCLES = {"low": 60.0, "medium": 90.0, "high": 120.0}
METRICS_COLUMNS = ("controller", "flow", "rate", "seed") + MetricsReport.FIELDS


@dataclass
class ExperimentConfig:
    controller: str = "dhal"
    mode: str = "test"
    flow: str = "low"
    rate: float | None = None  # explicit veh/h, overrides ``flow``
    desk_scale: float = 1.0
    seeds: list = field(default_factory=lambda: [0])
    # environment
    train_episode: float = 300.0
    test_episode: float = 10000.0
    drain: float = 120.0
    control_distance: float = 100.0
    sim_step: float = 0.1
    action_step: float = 0.2
    vehicle_length: float = 5.0
    vehicle_width: float = 1.8
    v_max: float = 15.0
    a_max: float = 4.0
    # model
    epochs: int = 100
    batch_size: int = 256
    buffer_size: int = 1_000_000
    actor_lr: float = 1e-5
    disc_lr: float = 1e-5
    optimizer: str = "adam"
    alpha: float = 0.6
    gamma: float = 0.2
    gamma_start: float = 0.9
    T_r: float = 100.0
    # controller specific
    ft_cycle: float | None = None  # defaults by flow level
    lqf_min_green: float = 5.0
    platoon_size: int = 8
    platoon_gap: float = 20.0
    platoon_headway: float = 1.0
    checkpoint: str | None = None

    def validate(self):
        if self.controller not in CONTROLLERS:
            raise ValueError(f"unknown controller {self.controller!r}")
        if self.mode not in ("train", "test"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "train" and self.controller != "dhal":
            raise ValueError(f"controller {self.controller!r} has nothing to train")
        if self.rate is None and self.flow not in FLOWS:
            raise ValueError(f"unknown flow level {self.flow!r}")
        if self.controller == "ft" and self.rate is not None and self.ft_cycle is None:
            raise ValueError("ft with an explicit rate needs ft_cycle")
        if not 0 < self.desk_scale <= 1:
            raise ValueError("desk_scale must be in (0, 1]")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.optimizer != "adam":
            raise ValueError("only adam is implemented")
        return self

    @property
    def arrival_rate(self) -> float:
        base = self.rate if self.rate is not None else FLOWS[self.flow]
        return base * self.desk_scale

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def sim_params(self) -> SimParams:
        return SimParams(dt=self.sim_step, action_dt=self.action_step, v_max=self.v_max,
                         a_max=self.a_max, a_min=-self.a_max, length=self.vehicle_length,
                         width=self.vehicle_width)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, episode=self.train_episode, desk_scale=self.desk_scale,
                           batch=self.batch_size, buffer=self.buffer_size, lr_actor=self.actor_lr,
                           lr_disc=self.disc_lr, alpha=self.alpha, gamma_start=self.gamma_start,
                           gamma_end=self.gamma, seed=seed, net_seed=seed)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(yaml.safe_load(fh) or {})


def _layout(cfg: ExperimentConfig):
    return build_layout(LayoutConfig(prep_depth=cfg.control_distance))


@dataclass
class RunArtifacts:
    config: ExperimentConfig
    rows: list = field(default_factory=list)  # (key dict, MetricsReport)
    aggregate: MetricsReport | None = None
    trips: dict = field(default_factory=dict)  # seed -> list[TripRecord]
    curves: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    nets: DhalNets | None = None

    def manifest(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "config": self.config.to_dict(),
            "config_hash": self.config.digest(),
            "seeds": list(self.config.seeds),
            "code_version": code_version(),
            "python": platform.python_version(),
            "numpy": np.__version__,
        }


def code_version() -> str:
    """Hash of the package sources, so a manifest pins the exact code."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def load_nets(cfg: ExperimentConfig) -> DhalNets:
    if not cfg.checkpoint:
        raise ValueError("testing dhal needs a checkpoint")
    if not Path(cfg.checkpoint).exists():
        raise FileNotFoundError(cfg.checkpoint)
    return DhalNets.load(cfg.checkpoint)[0]


def make_test_controller(cfg: ExperimentConfig, layout, nets: DhalNets | None = None):
    if cfg.controller == "dhal":
        nets = nets or load_nets(cfg)
        return DhalController(nets, layout, Encoder(layout), T_r=cfg.T_r)
    if cfg.controller == "ft":
        cycle = cfg.ft_cycle if cfg.ft_cycle is not None else FT_CYCLES[cfg.flow]
        return make_controller("ft", layout, cycle=cycle)
    return make_controller(cfg.controller, layout, min_green=cfg.lqf_min_green, max_size=cfg.platoon_size,
                           join_gap=cfg.platoon_gap, headway=cfg.platoon_headway)


def run_episode(world: World, ctl, duration: float, drain: float = 0.0):
    """Drive ``world`` for ``duration`` seconds with arrivals, then ``drain`` without."""
    if hasattr(ctl, "attach"):
        ctl.attach(world)
    n = int(round(duration / world.p.action_dt))
    n_drain = int(round(drain / world.p.action_dt))
    for k in range(n + n_drain):
        world.spawn(arrivals=k < n)
        world.step(ctl.actions(world), ctl.policy, ctl.group_fn)
        if hasattr(ctl, "post_step"):
            ctl.post_step(world)
        if k >= n and not world.vehicles and not any(world._pending.values()):
            break
    world.close()
    return world


def evaluate_seed(cfg: ExperimentConfig, seed: int, layout=None, nets=None):
    layout = layout or _layout(cfg)
    world = World(layout, cfg.sim_params(), seed=seed, total_rate=cfg.arrival_rate)
    ctl = make_test_controller(cfg, layout, nets)
    run_episode(world, ctl, cfg.test_episode, cfg.drain)
    return world


def _seed_job(cfg_dict: dict, seed: int, nets):
    cfg = ExperimentConfig.from_dict(cfg_dict)
    world = evaluate_seed(cfg, seed, nets=nets)
    return compute_report(world.trip_log), world.trip_log, len(world.collisions)


def run_experiment(cfg: ExperimentConfig, out_dir=None, nets: DhalNets | None = None,
                   workers: int = 1) -> RunArtifacts:
    """Train, or test over every seed; ``workers`` > 1 fans seeds out to processes."""
    cfg.validate()
    layout = _layout(cfg)
    art = RunArtifacts(cfg)
    if cfg.mode == "train":
        seed = cfg.seeds[0]
        res = run_training(cfg.train_config(seed), layout, out_dir)
        art.curves, art.epochs, art.nets = res.curves, res.epochs, res.nets
    else:
        if cfg.controller == "dhal" and nets is None:
            nets = load_nets(cfg)
        if workers > 1 and len(cfg.seeds) > 1:
            with ProcessPoolExecutor(min(workers, len(cfg.seeds))) as pool:
                jobs = [pool.submit(_seed_job, cfg.to_dict(), s, nets) for s in cfg.seeds]
                results = [j.result() for j in jobs]
        else:
            results = [_seed_job(cfg.to_dict(), s, nets) for s in cfg.seeds]
        for seed, (rep, trips, n_coll) in zip(cfg.seeds, results):
            key = {"controller": cfg.controller, "flow": cfg.flow if cfg.rate is None else "custom",
                   "rate": cfg.arrival_rate, "seed": seed}
            art.rows.append((key, rep))
            art.trips[seed] = trips
            log.info("%s seed %d: %s collisions %d", cfg.controller, seed, rep.row(), n_coll)
        art.aggregate = aggregate([r for _, r in art.rows])
    if out_dir is not None:
        export(art, out_dir)
    return art


# ---------------------------------------------------------------- export
def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for key, rep in rows:
        r = rep.row()
        w.writerow([key[c] for c in METRICS_COLUMNS[:4]] +
                   ["" if r[f] is None else r[f] for f in MetricsReport.FIELDS])
    return buf.getvalue()


def trips_csv(trips) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TripRecord.CSV_FIELDS)
    for t in trips:
        w.writerow(t.csv_row())
    return buf.getvalue()


def export(art: RunArtifacts, path) -> list:
    """Write manifest, metrics and trip logs under ``path``; returns the files written."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, text):
        (out / name).write_text(text)
        written.append(out / name)

    put("manifest.json", json.dumps(art.manifest(), indent=2, sort_keys=True))
    if art.rows:
        put("metrics.csv", metrics_csv(art.rows))
        doc = {
            "schema_version": SCHEMA_VERSION,
            "rows": [{"key": k, "report": asdict(r)} for k, r in art.rows],
            "aggregate": asdict(art.aggregate) if art.aggregate else None,
        }
        put("metrics.json", json.dumps(doc, indent=2, sort_keys=True))
        for seed, trips in art.trips.items():
            put(f"trips_seed{seed}.csv", trips_csv(trips))
    if art.epochs:
        put("epochs.json", json.dumps(art.epochs, indent=2))
    return written


def read_metrics_json(path) -> tuple:
    """``([(key, MetricsReport)], aggregate)`` from an exported ``metrics.json``."""
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema version {doc.get('schema_version')}")
    rows = [(r["key"], MetricsReport(**r["report"])) for r in doc["rows"]]
    agg = MetricsReport(**doc["aggregate"]) if doc["aggregate"] else None
    return rows, agg


# ---------------------------------------------------------------- CLI
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dhal-aim", description="Intersection management experiments")
    sub = ap.add_subparsers(dest="cmd", required=True)
    for name in ("train", "test"):
        sp = sub.add_parser(name)
        sp.add_argument("--controller", choices=CONTROLLERS)
        sp.add_argument("--flow", help="low, medium, high or a rate in veh/h")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--seeds", type=int, nargs="+")
        sp.add_argument("--desk-scale", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--episode", type=float, help="episode length in seconds")
        sp.add_argument("--config")
        sp.add_argument("--out", required=True)
        sp.add_argument("--checkpoint")
        sp.add_argument("--workers", type=int, default=1, help="parallel seed processes in test mode")
        sp.add_argument("-v", "--verbose", action="store_true")
    sp = sub.add_parser("layout-dump")
    sp.add_argument("--config")
    sp.add_argument("--out")
    return ap


def config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg.mode = args.cmd
    if args.cmd == "train":
        cfg.controller = "dhal"
    if args.controller:
        cfg.controller = args.controller
    if args.flow:
        if args.flow in FLOWS:
            cfg.flow, cfg.rate = args.flow, None
        else:
            cfg.rate = float(args.flow)
    if args.seeds:
        cfg.seeds = list(args.seeds)
    elif args.seed is not None:
        cfg.seeds = [args.seed]
    if args.desk_scale is not None:
        cfg.desk_scale = args.desk_scale
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.episode is not None:
        if args.cmd == "train":
            cfg.train_episode = args.episode
        else:
            cfg.test_episode = args.episode
    if args.checkpoint:
        cfg.checkpoint = args.checkpoint
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.cmd == "layout-dump":
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        text = json.dumps(_layout(cfg).to_json(), indent=2)
        if args.out:
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
            Path(args.out).write_text(text)
        else:
            print(text)
        return 0
    try:
        cfg = config_from_args(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        art = run_experiment(cfg, args.out, workers=args.workers)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if art.aggregate is not None:
        print(metrics_csv(art.rows), end="")
        agg = art.aggregate.row()
        print("mean " + " ".join(f"{k}={agg[k]}" for k in ("PR", "SR", "ATT", "DTT", "AFC")))
    else:
        print(f"trained {cfg.epochs} epochs, checkpoint in {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
