"""Evaluation metrics over trip logs and the instantaneous fuel model.

PR   pass rate (%), passed / total
SR   stop rate (%), trips that ever stood still in the preparation zone
ATT  average travel time (s), preparation-zone entry to crossing-zone exit
DTT  population standard deviation of travel time (s), a fairness proxy
AFC  average fuel per vehicle (mL); relative values only
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

# power-demand fuel model
IDLE_RATE = 0.15  # mL/s
MASS = 1500.0  # kg
C0 = 150.0  # N, rolling resistance
C1 = 0.4  # N s^2/m^2, aerodynamic drag
ML_PER_J = 0.03e-3  # 1 kJ of wheel energy ~ 0.03 mL


def fuel_rate(v, a):
    """Fuel flow in mL/s; braking and coasting cost only the idle rate."""
    v = np.asarray(v, dtype=float)
    a = np.asarray(a, dtype=float)
    power = MASS * a * v + (C0 + C1 * v * v) * v
    out = IDLE_RATE + ML_PER_J * np.maximum(0.0, power)
    return float(out) if out.ndim == 0 else out


def integrate_fuel(v, a, dt=0.1) -> float:
    """Trapezoid integral of :func:`fuel_rate` over a sampled series."""
    r = np.atleast_1d(fuel_rate(v, a))
    if len(r) < 2:
        return 0.0
    return float(np.sum(0.5 * (r[1:] + r[:-1])) * dt)


@dataclass
class MetricsReport:
    PR: float
    SR: float
    ATT: float | None
    DTT: float | None
    AFC: float | None
    n_total: int
    n_passed: int
    n_collided: int
    n_unfinished: int
    n_stopped: int
    ci: dict | None = None

    FIELDS = ("PR", "SR", "ATT", "DTT", "AFC", "n_total", "n_passed", "n_collided",
              "n_unfinished", "n_stopped")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def compute_report(trips) -> MetricsReport:
    """Five metrics from trip records (objects with ``outcome``, ``stopped``,
    ``travel_time`` and ``fuel_ml``)."""
    trips = list(trips)
    if not trips:
        raise ValueError("no trips to report on")
    n = len(trips)
    passed = [t for t in trips if t.outcome == "passed"]
    collided = sum(t.outcome == "collided" for t in trips)
    unfinished = sum(t.outcome == "unfinished" for t in trips)
    stopped = sum(bool(t.stopped) for t in trips)
    if passed:
        # sort so the result does not depend on log order
        tt = np.sort([t.travel_time for t in passed])
        fuel = np.sort([t.fuel_ml for t in passed])
        att, dtt, afc = float(np.mean(tt)), float(np.std(tt)), float(np.mean(fuel))
    else:
        att = dtt = afc = None
    return MetricsReport(
        PR=100.0 * len(passed) / n,
        SR=100.0 * stopped / n,
        ATT=att, DTT=dtt, AFC=afc,
        n_total=n, n_passed=len(passed), n_collided=collided,
        n_unfinished=unfinished, n_stopped=stopped,
    )


def aggregate(reports: list, level: float = 0.95) -> MetricsReport:
    """Mean over per-seed reports with t-based confidence half-widths."""
    if not reports:
        raise ValueError("nothing to aggregate")
    out = {}
    ci = {}
    for k in ("PR", "SR", "ATT", "DTT", "AFC"):
        vals = np.array([getattr(r, k) for r in reports if getattr(r, k) is not None], float)
        if len(vals) == 0:
            out[k] = None
            continue
        out[k] = float(vals.mean())
        if len(vals) > 1:
            half = stats.t.ppf(0.5 + level / 2, len(vals) - 1) * vals.std(ddof=1) / math.sqrt(len(vals))
            ci[k] = float(half)
        else:
            ci[k] = 0.0
    counts = {k: int(sum(getattr(r, k) for r in reports))
              for k in ("n_total", "n_passed", "n_collided", "n_unfinished", "n_stopped")}
    return MetricsReport(**out, **counts, ci=ci)


def reports_csv(rows: list) -> str:
    """CSV text for ``[(key dict, MetricsReport), ...]``."""
    buf = io.StringIO()
    keys = list(rows[0][0]) if rows else []
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys + list(MetricsReport.FIELDS))
    for key, rep in rows:
        r = rep.row()
        w.writerow([key[k] for k in keys] + ["" if r[f] is None else r[f] for f in MetricsReport.FIELDS])
    return buf.getvalue()
