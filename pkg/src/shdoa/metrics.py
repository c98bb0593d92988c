"""Angular error, truth/estimate assignment, and the two accuracy metrics."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, EstimationError
from .doa import ClassGrids
from .sphmath import Direction

ZERO_TOL_DEG = 1e-9  # angular errors below this count as exact hits


def _as_degrees(d) -> tuple[float, float]:
    if isinstance(d, Direction):
        return math.degrees(d.theta), math.degrees(d.phi)
    theta, phi = d
    return float(theta), float(phi)


def angular_error(a, b) -> float:
    """Great-circle angle in degrees between two directions.

    Accepts (theta, phi) pairs in degrees or :class:`Direction` objects.
    """
    t1, p1 = _as_degrees(a)
    t2, p2 = _as_degrees(b)
    t1, p1, t2, p2 = map(math.radians, (t1, p1, t2, p2))
    cosang = math.cos(t1) * math.cos(t2) + math.sin(t1) * math.sin(t2) * math.cos(p1 - p2)
    return math.degrees(math.acos(min(1.0, max(-1.0, cosang))))


def optimal_assignment(truths, estimates) -> tuple:
    """Pairing of estimates to truths that maximizes exact hits.

    Returns a permutation ``p`` such that estimate ``p[i]`` answers truth
    ``i``.  Ties in the exact-hit count break toward the smallest total
    angular error.  Exhaustive search; L is small by design.
    """
    if len(truths) != len(estimates):
        raise DomainError("truth and estimate lists must have equal length")
    n = len(truths)
    if n > 8:
        raise DomainError("assignment search is limited to 8 sources")
    errs = np.array([[angular_error(t, e) for e in estimates] for t in truths])
    best_perm, best_key = None, None
    for perm in itertools.permutations(range(n)):
        picked = errs[np.arange(n), perm]
        key = (-int(np.sum(picked <= ZERO_TOL_DEG)), float(np.sum(picked)))
        if best_key is None or key < best_key:
            best_key = key
            best_perm = perm
    return best_perm


@dataclass
class TrialRecord:
    """Per-trial outcome: truths, estimates, and assigned angular errors."""

    truths: list
    estimates: list
    errors: np.ndarray

    @staticmethod
    def from_directions(truths, estimates) -> "TrialRecord":
        perm = optimal_assignment(truths, estimates)
        errors = np.array(
            [angular_error(t, estimates[perm[i]]) for i, t in enumerate(truths)]
        )
        return TrialRecord(truths=list(truths), estimates=list(estimates), errors=errors)


def _pooled_errors(records) -> np.ndarray:
    if not records:
        raise EstimationError("no trial records to score")
    return np.concatenate([np.asarray(r.errors, dtype=float) for r in records])


def eta_acc(records) -> float:
    """Percentage of exactly correct predictions over all trials and sources."""
    errors = _pooled_errors(records)
    return 100.0 * float(np.sum(errors <= ZERO_TOL_DEG)) / errors.size


def eta_adj(records, delta_omega: float) -> float:
    """Percentage of predictions within one class separation of the truth."""
    if delta_omega < 0.0:
        raise DomainError("class separation must be non-negative")
    errors = _pooled_errors(records)
    return 100.0 * float(np.sum(errors <= delta_omega + ZERO_TOL_DEG)) / errors.size


def adjacent_separation(grids: ClassGrids, plane_theta_deg: float) -> float:
    """Angular distance between adjacent azimuth classes on one elevation plane."""
    if grids.n_phi < 2:
        raise DomainError("adjacent separation needs at least two azimuth classes")
    return angular_error(
        (plane_theta_deg, grids.phis[0]), (plane_theta_deg, grids.phis[1])
    )


def write_metrics_csv(rows: list[dict], path) -> None:
    """Aggregate report rows: (experiment_id, room, snr_db, L, eta_acc, eta_adj,
    mean_support)."""
    fields = ["experiment_id", "room", "snr_db", "L", "eta_acc", "eta_adj", "mean_support"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([row[f] if f in ("experiment_id", "room") else repr(row[f])
                             for f in fields])
