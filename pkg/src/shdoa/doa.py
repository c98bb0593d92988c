"""Aggregate per-TF-bin class scores into L source directions.

Pipeline: drop low-confidence bins, pack per-bin argmax pairs into a
prediction multiset, then either pick global histogram peaks (single
source) or cluster the multiset on the unit sphere with k-means and pick
the peak cell of each cluster.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, EstimationError
from .network import PredictionScores


@dataclass(frozen=True)
class ClassGrids:
    """Discrete class centers in degrees: I elevations and J azimuths."""

    thetas: tuple
    phis: tuple

    def __post_init__(self):
        object.__setattr__(self, "thetas", tuple(float(t) for t in self.thetas))
        object.__setattr__(self, "phis", tuple(float(p) for p in self.phis))
        if not self.thetas or not self.phis:
            raise DomainError("class grids need at least one class per head")
        if list(self.thetas) != sorted(set(self.thetas)) or list(self.phis) != sorted(set(self.phis)):
            raise DomainError("class centers must be strictly increasing")

    @property
    def n_theta(self) -> int:
        return len(self.thetas)

    @property
    def n_phi(self) -> int:
        return len(self.phis)

    def cell_index(self, ti: int, pi: int) -> int:
        return ti * self.n_phi + pi

    def cell_degrees(self, cell: tuple[int, int]) -> tuple[float, float]:
        return self.thetas[cell[0]], self.phis[cell[1]]

    @staticmethod
    def uniform_azimuth(spacing_deg: float, plane_theta_deg: float = 45.0) -> "ClassGrids":
        phis = tuple(np.arange(0.0, 360.0, spacing_deg))
        return ClassGrids(thetas=(plane_theta_deg,), phis=phis)


@dataclass
class DOAEstimate:
    """L estimated directions in degrees plus per-estimate bin support."""

    estimates: list
    support: list


def unit_vector(theta_deg: float, phi_deg: float) -> np.ndarray:
    t, p = np.radians(theta_deg), np.radians(phi_deg)
    return np.array([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)])


def _score_arrays(scored_bins):
    """Normalize input to (ids, P_theta (n, I), P_phi (n, J))."""
    if isinstance(scored_bins, tuple) and len(scored_bins) == 2:
        pt, pp = (np.atleast_2d(np.asarray(a, dtype=float)) for a in scored_bins)
        return list(range(len(pt))), pt, pp
    ids, pts, pps = [], [], []
    for bin_id, scores in scored_bins:
        ids.append(bin_id)
        if isinstance(scores, PredictionScores):
            pts.append(scores.p_theta)
            pps.append(scores.p_phi)
        else:
            pts.append(scores[0])
            pps.append(scores[1])
    return ids, np.atleast_2d(np.asarray(pts)), np.atleast_2d(np.asarray(pps))


def confidence_filter(scored_bins, p_min: float):
    """Keep bins whose best class clears ``p_min`` on BOTH heads."""
    if not 0.0 <= p_min <= 1.0:
        raise DomainError(f"confidence level must lie in [0, 1], got {p_min}")
    ids, pt, pp = _score_arrays(scored_bins)
    if len(ids) == 0:
        return []
    mask = (pt.max(axis=1) >= p_min) & (pp.max(axis=1) >= p_min)
    return [
        (ids[i], PredictionScores(p_theta=pt[i], p_phi=pp[i]))
        for i in np.flatnonzero(mask)
    ]


def prediction_multiset(scored_bins, grids: ClassGrids) -> Counter:
    """Jointly pack per-bin (argmax theta, argmax phi) class pairs.

    Argmax ties resolve to the lowest class index.  Returns a Counter keyed
    by (theta_index, phi_index).
    """
    ids, pt, pp = _score_arrays(scored_bins)
    if len(ids) == 0:
        raise EstimationError("cannot build a prediction multiset from zero bins")
    if pt.shape[1] != grids.n_theta or pp.shape[1] != grids.n_phi:
        raise DomainError("score widths do not match the class grids")
    t_idx = np.argmax(pt, axis=1)
    p_idx = np.argmax(pp, axis=1)
    return Counter(zip(t_idx.tolist(), p_idx.tolist()))


def _ranked_cells(ms: Counter, grids: ClassGrids):
    return sorted(ms.items(), key=lambda kv: (-kv[1], grids.cell_index(*kv[0])))


def peaks_histogram(ms: Counter, L: int, grids: ClassGrids) -> DOAEstimate:
    """The L most frequent grid cells; count ties break to the lower cell index."""
    if len(ms) < L:
        raise EstimationError(f"need {L} distinct cells, multiset has {len(ms)}")
    ranked = _ranked_cells(ms, grids)[:L]
    return DOAEstimate(
        estimates=[grids.cell_degrees(cell) for cell, _ in ranked],
        support=[count for _, count in ranked],
    )


def _kmeans_once(points, counts, L, rng):
    """Weighted Lloyd iteration with k-means++ seeding; returns (labels, inertia)."""
    n = len(points)
    centers = np.empty((L, 3))
    first = rng.choice(n, p=counts / counts.sum())
    centers[0] = points[first]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for c in range(1, L):
        weights = counts * d2
        if weights.sum() <= 0:
            centers[c] = points[int(rng.integers(n))]
        else:
            centers[c] = points[rng.choice(n, p=weights / weights.sum())]
        d2 = np.minimum(d2, np.sum((points - centers[c]) ** 2, axis=1))

    labels = np.zeros(n, dtype=int)
    for _ in range(100):
        dists = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(dists, axis=1)
        for c in range(L):
            mask = new_labels == c
            if not mask.any():
                # revive an empty cluster at the worst-served point
                worst = int(np.argmax(dists[np.arange(n), new_labels]))
                new_labels[worst] = c
                mask = new_labels == c
            w = counts[mask]
            centers[c] = (points[mask] * w[:, None]).sum(axis=0) / w.sum()
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    dists = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    inertia = float(np.sum(counts * dists[np.arange(n), labels]))
    return labels, inertia


def kmeans_sphere(ms: Counter, L: int, seed: int = 0, grids: ClassGrids = None,
                  restarts: int = 20) -> DOAEstimate:
    """Cluster the multiset into L groups on the unit sphere; peak per cluster.

    Grid cells map to Cartesian unit vectors, so chord distance handles the
    azimuth wraparound naturally.  The best of ``restarts`` seeded runs (by
    inertia, then restart order) is used; each cluster reports its
    highest-multiplicity cell and total bin support.
    """
    if grids is None:
        raise DomainError("kmeans_sphere requires the class grids")
    cells = sorted(ms.keys(), key=lambda c: grids.cell_index(*c))
    if len(cells) < L:
        raise EstimationError(f"need {L} distinct cells to form {L} clusters, have {len(cells)}")
    counts = np.array([float(ms[c]) for c in cells])
    points = np.stack([unit_vector(*grids.cell_degrees(c)) for c in cells])

    best_labels, best_inertia = None, np.inf
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        labels, inertia = _kmeans_once(points, counts, L, rng)
        if len(np.unique(labels)) == L and inertia < best_inertia:
            best_inertia = inertia
            best_labels = labels
    if best_labels is None:
        raise EstimationError("k-means failed to produce the requested cluster count")

    results = []
    for c in range(L):
        members = [cells[i] for i in np.flatnonzero(best_labels == c)]
        peak = min(members, key=lambda cell: (-ms[cell], grids.cell_index(*cell)))
        support = int(sum(ms[cell] for cell in members))
        results.append((peak, support))
    results.sort(key=lambda ps: (-ps[1], grids.cell_index(*ps[0])))
    return DOAEstimate(
        estimates=[grids.cell_degrees(peak) for peak, _ in results],
        support=[support for _, support in results],
    )


def estimate_doas(scored_bins, grids: ClassGrids, L: int, p_min: float = 0.5,
                  mode: str = "cluster", seed: int = 0) -> DOAEstimate:
    """Full aggregation: confidence filter, multiset, then peaks or clusters.

    A single source always uses the global histogram peak; for L > 1 the
    ``mode`` selects histogram peaks or spherical k-means (the default).
    """
    if mode not in ("histogram", "cluster"):
        raise DomainError(f"unknown estimation mode {mode!r}")
    kept = confidence_filter(scored_bins, p_min)
    if not kept:
        raise EstimationError(
            f"no TF bin cleared the confidence level {p_min}; "
            "the scene may be too noisy or the model untrained"
        )
    ms = prediction_multiset(kept, grids)
    if L == 1 or mode == "histogram":
        return peaks_histogram(ms, L, grids)
    return kmeans_sphere(ms, L, seed=seed, grids=grids)


def dump_multiset_csv(ms: Counter, grids: ClassGrids, path) -> None:
    """Export (theta_class, phi_class, count) rows, sorted by cell index."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["theta_class", "phi_class", "count"])
        for (ti, pi), count in sorted(ms.items(), key=lambda kv: grids.cell_index(*kv[0])):
            writer.writerow([ti, pi, count])
