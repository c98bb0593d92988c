"""Experiment orchestration: dataset generation, training runs, evaluation
sweeps, and report/plot emission.

Scenes are fully determined by (config, seed): per-scene RNG streams derive
from the master seed and the scene/trial index, so reruns are byte-identical
and trials can be dispatched to worker processes without changing results.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .doa import ClassGrids, DOAEstimate, estimate_doas, prediction_multiset, confidence_filter
from .errors import ConfigError, EstimationError, ModelIOError
from .features import CoherenceFeatureExtractor, FeatureBlock, save_dataset
from .metrics import TrialRecord, adjacent_separation, eta_acc, eta_adj, write_metrics_csv
from .network import (
    ModalCNN,
    forward_in_chunks,
    load_model,
    save_model,
    train_network,
    write_training_log,
)
from .room import SourceSpec, add_noise, gen_training_signal, rir_matrix, synthesize_mixture
from .sphmath import Direction

TOTAL_MISS_DEG = 180.0  # recorded when a trial yields no confident bins


def _phi_step(grids: ClassGrids) -> float:
    if grids.n_phi < 2:
        return 360.0
    return grids.phis[1] - grids.phis[0]


def _theta_step(grids: ClassGrids) -> float:
    if grids.n_theta < 2:
        return 180.0
    return grids.thetas[1] - grids.thetas[0]


def joint_delta_omega(grids: ClassGrids) -> float:
    """Adjacency threshold for a 2-D grid: the larger single-axis step."""
    candidates = []
    if grids.n_phi >= 2:
        mid_theta = grids.thetas[len(grids.thetas) // 2]
        candidates.append(adjacent_separation(grids, mid_theta))
        candidates.append(_phi_step(grids))
    if grids.n_theta >= 2:
        candidates.append(_theta_step(grids))
    return max(candidates)


def sample_scene_cells(rng, grids: ClassGrids, n_sources: int, min_sep: int) -> list:
    """Draw distinct grid cells with a minimum pairwise grid separation.

    Separation is the Chebyshev distance in grid steps with circular azimuth
    wraparound, so adjacent and diagonal neighbors are rejected at the
    default separation of 2.
    """
    n_cells = grids.n_theta * grids.n_phi
    if n_sources > n_cells:
        raise ConfigError(f"cannot place {n_sources} sources on {n_cells} cells")
    for _ in range(10000):
        flat = rng.choice(n_cells, size=n_sources, replace=False)
        cells = [(int(f) // grids.n_phi, int(f) % grids.n_phi) for f in sorted(flat.tolist())]
        ok = True
        for i in range(n_sources):
            for j in range(i):
                dphi = abs(cells[i][1] - cells[j][1])
                dphi = min(dphi, grids.n_phi - dphi)
                dth = abs(cells[i][0] - cells[j][0])
                if max(dphi, dth) < min_sep:
                    ok = False
        if ok:
            return cells
    raise ConfigError("could not satisfy the minimum source separation; grid too small")


def _scene_direction(cfg: ExperimentConfig, cell, rng=None) -> tuple[float, float]:
    """Grid-cell center in degrees, optionally jittered off-grid."""
    theta, phi = cfg.grids.cell_degrees(cell)
    if cfg.off_grid and rng is not None:
        theta = theta + rng.uniform(-0.5, 0.5) * _theta_step(cfg.grids) * (cfg.grids.n_theta > 1)
        phi = (phi + rng.uniform(-0.5, 0.5) * _phi_step(cfg.grids)) % 360.0
    return float(theta), float(phi)


class RIRCache:
    """Per-(room, source position) cache of RIR matrices; scene DOAs live on a
    small grid, so evaluation trials mostly reuse training-time RIRs."""

    def __init__(self):
        self._store = {}

    def get(self, room, src_pos, mic_positions, fs):
        key = (id(room), round(src_pos[0], 9), round(src_pos[1], 9), round(src_pos[2], 9))
        if key not in self._store:
            self._store[key] = rir_matrix(room, src_pos, mic_positions, fs)
        return self._store[key]


@dataclass
class ExperimentReport:
    experiment_id: str
    room_name: str
    snr_db: float
    n_sources: int
    delta_omega: float
    records: list = field(default_factory=list)
    trial_rows: list = field(default_factory=list)
    multiset_total: Counter = field(default_factory=Counter)
    runtime_s: float = 0.0

    @property
    def eta_acc(self) -> float:
        return eta_acc(self.records)

    @property
    def eta_adj(self) -> float:
        return eta_adj(self.records, self.delta_omega)

    @property
    def mean_support(self) -> float:
        supports = [row["mean_support"] for row in self.trial_rows]
        return float(np.mean(supports)) if supports else 0.0

    def metrics_row(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "room": self.room_name,
            "snr_db": self.snr_db,
            "L": self.n_sources,
            "eta_acc": self.eta_acc,
            "eta_adj": self.eta_adj,
            "mean_support": self.mean_support,
        }

    def write_trials_csv(self, path) -> None:
        fields = ["trial", "truth_cells", "truths_deg", "estimates_deg", "errors_deg",
                  "n_selected", "mean_support"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(fields)
            for row in self.trial_rows:
                writer.writerow([row[f] for f in fields])


def build_extractor(cfg: ExperimentConfig) -> CoherenceFeatureExtractor:
    return CoherenceFeatureExtractor(
        array=cfg.build_array(),
        order=cfg.features.order,
        fs=cfg.fs,
        band_hz=tuple(cfg.features.band_hz),
        beta=cfg.features.beta,
        speed_of_sound=cfg.room.speed_of_sound,
        energy_percentile=cfg.features.energy_percentile,
    ).fit()


def training_block(cfg: ExperimentConfig, extractor=None) -> FeatureBlock:
    """Single-source labeled features for every grid cell (the training set).

    One scene per grid cell: a random non-white signal at the cell's
    direction, rendered through the room, lightly noised, decomposed, EMA
    smoothed, and energy-filtered per scene.
    """
    extractor = extractor or build_extractor(cfg)
    array = extractor.array_
    blocks = []
    scene = 0
    for ti in range(cfg.grids.n_theta):
        for pi in range(cfg.grids.n_phi):
            theta, phi = cfg.grids.cell_degrees((ti, pi))
            sig_rng = np.random.default_rng([cfg.seed, 7001, scene])
            signal = gen_training_signal(cfg.train_signal_s, seed=int(sig_rng.integers(2**31)),
                                         fs=cfg.fs)
            src = SourceSpec(direction=Direction.from_degrees(theta, phi),
                             distance=cfg.source_distance_m, signal=signal, fs=cfg.fs)
            wave = synthesize_mixture([src], cfg.room, array, fs=cfg.fs)
            wave = add_noise(wave, cfg.train_snr_db, "white",
                             seed=int(sig_rng.integers(2**31)))
            block = extractor.transform(wave)
            block.label_theta[:] = ti
            block.label_phi[:] = pi
            blocks.append(block)
            scene += 1
    return FeatureBlock.concatenate(blocks)


def run_training(cfg: ExperimentConfig, out_dir=None):
    """Full training stage: scenes, features, fit, persist artifacts.

    Returns ``(model, manifest)``; when ``out_dir`` is given, writes
    model.bin, dataset.bin, training_log.csv, and manifest.json.
    """
    t0 = time.time()
    extractor = build_extractor(cfg)
    data = training_block(cfg, extractor)
    net = ModalCNN(
        input_side=data.tensors.shape[1],
        in_channels=2,
        n_theta=cfg.grids.n_theta,
        n_phi=cfg.grids.n_phi,
        seed=cfg.train.seed,
        dtype=cfg.train.precision,
    )
    log = train_network(net, data.tensors, data.label_theta, data.label_phi, cfg.train)

    manifest = {
        "experiment_id": cfg.experiment_id,
        "config_hash": cfg.config_hash(),
        "environment_fingerprint": cfg.environment_fingerprint(),
        "grid_residual": extractor.grid_residual_,
        "n_samples": len(data),
        "samples_per_class": len(data) / (cfg.grids.n_theta * cfg.grids.n_phi),
        "classes": {"theta": cfg.grids.n_theta, "phi": cfg.grids.n_phi},
        "final_val_loss": log[-1]["val_loss"],
        "train_runtime_s": round(time.time() - t0, 3),
        "version": __version__,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_dataset(out / "dataset.bin", data, cfg.grids.n_theta, cfg.grids.n_phi)
        manifest["dataset_sha256"] = hashlib.sha256((out / "dataset.bin").read_bytes()).hexdigest()
        save_model(net, out / "model.bin")
        write_training_log(log, out / "training_log.csv")
        with open(out / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
    return net, manifest


def check_model_compatibility(cfg: ExperimentConfig, net: ModalCNN,
                              manifest: dict | None, force: bool = False) -> None:
    """Refuse to evaluate a model against a different environment.

    The recorded fingerprint covers room, array, grids, and feature
    parameters; pass ``force=True`` to override deliberately (for the
    cross-plane and distance-generalization studies).
    """
    if (net.n_theta, net.n_phi) != (cfg.grids.n_theta, cfg.grids.n_phi):
        raise ModelIOError(
            f"model classes ({net.n_theta}, {net.n_phi}) do not match the grids "
            f"({cfg.grids.n_theta}, {cfg.grids.n_phi})"
        )
    if manifest is None or force:
        return
    expected = manifest.get("environment_fingerprint")
    actual = cfg.environment_fingerprint()
    if expected is not None and expected != actual:
        raise ConfigError(
            "model was trained for a different environment (room/array/grid/features); "
            "pass force=True (CLI: --force) to evaluate anyway"
        )


def _evaluate_trial(cfg: ExperimentConfig, net: ModalCNN, extractor, trial: int,
                    rir_cache: RIRCache | None = None, azimuth_only: bool = False):
    """One seeded evaluation scene; returns (record, trial_row, multiset)."""
    rng = np.random.default_rng([cfg.seed, 3001, trial])
    cells = sample_scene_cells(rng, cfg.grids, cfg.n_sources, cfg.min_separation_cells)
    truths = [_scene_direction(cfg, cell, rng) for cell in cells]
    distance = cfg.eval_distance_m or cfg.source_distance_m
    array = extractor.array_

    sources = []
    for theta, phi in truths:
        signal = gen_training_signal(cfg.eval_signal_s, seed=int(rng.integers(2**31)),
                                     fs=cfg.fs, band_hz=(300.0, 3400.0))
        # evaluation sources play at matched long-term levels (like read speech);
        # level diversity is a training-time concern
        signal *= 0.1 / math.sqrt(float(np.mean(np.square(signal))))
        sources.append(SourceSpec(direction=Direction.from_degrees(theta, phi),
                                  distance=distance, signal=signal, fs=cfg.fs))
    if rir_cache is not None and not cfg.off_grid:
        mic_positions = array.mic_positions()
        max_len = 0
        convs = []
        from scipy.signal import fftconvolve

        for spec in sources:
            h = rir_cache.get(cfg.room, spec.position(array), mic_positions, cfg.fs)
            conv = np.stack([fftconvolve(spec.level * spec.signal, h[q])
                             for q in range(array.num_mics)])
            convs.append(conv)
            max_len = max(max_len, conv.shape[1])
        wave = np.zeros((array.num_mics, max_len))
        for conv in convs:
            wave[:, : conv.shape[1]] += conv
    else:
        wave = synthesize_mixture(sources, cfg.room, array, fs=cfg.fs)
    noise_seed = int(rng.integers(2**31))
    wave = add_noise(wave, cfg.snr_db, cfg.noise_kind, seed=noise_seed,
                     room=cfg.room, array=array)

    block = extractor.transform(wave)
    p_theta, p_phi = forward_in_chunks(net, block.tensors)

    try:
        if azimuth_only:
            estimate, ms = _azimuth_only_estimate(cfg, p_theta, p_phi)
            record_truths = truths
            record = _azimuth_record(truths, estimate)
        else:
            kept = confidence_filter((p_theta, p_phi), cfg.estimator.p_min)
            if not kept:
                raise EstimationError("no confident bin")
            ms = prediction_multiset(kept, cfg.grids)
            estimate = estimate_doas((p_theta, p_phi), cfg.grids, cfg.n_sources,
                                     p_min=cfg.estimator.p_min, mode=cfg.estimator.mode,
                                     seed=cfg.seed)
            record = TrialRecord.from_directions(truths, estimate.estimates)
    except EstimationError:
        # a trial with no usable bins counts as a complete miss, not a crash
        record = TrialRecord(truths=truths, estimates=[],
                             errors=np.full(cfg.n_sources, TOTAL_MISS_DEG))
        estimate = DOAEstimate(estimates=[], support=[])
        ms = Counter()

    row = {
        "trial": trial,
        "truth_cells": ";".join(f"{t}/{p}" for t, p in cells),
        "truths_deg": ";".join(f"{t:.2f}/{p:.2f}" for t, p in truths),
        "estimates_deg": ";".join(f"{t:.2f}/{p:.2f}" for t, p in estimate.estimates),
        "errors_deg": ";".join(f"{e:.4f}" for e in record.errors),
        "n_selected": int(sum(ms.values())),
        "mean_support": float(np.mean(estimate.support)) if estimate.support else 0.0,
    }
    return record, row, ms


def _azimuth_only_estimate(cfg: ExperimentConfig, p_theta, p_phi):
    """Standalone azimuth estimation from the azimuth head only: filter on the
    azimuth confidence, cluster argmax azimuths on the unit circle."""
    circle = ClassGrids(thetas=(90.0,), phis=cfg.grids.phis)
    full = np.ones_like(p_theta)  # elevation head ignored
    estimate = estimate_doas((full, p_phi), circle, cfg.n_sources,
                             p_min=cfg.estimator.p_min, mode=cfg.estimator.mode,
                             seed=cfg.seed)
    kept = confidence_filter((full, p_phi), cfg.estimator.p_min)
    ms = prediction_multiset(kept, circle)
    return estimate, ms


def _azimuth_record(truths, estimate: DOAEstimate) -> TrialRecord:
    """Score azimuth-only estimates at each truth's own elevation plane."""
    phis_hat = [phi for _, phi in estimate.estimates]
    n = len(truths)
    import itertools

    from .metrics import angular_error
    best_perm, best_key = None, None
    for perm in itertools.permutations(range(len(phis_hat))):
        errs = [angular_error((truths[i][0], truths[i][1]), (truths[i][0], phis_hat[perm[i]]))
                for i in range(n)]
        key = (-sum(e <= 1e-9 for e in errs), sum(errs))
        if best_key is None or key < best_key:
            best_key, best_perm = key, perm
    errors = np.array([
        angular_error((truths[i][0], truths[i][1]), (truths[i][0], phis_hat[best_perm[i]]))
        for i in range(n)
    ])
    estimates = [(truths[i][0], phis_hat[best_perm[i]]) for i in range(n)]
    return TrialRecord(truths=list(truths), estimates=estimates, errors=errors)


_POOL_STATE = {}


def _pool_init(cfg, net_arch, net_params, extractor):
    net = ModalCNN(**net_arch)
    net.set_parameters(net_params)
    _POOL_STATE["args"] = (cfg, net, extractor)


def _pool_trial(args):
    trial, azimuth_only = args
    cfg, net, extractor = _POOL_STATE["args"]
    return _evaluate_trial(cfg, net, extractor, trial, None, azimuth_only)


def run_evaluation(cfg: ExperimentConfig, net: ModalCNN, manifest: dict | None = None,
                   out_dir=None, force: bool = False,
                   azimuth_only: bool = False) -> ExperimentReport:
    """Seeded evaluation sweep: ``cfg.trials`` random scenes, aggregated metrics."""
    t0 = time.time()
    check_model_compatibility(cfg, net, manifest, force=force)
    extractor = build_extractor(cfg)
    if cfg.grids.n_phi >= 2:
        plane = cfg.grids.thetas[len(cfg.grids.thetas) // 2]
        delta = adjacent_separation(cfg.grids, plane) if cfg.grids.n_theta == 1 \
            else joint_delta_omega(cfg.grids)
    else:
        delta = _theta_step(cfg.grids)
    report = ExperimentReport(
        experiment_id=cfg.experiment_id, room_name=cfg.room_name,
        snr_db=cfg.snr_db, n_sources=cfg.n_sources, delta_omega=delta,
    )

    if cfg.threads > 1:
        with ProcessPoolExecutor(
            max_workers=cfg.threads, initializer=_pool_init,
            initargs=(cfg, net.architecture(), net.parameters(), extractor),
        ) as pool:
            results = list(pool.map(_pool_trial,
                                    [(t, azimuth_only) for t in range(cfg.trials)]))
    else:
        cache = RIRCache()
        results = [_evaluate_trial(cfg, net, extractor, t, cache, azimuth_only)
                   for t in range(cfg.trials)]

    for record, row, ms in results:
        report.records.append(record)
        report.trial_rows.append(row)
        report.multiset_total.update(ms)
    report.runtime_s = time.time() - t0

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        suffix = f"{cfg.experiment_id}"
        report.write_trials_csv(out / f"trials_{suffix}.csv")
        write_metrics_csv([report.metrics_row()], out / f"metrics_{suffix}.csv")
        from .doa import dump_multiset_csv
        grids = cfg.grids if not azimuth_only else ClassGrids(thetas=(90.0,), phis=cfg.grids.phis)
        dump_multiset_csv(report.multiset_total, grids, out / f"multiset_{suffix}.csv")
    return report


def run_joint_az_el(cfg: ExperimentConfig, out_dir=None):
    """Joint azimuth/elevation experiment on a 2-D grid.

    Trains the shared trunk with both heads on single-source scenes at every
    grid point, then evaluates joint estimation and the standalone-azimuth
    path on identical scenes.  Returns (net, joint report, azimuth report).
    """
    if cfg.grids.n_theta < 2 or cfg.grids.n_phi < 2:
        raise ConfigError("joint estimation needs at least 2 classes per head")
    net, manifest = run_training(cfg, out_dir=out_dir)
    joint = run_evaluation(cfg, net, manifest, out_dir=out_dir)
    az_cfg = ExperimentConfig(**{**_config_kwargs(cfg),
                                 "experiment_id": cfg.experiment_id + "_azonly"})
    azimuth = run_evaluation(az_cfg, net, manifest, out_dir=out_dir, azimuth_only=True)
    if out_dir is not None:
        _write_heatmap_csv(joint.multiset_total, cfg.grids,
                           Path(out_dir) / f"heatmap_{cfg.experiment_id}.csv")
    return net, joint, azimuth


def _write_heatmap_csv(ms: Counter, grids: ClassGrids, path) -> None:
    """Aggregate (theta_deg, phi_deg, count) over all trials (heat-map data)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["theta_deg", "phi_deg", "count"])
        for ti in range(grids.n_theta):
            for pi in range(grids.n_phi):
                writer.writerow([grids.thetas[ti], grids.phis[pi], ms.get((ti, pi), 0)])


def _config_kwargs(cfg: ExperimentConfig) -> dict:
    from dataclasses import fields as dc_fields

    return {f.name: getattr(cfg, f.name) for f in dc_fields(ExperimentConfig)}


def emit_plots(metric_rows: list[dict], x_field: str, out_dir, name: str,
               x_label: str | None = None) -> list[Path]:
    """Write per-figure data (x, series, value) plus a static SVG rendering.

    ``metric_rows`` are aggregate rows as produced by
    :meth:`ExperimentReport.metrics_row`; the x axis is one of their keys.
    """
    if not metric_rows:
        raise ConfigError("refusing to plot an empty report")
    from .svgplot import line_chart

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{name}.csv"
    svg_path = out / f"{name}.svg"
    series = {"eta_acc": [], "eta_adj": []}
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "series", "value"])
        for row in metric_rows:
            for metric in ("eta_acc", "eta_adj"):
                writer.writerow([row[x_field], metric, repr(float(row[metric]))])
                series[metric].append((float(row[x_field]), float(row[metric])))
    svg = line_chart(series, title=name, x_label=x_label or x_field,
                     y_label="accuracy [%]")
    svg_path.write_text(svg)
    return [csv_path, svg_path]


def load_model_with_manifest(model_path):
    """Load a model plus its sibling manifest.json when present."""
    net = load_model(model_path)
    manifest_path = Path(model_path).with_name("manifest.json")
    manifest = None
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
    return net, manifest
