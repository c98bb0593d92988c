"""Experiment configuration: presets, YAML schema, validation, hashing.

Config files are YAML mappings with nested sections.  All lengths are in
meters, times in seconds, frequencies in Hz, and angles in degrees.  See
the README for the full schema and defaults.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import yaml

from .doa import ClassGrids
from .errors import ConfigError
from .network import TrainConfig
from .room import DEFAULT_ARRAY_RADIUS, ArrayConfig, RoomConfig, default_array

# Simulated test rooms: (dimensions [m], broadband T60 [s]).
ROOM_PRESETS = {
    "S1": ((6.0, 4.0, 3.0), 0.2),
    "S2": ((7.0, 6.0, 3.0), 0.3),
    "S3": ((8.0, 6.0, 3.0), 0.5),
    # enlarged variant of S2 used for the source-distance sweep
    "S2L": ((8.0, 8.0, 4.0), 0.3),
    # simulated stand-in for a large strongly reverberant hall
    "P1": ((11.0, 7.5, 2.75), 0.64),
    "anechoic": ((6.0, 4.0, 3.0), 0.0),
}

ARRAY_HEIGHT_M = 1.0  # array sits at the room center, 1 m above the floor


@dataclass
class FeatureConfig:
    beta: float = 0.8
    band_hz: tuple[float, float] = (500.0, 2000.0)
    energy_percentile: float = 90.0
    order: int = 1

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("feature beta must lie in [0, 1]")
        if not 0.0 <= self.energy_percentile < 100.0:
            raise ConfigError("energy percentile must lie in [0, 100)")


@dataclass
class EstimatorConfig:
    p_min: float = 0.5
    mode: str = "cluster"

    def __post_init__(self):
        if not 0.0 <= self.p_min <= 1.0:
            raise ConfigError("p_min must lie in [0, 1]")
        if self.mode not in ("cluster", "histogram"):
            raise ConfigError(f"unknown estimator mode {self.mode!r}")


@dataclass
class ExperimentConfig:
    """Everything one training + evaluation experiment needs."""

    experiment_id: str = "experiment"
    room_name: str = "S1"
    room: RoomConfig = None
    snr_db: float = 30.0
    noise_kind: str = "white"
    n_sources: int = 1
    trials: int = 50
    seed: int = 0
    grids: ClassGrids = field(default_factory=lambda: ClassGrids.uniform_azimuth(10.0, 45.0))
    array_kind: str = "rigid"
    array_radius: float = DEFAULT_ARRAY_RADIUS
    source_distance_m: float = 1.0
    eval_distance_m: float | None = None
    train_signal_s: float = 30.0
    eval_signal_s: float = 3.0
    min_separation_cells: int = 2
    off_grid: bool = False
    train_snr_db: float = 30.0
    features: FeatureConfig = field(default_factory=FeatureConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    fs: int = 16000
    threads: int = 1

    def __post_init__(self):
        if self.room is None:
            if self.room_name not in ROOM_PRESETS:
                raise ConfigError(
                    f"unknown room preset {self.room_name!r}; options: {sorted(ROOM_PRESETS)}"
                )
            dims, t60 = ROOM_PRESETS[self.room_name]
            self.room = RoomConfig(dimensions=dims, t60=t60)
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.n_sources < 1:
            raise ConfigError("need at least one source")
        if self.noise_kind not in ("white", "babble"):
            raise ConfigError(f"unknown noise kind {self.noise_kind!r}")
        if self.train_signal_s <= 0 or self.eval_signal_s <= 0:
            raise ConfigError("signal durations must be positive")

    def array_center(self) -> np.ndarray:
        lx, ly, _ = self.room.dimensions
        return np.array([lx / 2.0, ly / 2.0, ARRAY_HEIGHT_M])

    def build_array(self) -> ArrayConfig:
        return default_array(kind=self.array_kind, radius=self.array_radius,
                             center=self.array_center())

    def describe(self) -> dict:
        """JSON-ready dictionary of every parameter (used for hashing)."""
        d = {
            "experiment_id": self.experiment_id,
            "room_name": self.room_name,
            "room": {"dimensions": list(self.room.dimensions), "t60": self.room.t60,
                     "speed_of_sound": self.room.speed_of_sound},
            "snr_db": self.snr_db,
            "noise_kind": self.noise_kind,
            "n_sources": self.n_sources,
            "trials": self.trials,
            "seed": self.seed,
            "grids": {"thetas": list(self.grids.thetas), "phis": list(self.grids.phis)},
            "array": {"kind": self.array_kind, "radius": self.array_radius},
            "source_distance_m": self.source_distance_m,
            "eval_distance_m": self.eval_distance_m,
            "train_signal_s": self.train_signal_s,
            "eval_signal_s": self.eval_signal_s,
            "min_separation_cells": self.min_separation_cells,
            "off_grid": self.off_grid,
            "train_snr_db": self.train_snr_db,
            "features": asdict(self.features),
            "train": asdict(self.train),
            "estimator": asdict(self.estimator),
            "fs": self.fs,
        }
        return d

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.describe(), sort_keys=True).encode()
        ).hexdigest()

    def environment_fingerprint(self) -> str:
        """Hash of everything that must match between training and evaluation:
        room, array, grids, and feature parameters."""
        array = self.build_array()
        payload = {
            "room": {"dimensions": list(self.room.dimensions), "t60": self.room.t60,
                     "speed_of_sound": self.room.speed_of_sound},
            "array": array.fingerprint(),
            "grids": {"thetas": list(self.grids.thetas), "phis": list(self.grids.phis)},
            "features": asdict(self.features),
            "fs": self.fs,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _grids_from_mapping(section) -> ClassGrids:
    if section is None:
        return ClassGrids.uniform_azimuth(10.0, 45.0)
    phis = section.get("azimuths_deg")
    thetas = section.get("elevations_deg", [45.0])
    if isinstance(phis, dict):
        phis = [phis.get("start", 0.0) + i * phis["step"] for i in range(phis["count"])]
    if isinstance(thetas, dict):
        thetas = [thetas.get("start", 0.0) + i * thetas["step"] for i in range(thetas["count"])]
    if phis is None:
        raise ConfigError("grids section needs 'azimuths_deg'")
    return ClassGrids(thetas=tuple(thetas), phis=tuple(phis))


_TOP_LEVEL_KEYS = {
    "experiment_id", "room", "snr_db", "noise_kind", "sources", "trials", "seed",
    "grids", "array", "scene", "features", "train", "estimator", "threads",
}


def config_from_mapping(data: dict) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from a parsed YAML mapping."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(data) - _TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        room = data.get("room", "S1")
        if isinstance(room, str):
            room_name, room_cfg = room, None
        else:
            room_name = room.get("name", "custom")
            room_cfg = RoomConfig(
                dimensions=tuple(room["dimensions"]), t60=float(room.get("t60", 0.0)),
                speed_of_sound=float(room.get("speed_of_sound", 343.0)),
            )
        array = data.get("array", {}) or {}
        scene = data.get("scene", {}) or {}
        features = FeatureConfig(**(data.get("features", {}) or {}))
        train_section = dict(data.get("train", {}) or {})
        train_snr = train_section.pop("snr_db", 30.0)
        train = TrainConfig(**train_section)
        estimator = EstimatorConfig(**(data.get("estimator", {}) or {}))
        return ExperimentConfig(
            experiment_id=str(data.get("experiment_id", "experiment")),
            room_name=room_name,
            room=room_cfg,
            snr_db=float(data.get("snr_db", 30.0)),
            noise_kind=str(data.get("noise_kind", "white")),
            n_sources=int(data.get("sources", 1)),
            trials=int(data.get("trials", 50)),
            seed=int(data.get("seed", 0)),
            grids=_grids_from_mapping(data.get("grids")),
            array_kind=str(array.get("kind", "rigid")),
            array_radius=float(array.get("radius_m", DEFAULT_ARRAY_RADIUS)),
            source_distance_m=float(scene.get("distance_m", 1.0)),
            eval_distance_m=scene.get("eval_distance_m"),
            train_signal_s=float(scene.get("train_signal_s", 30.0)),
            eval_signal_s=float(scene.get("eval_signal_s", 3.0)),
            min_separation_cells=int(scene.get("min_separation_cells", 2)),
            off_grid=bool(scene.get("off_grid", False)),
            train_snr_db=float(train_snr),
            features=features,
            train=train,
            estimator=estimator,
            threads=int(data.get("threads", 1)),
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_mapping(data or {})
