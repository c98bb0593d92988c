"""Modal-coherence features: EMA coherence, CNN input tensors, bin selection,
the analytic coherence model, and the feature dataset file format.

The learning feature of this toolkit is the per-TF-bin coherence matrix
``E{alpha_i conj(alpha_j)}``, estimated by an exponential moving average
along frames and stacked into a real ``M x M x 2`` tensor (real part in
channel 0, imaginary part in channel 1).
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import FeatureError, GeometryError, SignalError
from .room import ArrayConfig, default_array
from .shd import HarmonicVector, check_grid, decompose_spectrogram, wavenumber
from .sphmath import Direction, mode_count, mode_indices, psi, upsilon
from .stft import STFTSpec, Spectrogram, select_band, stft_forward

DATASET_MAGIC = b"MCF1"
DATASET_VERSION = 1


@dataclass
class CoherenceMatrix:
    """Hermitian modal coherence of one TF bin."""

    c: np.ndarray
    k: float = 0.0
    tau: int = 0

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=complex)
        if self.c.ndim != 2 or self.c.shape[0] != self.c.shape[1]:
            raise FeatureError("coherence matrix must be square")
        scale = max(1.0, float(np.max(np.abs(self.c))))
        if np.max(np.abs(self.c - self.c.conj().T)) > 1e-10 * scale:
            raise FeatureError("coherence matrix is not Hermitian")


@dataclass
class TFBinFeature:
    """One training/evaluation record: feature tensor plus bin metadata."""

    feature: np.ndarray
    bin_energy: float
    k: int
    tau: int
    label_theta: int = -1
    label_phi: int = -1


@dataclass
class FeatureBlock:
    """Column-oriented batch of TF-bin features (the in-memory dataset)."""

    tensors: np.ndarray  # (n, M, M, 2)
    bins: np.ndarray  # DFT bin index per record
    frames: np.ndarray
    energies: np.ndarray
    label_theta: np.ndarray = field(default=None)
    label_phi: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.tensors)
        if self.label_theta is None:
            self.label_theta = np.full(n, -1, dtype=np.int16)
        if self.label_phi is None:
            self.label_phi = np.full(n, -1, dtype=np.int16)
        self.bins = np.asarray(self.bins)
        self.frames = np.asarray(self.frames)
        self.energies = np.asarray(self.energies, dtype=float)

    def __len__(self) -> int:
        return len(self.tensors)

    def select(self, mask_or_index) -> "FeatureBlock":
        return FeatureBlock(
            tensors=self.tensors[mask_or_index],
            bins=self.bins[mask_or_index],
            frames=self.frames[mask_or_index],
            energies=self.energies[mask_or_index],
            label_theta=self.label_theta[mask_or_index],
            label_phi=self.label_phi[mask_or_index],
        )

    def records(self) -> list[TFBinFeature]:
        return [
            TFBinFeature(
                feature=self.tensors[i],
                bin_energy=float(self.energies[i]),
                k=int(self.bins[i]),
                tau=int(self.frames[i]),
                label_theta=int(self.label_theta[i]),
                label_phi=int(self.label_phi[i]),
            )
            for i in range(len(self))
        ]

    @staticmethod
    def concatenate(blocks: list["FeatureBlock"]) -> "FeatureBlock":
        if not blocks:
            raise FeatureError("cannot concatenate zero feature blocks")
        return FeatureBlock(
            tensors=np.concatenate([b.tensors for b in blocks]),
            bins=np.concatenate([b.bins for b in blocks]),
            frames=np.concatenate([b.frames for b in blocks]),
            energies=np.concatenate([b.energies for b in blocks]),
            label_theta=np.concatenate([b.label_theta for b in blocks]),
            label_phi=np.concatenate([b.label_phi for b in blocks]),
        )


def ema_coherence(prev: CoherenceMatrix, vec: HarmonicVector, beta: float) -> CoherenceMatrix:
    """One smoothing step: ``(1-beta) * alpha alpha^H + beta * prev``."""
    if not 0.0 <= beta <= 1.0:
        raise FeatureError(f"smoothing factor must lie in [0, 1], got {beta}")
    if prev.c.shape[0] != vec.alpha.size:
        raise FeatureError("coherence matrix and coefficient vector disagree in size")
    inst = np.outer(vec.alpha, np.conj(vec.alpha))
    return CoherenceMatrix(c=(1.0 - beta) * inst + beta * prev.c, k=vec.k, tau=vec.frame)


def coherence_stream(alpha: np.ndarray, beta: float) -> np.ndarray:
    """Smoothed coherence for an (B, T, M) coefficient block -> (B, T, M, M).

    The average resets to zero at the start of the stream; frames within a
    bin are strictly ordered, bins are independent.
    """
    if not 0.0 <= beta <= 1.0:
        raise FeatureError(f"smoothing factor must lie in [0, 1], got {beta}")
    inst = alpha[:, :, :, None] * np.conj(alpha[:, :, None, :])
    out = np.empty_like(inst)
    acc = np.zeros_like(inst[:, 0])
    for t in range(inst.shape[1]):
        acc = (1.0 - beta) * inst[:, t] + beta * acc
        out[:, t] = acc
    return out


def build_feature(c: CoherenceMatrix | np.ndarray) -> np.ndarray:
    """Stack a Hermitian coherence matrix into the real (M, M, 2) CNN input."""
    mat = c.c if isinstance(c, CoherenceMatrix) else np.asarray(c, dtype=complex)
    scale = max(1.0, float(np.max(np.abs(mat))))
    if np.max(np.abs(mat - mat.conj().T)) > 1e-10 * scale:
        raise FeatureError("refusing to build a feature from a non-Hermitian matrix")
    return np.stack([mat.real, mat.imag], axis=-1)


def bin_energies(coherence: np.ndarray) -> np.ndarray:
    """Average magnitude of the coherence entries, per leading index."""
    return np.mean(np.abs(coherence), axis=(-2, -1))


def energy_filter(block, percentile: float):
    """Keep the records whose energy reaches the given percentile of the block.

    Ties at the threshold are kept (the comparison is >=), so a block of
    equal energies survives any percentile.  Accepts either a
    :class:`FeatureBlock` or a list of :class:`TFBinFeature`.
    """
    if not 0.0 <= percentile < 100.0:
        raise FeatureError(f"percentile must lie in [0, 100), got {percentile}")
    if isinstance(block, FeatureBlock):
        if len(block) == 0:
            raise FeatureError("cannot filter an empty feature block")
        threshold = np.percentile(block.energies, percentile)
        return block.select(block.energies >= threshold)
    records = list(block)
    if not records:
        raise FeatureError("cannot filter an empty feature list")
    energies = np.array([r.bin_energy for r in records])
    threshold = np.percentile(energies, percentile)
    return [r for r, e in zip(records, energies) if e >= threshold]


@dataclass
class CoherenceSource:
    """One term of the analytic coherence model.

    ``gamma`` holds the spherical-harmonic coefficients of the expected
    squared reflection-gain density, linearly indexed (v^2 + v + u); ``None``
    means a purely direct (anechoic) source.
    """

    psd: float
    direct_gain_sq: float
    direction: Direction
    gamma: np.ndarray | None = None


def analytic_coherence(sources, order: int) -> CoherenceMatrix:
    """Closed-form modal coherence of independent far-field sources.

    Each source contributes ``psd * (direct_gain_sq * Upsilon(direction)
    + sum_vu gamma_vu * Psi_vu)``; sources add because they are assumed
    uncorrelated.
    """
    m = mode_count(order)
    modes = mode_indices(order)
    out = np.zeros((m, m), dtype=complex)
    for src in sources:
        if not isinstance(src, CoherenceSource):
            src = CoherenceSource(*src)
        if src.psd < 0.0 or src.direct_gain_sq < 0.0:
            raise FeatureError("source power terms must be non-negative")
        contrib = np.zeros((m, m), dtype=complex)
        for a in modes:
            for b in modes:
                val = src.direct_gain_sq * upsilon(a, b, src.direction)
                if src.gamma is not None:
                    gamma = np.asarray(src.gamma, dtype=complex).ravel()
                    v_max = int(math.isqrt(gamma.size)) - 1
                    for v in range(v_max + 1):
                        for u in range(-v, v + 1):
                            g = gamma[v * v + v + u]
                            if g != 0.0:
                                val += g * psi(a, b, v, u)
                contrib[a.linear, b.linear] = val
        out += src.psd * contrib
    return CoherenceMatrix(c=out)


class CoherenceFeatureExtractor(BaseEstimator, TransformerMixin):
    """Turn a multichannel waveform into per-TF-bin coherence feature tensors.

    Parameters
    ----------
    array : ArrayConfig or None
        Microphone grid; the shipped 9-mic rigid sphere when None.
    order : int
        Decomposition order N; tensors have side (N+1)^2.
    band_hz : (float, float)
        Analysis band; bins outside are discarded before decomposition.
    beta : float
        EMA smoothing factor along frames (same value must be used for
        training and inference).
    energy_percentile : float or None
        When set, transform() applies the energy pre-selection at this
        percentile; None returns every bin.
    """

    def __init__(self, array=None, order=1, fs=16000, band_hz=(500.0, 2000.0),
                 beta=0.8, speed_of_sound=343.0, energy_percentile=None,
                 grid_tolerance=1e-6):
        self.array = array
        self.order = order
        self.fs = fs
        self.band_hz = band_hz
        self.beta = beta
        self.speed_of_sound = speed_of_sound
        self.energy_percentile = energy_percentile
        self.grid_tolerance = grid_tolerance

    def fit(self, X=None, y=None):
        array = self.array if self.array is not None else default_array()
        residual = check_grid(array, self.order)
        if residual > self.grid_tolerance:
            raise GeometryError(
                f"grid residual {residual:.2e} exceeds tolerance {self.grid_tolerance:.2e} "
                f"for order {self.order}"
            )
        self.array_ = array
        self.grid_residual_ = residual
        return self

    def transform(self, X) -> FeatureBlock:
        if not hasattr(self, "array_"):
            self.fit()
        waveform = np.atleast_2d(np.asarray(X, dtype=float))
        if waveform.shape[0] != self.array_.num_mics:
            raise SignalError(
                f"waveform has {waveform.shape[0]} channels, array has {self.array_.num_mics}"
            )
        spec = STFTSpec(fs=self.fs)
        spectrogram = select_band(stft_forward(waveform, spec), *self.band_hz)
        return self._features_from_spectrogram(spectrogram)

    def _features_from_spectrogram(self, spectrogram: Spectrogram) -> FeatureBlock:
        ks = wavenumber(spectrogram.bin_frequencies(), self.speed_of_sound)
        alpha, kept = decompose_spectrogram(spectrogram.frames, ks, self.array_, self.order)
        coh = coherence_stream(alpha, self.beta)  # (B, T, M, M)
        n_bins, n_frames = coh.shape[:2]
        tensors = np.stack([coh.real, coh.imag], axis=-1).reshape(
            n_bins * n_frames, coh.shape[2], coh.shape[3], 2
        )
        bins = np.repeat(spectrogram.bins[kept], n_frames)
        frames = np.tile(np.arange(n_frames), n_bins)
        energies = bin_energies(coh).reshape(-1)
        block = FeatureBlock(tensors=tensors, bins=bins, frames=frames, energies=energies)
        if self.energy_percentile is not None:
            block = energy_filter(block, self.energy_percentile)
        return block


def save_dataset(path, block: FeatureBlock, n_theta: int, n_phi: int) -> None:
    """Write a feature block as flat little-endian binary records.

    Header: magic, version, tensor side M, channel count, theta/phi class
    counts, record count.  Records are sorted by (bin, frame) and hold
    (k: uint16, label_theta: int16, label_phi: int16, M*M*2 float32).
    """
    order_key = np.lexsort((block.frames, block.bins))
    block = block.select(order_key)
    m = block.tensors.shape[1]
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<HHHHHQ", DATASET_VERSION, m, 2, n_theta, n_phi, len(block)))
        for i in range(len(block)):
            fh.write(struct.pack("<Hhh", int(block.bins[i]), int(block.label_theta[i]),
                                 int(block.label_phi[i])))
            fh.write(block.tensors[i].astype("<f4").tobytes())


def load_dataset(path) -> tuple[FeatureBlock, int, int]:
    """Read a dataset file back; returns (block, n_theta, n_phi)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != DATASET_MAGIC:
        raise FeatureError(f"{path} is not a feature dataset (bad magic)")
    version, m, channels, n_theta, n_phi, count = struct.unpack("<HHHHHQ", raw[4:22])
    if version != DATASET_VERSION:
        raise FeatureError(f"unsupported dataset version {version}")
    rec_size = 6 + m * m * channels * 4
    if len(raw) != 22 + count * rec_size:
        raise FeatureError(f"{path} is truncated or padded (expected {count} records)")
    bins = np.empty(count, dtype=int)
    lt = np.empty(count, dtype=np.int16)
    lp = np.empty(count, dtype=np.int16)
    tensors = np.empty((count, m, m, channels))
    off = 22
    for i in range(count):
        bins[i], lt[i], lp[i] = struct.unpack_from("<Hhh", raw, off)
        tensors[i] = np.frombuffer(raw, dtype="<f4", count=m * m * channels,
                                   offset=off + 6).reshape(m, m, channels)
        off += rec_size
    block = FeatureBlock(tensors=tensors, bins=bins, frames=np.zeros(count, dtype=int),
                         energies=bin_energies(tensors[..., 0] + 1j * tensors[..., 1]),
                         label_theta=lt, label_phi=lp)
    return block, n_theta, n_phi


def dump_features_csv(block: FeatureBlock, path) -> None:
    """Debug export: one row per record with the flattened tensor values."""
    m = block.tensors.shape[1]
    header = ["bin", "frame", "energy", "label_theta", "label_phi"]
    header += [f"v{i}" for i in range(m * m * 2)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(block)):
            row = [int(block.bins[i]), int(block.frames[i]), repr(float(block.energies[i])),
                   int(block.label_theta[i]), int(block.label_phi[i])]
            row += [repr(float(v)) for v in block.tensors[i].ravel()]
            writer.writerow(row)
