"""Spherical-harmonic decomposition of multichannel spectra.

Per TF bin, the soundfield coefficients follow from the discrete quadrature

    alpha_nm = (1 / b_n(k r)) * sum_q w_q P(x_q, k) conj(Y_nm(x_q))

with the grid weights validated against the discrete orthonormality
condition by :func:`check_grid`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import DecompositionError, GeometryError
from .room import ArrayConfig
from .sphmath import (
    Direction,
    ModeIndex,
    i_power,
    mode_count,
    mode_indices,
    mode_orders,
    radial_b_all,
    sph_harmonic_matrix,
)

RADIAL_FLOOR = 1e-3  # bins with any |b_n| below this are dropped


@dataclass
class HarmonicVector:
    """Soundfield coefficients of one TF bin: length-(N+1)^2 complex vector."""

    alpha: np.ndarray
    k: float
    frame: int = 0

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=complex)
        if not np.all(np.isfinite(self.alpha)):
            raise DecompositionError("harmonic coefficients must be finite")

    @property
    def order(self) -> int:
        n = int(math.isqrt(self.alpha.size)) - 1
        if mode_count(n) != self.alpha.size:
            raise DecompositionError("coefficient count is not a perfect square")
        return n


def wavenumber(freq_hz, speed_of_sound: float = 343.0):
    """Acoustic wavenumber ``2 pi f / c`` in rad/m (elementwise)."""
    return 2.0 * np.pi * np.asarray(freq_hz, dtype=float) / speed_of_sound


def check_grid(array: ArrayConfig, order: int) -> float:
    """Maximum deviation of the discrete quadrature from mode orthonormality.

    Returns ``max |sum_q w_q Y_nm(q) conj(Y_n'm'(q)) - delta|`` over all mode
    pairs up to ``order``.
    """
    harm = sph_harmonic_matrix(order, array.thetas, array.phis)
    gram = np.einsum("q,iq,jq->ij", array.weights, harm, np.conj(harm))
    return float(np.max(np.abs(gram - np.eye(mode_count(order)))))


def _steering(array: ArrayConfig, order: int) -> np.ndarray:
    """Matrix D with D[l, q] = w_q conj(Y_l(x_q)); alpha = (D @ P) / b."""
    harm = sph_harmonic_matrix(order, array.thetas, array.phis)
    return np.conj(harm) * array.weights[None, :]


def radial_weights(array: ArrayConfig, k: float, order: int) -> np.ndarray:
    """Per-mode radial weighting ``b_n(k r)`` expanded to linear mode index."""
    b_orders = radial_b_all(order, k * array.radius, array.kind)
    return b_orders[mode_orders(order)]


def decompose(mic_spectra: np.ndarray, k: float, array: ArrayConfig, order: int,
              frame: int = 0) -> HarmonicVector:
    """Estimate soundfield coefficients of one TF bin from Q mic spectra."""
    mic_spectra = np.asarray(mic_spectra, dtype=complex)
    if mic_spectra.size != array.num_mics:
        raise GeometryError(
            f"got {mic_spectra.size} spectra for {array.num_mics} microphones"
        )
    if array.num_mics < mode_count(order):
        raise GeometryError(
            f"{array.num_mics} microphones cannot resolve order {order}"
        )
    b = radial_weights(array, k, order)
    if np.min(np.abs(b)) < RADIAL_FLOOR:
        raise DecompositionError(
            f"radial weighting below {RADIAL_FLOOR} at k={k:.3f}; bin is ill-conditioned"
        )
    alpha = (_steering(array, order) @ mic_spectra) / b
    return HarmonicVector(alpha=alpha, k=float(k), frame=frame)


def decompose_spectrogram(frames: np.ndarray, ks: np.ndarray, array: ArrayConfig,
                          order: int) -> tuple[np.ndarray, np.ndarray]:
    """Decompose every (bin, frame) cell of a (Q, B, T) spectrogram block.

    Returns ``(alpha, kept)`` where ``alpha`` has shape (B_kept, T, (N+1)^2)
    and ``kept`` indexes the bins whose radial weighting stayed above the
    conditioning floor.
    """
    frames = np.asarray(frames)
    ks = np.asarray(ks, dtype=float)
    if array.num_mics < mode_count(order):
        raise GeometryError(f"{array.num_mics} microphones cannot resolve order {order}")
    d = _steering(array, order)
    kept = []
    blocks = []
    for bi, k in enumerate(ks):
        b = radial_weights(array, k, order)
        if np.min(np.abs(b)) < RADIAL_FLOOR:
            continue
        alpha = (d @ frames[:, bi, :]) / b[:, None]  # (modes, T)
        blocks.append(alpha.T)
        kept.append(bi)
    if not blocks:
        raise DecompositionError("all bins fell below the radial conditioning floor")
    return np.stack(blocks), np.asarray(kept, dtype=int)


def plane_wave_modes(direction: Direction, order: int) -> np.ndarray:
    """Soundfield coefficients of a unit-amplitude plane wave from ``direction``:
    ``alpha_nm = 4 pi i**n conj(Y_nm(direction))`` up to ``order``."""
    harm = sph_harmonic_matrix(order, [direction.theta], [direction.phi])[:, 0]
    phases = np.array([i_power(idx.n) for idx in mode_indices(order)])
    return 4.0 * np.pi * phases * np.conj(harm)


def plane_wave_pressure(direction: Direction, array: ArrayConfig, k: float,
                        order: int) -> np.ndarray:
    """Total pressure at the array microphones for a unit plane wave.

    Expands the incident wave (plus rigid-sphere scattering when the array
    kind is rigid) in harmonics up to ``order`` and evaluates at the grid.
    """
    alpha = plane_wave_modes(direction, order)
    b = radial_weights(array, k, order)
    harm = sph_harmonic_matrix(order, array.thetas, array.phis)
    return (alpha * b) @ harm


def resynthesize_pressure(vec: HarmonicVector, array: ArrayConfig) -> np.ndarray:
    """Mic pressures implied by a coefficient vector (inverse of decompose)."""
    order = vec.order
    b = radial_weights(array, vec.k, order)
    harm = sph_harmonic_matrix(order, array.thetas, array.phis)
    return (vec.alpha * b) @ harm


def dump_coefficients_csv(alpha: np.ndarray, bins: np.ndarray, path) -> None:
    """Write an (B, T, modes) coefficient block as CSV rows
    (frame, bin, n, m, re, im) for inspection and fixture exchange."""
    order = int(math.isqrt(alpha.shape[2])) - 1
    modes = mode_indices(order)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "bin", "n", "m", "re", "im"])
        for bi, b in enumerate(bins):
            for tau in range(alpha.shape[1]):
                for idx in modes:
                    z = alpha[bi, tau, idx.linear]
                    writer.writerow([tau, int(b), idx.n, idx.m, repr(z.real), repr(z.imag)])
