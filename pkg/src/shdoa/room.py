"""Shoebox room simulation: image-source RIRs, mixtures, noise, and signals.

The simulator renders free-field (open-sphere) pressure at the microphone
positions; rigid-sphere scattering is handled later by the radial weighting
of the harmonic decomposition stage.  Training and evaluation share the
same convention, so the learned features stay consistent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile
from scipy.signal import fftconvolve, lfilter

from .errors import DomainError, GeometryError, SignalError
from .sphmath import Direction, mode_count, sph_harmonic_matrix

DEFAULT_FS = 16000
DEFAULT_ARRAY_RADIUS = 0.042  # meters; rigid-sphere baseline geometry

_FRAC_TAPS = np.arange(-3, 5)  # 8-tap windowed-sinc fractional delay


@dataclass
class RoomConfig:
    """Rectangular room with a single broadband reverberation time.

    ``t60 = 0`` gives an anechoic (free-field) room.  The uniform wall
    reflection coefficient is derived from ``t60`` with the Eyring relation,
    which the image-source model reproduces closely.
    """

    dimensions: tuple[float, float, float]
    t60: float = 0.0
    speed_of_sound: float = 343.0
    max_reflection_order: int = 100

    def __post_init__(self):
        self.dimensions = tuple(float(d) for d in self.dimensions)
        if len(self.dimensions) != 3 or min(self.dimensions) <= 0.0:
            raise GeometryError(f"room dimensions must be 3 positive lengths, got {self.dimensions}")
        if self.t60 < 0.0:
            raise GeometryError(f"t60 must be >= 0, got {self.t60}")
        if self.speed_of_sound <= 0.0:
            raise GeometryError("speed of sound must be positive")

    @property
    def reflection_coefficient(self) -> float:
        """Uniform wall reflection coefficient in [0, 1) matching ``t60``.

        Sabine inversion: beta^2 = 1 - absorption.  The slight extra damping
        relative to an exponential-decay inversion compensates the slow axial
        image chains of a rectangular room, so the measured decay of the
        generated RIRs lands on ``t60``.
        """
        if self.t60 == 0.0:
            return 0.0
        lx, ly, lz = self.dimensions
        volume = lx * ly * lz
        surface = 2.0 * (lx * ly + lx * lz + ly * lz)
        absorption = 24.0 * math.log(10.0) * volume / (
            self.speed_of_sound * surface * self.t60
        )
        if absorption >= 1.0:
            return 0.0
        return math.sqrt(1.0 - absorption)

    def contains(self, pos: np.ndarray) -> bool:
        return bool(np.all(pos > 0.0) and np.all(pos < np.asarray(self.dimensions)))


@dataclass
class ArrayConfig:
    """Spherical microphone array: grid directions, quadrature weights, placement."""

    radius: float
    kind: str
    mic_directions: tuple[Direction, ...]
    weights: np.ndarray
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.radius <= 0.0:
            raise GeometryError("array radius must be positive")
        if self.kind not in ("open", "rigid"):
            raise GeometryError(f"array kind must be 'open' or 'rigid', got {self.kind!r}")
        self.mic_directions = tuple(self.mic_directions)
        self.weights = np.asarray(self.weights, dtype=float)
        self.center = np.asarray(self.center, dtype=float)
        if len(self.mic_directions) != self.weights.size:
            raise GeometryError("one quadrature weight per microphone is required")

    @property
    def num_mics(self) -> int:
        return len(self.mic_directions)

    @property
    def thetas(self) -> np.ndarray:
        return np.array([d.theta for d in self.mic_directions])

    @property
    def phis(self) -> np.ndarray:
        return np.array([d.phi for d in self.mic_directions])

    def mic_positions(self) -> np.ndarray:
        """Absolute microphone coordinates, shape (Q, 3)."""
        units = np.stack([d.to_cartesian() for d in self.mic_directions])
        return self.center + self.radius * units

    def fingerprint(self) -> dict:
        return {
            "radius": self.radius,
            "kind": self.kind,
            "thetas": [round(t, 12) for t in self.thetas],
            "phis": [round(p, 12) for p in self.phis],
            "weights": [round(w, 12) for w in self.weights.tolist()],
        }


@dataclass
class SourceSpec:
    """One sound source: direction and distance relative to the array center."""

    direction: Direction
    distance: float
    signal: np.ndarray
    level: float = 1.0
    fs: int = DEFAULT_FS

    def __post_init__(self):
        self.signal = np.asarray(self.signal, dtype=float)
        if self.signal.ndim != 1:
            raise SignalError("source signal must be a 1-D waveform")
        if self.distance <= 0.0:
            raise GeometryError("source distance must be positive")

    def position(self, array: ArrayConfig) -> np.ndarray:
        return array.center + self.distance * self.direction.to_cartesian()


# Cosines of the elevation rings of the default grid: a pole microphone plus
# two rings of four, with ring elevations at Gauss-Radau nodes so that the
# fitted weights integrate low-order harmonic products exactly.
_RING_COSINES = (1.0, 0.2898979485566356, -0.6898979485566356)


def _grid_weights(directions: tuple[Direction, ...], order: int) -> np.ndarray:
    """Least-squares quadrature weights for the discrete orthonormality system."""
    thetas = np.array([d.theta for d in directions])
    phis = np.array([d.phi for d in directions])
    harm = sph_harmonic_matrix(order, thetas, phis)
    m = mode_count(order)
    rows = np.einsum("iq,jq->ijq", harm, np.conj(harm)).reshape(m * m, len(directions))
    target = np.eye(m, dtype=complex).reshape(-1)
    a = np.vstack([rows.real, rows.imag])
    b = np.concatenate([target.real, target.imag])
    weights, *_ = np.linalg.lstsq(a, b, rcond=None)
    return weights


def default_array(kind: str = "rigid", radius: float = DEFAULT_ARRAY_RADIUS,
                  center=(0.0, 0.0, 0.0)) -> ArrayConfig:
    """The shipped 9-microphone spherical grid with fitted quadrature weights."""
    directions = [Direction(0.0, 0.0)]
    for j in range(4):
        directions.append(Direction(math.acos(_RING_COSINES[1]), j * math.pi / 2.0))
    for j in range(4):
        directions.append(Direction(math.acos(_RING_COSINES[2]), math.pi / 4.0 + j * math.pi / 2.0))
    directions = tuple(directions)
    return ArrayConfig(
        radius=radius,
        kind=kind,
        mic_directions=directions,
        weights=_grid_weights(directions, order=1),
        center=np.asarray(center, dtype=float),
    )


def _image_lattice(room: RoomConfig, src: np.ndarray, horizon_m: float):
    """All image-source positions within ``horizon_m`` plus reflection counts."""
    dims = np.asarray(room.dimensions)
    counts = np.ceil(horizon_m / (2.0 * dims)).astype(int)
    axes = [np.arange(-c, c + 1) for c in counts]
    rx, ry, rz = np.meshgrid(*axes, indexing="ij")
    r = np.stack([rx.ravel(), ry.ravel(), rz.ravel()], axis=1)

    positions = []
    reflections = []
    for px in (0, 1):
        for py in (0, 1):
            for pz in (0, 1):
                p = np.array([px, py, pz])
                pos = (1 - 2 * p) * src + 2.0 * r * dims
                refl = np.abs(r - p).sum(axis=1) + np.abs(r).sum(axis=1)
                positions.append(pos)
                reflections.append(refl)
    return np.concatenate(positions), np.concatenate(reflections)


def _scatter_taps(rir: np.ndarray, delays: np.ndarray, amps: np.ndarray) -> None:
    """Accumulate windowed-sinc fractional-delay impulses into ``rir`` in place."""
    n0 = np.floor(delays).astype(int)
    frac = delays - n0
    x = _FRAC_TAPS[None, :] - frac[:, None]
    window = np.where(np.abs(x) < 4.0, 0.5 * (1.0 + np.cos(np.pi * x / 4.0)), 0.0)
    taps = amps[:, None] * np.sinc(x) * window
    idx = n0[:, None] + _FRAC_TAPS[None, :]
    valid = (idx >= 0) & (idx < rir.size)
    for t in range(_FRAC_TAPS.size):
        col_idx = idx[:, t][valid[:, t]]
        col_val = taps[:, t][valid[:, t]]
        if col_idx.size:
            rir += np.bincount(col_idx, weights=col_val, minlength=rir.size)


def _rir_length_seconds(room: RoomConfig, distance_m: float) -> float:
    return distance_m / room.speed_of_sound + max(1.3 * room.t60, 0.01) + 0.005


def rir_matrix(room: RoomConfig, src: np.ndarray, mic_positions: np.ndarray, fs: int,
               rir_seconds: float | None = None) -> np.ndarray:
    """Image-source RIRs from one source to many microphones, shape (Q, L).

    The image lattice is shared across microphones; each impulse lands with
    an 8-tap Hann-windowed-sinc fractional delay and ``1 / (4 pi d)`` gain,
    attenuated by ``beta**reflections``.
    """
    src = np.asarray(src, dtype=float)
    mic_positions = np.atleast_2d(np.asarray(mic_positions, dtype=float))
    if not room.contains(src):
        raise GeometryError(f"source position {src.tolist()} is outside the room")
    for mic in mic_positions:
        if not room.contains(mic):
            raise GeometryError(f"microphone position {mic.tolist()} is outside the room")

    max_mic_dist = float(np.max(np.linalg.norm(mic_positions - src, axis=1)))
    if rir_seconds is None:
        rir_seconds = _rir_length_seconds(room, max_mic_dist)
    length = int(round(rir_seconds * fs)) + _FRAC_TAPS.size
    horizon = rir_seconds * room.speed_of_sound + max_mic_dist

    images, reflections = _image_lattice(room, src, horizon)
    beta = room.reflection_coefficient
    keep = reflections <= room.max_reflection_order
    if beta == 0.0:
        keep &= reflections == 0
    images, reflections = images[keep], reflections[keep]
    gains = beta ** reflections if beta > 0.0 else np.ones(len(images))

    out = np.zeros((len(mic_positions), length))
    for q, mic in enumerate(mic_positions):
        dists = np.linalg.norm(images - mic, axis=1)
        inside = dists <= (length - _FRAC_TAPS.size) / fs * room.speed_of_sound
        d = dists[inside]
        amps = gains[inside] / (4.0 * np.pi * d)
        _scatter_taps(out[q], d * fs / room.speed_of_sound, amps)
    return out


def image_source_rir(room: RoomConfig, src, mic, fs: int,
                     rir_seconds: float | None = None) -> np.ndarray:
    """Impulse response between one source and one microphone position."""
    return rir_matrix(room, src, np.atleast_2d(np.asarray(mic, dtype=float)), fs, rir_seconds)[0]


def synthesize_mixture(sources: list[SourceSpec], room: RoomConfig, array: ArrayConfig,
                       fs: int = DEFAULT_FS) -> np.ndarray:
    """Render the multichannel mixture of all sources at the array microphones.

    Each channel is the sum over sources of the source signal convolved with
    its image-source RIR.  Returns an array of shape (Q, T).
    """
    if not sources:
        raise SignalError("at least one source is required")
    for spec in sources:
        if spec.fs != fs:
            raise SignalError(f"source sampled at {spec.fs} Hz, expected {fs} Hz")
        if spec.distance <= array.radius:
            raise GeometryError("source distance must exceed the array radius")
        if not room.contains(spec.position(array)):
            raise GeometryError("source position is outside the room")

    mic_positions = array.mic_positions()
    rirs = [rir_matrix(room, spec.position(array), mic_positions, fs) for spec in sources]
    max_len = max(spec.signal.size + h.shape[1] - 1 for spec, h in zip(sources, rirs))
    out = np.zeros((array.num_mics, max_len))
    for spec, h in zip(sources, rirs):
        sig = spec.level * spec.signal
        for q in range(array.num_mics):
            conv = fftconvolve(sig, h[q])
            out[q, : conv.size] += conv
    return out


def measure_snr_db(signal: np.ndarray, noise: np.ndarray) -> float:
    """Pooled signal-to-noise ratio in dB across all channels."""
    p_sig = float(np.mean(np.square(signal)))
    p_noise = float(np.mean(np.square(noise)))
    if p_noise == 0.0:
        return math.inf
    return 10.0 * math.log10(p_sig / p_noise)


def add_noise(signal: np.ndarray, snr_db: float, kind: str = "white", seed: int = 0,
              room: RoomConfig | None = None, array: ArrayConfig | None = None,
              n_babble: int = 6) -> np.ndarray:
    """Add noise at a target pooled SNR to a multichannel signal.

    ``white`` adds independent Gaussian noise per channel.  ``babble`` sums
    several speech-shaped sources rendered through RIRs from random in-room
    positions (requires ``room`` and ``array``), then scales the pooled
    babble field to the target SNR.
    """
    signal = np.atleast_2d(np.asarray(signal, dtype=float))
    if math.isinf(snr_db):
        return signal.copy()
    p_sig = float(np.mean(np.square(signal)))
    if p_sig == 0.0:
        raise SignalError("cannot set a finite SNR on an all-zero signal")
    rng = np.random.default_rng(seed)

    if kind == "white":
        noise = rng.standard_normal(signal.shape)
    elif kind == "babble":
        if room is None or array is None:
            raise DomainError("babble noise requires room and array configurations")
        if n_babble < 4:
            raise DomainError("babble requires at least 4 component sources")
        fs = DEFAULT_FS
        duration = signal.shape[1] / fs + 0.1
        noise = np.zeros_like(signal)
        mic_positions = array.mic_positions()
        margin = 0.3
        for b in range(n_babble):
            while True:
                pos = rng.uniform(margin, np.asarray(room.dimensions) - margin)
                if np.linalg.norm(pos - array.center) > 2.0 * array.radius + 0.1:
                    break
            talker = gen_training_signal(duration, seed=int(rng.integers(2**31)), fs=fs,
                                         band_hz=(150.0, 3600.0))
            h = rir_matrix(room, pos, mic_positions, fs)
            for q in range(signal.shape[0]):
                conv = fftconvolve(talker, h[q])[: signal.shape[1]]
                noise[q, : conv.size] += conv
    else:
        raise DomainError(f"unknown noise kind {kind!r}")

    p_noise = float(np.mean(np.square(noise)))
    scale = math.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0)))
    return signal + scale * noise


def gen_training_signal(duration_s: float, seed: int = 0, fs: int = DEFAULT_FS,
                        band_hz: tuple[float, float] = (200.0, 3800.0)) -> np.ndarray:
    """Random non-white signal with time- and frequency-varying spectral density.

    White noise is passed through a two-pole resonator whose center frequency
    drifts as a random walk inside ``band_hz``, then amplitude-modulated by a
    slowly varying envelope.  The result has low spectral flatness and a
    power level that fluctuates over both time and frequency, which is the
    diversity the learning stage needs.
    """
    if duration_s <= 0.0:
        raise SignalError("duration must be positive")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * fs))
    block = 1024
    n_blocks = math.ceil(n / block)

    lo, hi = band_hz
    log_f = math.log(lo) + rng.random() * (math.log(hi) - math.log(lo))
    out = np.empty(n_blocks * block)
    zi = np.zeros(2)
    for i in range(n_blocks):
        log_f += rng.normal(0.0, 0.15)
        log_f = min(max(log_f, math.log(lo)), math.log(hi))
        w0 = 2.0 * math.pi * math.exp(log_f) / fs
        r = rng.uniform(0.90, 0.97)
        a = np.array([1.0, -2.0 * r * math.cos(w0), r * r])
        b = np.array([1.0 - r])
        x = rng.standard_normal(block)
        out[i * block : (i + 1) * block], zi = lfilter(b, a, x, zi=zi)
    out = out[:n]

    env_points = np.exp(np.cumsum(rng.normal(0.0, 0.35, size=n_blocks + 1)))
    env_points /= env_points.max()
    env_points = np.clip(env_points, 0.05, 1.0)
    env = np.interp(np.arange(n), np.arange(n_blocks + 1) * block, env_points)
    out *= env

    rms = math.sqrt(float(np.mean(np.square(out))))
    out *= 0.1 / rms
    return out * rng.uniform(0.5, 2.0)


def write_wav(path, signal: np.ndarray, fs: int = DEFAULT_FS) -> None:
    """Write a (Q, T) waveform as a single-precision multichannel WAV file."""
    data = np.atleast_2d(np.asarray(signal)).T.astype(np.float32)
    wavfile.write(path, fs, data)


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a WAV file back as a float (Q, T) array plus its sample rate."""
    fs, data = wavfile.read(path)
    data = np.atleast_2d(data.astype(float))
    if data.shape[0] > data.shape[1]:
        data = data.T
    return data, int(fs)
