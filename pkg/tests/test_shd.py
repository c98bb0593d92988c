import math

import numpy as np
import pytest

from shdoa.errors import DecompositionError, GeometryError
from shdoa.room import ArrayConfig, default_array
from shdoa.shd import (
    HarmonicVector,
    check_grid,
    decompose,
    decompose_spectrogram,
    dump_coefficients_csv,
    plane_wave_modes,
    plane_wave_pressure,
    resynthesize_pressure,
    wavenumber,
)
from shdoa.sphmath import Direction, mode_count

BAND_BINS = np.arange(8, 33)
BIN_HZ = 62.5


def dense_validation_array(kind="open", radius=0.042, n_rings=4, n_az=8):
    """Product quadrature grid, exact well beyond the shipped 9-mic grid."""
    gl_x, gl_w = np.polynomial.legendre.leggauss(n_rings)
    dirs, weights = [], []
    for x, wx in zip(gl_x, gl_w):
        for j in range(n_az):
            dirs.append(Direction(math.acos(x), j * 2.0 * math.pi / n_az))
            weights.append(wx * 2.0 * math.pi / n_az)
    return ArrayConfig(radius=radius, kind=kind, mic_directions=tuple(dirs),
                       weights=np.array(weights))


# --- grid validation -----------------------------------------------------------


def test_shipped_grid_residual_regression():
    assert check_grid(default_array(), 1) <= 1e-6
    # frozen regression: the fitted weights solve the system to rounding
    assert check_grid(default_array(), 1) < 1e-12


def test_single_mic_grid_fails():
    grid = ArrayConfig(radius=0.042, kind="open",
                       mic_directions=(Direction(0.0, 0.0),),
                       weights=np.array([4.0 * math.pi]))
    assert check_grid(grid, 1) >= 0.9


def test_order_zero_residual_formula():
    rng = np.random.default_rng(0)
    dirs = tuple(Direction(t, p) for t, p in zip(rng.uniform(0.1, 3.0, 5),
                                                 rng.uniform(0.0, 6.2, 5)))
    weights = rng.uniform(0.5, 2.0, 5)
    grid = ArrayConfig(radius=0.05, kind="open", mic_directions=dirs, weights=weights)
    expected = abs(weights.sum() / (4.0 * math.pi) - 1.0)
    assert check_grid(grid, 0) == pytest.approx(expected, rel=1e-12)


# --- single-bin decomposition ---------------------------------------------------


def test_constant_pressure_is_pure_monopole():
    array = default_array()
    k = float(wavenumber(1000.0))
    p0 = 2.0 - 1.0j
    vec = decompose(np.full(array.num_mics, p0), k, array, order=1)
    from shdoa.shd import radial_weights

    b0 = radial_weights(array, k, 1)[0]
    expected = p0 * math.sqrt(4.0 * math.pi) / b0
    assert vec.alpha[0] == pytest.approx(expected, rel=1e-12)
    assert np.max(np.abs(vec.alpha[1:])) < 1e-6 * abs(vec.alpha[0])


def test_zero_spectra_zero_vector():
    array = default_array()
    vec = decompose(np.zeros(9), float(wavenumber(1000.0)), array, order=1)
    assert not np.any(vec.alpha)


def test_decompose_linearity():
    array = default_array()
    k = float(wavenumber(750.0))
    rng = np.random.default_rng(1)
    p1 = rng.standard_normal(9) + 1j * rng.standard_normal(9)
    p2 = rng.standard_normal(9) + 1j * rng.standard_normal(9)
    a, b = 1.7, -0.4 + 0.2j
    left = decompose(a * p1 + b * p2, k, array, order=1).alpha
    right = a * decompose(p1, k, array, order=1).alpha + b * decompose(p2, k, array, order=1).alpha
    assert np.max(np.abs(left - right)) < 1e-12


@pytest.mark.parametrize("kind", ["open", "rigid"])
def test_plane_wave_oracle_dense_grid(kind):
    """Pressures synthesized from the truncated plane-wave expansion (orders
    up to 6) must decompose back to the exact first-order coefficients."""
    array = dense_validation_array(kind=kind)
    src = Direction.from_degrees(67.0, 113.0)
    expected = plane_wave_modes(src, 1)
    for b in BAND_BINS:
        k = float(wavenumber(b * BIN_HZ))
        pressures = plane_wave_pressure(src, array, k, order=6)
        got = decompose(pressures, k, array, order=1).alpha
        rel = np.abs(got - expected) / np.abs(expected)
        assert np.max(rel) < 1e-6


def test_round_trip_at_grid_points():
    array = default_array()
    k = float(wavenumber(1500.0))
    rng = np.random.default_rng(3)
    alpha = rng.standard_normal(4) + 1j * rng.standard_normal(4)
    vec = HarmonicVector(alpha=alpha, k=k)
    pressures = resynthesize_pressure(vec, array)
    back = decompose(pressures, k, array, order=1)
    assert np.max(np.abs(back.alpha - alpha)) / np.max(np.abs(alpha)) < 1e-9
    again = resynthesize_pressure(back, array)
    assert np.max(np.abs(again - pressures)) / np.max(np.abs(pressures)) < 1e-9


def test_decompose_validations():
    array = default_array()
    with pytest.raises(GeometryError):
        decompose(np.zeros(5), 1.0, array, order=1)  # wrong channel count
    with pytest.raises(GeometryError):
        decompose(np.zeros(9), 1.0, array, order=3)  # 9 mics < 16 modes
    tiny = default_array(radius=1e-4)
    with pytest.raises(DecompositionError):
        decompose(np.ones(9), float(wavenumber(500.0)), tiny, order=1)


def test_harmonic_vector_order_property():
    vec = HarmonicVector(alpha=np.zeros(9), k=1.0)
    assert vec.order == 2
    with pytest.raises(DecompositionError):
        _ = HarmonicVector(alpha=np.zeros(5), k=1.0).order


# --- batch decomposition ---------------------------------------------------------


def test_decompose_spectrogram_matches_single_bin():
    array = default_array()
    rng = np.random.default_rng(4)
    frames = rng.standard_normal((9, 3, 5)) + 1j * rng.standard_normal((9, 3, 5))
    ks = wavenumber(np.array([500.0, 1000.0, 2000.0]))
    alpha, kept = decompose_spectrogram(frames, ks, array, order=1)
    assert kept.tolist() == [0, 1, 2]
    for bi in range(3):
        for tau in range(5):
            single = decompose(frames[:, bi, tau], float(ks[bi]), array, order=1)
            assert np.allclose(alpha[bi, tau], single.alpha)


def test_decompose_spectrogram_drops_ill_conditioned_bins():
    array = default_array(radius=1e-4)
    frames = np.ones((9, 2, 3), dtype=complex)
    ks = wavenumber(np.array([500.0, 1000.0]))
    with pytest.raises(DecompositionError):
        decompose_spectrogram(frames, ks, array, order=1)


def test_coefficients_csv_dump(tmp_path):
    alpha = np.zeros((2, 3, mode_count(1)), dtype=complex)
    path = tmp_path / "alpha.csv"
    dump_coefficients_csv(alpha, np.array([8, 9]), path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "frame,bin,n,m,re,im"
    assert len(lines) == 1 + 2 * 3 * 4
