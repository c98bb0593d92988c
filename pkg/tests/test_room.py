import math

import numpy as np
import pytest

from shdoa.errors import DomainError, GeometryError, SignalError
from shdoa.room import (
    ArrayConfig,
    RoomConfig,
    SourceSpec,
    add_noise,
    default_array,
    gen_training_signal,
    image_source_rir,
    measure_snr_db,
    read_wav,
    rir_matrix,
    synthesize_mixture,
    write_wav,
)
from shdoa.sphmath import Direction

FS = 16000
C = 343.0


def anechoic_room():
    return RoomConfig(dimensions=(6.0, 4.0, 3.0), t60=0.0)


def schroeder_t60(rir, fs):
    """Backward-integrated energy decay, -60 dB crossing of the fitted slope.

    The decay rate is taken from a least-squares line through the -5..-35 dB
    portion of the curve (the standard way to read the crossing without the
    early build-up or truncation tails biasing it).
    """
    energy = np.cumsum(rir[::-1] ** 2)[::-1]
    edc = 10.0 * np.log10(energy / energy[0] + 1e-300)
    t = np.arange(edc.size) / fs
    fit = (edc <= -5.0) & (edc >= -35.0)
    assert np.count_nonzero(fit) > 10, "RIR too short for a decay fit"
    slope, _ = np.polyfit(t[fit], edc[fit], 1)
    return -60.0 / slope


# --- RIR basics ----------------------------------------------------------------


def test_anechoic_direct_path_integer_delay():
    # distance chosen so the delay is a whole number of samples
    delay_samples = 48
    d = C * delay_samples / FS
    rir = image_source_rir(anechoic_room(), (1.0, 2.0, 1.5), (1.0 + d, 2.0, 1.5), FS)
    assert int(np.argmax(np.abs(rir))) == delay_samples
    assert rir[delay_samples] == pytest.approx(1.0 / (4.0 * math.pi * d), rel=1e-9)


def test_anechoic_fractional_delay_one_meter():
    rir = image_source_rir(anechoic_room(), (1.0, 2.0, 1.5), (2.0, 2.0, 1.5), FS)
    assert int(np.argmax(np.abs(rir))) == round(FS * 1.0 / C)
    # the fractional-delay lowpass conserves DC gain
    assert float(np.sum(rir)) == pytest.approx(1.0 / (4.0 * math.pi), rel=1e-2)
    peak = float(np.max(np.abs(rir)))
    assert 0.5 / (4.0 * math.pi) < peak <= 1.001 / (4.0 * math.pi)


def test_reverberant_rir_schroeder_decay():
    room = RoomConfig(dimensions=(6.0, 4.0, 3.0), t60=0.2)
    rir = image_source_rir(room, (1.5, 1.2, 1.4), (4.2, 2.8, 1.6), FS)
    assert schroeder_t60(rir, FS) == pytest.approx(0.2, rel=0.2)


def test_equidistant_mics_same_arrival():
    room = anechoic_room()
    src = (3.0, 2.0, 1.5)
    rirs = rir_matrix(room, src, [(2.0, 2.0, 1.5), (4.0, 2.0, 1.5)], FS)
    assert int(np.argmax(np.abs(rirs[0]))) == int(np.argmax(np.abs(rirs[1])))
    assert rirs[0] == pytest.approx(rirs[1], abs=1e-12)


def test_rir_reciprocity():
    room = RoomConfig(dimensions=(5.0, 4.0, 3.0), t60=0.15)
    a, b = (1.2, 1.1, 1.3), (3.7, 2.9, 1.8)
    fwd = image_source_rir(room, a, b, FS, rir_seconds=0.25)
    bwd = image_source_rir(room, b, a, FS, rir_seconds=0.25)
    assert np.max(np.abs(fwd - bwd)) < 1e-9


def test_rir_energy_decays_monotonically():
    room = RoomConfig(dimensions=(6.0, 4.0, 3.0), t60=0.3)
    rir = image_source_rir(room, (1.5, 1.2, 1.4), (4.2, 2.8, 1.6), FS)
    energy = np.cumsum(rir[::-1] ** 2)[::-1]
    assert np.all(np.diff(energy) <= 1e-18)  # backward integral never increases


def test_rir_rejects_outside_positions():
    with pytest.raises(GeometryError):
        image_source_rir(anechoic_room(), (7.0, 2.0, 1.5), (1.0, 1.0, 1.0), FS)
    with pytest.raises(GeometryError):
        image_source_rir(anechoic_room(), (1.0, 1.0, 1.0), (1.0, 5.0, 1.0), FS)


def test_reflection_coefficient_in_range():
    for t60 in (0.15, 0.2, 0.5, 1.0):
        beta = RoomConfig(dimensions=(6.0, 4.0, 3.0), t60=t60).reflection_coefficient
        assert 0.0 < beta < 1.0
    assert RoomConfig(dimensions=(6.0, 4.0, 3.0), t60=0.0).reflection_coefficient == 0.0
    # a t60 below what fully absorbing walls give clamps to anechoic
    assert RoomConfig(dimensions=(6.0, 4.0, 3.0), t60=0.05).reflection_coefficient == 0.0


# --- mixtures -------------------------------------------------------------------


def _source(phi_deg, signal, distance=1.0):
    return SourceSpec(direction=Direction.from_degrees(90.0, phi_deg), distance=distance,
                      signal=signal, fs=FS)


def test_mixture_single_anechoic_is_delayed_scaled_copy():
    room = anechoic_room()
    array = default_array(center=(3.0, 2.0, 1.5))
    # band-limited tone: the fractional-delay lowpass is transparent here
    t = np.arange(4000) / FS
    sig = np.sin(2 * np.pi * 1000.0 * t)
    src = _source(0.0, sig)
    wave = synthesize_mixture([src], room, array)
    assert wave.shape[0] == array.num_mics
    steady = slice(200, 3800)
    distances = np.linalg.norm(array.mic_positions() - src.position(array), axis=1)
    for q in range(array.num_mics):
        gain = np.std(wave[q, steady]) / np.std(sig[steady])
        assert gain == pytest.approx(1.0 / (4.0 * math.pi * distances[q]), rel=0.02)


def test_mixture_additivity_sample_exact():
    room = anechoic_room()
    array = default_array(center=(3.0, 2.0, 1.5))
    rng = np.random.default_rng(1)
    s1 = _source(0.0, rng.standard_normal(3000))
    s2 = _source(90.0, rng.standard_normal(3000))
    both = synthesize_mixture([s1, s2], room, array)
    separate = synthesize_mixture([s1], room, array) + synthesize_mixture([s2], room, array)
    assert np.array_equal(both, separate)


def test_mixture_zero_signal_gives_zero_output():
    room = anechoic_room()
    array = default_array(center=(3.0, 2.0, 1.5))
    wave = synthesize_mixture([_source(10.0, np.zeros(2000))], room, array)
    assert not np.any(wave)


def test_mixture_time_invariance_anechoic():
    room = anechoic_room()
    array = default_array(center=(3.0, 2.0, 1.5))
    rng = np.random.default_rng(2)
    sig = rng.standard_normal(2500)
    shift = 17
    base = synthesize_mixture([_source(40.0, sig)], room, array)
    shifted_sig = np.concatenate([np.zeros(shift), sig])
    shifted = synthesize_mixture([_source(40.0, shifted_sig)], room, array)
    # FFT sizes differ between the two renders, so equality is to rounding
    assert shifted[:, shift : base.shape[1]] == pytest.approx(
        base[:, : base.shape[1] - shift], abs=1e-12
    )


def test_mixture_validates_rate_and_geometry():
    room = anechoic_room()
    array = default_array(center=(3.0, 2.0, 1.5))
    bad_rate = SourceSpec(direction=Direction.from_degrees(90.0, 0.0), distance=1.0,
                          signal=np.ones(100), fs=8000)
    with pytest.raises(SignalError):
        synthesize_mixture([bad_rate], room, array)
    too_close = _source(0.0, np.ones(100), distance=0.01)
    with pytest.raises(GeometryError):
        synthesize_mixture([too_close], room, array)
    outside = _source(0.0, np.ones(100), distance=5.0)
    with pytest.raises(GeometryError):
        synthesize_mixture([outside], room, array)


# --- noise ----------------------------------------------------------------------


def test_add_noise_infinite_snr_is_identity():
    sig = np.random.default_rng(0).standard_normal((3, 1000))
    out = add_noise(sig, math.inf, "white", seed=1)
    assert np.array_equal(out, sig)


def test_add_noise_white_measured_snr():
    sig = np.random.default_rng(0).standard_normal((9, 16000))
    for snr in (0.0, 10.0, 30.0):
        noisy = add_noise(sig, snr, "white", seed=42)
        measured = measure_snr_db(sig, noisy - sig)
        assert abs(measured - snr) < 0.5


def test_add_noise_deterministic_per_seed():
    sig = np.random.default_rng(0).standard_normal((2, 500))
    a = add_noise(sig, 20.0, "white", seed=7)
    b = add_noise(sig, 20.0, "white", seed=7)
    c = add_noise(sig, 20.0, "white", seed=8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_add_noise_rejects_silent_signal():
    with pytest.raises(SignalError):
        add_noise(np.zeros((2, 100)), 10.0, "white", seed=0)


def test_add_noise_babble_snr_and_requirements():
    room = RoomConfig(dimensions=(6.0, 4.0, 3.0), t60=0.2)
    array = default_array(center=(3.0, 2.0, 1.0))
    sig = np.random.default_rng(1).standard_normal((9, 8000))
    noisy = add_noise(sig, 10.0, "babble", seed=3, room=room, array=array)
    measured = measure_snr_db(sig, noisy - sig)
    assert abs(measured - 10.0) < 0.5
    with pytest.raises(DomainError):
        add_noise(sig, 10.0, "babble", seed=3)  # room/array missing
    with pytest.raises(DomainError):
        add_noise(sig, 10.0, "babble", seed=3, room=room, array=array, n_babble=2)


# --- training signal -------------------------------------------------------------


def spectral_flatness(x):
    psd = np.abs(np.fft.rfft(x)) ** 2 + 1e-30
    return float(np.exp(np.mean(np.log(psd))) / np.mean(psd))


def test_training_signal_length():
    sig = gen_training_signal(30.0, seed=0)
    assert sig.size == 480000


def test_training_signal_is_not_white():
    sig = gen_training_signal(12.0, seed=5)
    windows = sig[: 12 * FS].reshape(12, FS)
    flat = [spectral_flatness(w) for w in windows]
    frac_below = np.mean([f < 0.5 for f in flat])
    assert frac_below >= 0.9


def test_training_signal_seeds_decorrelated():
    a = gen_training_signal(5.0, seed=1)
    b = gen_training_signal(5.0, seed=2)
    corr = np.corrcoef(a, b)[0, 1]
    assert abs(corr) < 0.1
    assert np.array_equal(a, gen_training_signal(5.0, seed=1))


def test_training_signal_rejects_nonpositive_duration():
    with pytest.raises(SignalError):
        gen_training_signal(0.0, seed=0)


# --- array and WAV ---------------------------------------------------------------


def test_default_array_geometry():
    array = default_array()
    assert array.num_mics == 9
    assert array.radius == pytest.approx(0.042)
    assert array.kind == "rigid"
    positions = array.mic_positions()
    assert positions.shape == (9, 3)
    assert np.allclose(np.linalg.norm(positions - array.center, axis=1), array.radius)


def test_array_config_validation():
    with pytest.raises(GeometryError):
        ArrayConfig(radius=-1.0, kind="open", mic_directions=(Direction(0.1, 0.1),),
                    weights=np.ones(1))
    with pytest.raises(GeometryError):
        ArrayConfig(radius=0.05, kind="weird", mic_directions=(Direction(0.1, 0.1),),
                    weights=np.ones(1))
    with pytest.raises(GeometryError):
        ArrayConfig(radius=0.05, kind="open", mic_directions=(Direction(0.1, 0.1),),
                    weights=np.ones(2))


def test_wav_roundtrip(tmp_path):
    sig = np.random.default_rng(0).standard_normal((9, 1600)) * 0.1
    path = tmp_path / "mix.wav"
    write_wav(path, sig, FS)
    back, fs = read_wav(path)
    assert fs == FS
    assert back.shape == sig.shape
    assert np.max(np.abs(back - sig)) < 1e-6  # float32 storage
