import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shdoa.errors import FeatureError
from shdoa.features import (
    CoherenceFeatureExtractor,
    CoherenceMatrix,
    CoherenceSource,
    FeatureBlock,
    TFBinFeature,
    analytic_coherence,
    bin_energies,
    build_feature,
    coherence_stream,
    dump_features_csv,
    ema_coherence,
    energy_filter,
    load_dataset,
    save_dataset,
)
from shdoa.room import RoomConfig, SourceSpec, default_array, synthesize_mixture
from shdoa.shd import HarmonicVector, plane_wave_modes
from shdoa.sphmath import Direction, ModeIndex, mode_indices, psi, upsilon


def random_alpha(rng, m=4):
    return rng.standard_normal(m) + 1j * rng.standard_normal(m)


# --- EMA coherence ---------------------------------------------------------------


def test_ema_beta_zero_is_instantaneous_outer_product():
    rng = np.random.default_rng(0)
    alpha = random_alpha(rng)
    prev = CoherenceMatrix(c=np.eye(4, dtype=complex))
    out = ema_coherence(prev, HarmonicVector(alpha=alpha, k=1.0), beta=0.0)
    assert np.allclose(out.c, np.outer(alpha, alpha.conj()))


def test_ema_beta_one_keeps_previous():
    rng = np.random.default_rng(1)
    prev_mat = np.outer(random_alpha(rng), random_alpha(rng).conj())
    prev_mat = 0.5 * (prev_mat + prev_mat.conj().T)
    prev = CoherenceMatrix(c=prev_mat)
    out = ema_coherence(prev, HarmonicVector(alpha=random_alpha(rng), k=1.0), beta=1.0)
    assert np.array_equal(out.c, prev_mat)


def test_ema_constant_input_geometric_series():
    # closed form: after T steps from zero, c = (1 - beta^T) alpha alpha^H
    rng = np.random.default_rng(2)
    alpha = random_alpha(rng)
    beta, steps = 0.8, 12
    c = CoherenceMatrix(c=np.zeros((4, 4), dtype=complex))
    for _ in range(steps):
        c = ema_coherence(c, HarmonicVector(alpha=alpha, k=1.0), beta)
    expected = (1.0 - beta**steps) * np.outer(alpha, alpha.conj())
    assert np.allclose(c.c, expected, rtol=1e-12)


def test_ema_rejects_bad_beta():
    prev = CoherenceMatrix(c=np.zeros((4, 4), dtype=complex))
    vec = HarmonicVector(alpha=np.zeros(4), k=1.0)
    with pytest.raises(FeatureError):
        ema_coherence(prev, vec, beta=1.5)


def test_coherence_stream_matches_stepwise():
    rng = np.random.default_rng(3)
    alpha = rng.standard_normal((2, 6, 4)) + 1j * rng.standard_normal((2, 6, 4))
    stream = coherence_stream(alpha, beta=0.7)
    for b in range(2):
        acc = CoherenceMatrix(c=np.zeros((4, 4), dtype=complex))
        for t in range(6):
            acc = ema_coherence(acc, HarmonicVector(alpha=alpha[b, t], k=1.0), 0.7)
            assert np.allclose(stream[b, t], acc.c)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_ema_stays_hermitian_psd(seed):
    rng = np.random.default_rng(seed)
    alpha = rng.standard_normal((1, 10, 4)) + 1j * rng.standard_normal((1, 10, 4))
    stream = coherence_stream(alpha, beta=0.8)
    for t in range(10):
        c = stream[0, t]
        assert np.max(np.abs(c - c.conj().T)) < 1e-12
        eig = np.linalg.eigvalsh(0.5 * (c + c.conj().T))
        assert eig.min() >= -1e-10


# --- feature tensors ---------------------------------------------------------------


def test_build_feature_shape_and_channels():
    rng = np.random.default_rng(4)
    alpha = random_alpha(rng)
    c = np.outer(alpha, alpha.conj())
    t = build_feature(c)
    assert t.shape == (4, 4, 2)
    assert np.allclose(t[..., 0], c.real)
    assert np.allclose(t[..., 1], c.imag)
    assert np.allclose(np.diagonal(t[..., 1]), 0.0)
    assert np.allclose(t[..., 0], t[..., 0].T)
    assert np.allclose(t[..., 1], -t[..., 1].T)


def test_build_feature_scales_quadratically():
    rng = np.random.default_rng(5)
    alpha = random_alpha(rng)
    g = 3.0
    t1 = build_feature(np.outer(alpha, alpha.conj()))
    t2 = build_feature(np.outer(g * alpha, (g * alpha).conj()))
    assert np.allclose(t2, g * g * t1)


def test_build_feature_rejects_non_hermitian():
    bad = np.array([[1.0, 2.0], [3.0, 1.0]], dtype=complex)
    with pytest.raises(FeatureError):
        build_feature(bad)


# --- energy filter -------------------------------------------------------------------


def _block_with_energies(energies):
    n = len(energies)
    return FeatureBlock(
        tensors=np.zeros((n, 4, 4, 2)),
        bins=np.arange(n),
        frames=np.zeros(n, dtype=int),
        energies=np.asarray(energies, dtype=float),
    )


def test_energy_filter_percentile_top_share():
    rng = np.random.default_rng(6)
    energies = rng.permutation(1000).astype(float)  # all distinct
    kept = energy_filter(_block_with_energies(energies), 90.0)
    assert len(kept) == 100
    assert kept.energies.min() >= np.sort(energies)[900]


def test_energy_filter_zero_percentile_keeps_all():
    kept = energy_filter(_block_with_energies([3.0, 1.0, 2.0]), 0.0)
    assert len(kept) == 3


def test_energy_filter_ties_kept():
    kept = energy_filter(_block_with_energies([5.0] * 40), 90.0)
    assert len(kept) == 40


def test_energy_filter_errors():
    with pytest.raises(FeatureError):
        energy_filter(_block_with_energies([]), 90.0)
    with pytest.raises(FeatureError):
        energy_filter(_block_with_energies([1.0]), 100.0)


def test_energy_filter_record_list_api():
    records = [
        TFBinFeature(feature=np.zeros((4, 4, 2)), bin_energy=e, k=8, tau=i)
        for i, e in enumerate([1.0, 5.0, 3.0, 4.0])
    ]
    kept = energy_filter(records, 50.0)  # median of {1,3,4,5} is 3.5
    assert [r.bin_energy for r in kept] == [5.0, 4.0]


# --- analytic coherence ----------------------------------------------------------------


def test_analytic_single_source_direct_only():
    d = Direction.from_degrees(60.0, 45.0)
    psd, gain_sq = 2.5, 0.01
    got = analytic_coherence([CoherenceSource(psd, gain_sq, d)], order=1)
    modes = mode_indices(1)
    expected = np.array(
        [[psd * gain_sq * upsilon(a, b, d) for b in modes] for a in modes]
    )
    assert np.allclose(got.c, expected)
    # equivalently the scaled outer product of the plane-wave mode vector
    v = plane_wave_modes(d, 1)
    assert np.allclose(got.c, psd * gain_sq * np.outer(v, v.conj()))


def test_analytic_two_sources_additive():
    d1 = Direction.from_degrees(60.0, 45.0)
    d2 = Direction.from_degrees(95.0, 250.0)
    s1 = CoherenceSource(1.0, 0.02, d1)
    s2 = CoherenceSource(3.0, 0.01, d2)
    both = analytic_coherence([s1, s2], order=1)
    sep = analytic_coherence([s1], order=1).c + analytic_coherence([s2], order=1).c
    assert np.allclose(both.c, sep)


def test_analytic_isotropic_reverb_is_diagonal():
    d = Direction.from_degrees(80.0, 10.0)
    gamma = np.zeros(1)
    gamma[0] = 0.7  # isotropic: only the (v=0, u=0) coefficient
    direct = analytic_coherence([CoherenceSource(1.0, 0.05, d)], order=1).c
    with_rev = analytic_coherence([CoherenceSource(1.0, 0.05, d, gamma=gamma)], order=1).c
    reverb = with_rev - direct
    off_diag = reverb - np.diag(np.diagonal(reverb))
    assert np.max(np.abs(off_diag)) < 1e-12
    modes = mode_indices(1)
    expected_diag = [0.7 * psi(a, a, 0, 0) for a in modes]
    assert np.allclose(np.diagonal(reverb), expected_diag)


def test_analytic_reverb_selection_rules_brute_force():
    # every (mode, mode', v, u) kernel with u != m - m' must vanish
    modes = mode_indices(1)
    for a in modes:
        for b in modes:
            for v in range(3):
                for u in range(-v, v + 1):
                    val = psi(a, b, v, u)
                    if u != a.m - b.m:
                        assert val == 0.0


def test_analytic_rejects_negative_power():
    with pytest.raises(FeatureError):
        analytic_coherence([CoherenceSource(-1.0, 0.1, Direction(0.5, 0.5))], order=1)


def test_directional_patterns_distinguishable():
    # two sources 60 degrees apart produce clearly different feature tensors
    t1 = build_feature(analytic_coherence(
        [CoherenceSource(1.0, 1.0, Direction.from_degrees(60.0, 60.0))], 1).c)
    t2 = build_feature(analytic_coherence(
        [CoherenceSource(1.0, 1.0, Direction.from_degrees(60.0, 120.0))], 1).c)
    t1 = t1 / np.linalg.norm(t1)
    t2 = t2 / np.linalg.norm(t2)
    assert np.linalg.norm(t1 - t2) > 0.1


# --- extractor pipeline ------------------------------------------------------------------


def _tiny_scene_block(seed=0, percentile=None):
    room = RoomConfig(dimensions=(6.0, 4.0, 3.0), t60=0.0)
    array = default_array(center=(3.0, 2.0, 1.0))
    rng = np.random.default_rng(seed)
    src = SourceSpec(direction=Direction.from_degrees(45.0, 30.0), distance=1.0,
                     signal=rng.standard_normal(8000) * 0.1)
    wave = synthesize_mixture([src], room, array)
    extractor = CoherenceFeatureExtractor(array=array, energy_percentile=percentile)
    return extractor.fit().transform(wave)


def test_extractor_output_layout():
    block = _tiny_scene_block()
    assert block.tensors.shape[1:] == (4, 4, 2)
    assert len(block) == block.bins.size == block.frames.size == block.energies.size
    assert set(np.unique(block.bins)) <= set(range(8, 33))
    # within a bin, frames are ordered
    for b in np.unique(block.bins):
        assert np.all(np.diff(block.frames[block.bins == b]) > 0)


def test_extractor_deterministic():
    a = _tiny_scene_block(seed=3)
    b = _tiny_scene_block(seed=3)
    assert np.array_equal(a.tensors, b.tensors)
    assert np.array_equal(a.energies, b.energies)


def test_extractor_percentile_prunes():
    full = _tiny_scene_block(seed=1)
    pruned = _tiny_scene_block(seed=1, percentile=90.0)
    assert 0 < len(pruned) <= math.ceil(0.11 * len(full))


def test_extractor_channel_mismatch():
    extractor = CoherenceFeatureExtractor().fit()
    from shdoa.errors import SignalError

    with pytest.raises(SignalError):
        extractor.transform(np.zeros((3, 4000)))


def test_extractor_sklearn_params():
    extractor = CoherenceFeatureExtractor(beta=0.9)
    params = extractor.get_params()
    assert params["beta"] == 0.9
    extractor.set_params(beta=0.7)
    assert extractor.beta == 0.7


# --- dataset files -------------------------------------------------------------------------


def _labeled_block(n=20, seed=0):
    rng = np.random.default_rng(seed)
    return FeatureBlock(
        tensors=rng.standard_normal((n, 4, 4, 2)),
        bins=rng.integers(8, 33, n),
        frames=np.arange(n),
        energies=rng.uniform(0.1, 2.0, n),
        label_theta=rng.integers(0, 3, n).astype(np.int16),
        label_phi=rng.integers(0, 12, n).astype(np.int16),
    )


def test_dataset_roundtrip(tmp_path):
    block = _labeled_block()
    path = tmp_path / "ds.bin"
    save_dataset(path, block, n_theta=3, n_phi=12)
    back, n_theta, n_phi = load_dataset(path)
    assert (n_theta, n_phi) == (3, 12)
    assert len(back) == len(block)
    order = np.lexsort((block.frames, block.bins))
    assert np.array_equal(back.bins, block.bins[order])
    assert np.array_equal(back.label_phi, block.label_phi[order])
    assert np.allclose(back.tensors, block.tensors[order].astype(np.float32), atol=0)


def test_dataset_writer_deterministic(tmp_path):
    block = _labeled_block(seed=5)
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_dataset(p1, block, 3, 12)
    save_dataset(p2, block.select(np.arange(len(block))[::-1]), 3, 12)  # shuffled input
    assert p1.read_bytes() == p2.read_bytes()


def test_dataset_corruption_detected(tmp_path):
    block = _labeled_block()
    path = tmp_path / "ds.bin"
    save_dataset(path, block, 3, 12)
    raw = path.read_bytes()
    (tmp_path / "trunc.bin").write_bytes(raw[:-7])
    with pytest.raises(FeatureError):
        load_dataset(tmp_path / "trunc.bin")
    (tmp_path / "magic.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FeatureError):
        load_dataset(tmp_path / "magic.bin")


def test_features_csv_export(tmp_path):
    block = _labeled_block(n=5)
    path = tmp_path / "features.csv"
    dump_features_csv(block, path)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 6
    assert lines[0].startswith("bin,frame,energy,label_theta,label_phi,v0")


def test_bin_energies_mean_abs():
    c = np.array([[1.0 + 0j, -2.0j], [2.0j, 3.0 + 0j]])
    assert bin_energies(c) == pytest.approx((1.0 + 2.0 + 2.0 + 3.0) / 4.0)
