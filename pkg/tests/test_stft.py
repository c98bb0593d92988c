import numpy as np
import pytest

from shdoa.errors import SignalError
from shdoa.stft import STFTSpec, dump_spectrogram_csv, select_band, stft_forward

FS = 16000


def test_spec_defaults():
    spec = STFTSpec()
    assert spec.bin_hz == 62.5
    assert spec.num_bins == 129
    with pytest.raises(SignalError):
        STFTSpec(window_len=256, hop=100)


def test_pure_tone_lands_on_its_bin():
    t = np.arange(FS) / FS
    sig = np.sin(2 * np.pi * 1000.0 * t)
    spec = stft_forward(sig)
    mags = np.abs(spec.frames[0])
    assert np.all(np.argmax(mags, axis=0) == 16)  # 1000 / 62.5


def test_zero_signal_zero_spectrogram():
    spec = stft_forward(np.zeros(2048))
    assert not np.any(spec.frames)


def test_window_overlap_add_is_constant():
    # periodic Hann at 50% hop: the window sum (not its square) is flat
    spec = STFTSpec()
    w = spec.window()
    total = np.zeros(spec.window_len * 6)
    for start in range(0, total.size - spec.window_len + 1, spec.hop):
        total[start : start + spec.window_len] += w
    mid = total[spec.window_len : -spec.window_len]
    assert np.max(np.abs(mid - 1.0)) < 1e-12


def test_parseval_consistency():
    rng = np.random.default_rng(0)
    sig = rng.standard_normal(4000)
    spec = STFTSpec()
    sg = stft_forward(sig, spec)
    w = spec.window()
    # windowed time-domain energy, frame by frame
    t_energy = 0.0
    num_frames = sg.num_frames
    for tau in range(num_frames):
        seg = sig[tau * spec.hop : tau * spec.hop + spec.window_len] * w
        t_energy += float(np.sum(seg**2))
    mags = np.abs(sg.frames[0]) ** 2
    # rfft keeps one conjugate half: interior bins count twice
    per_frame = mags[0] + mags[-1] + 2.0 * np.sum(mags[1:-1], axis=0)
    f_energy = float(np.sum(per_frame)) / spec.dft_len
    assert f_energy == pytest.approx(t_energy, rel=1e-6)


def test_linearity():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(3000)
    y = rng.standard_normal(3000)
    a, b = 2.5, -1.25
    left = stft_forward(a * x + b * y).frames
    right = a * stft_forward(x).frames + b * stft_forward(y).frames
    assert np.max(np.abs(left - right)) < 1e-9


def test_frame_alignment():
    # frame tau covers samples [tau*hop, tau*hop + window)
    sig = np.zeros(1024)
    sig[300] = 1.0
    sg = stft_forward(sig)
    energies = np.sum(np.abs(sg.frames[0]) ** 2, axis=0)
    covered = [tau for tau in range(sg.num_frames)
               if tau * 128 <= 300 < tau * 128 + 256]
    assert set(np.flatnonzero(energies > 1e-12)) == set(covered)


def test_too_short_signal_raises():
    with pytest.raises(SignalError):
        stft_forward(np.zeros(100))


def test_select_band_inclusive_edges():
    sg = stft_forward(np.random.default_rng(0).standard_normal((2, 2000)))
    band = select_band(sg, 500.0, 2000.0)
    assert band.bins[0] == 8 and band.bins[-1] == 32
    assert band.bins.size == 25
    assert band.frames.shape == (2, 25, sg.num_frames)


def test_select_band_identity():
    sg = stft_forward(np.random.default_rng(0).standard_normal(2000))
    band = select_band(sg, 0.0, FS / 2.0)
    assert band.bins.size == sg.bins.size
    assert np.array_equal(band.frames, sg.frames)


def test_select_band_empty_raises():
    sg = stft_forward(np.zeros(2000))
    with pytest.raises(SignalError):
        select_band(sg, 100.0, 110.0)
    with pytest.raises(SignalError):
        select_band(sg, 2000.0, 500.0)


def test_spectrogram_csv_dump(tmp_path):
    sg = select_band(stft_forward(np.random.default_rng(2).standard_normal(1000)), 500, 1000)
    path = tmp_path / "sg.csv"
    dump_spectrogram_csv(sg, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "bin,frame,re,im"
    assert len(lines) == 1 + sg.bins.size * sg.num_frames
