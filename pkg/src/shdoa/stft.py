"""Short-time Fourier analysis with the framing used throughout the toolkit:
16 ms periodic Hann windows at 50% overlap, 256-point DFT at 16 kHz."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import SignalError


@dataclass(frozen=True)
class STFTSpec:
    fs: int = 16000
    window_len: int = 256
    hop: int = 128
    dft_len: int = 256

    def __post_init__(self):
        if self.hop * 2 != self.window_len:
            raise SignalError("hop must be half the window length")
        if self.dft_len < self.window_len:
            raise SignalError("DFT length must cover the window")

    @property
    def bin_hz(self) -> float:
        return self.fs / self.dft_len

    @property
    def num_bins(self) -> int:
        return self.dft_len // 2 + 1

    def window(self) -> np.ndarray:
        # periodic Hann: exact constant overlap-add at 50% hop
        n = np.arange(self.window_len)
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / self.window_len)


@dataclass
class Spectrogram:
    """Complex STFT frames per channel plus the bin frequencies they live on.

    ``frames`` has shape (Q, num_bins, num_frames); ``bins`` holds the DFT
    bin index of each retained row so band-restricted views keep their
    frequency identity.
    """

    frames: np.ndarray
    spec: STFTSpec
    bins: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.frames.ndim == 2:
            self.frames = self.frames[None]
        if self.bins is None:
            self.bins = np.arange(self.frames.shape[1])
        self.bins = np.asarray(self.bins)

    @property
    def num_channels(self) -> int:
        return self.frames.shape[0]

    @property
    def num_frames(self) -> int:
        return self.frames.shape[2]

    def bin_frequencies(self) -> np.ndarray:
        return self.bins * self.spec.bin_hz


def stft_forward(signal: np.ndarray, spec: STFTSpec = STFTSpec()) -> Spectrogram:
    """Overlap-windowed DFT of a (Q, T) or (T,) signal.

    Frame ``tau`` covers samples ``[tau * hop, tau * hop + window_len)``.
    """
    signal = np.atleast_2d(np.asarray(signal, dtype=float))
    n = signal.shape[1]
    if n < spec.window_len:
        raise SignalError(
            f"signal of {n} samples is shorter than one window ({spec.window_len})"
        )
    num_frames = (n - spec.window_len) // spec.hop + 1
    window = spec.window()
    starts = np.arange(num_frames) * spec.hop
    idx = starts[:, None] + np.arange(spec.window_len)[None, :]
    segments = signal[:, idx] * window  # (Q, num_frames, window_len)
    frames = np.fft.rfft(segments, n=spec.dft_len, axis=2)
    return Spectrogram(frames=np.swapaxes(frames, 1, 2), spec=spec)


def select_band(spectrogram: Spectrogram, f_lo: float, f_hi: float) -> Spectrogram:
    """Restrict to bins whose center frequency lies in [f_lo, f_hi] (inclusive)."""
    if not 0.0 <= f_lo < f_hi <= spectrogram.spec.fs / 2.0:
        raise SignalError(f"invalid band [{f_lo}, {f_hi}] Hz")
    freqs = spectrogram.bin_frequencies()
    mask = (freqs >= f_lo) & (freqs <= f_hi)
    if not np.any(mask):
        raise SignalError(f"no bin center inside [{f_lo}, {f_hi}] Hz")
    return Spectrogram(
        frames=spectrogram.frames[:, mask, :],
        spec=spectrogram.spec,
        bins=spectrogram.bins[mask],
    )


def dump_spectrogram_csv(spectrogram: Spectrogram, path, channel: int = 0) -> None:
    """Debug dump of one channel as rows of (bin, frame, re, im)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin", "frame", "re", "im"])
        for bi, b in enumerate(spectrogram.bins):
            for tau in range(spectrogram.num_frames):
                z = spectrogram.frames[channel, bi, tau]
                writer.writerow([int(b), tau, repr(z.real), repr(z.imag)])
