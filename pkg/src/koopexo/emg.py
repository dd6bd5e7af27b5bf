"""EMG conditioning: Butterworth band-pass, RMS envelope, delay alignment."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal

RMS_WINDOW = 20
DEFAULT_DELTA = 10


class FilterDesignError(ValueError):
    pass


class EmgNumericFault(ArithmeticError):
    def __init__(self, index: int):
        super().__init__(f"non-finite EMG sample at index {index}")
        self.index = index


def _bilinear_biquad(num, den, fs):
    """Map a 2nd-order analog section num(s)/den(s) to z via s = 2 fs (1 - z^-1)/(1 + z^-1)."""
    k = 2.0 * fs
    b2, b1, b0 = num  # b2 s^2 + b1 s + b0
    a2, a1, a0 = den
    nb = np.array([b2 * k * k + b1 * k + b0, 2 * (b0 - b2 * k * k), b2 * k * k - b1 * k + b0])
    na = np.array([a2 * k * k + a1 * k + a0, 2 * (a0 - a2 * k * k), a2 * k * k - a1 * k + a0])
    return nb / na[0], na / na[0]


@dataclass(frozen=True)
class BandpassFilter:
    """Cascade of second-order sections; ``sos`` rows are [b0 b1 b2 1 a1 a2]."""

    sos: np.ndarray
    fs: float
    f_lo: float
    f_hi: float

    def response(self, freqs) -> np.ndarray:
        """Complex frequency response at ``freqs`` (Hz)."""
        z = np.exp(1j * 2 * np.pi * np.asarray(freqs, dtype=float) / self.fs)
        h = np.ones_like(z)
        for b0, b1, b2, _, a1, a2 in self.sos:
            h = h * (b0 + b1 / z + b2 / z**2) / (1 + a1 / z + a2 / z**2)
        return h

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots([1.0, s[4], s[5]]) for s in self.sos])


def design_bandpass(fs: float = 2000.0, f_lo: float = 20.0, f_hi: float = 450.0) -> BandpassFilter:
    """Butterworth band-pass from an order-2 low-pass prototype.

    Both band edges are pre-warped, the prototype is shifted to a band-pass in
    the analog domain (4 poles), split into two biquads and discretized with the
    bilinear transform.
    """
    if not (0 < f_lo < f_hi < fs / 2):
        raise FilterDesignError(f"need 0 < f_lo < f_hi < fs/2, got {f_lo}, {f_hi}, fs={fs}")
    w1 = 2 * fs * math.tan(math.pi * f_lo / fs)
    w2 = 2 * fs * math.tan(math.pi * f_hi / fs)
    bw = w2 - w1
    w0sq = w1 * w2

    # order-2 prototype poles, s -> (s^2 + w0^2)/(bw s)
    proto = [complex(-math.sqrt(0.5), math.sqrt(0.5)), complex(-math.sqrt(0.5), -math.sqrt(0.5))]
    poles = []
    for p in proto:
        half = p * bw / 2
        disc = np.sqrt(half * half - w0sq)
        poles.extend([half + disc, half - disc])
    poles = np.array(poles)
    upper = sorted((p for p in poles if p.imag > 0), key=lambda p: p.imag)
    # each section is bw*s / (s - p)(s - conj p): unit gain at the centre w0
    sections = []
    for p in upper:
        nb, na = _bilinear_biquad((0.0, bw, 0.0), (1.0, -2 * p.real, abs(p) ** 2), fs)
        sections.append(np.concatenate([nb, na]))
    return BandpassFilter(np.array(sections), fs, f_lo, f_hi)


def filter_stream(filt: BandpassFilter, raw, zi=None):
    """Causal filtering of each row of ``raw`` starting from rest (or ``zi``).

    Returns the filtered array, plus the final state when ``zi`` is given.
    """
    x = np.asarray(raw, dtype=float)
    bad = ~np.isfinite(x)
    if bad.any():
        raise EmgNumericFault(int(np.flatnonzero(bad.reshape(-1))[0] % x.shape[-1]))
    if zi is None:
        return signal.sosfilt(filt.sos, x, axis=-1)
    return signal.sosfilt(filt.sos, x, axis=-1, zi=zi)


def rms_downsample(filtered, window: int = RMS_WINDOW) -> np.ndarray:
    """RMS over disjoint ``window``-sample blocks along the last axis."""
    x = np.asarray(filtered, dtype=float)
    n = x.shape[-1] // window
    if n == 0:
        return np.zeros(x.shape[:-1] + (0,))
    blocks = x[..., : n * window].reshape(x.shape[:-1] + (n, window))
    return np.sqrt(np.mean(blocks * blocks, axis=-1))


def align_delay(envelope, delta: int = DEFAULT_DELTA) -> np.ndarray:
    """Shift a (ticks, channels) envelope so that row k holds envelope[k - delta].

    The first ``delta`` rows are zero-padded; callers exclude them from training.
    """
    if delta < 0:
        raise ValueError("delta must be non-negative")
    env = np.asarray(envelope, dtype=float)
    out = np.zeros_like(env)
    if delta == 0:
        out[...] = env
    elif delta < len(env):
        out[delta:] = env[:-delta]
    return out


class EmgPipeline:
    """Streaming band-pass + RMS for a fixed number of channels.

    ``process`` takes one control tick of raw samples (channels x 40) and
    returns the RMS of the most recent 20-sample window per channel, i.e. the
    100 Hz envelope sampled at the 20 ms control tick.
    """

    def __init__(self, n_channels: int = 2, fs: float = 2000.0, f_lo: float = 20.0,
                 f_hi: float = 450.0, window: int = RMS_WINDOW):
        self.filter = design_bandpass(fs, f_lo, f_hi)
        self.window = window
        self.zi = np.zeros((self.filter.sos.shape[0], n_channels, 2))

    def process(self, frame) -> np.ndarray:
        y, self.zi = filter_stream(self.filter, frame, self.zi)
        return rms_downsample(y, self.window)[:, -1]


def envelope_at_ticks(raw, samples_per_tick: int = 40, window: int = RMS_WINDOW) -> np.ndarray:
    """Batch equivalent of :class:`EmgPipeline` for a whole (channels, samples) stream."""
    filt = design_bandpass()
    env = rms_downsample(filter_stream(filt, raw), window)
    step = samples_per_tick // window
    return env[:, step - 1::step].T
