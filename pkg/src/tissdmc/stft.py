"""Multichannel STFT analysis and overlap-add synthesis.

Signals are zero padded by ``window - hop`` samples at both ends, so every
original sample is covered by ``window / hop`` frames. The number of frames is

    T = (n_samples + 2 * (window - hop) - window) // hop + 1

Spectrograms are laid out as (channels, bins, frames). Both transforms are
recorded as single fused nodes when their input lives on a tape.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import adcore as ad

DEFAULT_WINDOW = 1024
DEFAULT_HOP = 256
DEFAULT_FS = 16000


def hann(window: int) -> np.ndarray:
    """Periodic Hann window."""
    n = np.arange(window)
    return 0.5 - 0.5 * np.cos(2 * np.pi * n / window)


def _check(window: int, hop: int):
    if window % 2 or window <= 0:
        raise ValueError("window size must be even and positive")
    if hop <= 0 or window % hop:
        raise ValueError("hop must divide the window size")


def n_frames(n_samples: int, window: int = DEFAULT_WINDOW, hop: int = DEFAULT_HOP) -> int:
    return (n_samples + 2 * (window - hop) - window) // hop + 1


def n_bins(window: int = DEFAULT_WINDOW) -> int:
    return window // 2 + 1


def _frames(x, window, hop, T):
    # x: (C, padded) -> (C, T, window) view
    return sliding_window_view(x, window, axis=-1)[:, ::hop][:, :T]


def _overlap_add(frames, hop, length):
    # frames: (C, T, window) -> (C, length)
    C, T, window = frames.shape
    out = np.zeros((C, length), dtype=frames.dtype)
    for j in range(window // hop):
        seg = frames[:, :, j * hop : (j + 1) * hop].reshape(C, T * hop)
        out[:, j * hop : j * hop + T * hop] += seg
    return out


def _envelope(T, window, hop):
    w2 = hann(window) ** 2
    env = _overlap_add(np.broadcast_to(w2, (1, T, window)), hop, (T - 1) * hop + window)[0]
    return env


def analyze(x, window: int = DEFAULT_WINDOW, hop: int = DEFAULT_HOP) -> ad.Tensor:
    """STFT of a (channels, samples) or (samples,) real signal."""
    _check(window, hop)
    xd = ad.value(x)
    squeeze = xd.ndim == 1
    if squeeze:
        x = ad.reshape(x, (1, -1))
        xd = xd[None]
    n = xd.shape[-1]
    if n < window:
        raise ValueError(f"signal of {n} samples is shorter than one window ({window})")
    pad = window - hop
    T = n_frames(n, window, hop)
    win = hann(window)
    xp = np.pad(xd, ((0, 0), (pad, pad)))
    spec = np.fft.rfft(_frames(xp, window, hop, T) * win, axis=-1)  # (C, T, F)
    out = spec.transpose(0, 2, 1)
    half = np.ones(window // 2 + 1)
    half[1:-1] = 0.5

    def vjp(g, need):
        G = g.transpose(0, 2, 1) * half
        gframes = window * np.fft.irfft(G, n=window, axis=-1) * win
        gpad = _overlap_add(gframes, hop, xp.shape[-1] + window)
        return (gpad[:, pad : pad + n],)

    out = ad.record("stft", (x,), out, vjp)
    return ad.index(out, 0) if squeeze else out


def synthesize(S, window: int = DEFAULT_WINDOW, hop: int = DEFAULT_HOP,
               length: int | None = None) -> ad.Tensor:
    """Inverse of :func:`analyze` by windowed overlap-add.

    The synthesis window is the Hann window divided by the overlap-added
    squared window, which makes ``synthesize(analyze(x)) == x``.
    """
    _check(window, hop)
    Sd = ad.value(S)
    if Sd.ndim != 3 or Sd.shape[1] != window // 2 + 1:
        raise ValueError(f"spectrogram shape {Sd.shape} inconsistent with window {window}")
    C, F, T = Sd.shape
    pad = window - hop
    full = (T - 1) * hop + window
    if length is None:
        length = full - 2 * pad
    if length <= 0 or pad + length > full:
        raise ValueError(f"length {length} inconsistent with {T} frames")
    win = hann(window)
    env = _envelope(T, window, hop)
    scale = np.where(env > 1e-10, 1.0 / np.maximum(env, 1e-10), 0.0)[pad : pad + length]
    frames = np.fft.irfft(Sd.transpose(0, 2, 1), n=window, axis=-1) * win
    out = _overlap_add(frames, hop, full)[:, pad : pad + length] * scale
    weight = np.full(F, 2.0 / window)
    weight[0] = weight[-1] = 1.0 / window

    def vjp(g, need):
        gfull = np.zeros((C, full))
        gfull[:, pad : pad + length] = g * scale
        gframes = _frames(gfull, window, hop, T) * win
        G = np.fft.rfft(gframes, axis=-1) * weight
        return (G.transpose(0, 2, 1),)

    return ad.record("istft", (S,), out, vjp)
