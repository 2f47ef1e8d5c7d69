"""Joint dereverberation and separation with inverse-free rank-1 (T-ISS) updates.

Shapes used throughout:

* stacked input ``xt``: (N*(L+1), F, T), complex
* unified filter ``P``: (F, N, N*(L+1)), left (F, N, N) block is the demixing matrix W
* outputs ``Y``: (N, F, T) with ``Y[:, f, t] = P[f] @ xt[:, f, t]``
* source weights ``u``: (N, F, T), real and positive (inverse variances)

All functions accept arrays or :class:`~tissdmc.adcore.Tensor` values and are
recorded on the tape of their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import adcore as ad
from . import signal as sig
from . import stft

EPS_DIV = 1e-8
TINY = 1e-30
DET_FLOOR = 1e-12


class SingularFilterError(ValueError):
    """The demixing block of a unified filter is (numerically) singular."""


@dataclass
class SweepDiagnostics:
    floored: int = 0
    sweeps: int = 0
    events: list = field(default_factory=list)


def init_filter(n_sources: int, taps: int, n_freq: int, dtype=np.complex128) -> np.ndarray:
    """``P_f = [I, 0]`` for every frequency."""
    if min(n_sources, n_freq) < 1 or taps < 0:
        raise ValueError("need n_sources, n_freq >= 1 and taps >= 0")
    P = np.zeros((n_freq, n_sources, n_sources * (taps + 1)), dtype=dtype)
    P[:, :, :n_sources] = np.eye(n_sources)
    return P


def demixing(P) -> np.ndarray:
    Pd = ad.value(P)
    return Pd[:, :, : Pd.shape[1]]


def apply(P, xt) -> ad.Tensor:
    """``y_{f,t} = P_f x~_{f,t}`` for all bins and frames."""
    Pd, xd = ad.value(P), ad.value(xt)
    if Pd.ndim != 3 or xd.ndim != 3 or Pd.shape[2] != xd.shape[0] or Pd.shape[0] != xd.shape[1]:
        raise ValueError(f"apply: filter {Pd.shape} does not match input {xd.shape}")
    return ad.transpose(ad.matmul(P, ad.transpose(xt, (1, 0, 2))), (1, 0, 2))


def _logabsdet(W):
    sign, logdet = np.linalg.slogdet(W)
    if np.any(np.abs(sign) == 0) or np.any(logdet < np.log(DET_FLOOR)):
        raise SingularFilterError("demixing matrix is singular (|det| < 1e-12)")
    return logdet


def compute_cost(P, Y, u, normalizer: bool = False) -> float:
    """Joint dereverberation/separation cost

        sum_f [ -2 log|det W_f| + (1/T) sum_{n,t} u_{n,f,t} |y_{n,f,t}|^2 ]

    With ``normalizer=True`` the term ``-(1/T) sum log u`` is added, giving the
    negative log-likelihood under the variance model ``r = 1/u`` (the quantity
    that alternating source-model/filter updates decrease monotonically).
    """
    Pd, Yd, ud = ad.value(P), ad.value(Y), ad.value(u)
    T = Yd.shape[-1]
    logdet = _logabsdet(demixing(Pd))
    quad = np.sum(ud * (Yd.real**2 + Yd.imag**2)) / T
    cost = -2.0 * np.sum(logdet) + quad
    if normalizer:
        cost -= np.sum(np.log(ud)) / T
    return float(cost)


def _floor(den, scale_src, diagnostics):
    floor = ad.mean(scale_src, axis=0, keepdims=True) * EPS_DIV + TINY
    if diagnostics is not None:
        hits = int(np.sum(ad.value(den) < ad.value(floor)))
        if hits:
            diagnostics.floored += hits
    return ad.floored(den, floor)


def iss_sweep(P, xt, Y, u, diagnostics: SweepDiagnostics | None = None):
    """One pass of rank-1 updates over spatial rows then tap columns.

    Returns the updated ``(P, Y)``; ``Y`` is maintained incrementally.
    """
    Pd, xd, Yd = ad.value(P), ad.value(xt), ad.value(Y)
    N, F, T = Yd.shape
    K = xd.shape[0]
    if Pd.shape != (F, N, K) or xd.shape[1:] != (F, T) or ad.value(u).shape != (N, F, T):
        raise ValueError("iss_sweep: inconsistent shapes")
    all_rows = slice(None)

    for n in range(N):
        yn = ad.index(Y, n)  # (F, T)
        den = ad.sum(u * ad.abs2(yn), axis=-1)  # (N, F)
        num = ad.sum(u * Y * ad.conj(yn), axis=-1)  # (N, F)
        den = _floor(den, den, diagnostics)
        onehot = np.zeros((N, 1))
        onehot[n] = 1.0
        vdiag = 1.0 - ad.rsqrt(ad.index(den, n) * (1.0 / T))  # (F,)
        v = num / den * (1.0 - onehot) + ad.index(vdiag, None) * onehot  # (N, F)
        row = ad.index(P, (all_rows, n, None, all_rows))  # (F, 1, K)
        P = P - ad.index(ad.transpose(v), (all_rows, all_rows, None)) * row
        Y = Y - ad.index(v, (all_rows, all_rows, None)) * ad.index(yn, None)

    for k in range(N, K):
        xk = ad.index(xt, k)  # (F, T)
        den = ad.sum(u * ad.abs2(xk), axis=-1)
        num = ad.sum(u * Y * ad.conj(xk), axis=-1)
        den = _floor(den, den, diagnostics)
        v = num / den
        ek = np.zeros((1, 1, K))
        ek[..., k] = 1.0
        P = P - ad.index(ad.transpose(v), (all_rows, all_rows, None)) * ek
        Y = Y - ad.index(v, (all_rows, all_rows, None)) * ad.index(xk, None)

    if diagnostics is not None:
        diagnostics.sweeps += 1
    return P, Y


def projection_scales(P, ref: int = 0) -> ad.Tensor:
    """Per-frequency source scales ``a_{ref,n}`` with ``A_f = W_f^{-1}``; shape (N, F)."""
    Pd = ad.value(P)
    N = Pd.shape[1]
    W = ad.index(P, (slice(None), slice(None), slice(0, N)))
    if np.any(np.abs(np.linalg.det(ad.value(W))) < DET_FLOOR):
        raise SingularFilterError("cannot project back through a singular demixing matrix")
    A = ad.inv(W)  # (F, N, N)
    return ad.transpose(ad.index(A, (slice(None), ref, slice(None))))


def projection_back(Y, P, ref: int = 0) -> ad.Tensor:
    """Scale each output to its image at microphone ``ref``."""
    a = projection_scales(P, ref)
    return ad.index(a, (slice(None), slice(None), None)) * Y


def projection_back_filter(P, ref: int = 0) -> np.ndarray:
    """Filter whose outputs are already projected back: ``diag(a) P``."""
    a = ad.value(projection_scales(P, ref))
    return ad.value(P) * a.T[:, :, None]


@dataclass
class SeparationResult:
    estimates: np.ndarray  # (N, I)
    P: np.ndarray
    costs: list = field(default_factory=list)
    diagnostics: SweepDiagnostics = field(default_factory=SweepDiagnostics)


def separate(x: np.ndarray, model, n_iter: int = 50, delay: int = 1, taps: int = 5,
             window: int = stft.DEFAULT_WINDOW, hop: int = stft.DEFAULT_HOP,
             ref: int = 0, track_cost: bool = False) -> SeparationResult:
    """Separate a (M, I) mixture into M time-domain source estimates.

    ``model`` is a source model with ``reset(X)`` and ``weights(Y, iteration)``
    (see :mod:`tissdmc.srcmodel`). With ``n_iter=0`` the filter stays the
    identity and the input channels are returned unchanged.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    N, n_samples = x.shape
    X = stft.analyze(x, window, hop).data
    xt = sig.stack_delayed(X, delay, taps).data
    P = init_filter(N, taps, X.shape[1])
    Y = X.copy()
    if hasattr(model, "reset"):
        model.reset(Y)
    result = SeparationResult(estimates=None, P=P)
    for j in range(n_iter):
        u = ad.value(model.weights(Y, j))
        P, Y = iss_sweep(P, xt, Y, u, result.diagnostics)
        P, Y = P.data, Y.data
        if track_cost:
            result.costs.append(compute_cost(P, Y, u, normalizer=True))
    if n_iter > 0:
        Y = projection_back(Y, P, ref).data
    result.P = P
    result.estimates = stft.synthesize(Y, window, hop, n_samples).data
    return result
