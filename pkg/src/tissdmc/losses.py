"""Time-domain SDR losses, permutation-invariant wrapper and metrics.

The convolutive-invariant SDR projects the estimate onto the span of ``K``
shifted copies of the reference (shifts ``0 .. K-1``). ``K = 1`` is plain
SI-SDR. Losses are in negative dB and clamped at -60; metrics are clamped
to [-60, 60].
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy.signal import fftconvolve

from . import adcore as ad

CLAMP_DB = 60.0
RIDGE = 1e-9
COND_LIMIT = 1e12


class DegenerateSignalError(ValueError):
    """Reference (or estimate) is identically zero."""


class ShiftProjector:
    """Projection onto ``span{s shifted by 0..K-1 samples}`` truncated to ``len(s)``.

    The Gram matrix ``S^T S`` is built exactly (Toeplitz autocorrelation minus
    the rows that fall off the end) and factorized once. A ridge of
    ``1e-9 * trace / K`` is added only if it is ill-conditioned.
    """

    def __init__(self, reference: np.ndarray, K: int):
        s = np.asarray(reference, dtype=np.float64)
        if s.ndim != 1:
            raise ValueError("reference must be 1-d")
        if not np.any(s):
            raise DegenerateSignalError("reference signal is identically zero")
        if not 1 <= K <= len(s):
            raise ValueError("need 1 <= K <= len(reference)")
        self.s = s
        self.K = K
        n = len(s)
        if K == 1:
            gram = np.array([[s @ s]])
        else:
            acf = fftconvolve(s, s[::-1])[n - 1 : n - 1 + K]
            tail = self._tail_rows(s, K)
            gram = sla.toeplitz(acf) - tail.T @ tail
        self.ridge = 0.0
        try:
            factor = sla.cho_factor(gram)
            diag = np.abs(np.diag(factor[0]))
            cond = (diag.max() / diag.min()) ** 2
        except np.linalg.LinAlgError:
            cond = np.inf
        if cond > COND_LIMIT:
            self.ridge = RIDGE * np.trace(gram) / K
            factor = sla.cho_factor(gram + self.ridge * np.eye(K))
        self._factor = factor

    @staticmethod
    def _tail_rows(s, K):
        # rows n .. n+K-2 of the full convolution matrix, which S drops
        n = len(s)
        idx = n + np.arange(K - 1)[:, None] - np.arange(K)[None, :]
        valid = (idx < n) & (idx >= 0)
        return np.where(valid, s[np.clip(idx, 0, n - 1)], 0.0)

    def correlate(self, x: np.ndarray) -> np.ndarray:
        """``S^T x``: correlation of x with the reference at lags 0..K-1."""
        n = len(self.s)
        if self.K == 1:
            return np.array([self.s @ x])
        return fftconvolve(x, self.s[::-1])[n - 1 + np.arange(self.K)]

    def synthesize(self, alpha: np.ndarray) -> np.ndarray:
        """``S alpha``: the reference filtered by ``alpha``."""
        if self.K == 1:
            return alpha[0] * self.s
        return fftconvolve(self.s, alpha)[: len(self.s)]

    def project(self, x: np.ndarray) -> np.ndarray:
        alpha = sla.cho_solve(self._factor, self.correlate(x))
        return self.synthesize(alpha)


def _db_ratio(num, den):
    if den <= 0:
        return np.inf if num > 0 else -np.inf
    if num <= 0:
        return -np.inf
    return 10 * np.log10(num / den)


def ci_sdr_loss(est, ref, K: int = 512, projector: ShiftProjector | None = None) -> ad.Tensor:
    """``-10 log10(|S a|^2 / |S a - est|^2)`` with ``a`` the least-squares filter.

    Differentiable with respect to ``est`` (one fused tape node). The loss is
    clamped to [-60, 60] dB (e.g. when the estimate lies in the reference
    subspace) and its gradient is zero while clamped.
    """
    x = ad.value(est).astype(np.float64)
    if x.ndim != 1 or len(x) != len(np.asarray(ref)):
        raise ValueError("estimate and reference must be 1-d and equally long")
    proj = projector or ShiftProjector(ref, K)
    target = proj.project(x)
    err = target - x
    num = float(target @ target)
    den = float(err @ err)
    raw = -_db_ratio(num, den)
    clamped = not -CLAMP_DB < raw < CLAMP_DB
    loss = float(np.clip(raw, -CLAMP_DB, CLAMP_DB))
    c = 10 / np.log(10)

    def vjp(g, need):
        if clamped:
            return (np.zeros_like(x),)
        # d|Px|^2 = 2 P P x ; d|Px - x|^2 = 2 (P - I)(Px - x)
        dnum = 2 * proj.project(target)
        dden = 2 * (proj.project(err) - err)
        return (g * c * (dden / den - dnum / num),)

    return ad.record("ci_sdr", (est,), np.asarray(loss), vjp)


def si_sdr_loss(est, ref) -> ad.Tensor:
    return ci_sdr_loss(est, ref, K=1)


def si_sdr(est, ref) -> float:
    """Scale-invariant SDR in dB (higher is better), clamped to [-60, 60]."""
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if not np.any(ref):
        raise DegenerateSignalError("reference signal is identically zero")
    target = (est @ ref) / (ref @ ref) * ref
    return float(np.clip(_db_ratio(target @ target, np.sum((est - target) ** 2)), -CLAMP_DB, CLAMP_DB))


def ci_sdr(est, ref, K: int = 512) -> float:
    """Convolutive-invariant SDR in dB (higher is better), clamped to [-60, 60]."""
    est = np.asarray(est, dtype=np.float64)
    target = ShiftProjector(ref, K).project(est)
    return float(np.clip(_db_ratio(target @ target, np.sum((target - est) ** 2)), -CLAMP_DB, CLAMP_DB))


def si_sir(est, refs, target: int) -> float:
    """Scale-invariant signal-to-interference ratio in dB, clamped to [-60, 60].

    The estimate is projected onto the span of all references; the part along
    the target reference (in the least-squares decomposition) is compared with
    the part explained by the interfering references.
    """
    est = np.asarray(est, dtype=np.float64)
    refs = np.atleast_2d(np.asarray(refs, dtype=np.float64))
    if np.linalg.matrix_rank(refs) < refs.shape[0]:
        raise DegenerateSignalError("references are linearly dependent")
    coef, *_ = np.linalg.lstsq(refs.T, est, rcond=None)
    wanted = coef[target] * refs[target]
    interf = refs.T @ coef - wanted
    return float(np.clip(_db_ratio(wanted @ wanted, interf @ interf), -CLAMP_DB, CLAMP_DB))


@dataclass
class PitResult:
    loss: ad.Tensor
    permutation: tuple
    pair_losses: np.ndarray


def pit_loss(ests, refs, base_loss=ci_sdr_loss, **kwargs) -> PitResult:
    """Minimum over source permutations of the mean pairwise loss.

    ``ests`` is an (N, I) tensor and ``refs`` an (N, I) array. Pair losses are
    first evaluated without recording; only the pairs of the best permutation
    are recorded.
    """
    ed = ad.value(ests)
    refs = np.asarray(refs)
    if ed.shape[0] != refs.shape[0]:
        raise ValueError(f"{ed.shape[0]} estimates vs {refs.shape[0]} references")
    N = refs.shape[0]
    if N > 4:
        raise ValueError("exhaustive permutation search supports N <= 4")
    projectors = kwargs.pop("projectors", None)
    if projectors is None and base_loss is ci_sdr_loss:
        projectors = [ShiftProjector(r, kwargs.get("K", 512)) for r in refs]
    extra = dict(kwargs)

    def pair(i, j, est):
        if projectors is not None:
            return base_loss(est, refs[j], projector=projectors[j], **extra)
        return base_loss(est, refs[j], **extra)

    table = np.array([[ad.value(pair(i, j, ed[i])).item() for j in range(N)] for i in range(N)])
    best, best_val = None, np.inf
    for perm in itertools.permutations(range(N)):
        val = np.mean([table[i, perm[i]] for i in range(N)])
        if val < best_val:
            best, best_val = perm, val
    terms = [pair(i, best[i], ad.index(ests, i)) for i in range(N)]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return PitResult(loss=total * (1.0 / N), permutation=best, pair_losses=table)
