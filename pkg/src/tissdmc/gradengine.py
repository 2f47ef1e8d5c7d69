"""End-to-end gradients through J separation iterations.

Two interchangeable modes compute the gradient of the time-domain loss with
respect to the source-model parameters:

* ``bp_backward``: one tape over all iterations and the loss (memory grows
  with J).
* ``dmc_backward``: demixing-matrix checkpointing. The forward pass runs
  without a tape and keeps only the unified filters ``P^(0..J)``. The backward
  pass differentiates the loss tail once, then for ``j = J..1`` rebuilds
  ``Y^(j-1) = P^(j-1) x~``, replays iteration ``j`` on a fresh tape and
  back-propagates the incoming gradient, accumulating the parameter gradient.
  Peak tape size is that of a single iteration.
"""

from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adcore as ad
from . import losses, stft, tiss
from . import signal as sig

BENCH_COLUMNS = ["mode", "J", "F", "T", "N", "L", "peak_nodes", "checkpoint_bytes",
                 "fwd_ms", "bwd_ms", "forward_ops", "peak_retained_bytes"]


@dataclass
class Problem:
    """One mixture prepared for end-to-end training."""

    xt: np.ndarray  # (N*(L+1), F, T)
    refs: np.ndarray  # (N, I)
    n_sources: int
    window: int
    hop: int
    loss: str = "ci-sdr"
    K: int = 512
    ref_channel: int = 0
    projectors: list = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return self.refs.shape[-1]

    @property
    def taps(self) -> int:
        return self.xt.shape[0] // self.n_sources - 1

    @property
    def X(self) -> np.ndarray:
        return self.xt[: self.n_sources]

    def __post_init__(self):
        if not self.projectors:
            K = 1 if self.loss == "si-sdr" else self.K
            self.projectors = [losses.ShiftProjector(r, K) for r in self.refs]


def make_problem(mixture, refs, delay=1, taps=5, window=stft.DEFAULT_WINDOW, hop=stft.DEFAULT_HOP,
                 loss="ci-sdr", K=512) -> Problem:
    mixture = np.atleast_2d(mixture)
    X = stft.analyze(mixture, window, hop).data
    xt = sig.stack_delayed(X, delay, taps).data
    return Problem(xt=xt, refs=np.asarray(refs, dtype=np.float64), n_sources=mixture.shape[0],
                   window=window, hop=hop, loss=loss, K=K)


def checkpoint_size(F: int, L: int, M: int, J: int) -> int:
    """Number of filter values DMC keeps: ``F (L+1) M^2 J``."""
    return F * (L + 1) * M * M * J


def _fingerprint(xt, params) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update(np.ascontiguousarray(xt).tobytes())
    for k in sorted(params or {}):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


class CheckpointStore:
    """Unified filters ``P^(0..J)`` kept by the forward pass.

    Filters live in memory unless ``spill_dir`` is given, in which case each
    one is written to ``spill_dir`` and read back on access.
    """

    def __init__(self, fingerprint: str = "", spill_dir=None):
        self.fingerprint = fingerprint
        self.spill_dir = Path(spill_dir) if spill_dir else None
        self._items: list = []

    def append(self, P: np.ndarray):
        P = np.array(P, copy=True)
        if self.spill_dir is not None:
            self.spill_dir.mkdir(parents=True, exist_ok=True)
            path = self.spill_dir / f"P{len(self._items):04d}.npy"
            np.save(path, P)
            self._items.append(path)
        else:
            self._items.append(P)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, j: int) -> np.ndarray:
        item = self._items[j]
        return np.load(item) if isinstance(item, Path) else item

    @property
    def J(self) -> int:
        return len(self) - 1

    @property
    def dims(self) -> tuple:
        F, N, K = self[0].shape
        return F, N, K // N - 1, self.J

    def n_values(self) -> int:
        """Complex values in the J post-iteration filters."""
        F, N, L, J = self.dims
        return checkpoint_size(F, L, N, J)

    def nbytes(self) -> int:
        return int(sum(self[j].nbytes for j in range(len(self))))


@dataclass
class GradReport:
    grads: dict
    loss: float
    permutation: tuple = ()
    peak_nodes: int = 0
    peak_retained_bytes: int = 0
    checkpoint_bytes: int = 0
    fwd_ms: float = 0.0
    bwd_ms: float = 0.0
    forward_ops: int = 0
    iteration_forwards: int = 0

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(g**2) for g in self.grads.values())))


def iteration(P, Y, xt, model, params, it: int, train: bool = False, dropout_seed: int = 0):
    """Source-model weights from the current outputs, then one rank-1 sweep."""
    u = model.weights(Y, it, params=params, train=train, dropout_seed=dropout_seed)
    return tiss.iss_sweep(P, xt, Y, u)


def loss_tail(P, Y, problem: Problem) -> losses.PitResult:
    """Projection back, inverse STFT and permutation-invariant loss."""
    Z = tiss.projection_back(Y, P, problem.ref_channel)
    est = stft.synthesize(Z, problem.window, problem.hop, problem.n_samples)
    base = losses.ci_sdr_loss
    return losses.pit_loss(est, problem.refs, base, projectors=problem.projectors)


def forward_collect(problem: Problem, model, params, J: int, train: bool = False,
                    dropout_seed: int = 0, spill_dir=None):
    """Run J iterations without recording; returns ``(Y^(J), store)``."""
    if J < 0:
        raise ValueError("J must be >= 0")
    xt = problem.xt
    N, F = problem.n_sources, xt.shape[1]
    store = CheckpointStore(_fingerprint(xt, params), spill_dir)
    P = tiss.init_filter(N, problem.taps, F)
    Y = problem.X.copy()
    store.append(P)
    for it in range(J):
        P, Y = iteration(P, Y, xt, model, params, it, train, dropout_seed)
        P, Y = P.data, Y.data
        store.append(P)
    return Y, store


def dmc_backward(problem: Problem, model, params: dict, J: int, train: bool = False,
                 dropout_seed: int = 0, store: CheckpointStore | None = None,
                 Y_final: np.ndarray | None = None) -> GradReport:
    """Gradient of the loss w.r.t. ``params`` by demixing-matrix checkpointing."""
    ops0 = ad.op_count()
    t0 = time.perf_counter()
    if store is None:
        Y_final, store = forward_collect(problem, model, params, J, train, dropout_seed)
    elif store.fingerprint != _fingerprint(problem.xt, params):
        raise ValueError("checkpoint store was produced for a different input or parameters")
    if len(store) != J + 1:
        raise ValueError(f"store holds {len(store) - 1} iterations, expected {J}")
    if Y_final is None:
        Y_final = tiss.apply(store[J], problem.xt).data
    t1 = time.perf_counter()

    tape = ad.Tape()
    P_leaf, Y_leaf = tape.leaf(store[J]), tape.leaf(Y_final)
    res = loss_tail(P_leaf, Y_leaf, problem)
    gP, gY = tape.backward({res.loss: 1.0}, [P_leaf, Y_leaf])
    peak, peak_bytes = len(tape), tape.retained_bytes
    del tape

    grads = {k: np.zeros_like(v) for k, v in params.items()}
    for j in range(J, 0, -1):
        tape = ad.Tape()
        P_prev = tape.leaf(store[j - 1])
        Y_prev = tape.leaf(tiss.apply(store[j - 1], problem.xt).data)
        theta = tape.leaves(params)
        P_next, Y_next = iteration(P_prev, Y_prev, problem.xt, model, theta, j - 1, train, dropout_seed)
        names = list(theta)
        out = tape.backward({P_next: gP, Y_next: gY}, [P_prev, Y_prev] + [theta[k] for k in names])
        gP, gY = out[0], out[1]
        for k, g in zip(names, out[2:]):
            grads[k] += g
        peak = max(peak, len(tape))
        peak_bytes = max(peak_bytes, tape.retained_bytes)
        del tape
    t2 = time.perf_counter()
    return GradReport(grads=grads, loss=float(res.loss.data), permutation=res.permutation,
                      peak_nodes=peak, peak_retained_bytes=peak_bytes,
                      checkpoint_bytes=store.nbytes(), fwd_ms=1e3 * (t1 - t0),
                      bwd_ms=1e3 * (t2 - t1), forward_ops=ad.op_count() - ops0,
                      iteration_forwards=2 * J)


def bp_backward(problem: Problem, model, params: dict, J: int, train: bool = False,
                dropout_seed: int = 0) -> GradReport:
    """Reference gradient: a single tape through all J iterations and the loss."""
    if J < 0:
        raise ValueError("J must be >= 0")
    ops0 = ad.op_count()
    t0 = time.perf_counter()
    tape = ad.Tape()
    theta = tape.leaves(params)
    P = ad.Tensor(tiss.init_filter(problem.n_sources, problem.taps, problem.xt.shape[1]))
    Y = ad.Tensor(problem.X.copy())
    for it in range(J):
        P, Y = iteration(P, Y, problem.xt, model, theta, it, train, dropout_seed)
    res = loss_tail(P, Y, problem)
    t1 = time.perf_counter()
    names = list(theta)
    if res.loss.tape is tape:
        out = tape.backward({res.loss: 1.0}, [theta[k] for k in names])
    else:
        out = [np.zeros_like(params[k]) for k in names]
    t2 = time.perf_counter()
    return GradReport(grads=dict(zip(names, out)), loss=float(res.loss.data),
                      permutation=res.permutation, peak_nodes=len(tape),
                      peak_retained_bytes=tape.retained_bytes, checkpoint_bytes=0,
                      fwd_ms=1e3 * (t1 - t0), bwd_ms=1e3 * (t2 - t1),
                      forward_ops=ad.op_count() - ops0, iteration_forwards=J)


def compute_gradient(mode: str, problem: Problem, model, params, J: int, **kwargs) -> GradReport:
    if mode == "dmc":
        return dmc_backward(problem, model, params, J, **kwargs)
    if mode == "bp":
        return bp_backward(problem, model, params, J, **kwargs)
    raise ValueError(f"unknown gradient mode {mode!r}")


def relative_difference(a: dict, b: dict) -> float:
    """``||a - b|| / ||b||`` over all parameter tensors."""
    num = sum(np.sum((a[k] - b[k]) ** 2) for k in b)
    den = sum(np.sum(b[k] ** 2) for k in b)
    return float(np.sqrt(num / den)) if den > 0 else float(np.sqrt(num))


# ----------------------------------------------------------------------------
# benchmark


def random_problem(n_sources=2, n_freq=65, n_frames=60, taps=2, seed=0, loss="ci-sdr", K=16) -> Problem:
    """A small synthetic problem: short convolutive mixture of modulated Laplacian noise."""
    window = 2 * (n_freq - 1)
    hop = window // 4
    n_samples = (n_frames - 1) * hop + window - 2 * (window - hop)
    rng = np.random.default_rng(seed)
    envelope = np.abs(np.cumsum(rng.standard_normal((n_sources, n_samples)), axis=-1)) + 1.0
    src = rng.laplace(size=(n_sources, n_samples)) * envelope
    src /= np.std(src, axis=-1, keepdims=True)
    mix = np.zeros((n_sources, n_samples))
    for m in range(n_sources):
        for n in range(n_sources):
            h = rng.standard_normal(6) * np.exp(-np.arange(6))
            h[0] += 1.0 if m == n else 0.5
            mix[m] += np.convolve(src[n], h)[:n_samples]
    mix += 1e-3 * rng.standard_normal(mix.shape)
    return make_problem(mix, src, 1, taps, window, hop, loss=loss, K=K)


def bench(J_list=(1, 5, 10, 20), sizes=None, model=None, params=None, seed=0) -> list[dict]:
    """Peak tape nodes, checkpoint bytes and wall times for BP and DMC per J."""
    from .srcmodel import GluConfig, GluMaskNet, GluSourceModel

    sizes = sizes or [dict(n_sources=2, n_freq=65, n_frames=60, taps=2)]
    rows = []
    for size in sizes:
        problem = random_problem(seed=seed, **size)
        F, T = problem.xt.shape[1:]
        if model is None:
            net = GluMaskNet(GluConfig(n_freq=F, n_blocks=6))
            model_s, params_s = GluSourceModel(net, None), net.init_params(seed)
        else:
            model_s, params_s = model, params
        for J in J_list:
            for mode in ("bp", "dmc"):
                rep = compute_gradient(mode, problem, model_s, params_s, J)
                rows.append({"mode": mode, "J": J, "F": F, "T": T, "N": problem.n_sources,
                             "L": problem.taps, "peak_nodes": rep.peak_nodes,
                             "checkpoint_bytes": rep.checkpoint_bytes,
                             "fwd_ms": round(rep.fwd_ms, 3), "bwd_ms": round(rep.bwd_ms, 3),
                             "forward_ops": rep.forward_ops,
                             "peak_retained_bytes": rep.peak_retained_bytes})
    return rows


def write_bench_csv(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in BENCH_COLUMNS})
    return path
