"""Training the mask network through the separation iterations, and evaluation.

Training minimizes the permutation-invariant time-domain loss of the final
separated signals; gradients come from :mod:`tissdmc.gradengine` (``dmc`` or
``bp``). Adam with global-norm clipping updates the parameters. A step whose
loss or gradient is not finite is skipped and the learning rate halved.

Every run directory contains ``log.jsonl`` (one record per step), ``state.npz``
(resumable optimizer state), ``best.npz`` (best validation checkpoint) and
``config.yaml``.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import gradengine as ge
from . import losses, stft, tiss
from . import signal as sig
from .srcmodel import GluConfig, GluMaskNet, GluSourceModel, NmfModel, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

TEST_ITERATIONS = {2: 50, 3: 75, 4: 100}


@dataclass
class TrainConfig:
    train_manifest: str | None = None
    valid_manifest: str | None = None
    # alternatively, simulate on the fly: {"count", "start", **SimConfig fields}
    train_sim: dict | None = None
    valid_sim: dict | None = None
    out_dir: str = "run"
    batch_size: int = 8
    signal_seconds: float = 7.0
    J: int = 20
    delay: int = 1
    taps: int = 5
    window: int = stft.DEFAULT_WINDOW
    hop: int = stft.DEFAULT_HOP
    loss: str = "ci-sdr"
    K: int = 512
    grad_mode: str = "dmc"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip: float = 5.0
    epochs: int = 1
    max_steps: int | None = None
    valid_every: int = 0  # steps; 0 means once per epoch
    J_valid: int | None = None
    freq_down: int = 4
    n_blocks: int = 6
    dropout: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.loss not in ("ci-sdr", "si-sdr"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.grad_mode not in ("dmc", "bp"):
            raise ValueError(f"unknown gradient mode {self.grad_mode!r}")
        if self.batch_size < 1 or self.J < 1:
            raise ValueError("batch_size and J must be positive")

    @classmethod
    def from_yaml(cls, path) -> "TrainConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_yaml(self, path):
        with open(path, "w") as fh:
            yaml.safe_dump(asdict(self), fh, sort_keys=False)


class Adam:
    """Adam on a dict of float arrays."""

    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for k, p in params.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * grads[k]
            self.v[k] = b2 * self.v[k] + (1 - b2) * grads[k] ** 2
            mhat = self.m[k] / (1 - b1**self.t)
            vhat = self.v[k] / (1 - b2**self.t)
            out[k] = p - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


def clip_by_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = float(np.sqrt(sum(np.sum(g**2) for g in grads.values())))
    if max_norm and norm > max_norm:
        grads = {k: g * (max_norm / norm) for k, g in grads.items()}
    return grads, norm


@dataclass
class TrainState:
    params: dict
    adam: Adam
    step: int = 0
    epoch: int = 0
    best_valid: float = np.inf
    history: list = field(default_factory=list)

    def save(self, path):
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        arrays.update({f"m/{k}": v for k, v in self.adam.m.items()})
        arrays.update({f"v/{k}": v for k, v in self.adam.v.items()})
        meta = {"step": self.step, "epoch": self.epoch, "best_valid": self.best_valid,
                "adam_t": self.adam.t, "lr": self.adam.lr}
        arrays["__state__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        tmp = Path(str(path) + ".tmp")
        with open(tmp, "wb") as fh:
            np.savez(fh, **arrays)
        tmp.replace(path)

    @classmethod
    def load(cls, path, config: TrainConfig) -> "TrainState":
        with np.load(path) as data:
            meta = json.loads(bytes(data["__state__"]).decode())
            group = lambda prefix: {k[len(prefix):]: data[k] for k in data.files if k.startswith(prefix)}
            params, m, v = group("param/"), group("m/"), group("v/")
        adam = Adam(params, meta["lr"], config.beta1, config.beta2, config.adam_eps)
        adam.m, adam.v, adam.t = m, v, meta["adam_t"]
        return cls(params=params, adam=adam, step=meta["step"], epoch=meta["epoch"],
                   best_valid=meta["best_valid"])


def _crop(sample: sig.MixtureSample, seconds: float, rng: np.random.Generator):
    n = int(round(seconds * sample.fs))
    total = sample.mixture.shape[-1]
    if n >= total:
        return sample.mixture, sample.references
    start = int(rng.integers(0, total - n + 1))
    refs = sample.references[:, start : start + n]
    if not np.all(np.any(refs, axis=-1)):
        start = 0
    return sample.mixture[:, start : start + n], sample.references[:, start : start + n]


def build_model(config: TrainConfig, n_freq: int) -> GluSourceModel:
    net = GluMaskNet(GluConfig(n_freq=n_freq, freq_down=config.freq_down,
                               n_blocks=config.n_blocks, dropout=config.dropout))
    return GluSourceModel(net, net.init_params(config.seed))


def _problem(config: TrainConfig, mixture, refs):
    return ge.make_problem(mixture, refs, config.delay, config.taps, config.window, config.hop,
                           loss=config.loss, K=config.K)


def validation_loss(model: GluSourceModel, params: dict, samples, config: TrainConfig) -> float:
    """Mean loss over ``samples`` after ``J_valid`` iterations (no dropout)."""
    J = config.J_valid or config.J
    vals = []
    for s in samples:
        problem = _problem(config, s.mixture, s.references)
        try:
            with np.errstate(all="ignore"):
                Y, store = ge.forward_collect(problem, model, params, J)
                val = float(ge.loss_tail(store[J], Y, problem).loss.data)
        except (tiss.SingularFilterError, np.linalg.LinAlgError):
            val = np.nan
        # a failed or non-finite sample counts as the worst clamped loss
        vals.append(val if np.isfinite(val) else losses.CLAMP_DB)
    return float(np.mean(vals))


def _load_samples(samples, manifest, sim=None):
    if samples is not None:
        return samples if hasattr(samples, "__getitem__") else list(samples)
    if manifest is not None:
        return sig.read_manifest(manifest)
    if sim is not None:
        return sig.SimulatedSet.from_dict(sim)
    return []


def train(config: TrainConfig, train_samples=None, valid_samples=None, resume: bool = True,
          progress=None) -> TrainState:
    """Train the mask network; returns the final state (parameters in ``state.params``)."""
    train_samples = _load_samples(train_samples, config.train_manifest, config.train_sim)
    valid_samples = _load_samples(valid_samples, config.valid_manifest, config.valid_sim)
    if not train_samples:
        raise ValueError("no training samples")
    n_freq = stft.n_bins(config.window)
    model = build_model(config, n_freq)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.to_yaml(out / "config.yaml")
    state_path, log_path = out / "state.npz", out / "log.jsonl"

    if resume and state_path.exists():
        state = TrainState.load(state_path, config)
        if log_path.exists():
            records = [json.loads(line) for line in log_path.read_text().splitlines() if line]
            state.history = [r for r in records if r["step"] < state.step]
        log.info("resumed at step %d (epoch %d)", state.step, state.epoch)
    else:
        params = model.params
        state = TrainState(params=params, adam=Adam(params, config.lr, config.beta1,
                                                    config.beta2, config.adam_eps))
        log_path.write_text("")

    steps_per_epoch = int(np.ceil(len(train_samples) / config.batch_size))
    total_steps = config.epochs * steps_per_epoch
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)
    valid_every = config.valid_every or steps_per_epoch

    while state.step < total_steps:
        epoch, pos = divmod(state.step, steps_per_epoch)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_samples))
        batch = order[pos * config.batch_size : (pos + 1) * config.batch_size]
        crop_rng = np.random.default_rng([config.seed, epoch, pos, 1])
        t0 = time.perf_counter()
        grads = {k: np.zeros_like(v) for k, v in state.params.items()}
        loss_sum, peak, finite = 0.0, 0, True
        for b, idx in enumerate(batch):
            mixture, refs = _crop(train_samples[idx], config.signal_seconds, crop_rng)
            problem = _problem(config, mixture, refs)
            dropout_seed = int(np.random.default_rng([config.seed, state.step, b]).integers(2**31))
            try:
                with np.errstate(all="ignore"):
                    rep = ge.compute_gradient(config.grad_mode, problem, model, state.params,
                                              config.J, train=True, dropout_seed=dropout_seed)
            except (tiss.SingularFilterError, np.linalg.LinAlgError, FloatingPointError):
                finite = False
                break
            if not np.isfinite(rep.loss) or not all(np.all(np.isfinite(g)) for g in rep.grads.values()):
                finite = False
                break
            loss_sum += rep.loss
            peak = max(peak, rep.peak_nodes)
            for k in grads:
                grads[k] += rep.grads[k] / len(batch)
        record = {"step": state.step, "epoch": epoch, "lr": state.adam.lr}
        if finite:
            grads, norm = clip_by_norm(grads, config.clip)
            state.params = state.adam.step(state.params, grads)
            record.update(loss=loss_sum / len(batch), grad_norm=norm, skipped=False)
        else:
            state.adam.lr *= 0.5
            record.update(loss=None, grad_norm=None, skipped=True)
            log.warning("non-finite step %d skipped; lr halved to %g", state.step, state.adam.lr)
        state.step += 1
        state.epoch = state.step // steps_per_epoch
        record.update(peak_nodes=peak, wall_ms=round(1e3 * (time.perf_counter() - t0), 1))

        if valid_samples and (state.step % valid_every == 0 or state.step == total_steps):
            vloss = validation_loss(model, state.params, valid_samples, config)
            record["valid_loss"] = vloss
            if vloss < state.best_valid:
                state.best_valid = vloss
                save_checkpoint(out / "best.npz", model.config, state.params,
                                {"step": state.step, "valid_loss": vloss, **_window_meta(config)})
        elif not valid_samples:
            save_checkpoint(out / "best.npz", model.config, state.params,
                            {"step": state.step, **_window_meta(config)})
        with open(log_path, "a") as fh:
            fh.write(json.dumps(record) + "\n")
        state.history.append(record)
        state.save(state_path)
        if progress is not None:
            progress(record)
    return state


def _window_meta(config: TrainConfig) -> dict:
    return {"window": config.window, "hop": config.hop, "delay": config.delay, "taps": config.taps}


# ----------------------------------------------------------------------------
# evaluation

EVAL_COLUMNS = ["id", "model", "n_channels", "J", "si_sdr", "ci_sdr", "si_sir",
                "obs_si_sdr", "obs_ci_sdr", "si_sdr_imp", "ci_sdr_imp"]


def best_permutation(estimates: np.ndarray, references: np.ndarray) -> tuple:
    """Assignment of estimates to references maximizing the mean SI-SDR."""
    import itertools

    N = references.shape[0]
    table = np.array([[losses.si_sdr(estimates[i], references[j]) for j in range(N)]
                      for i in range(N)])
    return max(itertools.permutations(range(N)),
               key=lambda p: sum(table[i, p[i]] for i in range(N)))


def score(estimates, sample: sig.MixtureSample, K: int = 512, ref_channel: int = 0) -> dict:
    """Per-sample means over sources after permutation alignment."""
    refs = sample.references
    N = refs.shape[0]
    perm = best_permutation(estimates, refs)
    si, ci, sir, osi, oci = [], [], [], [], []
    for i in range(N):
        j = perm[i]
        si.append(losses.si_sdr(estimates[i], refs[j]))
        ci.append(losses.ci_sdr(estimates[i], refs[j], K))
        sir.append(losses.si_sir(estimates[i], refs, j))
        osi.append(losses.si_sdr(sample.mixture[ref_channel], refs[j]))
        oci.append(losses.ci_sdr(sample.mixture[ref_channel], refs[j], K))
    row = {"si_sdr": np.mean(si), "ci_sdr": np.mean(ci), "si_sir": np.mean(sir),
           "obs_si_sdr": np.mean(osi), "obs_ci_sdr": np.mean(oci)}
    row["si_sdr_imp"] = row["si_sdr"] - row["obs_si_sdr"]
    row["ci_sdr_imp"] = row["ci_sdr"] - row["obs_ci_sdr"]
    return {k: float(v) for k, v in row.items()}


def evaluate(model, samples, J: int | None = None, delay: int = 1, taps: int = 5,
             window: int = stft.DEFAULT_WINDOW, hop: int = stft.DEFAULT_HOP, K: int = 512,
             name: str | None = None) -> list[dict]:
    """Separate and score every sample; ``model`` is ``"nmf"``, a source model or a checkpoint path.

    ``J`` defaults to 50/75/100 iterations for 2/3/4 channels.
    """
    if isinstance(model, (str, Path)) and str(model) != "nmf":
        model, _ = load_checkpoint(model)
    rows = []
    for s in samples:
        M = s.mixture.shape[0]
        J_s = J if J is not None else TEST_ITERATIONS.get(M, 50)
        m = NmfModel() if isinstance(model, str) else model
        est = tiss.separate(s.mixture, m, J_s, delay, taps, window, hop).estimates
        row = {"id": s.id, "model": name or ("nmf" if isinstance(model, str) else "glu"),
               "n_channels": M, "J": J_s}
        row.update(score(est, s, K))
        rows.append(row)
    return rows


def summarize(rows: list[dict]) -> dict:
    """Median and mean of every metric column, per model and channel count."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["model"], r["n_channels"]), []).append(r)
    out = {}
    for (model, M), grp in sorted(groups.items()):
        stats = {"count": len(grp)}
        for col in EVAL_COLUMNS[4:]:
            vals = np.array([g[col] for g in grp])
            stats[f"median_{col}"] = float(np.median(vals))
            stats[f"mean_{col}"] = float(np.mean(vals))
        out[f"{model}/{M}ch"] = stats
    return out


def write_eval_csv(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (round(r[k], 4) if isinstance(r[k], float) else r[k])
                             for k in EVAL_COLUMNS})
    return path
