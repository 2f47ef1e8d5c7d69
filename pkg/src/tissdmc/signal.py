"""Delayed stacking of STFT frames and a desk-scale reverberant mixture simulator.

Room filters are synthetic: a direct path with a per-channel delay followed by
exponentially decaying white noise whose energy envelope drops by 60 dB after
T60 seconds. References are the direct-path images at channel 0. Mixtures are
normalized so that the largest peak over mixture and references is 0.9.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

from . import adcore as ad

PEAK = 0.9


def stack_delayed(X, delay: int = 1, taps: int = 5) -> ad.Tensor:
    """Stack ``X`` (N, F, T) with ``taps`` delayed copies into (N*(taps+1), F, T).

    Block ``l`` (1-based) holds ``X`` shifted by ``delay + l - 1`` frames, zero
    filled at the start.
    """
    if delay < 1 or taps < 0:
        raise ValueError("need delay >= 1 and taps >= 0")
    Xd = ad.value(X)
    if Xd.ndim != 3:
        raise ValueError(f"expected (N, F, T) spectrogram, got {Xd.shape}")
    if taps == 0:
        return X if isinstance(X, ad.Tensor) else ad.Tensor(Xd)
    N, F, T = Xd.shape
    blocks = [X]
    for lag in range(delay, delay + taps):
        if lag >= T:
            blocks.append(np.zeros_like(Xd))
            continue
        zeros = np.zeros((N, F, lag), dtype=Xd.dtype)
        blocks.append(ad.concat([zeros, ad.index(X, (slice(None), slice(None), slice(0, T - lag)))], axis=-1))
    return ad.concat(blocks, axis=0)


# ----------------------------------------------------------------------------
# simulation


@dataclass
class SimConfig:
    n_channels: int = 2
    fs: int = 16000
    duration: float = 4.0
    t60_range: tuple[float, float] = (0.2, 0.6)
    gain_db_range: tuple[float, float] = (-5.0, 5.0)
    snr_db_range: tuple[float, float] = (10.0, 30.0)
    drr_db_range: tuple[float, float] = (0.0, 6.0)
    max_tdoa: int = 8  # samples between adjacent microphones
    seed: int = 0
    corpus_dir: str | None = None

    def __post_init__(self):
        self.t60_range = tuple(self.t60_range)
        self.gain_db_range = tuple(self.gain_db_range)
        self.snr_db_range = tuple(self.snr_db_range)
        self.drr_db_range = tuple(self.drr_db_range)
        if self.n_channels < 1:
            raise ValueError("n_channels must be >= 1")
        for name in ("t60_range", "gain_db_range", "snr_db_range", "drr_db_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty")

    @classmethod
    def from_yaml(cls, path) -> "SimConfig":
        import yaml

        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown simulator keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class MixtureSample:
    mixture: np.ndarray  # (M, I)
    references: np.ndarray  # (N, I)
    fs: int
    t60_s: float
    gains_db: list[float]
    snr_db: float
    seed: int
    id: str = ""
    meta: dict = field(default_factory=dict)


def room_filter(t60: float, fs: int, delays: np.ndarray, drr_db: float,
                rng: np.random.Generator, channel_gains: np.ndarray | None = None) -> np.ndarray:
    """Per-channel filters (M, length) with unit direct path at ``delays``."""
    delays = np.asarray(delays, dtype=int)
    M = len(delays)
    n_tail = int(np.ceil(t60 * fs)) if t60 > 0 else 0
    length = int(delays.max()) + 1 + n_tail
    h = np.zeros((M, length))
    gains = np.ones(M) if channel_gains is None else channel_gains
    h[np.arange(M), delays] = gains
    if n_tail > 0:
        n = np.arange(1, n_tail + 1)
        envelope = np.exp(-3.0 * np.log(10.0) * n / (t60 * fs))
        # tail energy relative to the direct path is set by the DRR
        amp = np.sqrt(10 ** (-drr_db / 10) / np.sum(envelope**2))
        for m in range(M):
            tail = amp * gains[m] * rng.standard_normal(n_tail) * envelope
            h[m, delays[m] + 1 : delays[m] + 1 + n_tail] = tail
    return h


def _resonator(f0, bw, fs):
    r = np.exp(-np.pi * bw / fs)
    theta = 2 * np.pi * f0 / fs
    return [1.0 - r], [1.0, -2 * r * np.cos(theta), r * r]


def speech_surrogate(n_samples: int, fs: int, rng: np.random.Generator) -> np.ndarray:
    """Syllable-like bursts of colored noise separated by pauses.

    Each burst is spectrally tilted white noise passed through three random
    formant resonators, shaped by a Hann envelope and given a random level
    within +-6 dB. The result is normalized to unit RMS.
    """
    out = np.zeros(n_samples)
    t = int(rng.uniform(0.0, 0.2) * fs)
    nyq = fs / 2
    while t < n_samples:
        seg = min(int(rng.uniform(0.08, 0.35) * fs), n_samples - t)
        if seg < 16:
            break
        burst = sps.lfilter([1.0], [1.0, -0.9], rng.standard_normal(seg))
        for _ in range(3):
            b, a = _resonator(rng.uniform(200, 0.8 * nyq), rng.uniform(80, 400), fs)
            burst = burst + 2.0 * sps.lfilter(b, a, burst)
        burst *= np.hanning(seg) ** rng.uniform(0.5, 1.5)
        burst /= np.sqrt(np.mean(burst**2)) + 1e-12
        out[t : t + seg] += burst * 10 ** (rng.uniform(-6, 6) / 20)
        t += seg + int(rng.uniform(0.04, 0.3) * fs)
    out -= out.mean()
    return out / (np.sqrt(np.mean(out**2)) + 1e-12)


def _corpus_source(corpus_dir, n_samples, fs, rng):
    files = sorted(Path(corpus_dir).glob("**/*.wav"))
    if not files:
        raise FileNotFoundError(f"no WAV files under {corpus_dir}")
    for _ in range(20):
        sig, sr = read_wav(files[rng.integers(len(files))])
        sig = sig[0]
        if sr != fs:
            sig = sps.resample_poly(sig, fs, sr)
        if len(sig) >= n_samples:
            start = rng.integers(len(sig) - n_samples + 1)
            sig = sig[start : start + n_samples]
            sig = sig - sig.mean()
            return sig / (np.sqrt(np.mean(sig**2)) + 1e-12)
    raise ValueError("corpus files are shorter than the requested duration")


def _draw(rng, bounds, size=None):
    lo, hi = bounds
    if lo == hi:
        return np.full(size, float(lo)) if size is not None else float(lo)
    return rng.uniform(lo, hi, size=size)


def simulate(config: SimConfig, rng: np.random.Generator | int | None = None,
             index: int = 0) -> MixtureSample:
    """Draw one reverberant noisy mixture with ``N = M = config.n_channels`` sources."""
    seed = config.seed
    if rng is None or isinstance(rng, (int, np.integer)):
        seed = int(config.seed if rng is None else rng)
        rng = np.random.default_rng([seed, index])
    M = N = config.n_channels
    fs = config.fs
    n_samples = int(round(config.duration * fs))
    t60 = float(_draw(rng, config.t60_range))
    if n_samples < 2 * config.max_tdoa * M + 1:
        raise ValueError("duration too short for the room filters")
    gains_db = _draw(rng, config.gain_db_range, N)
    snr_db = float(_draw(rng, config.snr_db_range))
    drr_db = float(_draw(rng, config.drr_db_range))

    # well-spread inter-microphone delays, one per source
    slots = np.linspace(-config.max_tdoa, config.max_tdoa, max(N, 2) + 1)
    tdoa = np.round(rng.permutation(slots)[:N] + rng.uniform(-0.5, 0.5, N)).astype(int)
    base = config.max_tdoa * (M - 1)

    mixture = np.zeros((M, n_samples))
    references = np.zeros((N, n_samples))
    image_energy, noise_energy = [], 0.0
    for n in range(N):
        if config.corpus_dir:
            src = _corpus_source(config.corpus_dir, n_samples, fs, rng)
        else:
            src = speech_surrogate(n_samples, fs, rng)
        src *= 10 ** (gains_db[n] / 20)
        delays = base + tdoa[n] * np.arange(M) + rng.integers(0, 3)
        ch_gain = rng.uniform(0.8, 1.2, M)
        ch_gain[0] = 1.0
        h = room_filter(t60, fs, delays, drr_db, rng, ch_gain)
        image = sps.fftconvolve(src[None, :], h, axes=-1)[:, :n_samples]
        mixture += image
        image_energy.append(float(np.sum(image**2)))
        references[n] = np.concatenate([np.zeros(delays[0]), src])[:n_samples]
    if np.isfinite(snr_db):
        noise = rng.standard_normal((M, n_samples))
        noise = sps.lfilter([1.0], [1.0, -0.7], noise, axis=-1)
        p_sig = np.mean(mixture**2)
        noise *= np.sqrt(p_sig / np.mean(noise**2) * 10 ** (-snr_db / 10))
        mixture += noise
        noise_energy = float(np.sum(noise**2))
    peak = max(np.abs(mixture).max(), np.abs(references).max(), 1e-12)
    mixture *= PEAK / peak
    references *= PEAK / peak
    scale2 = (PEAK / peak) ** 2
    meta = {"drr_db": drr_db, "tdoa": tdoa.tolist(),
            "image_energy": [e * scale2 for e in image_energy], "noise_energy": noise_energy * scale2}
    return MixtureSample(mixture=mixture, references=references, fs=fs, t60_s=t60,
                         gains_db=[float(g) for g in gains_db], snr_db=snr_db, seed=seed,
                         id=f"{seed}-{index:06d}", meta=meta)


def simulate_many(config: SimConfig, count: int, start: int = 0) -> list[MixtureSample]:
    return [simulate(config, config.seed, start + i) for i in range(count)]


class SimulatedSet:
    """Lazily simulated samples ``start .. start+count-1``; each is regenerated on access."""

    def __init__(self, config: SimConfig, count: int, start: int = 0):
        self.config, self.count, self.start = config, count, start

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int) -> MixtureSample:
        if not -self.count <= i < self.count:
            raise IndexError(i)
        return simulate(self.config, self.config.seed, self.start + i % self.count)

    def __iter__(self):
        return (self[i] for i in range(self.count))

    @classmethod
    def from_dict(cls, spec: dict) -> "SimulatedSet":
        """``{"count": n, "start": i0, **SimConfig fields}``; unknown keys are an error."""
        spec = dict(spec)
        count = int(spec.pop("count"))
        start = int(spec.pop("start", 0))
        unknown = set(spec) - {f.name for f in fields(SimConfig)}
        if unknown:
            raise ValueError(f"unknown simulation keys: {sorted(unknown)}")
        return cls(SimConfig(**spec), count, start)


# ----------------------------------------------------------------------------
# WAV and manifests


def write_wav(path, data: np.ndarray, fs: int, float32: bool = True):
    data = np.atleast_2d(data)
    if float32:
        wavfile.write(path, fs, data.T.astype(np.float32))
    else:
        wavfile.write(path, fs, (np.clip(data.T, -1, 1) * 32767).astype(np.int16))


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a WAV file as (channels, samples) float64 in [-1, 1]."""
    fs, data = wavfile.read(path)
    if data.dtype == np.int16:
        data = data / 32768.0
    elif data.dtype == np.int32:
        data = data / 2147483648.0
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    return data.T.copy(), fs


MANIFEST_FIELDS = ("id", "mixture_path", "reference_paths", "t60_s", "gains_db", "snr_db", "seed")


def write_manifest(samples, path, audio_dir=None) -> Path:
    """Write WAVs for each sample and a JSON-lines manifest describing them."""
    path = Path(path)
    audio_dir = Path(audio_dir) if audio_dir else path.parent / (path.stem + "_audio")
    audio_dir.mkdir(parents=True, exist_ok=True)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for k, s in enumerate(samples):
            sid = s.id or f"{k:06d}"
            mix_path = audio_dir / f"{sid}_mix.wav"
            write_wav(mix_path, s.mixture, s.fs)
            refs = []
            for n, ref in enumerate(s.references):
                ref_path = audio_dir / f"{sid}_ref{n}.wav"
                write_wav(ref_path, ref, s.fs)
                refs.append(os.path.relpath(ref_path, path.parent))
            record = {"id": sid, "mixture_path": os.path.relpath(mix_path, path.parent),
                      "reference_paths": refs, "t60_s": s.t60_s, "gains_db": list(s.gains_db),
                      "snr_db": s.snr_db, "seed": s.seed}
            fh.write(json.dumps(record) + "\n")
    return path


def read_manifest_records(path) -> list[dict]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed record") from exc
            missing = [k for k in MANIFEST_FIELDS if k not in rec]
            if missing:
                raise ValueError(f"{path}:{lineno}: missing fields {missing}")
            records.append(rec)
    return records


def load_record(record: dict, root) -> MixtureSample:
    root = Path(root)
    mix, fs = read_wav(root / record["mixture_path"])
    refs = [read_wav(root / p)[0][0] for p in record["reference_paths"]]
    return MixtureSample(mixture=mix, references=np.stack(refs), fs=fs, t60_s=record["t60_s"],
                         gains_db=list(record["gains_db"]), snr_db=record["snr_db"],
                         seed=record["seed"], id=record["id"])


def read_manifest(path) -> list[MixtureSample]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return [load_record(r, path.parent) for r in read_manifest_records(path)]
