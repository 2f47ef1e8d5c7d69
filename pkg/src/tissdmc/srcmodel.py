"""Source models that turn the current outputs ``Y`` into weights ``u = 1/r``.

Two models share the ``reset(Y)`` / ``weights(Y, iteration)`` interface:

* :class:`NmfModel` - low-rank variance model fitted by Itakura-Saito
  majorization-minimization updates. Not differentiated.
* :class:`GluSourceModel` - a gated convolutional mask network; the variance is
  ``r = (mask * |y|)^2`` floored at ``1e-6 * mean|Y|^2``, and the resulting
  weights are rescaled per source and frequency (see :func:`scale_normalize`).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import adcore as ad

EPS_NMF = 1e-10
REL_FLOOR = 1e-6
FEATURE_EPS = 1e-3  # added to level-normalized magnitudes before the log
SKIP_INIT = -1.0
FRAME_INIT = 1.0
OUT_BIAS_INIT = math.log(0.1)
CHECKPOINT_VERSION = 1


def variance_floor(power) -> float:
    return REL_FLOOR * float(np.mean(ad.value(power))) + 1e-30


# ----------------------------------------------------------------------------
# NMF


def is_divergence(power: np.ndarray, model: np.ndarray) -> float:
    ratio = power / model
    return float(np.sum(ratio - np.log(ratio) - 1.0))


class NmfModel:
    """Per-source ``r_n = B_n H_n`` with B (F, K) and H (K, T)."""

    def __init__(self, rank: int = 4, inner_updates: int = 2, seed: int = 0):
        self.rank = rank
        self.inner_updates = inner_updates
        self.seed = seed
        self.B = None
        self.H = None

    def reset(self, Y):
        Yd = ad.value(Y)
        N, F, T = Yd.shape
        rng = np.random.default_rng(self.seed)
        self.B = rng.uniform(0.1, 1.0, (N, F, self.rank))
        self.H = rng.uniform(0.1, 1.0, (N, self.rank, T))
        power = np.abs(Yd) ** 2
        scale = power.mean(axis=(1, 2)) / np.mean(self.B @ self.H, axis=(1, 2))
        self.H *= scale[:, None, None]

    def update(self, power: np.ndarray):
        """One multiplicative update of B then H against ``power`` (N, F, T)."""
        B, H = self.B, self.H
        R = np.maximum(B @ H, EPS_NMF)
        Ri = 1.0 / R
        B = B * np.sqrt(((power * Ri * Ri) @ H.transpose(0, 2, 1)) / (Ri @ H.transpose(0, 2, 1)))
        B = np.maximum(B, EPS_NMF)
        R = np.maximum(B @ H, EPS_NMF)
        Ri = 1.0 / R
        Bt = B.transpose(0, 2, 1)
        H = H * np.sqrt((Bt @ (power * Ri * Ri)) / (Bt @ Ri))
        self.B, self.H = B, np.maximum(H, EPS_NMF)

    def variance(self) -> np.ndarray:
        return self.B @ self.H

    def weights(self, Y, iteration: int = 0, **_) -> ad.Tensor:
        Yd = ad.value(Y)
        if self.B is None or self.B.shape[1] != Yd.shape[1] or self.H.shape[2] != Yd.shape[2]:
            self.reset(Yd)
        power = Yd.real**2 + Yd.imag**2
        for _ in range(self.inner_updates):
            self.update(power)
        return ad.Tensor(1.0 / np.maximum(self.variance(), variance_floor(power)))


def nmf_refresh(Y, model: NmfModel):
    """Update ``model`` in place against ``|Y|^2``; returns ``(model, u)``."""
    u = model.weights(Y)
    return model, u


# ----------------------------------------------------------------------------
# GLU mask network


@dataclass
class GluConfig:
    n_freq: int
    hidden: int | None = 32  # None: ceil(n_freq / freq_down)
    freq_down: int = 4
    n_blocks: int = 6
    kernel: int = 3
    dropout: float = 0.3
    dropout_after: int = 3

    def __post_init__(self):
        if self.hidden is None:
            self.hidden = math.ceil(self.n_freq / self.freq_down)
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")


class GluMaskNet:
    """Input block reducing F frequency channels to ``hidden``, GLU blocks, transposed-conv output.

    Every convolution runs along time with kernel size ``kernel``; the mask
    is ``sigmoid`` of the transposed convolution, so it lies in (0, 1).
    Each GLU block adds its input back (residual path). Without it the gated
    products shrink the activations block after block, the initial mask is
    constant in time and almost no gradient reaches the early layers.

    A per-frequency skip ``skip.w`` adds the input features to the output
    pre-activation. With log-magnitude features and ``skip.w = -1`` the mask
    behaves like ``c / |y|`` wherever the sigmoid is far from saturation, so
    the variance ``(mask |y|)^2`` is set by the network body alone and does
    not have to squeeze a per-bin ``-log|y|`` through the narrow hidden
    layer. A second per-frequency weight ``frame.w`` (init 1) adds the mean
    of the features over frequency, so the untrained network already models
    a variance that follows the frame level, shared across frequencies; the
    body learns the spectral and temporal detail on top of it.
    """

    def __init__(self, config: GluConfig):
        self.config = config

    def init_params(self, seed: int = 0) -> dict[str, np.ndarray]:
        c = self.config
        rng = np.random.default_rng(seed)

        def uniform(shape, fan_in):
            bound = math.sqrt(3.0 / fan_in)  # unit variance per output
            return rng.uniform(-bound, bound, shape)

        H, F, k = c.hidden, c.n_freq, c.kernel
        params = {"in.w": uniform((2 * H, F, k), F * k), "in.b": uniform((2 * H,), F * k)}
        for i in range(c.n_blocks):
            params[f"glu{i}.w"] = uniform((2 * H, H, k), H * k)
            params[f"glu{i}.b"] = uniform((2 * H,), H * k)
        params["out.w"] = 0.1 * uniform((H, F, k), H * k)
        params["out.b"] = np.full(F, OUT_BIAS_INIT)
        params["skip.w"] = np.full(F, SKIP_INIT)
        params["frame.w"] = np.full(F, FRAME_INIT)
        return params

    @staticmethod
    def _glu(h, hidden):
        a = ad.index(h, (slice(None), slice(0, hidden)))
        b = ad.index(h, (slice(None), slice(hidden, 2 * hidden)))
        return a * ad.sigmoid(b)

    def forward(self, features, params, train: bool = False, rng: np.random.Generator | None = None):
        """Masks (N, F, T) for real features (N, F, T); sources form the batch."""
        c = self.config
        fd = ad.value(features)
        if fd.ndim != 3 or fd.shape[1] != c.n_freq:
            raise ValueError(f"expected (N, {c.n_freq}, T) features, got {fd.shape}")
        h = self._glu(ad.conv1d(features, params["in.w"], params["in.b"]), c.hidden)
        for i in range(c.n_blocks):
            h = h + self._glu(ad.conv1d(h, params[f"glu{i}.w"], params[f"glu{i}.b"]), c.hidden)
            if train and c.dropout > 0 and i == c.dropout_after - 1:
                if rng is None:
                    raise ValueError("dropout in train mode needs an rng")
                keep = rng.random(ad.value(h).shape) >= c.dropout
                h = h * (keep / (1.0 - c.dropout))
        pre = ad.conv_transpose1d(h, params["out.w"], params["out.b"])
        skip = ad.reshape(params["skip.w"], (c.n_freq, 1))
        frame = ad.reshape(params["frame.w"], (c.n_freq, 1))
        level = ad.mean(features, axis=1, keepdims=True)  # (N, 1, T)
        return ad.sigmoid(pre + features * skip + level * frame)


def glu_forward(Y_mag, net: GluMaskNet, params, train: bool = False, rng=None):
    """Masks from level-normalized magnitudes (N, F, T) via ``log(mag + 1e-3)`` features."""
    return net.forward(ad.log(Y_mag + FEATURE_EPS), params, train, rng)


def weights_from_mask(masks, Y, power=None) -> ad.Tensor:
    """``u = 1 / max((mask |y|)^2, 1e-6 mean|Y|^2)``."""
    if power is None:
        power = ad.abs2(Y)
    # the floor follows the current outputs, so it is kept on the tape
    floor = ad.mean(power) * REL_FLOOR + 1e-30
    return ad.reciprocal(ad.floored(masks * masks * power, floor))


def scale_normalize(u, power) -> ad.Tensor:
    """Rescale ``u`` per (source, frequency) so that ``mean_t u |y|^2 = 1``.

    Mask weights are homogeneous of degree -2 in ``y``, so the diagonal step of
    a sweep would shrink each output by ``mean_t(mask^-2)^(-1/2)`` per
    iteration and underflow after a few dozen iterations. The off-diagonal and
    tap updates are ratios in which a per-(source, frequency) factor on ``u``
    cancels, so this only removes the scale drift (which projection back
    undoes anyway).
    """
    level = ad.mean(u * power, axis=-1, keepdims=True)
    return u * ad.reciprocal(level)


class GluSourceModel:
    """Shared-parameter mask network used as source model at every iteration.

    ``params`` defaults to the stored parameters; gradient engines pass taped
    leaves instead. Dropout masks are drawn from ``(dropout_seed, iteration)``
    so that a replayed iteration sees the same mask as the original pass.
    """

    def __init__(self, net: GluMaskNet, params: dict[str, np.ndarray]):
        self.net = net
        self.params = params

    @property
    def config(self) -> GluConfig:
        return self.net.config

    def reset(self, Y):
        pass

    def masks(self, Y, params=None, train=False, rng=None):
        params = self.params if params is None else params
        power = ad.abs2(Y)
        mag = ad.sqrt(power)
        # per-source level normalization keeps features independent of signal scale
        scale = ad.rsqrt(ad.mean(power, axis=(1, 2), keepdims=True))
        return glu_forward(mag * scale, self.net, params, train, rng), power

    def weights(self, Y, iteration: int = 0, params=None, train: bool = False,
                dropout_seed: int | None = None) -> ad.Tensor:
        rng = None
        if train:
            rng = np.random.default_rng([0 if dropout_seed is None else dropout_seed, iteration])
        masks, power = self.masks(Y, params, train, rng)
        return scale_normalize(weights_from_mask(masks, Y, power), power)


class IdentityMaskModel:
    """Mask fixed at one: ``u = 1/|y|^2`` (floored)."""

    def reset(self, Y):
        pass

    def weights(self, Y, iteration: int = 0, **_):
        return weights_from_mask(np.ones(ad.value(Y).shape), Y)


# ----------------------------------------------------------------------------
# checkpoints
#
# A checkpoint is a numpy .npz archive. Entry "__meta__" holds UTF-8 JSON with
# {"format_version", "topology", "metadata"}; every parameter is stored as a
# little-endian float64 array under "param/<name>".


def save_checkpoint(path, config: GluConfig, params: dict, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format_version": CHECKPOINT_VERSION, "topology": asdict(config),
            "metadata": metadata or {}}
    arrays = {f"param/{k}": np.asarray(v, dtype="<f8") for k, v in params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path):
    """Returns ``(GluSourceModel, metadata)``."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
        params = {k[len("param/"):]: data[k].astype(np.float64) for k in data.files if k.startswith("param/")}
    config = GluConfig(**meta["topology"])
    net = GluMaskNet(config)
    expected = net.init_params(0)
    if set(expected) != set(params) or any(expected[k].shape != params[k].shape for k in expected):
        raise ValueError("checkpoint parameters do not match the stored topology")
    return GluSourceModel(net, params), meta["metadata"]
