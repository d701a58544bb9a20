"""Feature front-ends: 3-frame audio stacking and the (2+1)D visual network."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor

STACK = 3


class FrontendError(ValueError):
    pass


def stack_audio(raw: np.ndarray) -> np.ndarray:
    """Compress band energies with log(1+x) and stack 3 consecutive frames.

    Returns a (floor(F/3), 3B) matrix; the last F mod 3 frames are dropped.
    """
    raw = np.asarray(raw)
    if raw.ndim != 2:
        raise FrontendError(f"expected (frames, bands), got {raw.shape}")
    f, b = raw.shape
    if f < STACK:
        raise FrontendError(f"need at least {STACK} raw frames, got {f}")
    t = f // STACK
    return np.log1p(raw[: t * STACK]).reshape(t, STACK * b).astype(np.float32)


@dataclass(frozen=True)
class VisualConfig:
    channels: tuple = (8, 16)
    feature_dim: int = 512
    kernel: int = 3


def factorized_param_count(c_in: int, c_out: int, k: int = 3) -> int:
    """Kernel weights of one (2+1)D layer: k x k spatial then k temporal."""
    return k * k * c_in * c_out + k * c_out * c_out


def full3d_param_count(c_in: int, c_out: int, k: int = 3) -> int:
    return k * k * k * c_in * c_out


def init_visual_params(cfg: VisualConfig, rng: np.random.Generator, in_channels: int = 3,
                       prefix: str = "visual_front") -> dict:
    params = {}
    k = cfg.kernel
    cin = in_channels
    for i, cout in enumerate(cfg.channels):
        params[f"{prefix}.l{i}.spatial"] = Tensor(
            rng.normal(0, np.sqrt(2.0 / (k * k * cin)), (k, k, cin, cout)), requires_grad=True)
        params[f"{prefix}.l{i}.temporal"] = Tensor(
            rng.normal(0, np.sqrt(2.0 / (k * cout)), (k, cout, cout)), requires_grad=True)
        cin = cout
    params[f"{prefix}.proj.w"] = Tensor(rng.normal(0, np.sqrt(1.0 / cin), (cin, cfg.feature_dim)),
                                        requires_grad=True)
    params[f"{prefix}.proj.b"] = Tensor(np.zeros(cfg.feature_dim), requires_grad=True)
    return params


@dataclass
class FrameAtlas:
    """Video batch stored as distinct frames plus a (B, F) index into them.

    Row 0 of ``frames`` must be an all-zero frame; it stands in for padding.
    """
    frames: np.ndarray   # (K, H, W, C)
    index: np.ndarray    # (B, F)

    @property
    def shape(self) -> tuple:
        return self.index.shape + self.frames.shape[1:]

    def dense(self) -> np.ndarray:
        return self.frames[self.index]


def _tap_keys(keys: np.ndarray, k: int, stride: int, pad: int, n_out: int, fill: int) -> np.ndarray:
    """(B, n_out, k) input keys for each output frame of a temporal convolution."""
    b, f = keys.shape
    padded = np.full((b, f + 2 * pad), fill, dtype=np.int64)
    padded[:, pad:pad + f] = keys
    starts = stride * np.arange(n_out)
    return np.stack([padded[:, starts + i] for i in range(k)], axis=-1)


def _conv2plus1d_atlas(atlas: FrameAtlas, params: dict, cfg: VisualConfig, prefix: str) -> Tensor:
    # Every stage keeps (distinct feature maps, per-frame key). A temporal tap
    # tuple of keys fully determines its output, so only distinct tuples are computed.
    b, f = atlas.index.shape
    k = cfg.kernel
    t = f // STACK
    last = len(cfg.channels) - 1
    x = nc.constant(atlas.frames)
    keys = np.asarray(atlas.index, dtype=np.int64)
    h, w = x.shape[1], x.shape[2]
    for i, _ in enumerate(cfg.channels):
        if h < k or w < k:
            raise FrontendError(f"spatial extent {h}x{w} smaller than kernel {k} at layer {i}")
        y = nc.conv2d(x, params[f"{prefix}.l{i}.spatial"], stride=2, pad=k // 2)
        h, w, c = y.shape[1], y.shape[2], y.shape[3]
        zero = y.shape[0]
        y = nc.concat([y, nc.constant(np.zeros((1, h, w, c)))], axis=0)
        if i == last and k == STACK:
            taps = _tap_keys(keys[:, : t * STACK], k, STACK, 0, t, zero)
        else:
            taps = _tap_keys(keys, k, 1, k // 2, keys.shape[1], zero)
        uniq, inv = np.unique(taps.reshape(-1, k), axis=0, return_inverse=True)
        x = nc.relu(nc.conv_gather(y, uniq, params[f"{prefix}.l{i}.temporal"]))
        keys = inv.reshape(taps.shape[:2])
    pooled = nc.mean(nc.reshape(x, (x.shape[0], h * w, x.shape[-1])), axis=1)
    if keys.shape[1] != t:
        keys = keys[:, 1:t * STACK:STACK]
    feats = nc.add(nc.matmul(pooled, params[f"{prefix}.proj.w"]), params[f"{prefix}.proj.b"])
    return nc.embedding(feats, keys)


def conv2plus1d(video, params: dict, cfg: VisualConfig, prefix: str = "visual_front") -> Tensor:
    """(B, F, H, W, 3) thumbnails -> (B, floor(F/3), feature_dim) visual features.

    Each layer is a 3x3 stride-2 spatial convolution applied frame by frame,
    a 3-tap temporal convolution across frames, then ReLU. After the last
    layer the map is averaged spatially, every third frame (the centre of
    each stacked-audio block) is kept, and a linear map gives the features.
    ``video`` may also be a FrameAtlas, which gives the same result while
    computing each distinct frame (and frame neighbourhood) only once.
    """
    if isinstance(video, FrameAtlas):
        if video.index.shape[1] < STACK:
            raise FrontendError(f"need at least {STACK} video frames, got {video.index.shape[1]}")
        return _conv2plus1d_atlas(video, params, cfg, prefix)
    x = video if isinstance(video, Tensor) else nc.constant(video)
    if x.ndim == 4:
        x = nc.reshape(x, (1,) + x.shape)
    b, f, h, w, c = x.shape
    if f < STACK:
        raise FrontendError(f"need at least {STACK} video frames, got {f}")
    k = cfg.kernel
    t = f // STACK
    last = len(cfg.channels) - 1
    for i, _ in enumerate(cfg.channels):
        if h < k or w < k:
            raise FrontendError(f"spatial extent {h}x{w} smaller than kernel {k} at layer {i}")
        ws = params[f"{prefix}.l{i}.spatial"]
        y = nc.conv2d(nc.reshape(x, (b * f, h, w, c)), ws, stride=2, pad=k // 2)
        h, w, c = y.shape[1], y.shape[2], y.shape[3]
        y = nc.reshape(y, (b, f, h, w, c))
        wt = params[f"{prefix}.l{i}.temporal"]
        if i == last and k == STACK:
            # only block centres survive subsampling; their taps never touch the padding
            y = nc.conv1d_time(nc.index(y, (slice(None), slice(0, t * STACK))), wt, pad=0, stride=STACK)
            f = t
        else:
            y = nc.conv1d_time(y, wt, pad=k // 2)
        x = nc.relu(y)
    pooled = nc.mean(nc.reshape(x, (b, f, h * w, c)), axis=2)
    if f != t:
        pooled = pooled[:, 1:t * STACK:STACK]
    return nc.add(nc.matmul(pooled, params[f"{prefix}.proj.w"]), params[f"{prefix}.proj.b"])
