"""Visual context attention and mask-encoder input assembly.

For every mouth-track the encoded audio frames score every encoded visual
frame by a plain inner product, a softmax over the visual frames turns the
scores into weights, and the weighted sum of visual frames becomes the
visual context appended to each audio frame.

Index convention: matrices here are stored as [audio frame][visual frame],
i.e. ``S[j, i] = <V_i, A_j>`` -- the transpose of the written similarity
with i over video and j over audio -- so the softmax runs along rows.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .numcore import Tensor


@dataclass
class AttentionMap:
    """Per-track weights (audio x visual) with the similarities they came from."""
    weights: np.ndarray
    similarities: np.ndarray
    track: int = 0

    def check(self, tol: float = 1e-6) -> None:
        w = self.weights
        if np.any(w < 0) or np.max(np.abs(w.sum(axis=-1) - 1.0)) > tol:
            raise ValueError("attention rows must be non-negative and sum to 1")


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return nc.reshape(x, (1,) + x.shape), True
    return x, False


def _inner_products(a: Tensor, v: Tensor) -> Tensor:
    # Each entry is a plain sum over one contiguous product vector, so it is
    # bitwise reproducible by a per-pair loop (a BLAS product need not be).
    ad, vd = a.data, v.data
    out = np.sum(ad[:, :, None, :] * vd[:, None, :, :], axis=-1)

    def bw(g):
        return g @ vd, np.swapaxes(g, -1, -2) @ ad

    return nc.make_result(out, (a, v), bw)


def similarity(audio: Tensor, visual: Tensor, temperature: bool = False) -> Tensor:
    """Inner products of every audio frame with every visual frame of one track.

    ``audio`` and ``visual`` are (T, D) or (B, T, D). The result is
    [audio][visual]. ``temperature`` divides by sqrt(D); it is off by default,
    leaving the raw inner product.
    """
    a, single = _batched(audio)
    v, _ = _batched(visual)
    if a.shape != v.shape:
        raise nc.ShapeError(f"audio {a.shape} and visual {v.shape} encodings differ in shape")
    s = _inner_products(a, v)
    if temperature:
        s = nc.scale(s, 1.0 / np.sqrt(a.shape[-1]))
    return nc.reshape(s, s.shape[1:]) if single else s


def attention_weights(sim: Tensor, visual_mask=None) -> Tensor:
    """Softmax over visual frames for each audio frame; padded visual frames get 0."""
    mask = None
    if visual_mask is not None:
        vm = np.asarray(visual_mask, dtype=bool)
        mask = vm[:, None, :] if sim.ndim == 3 else vm[None, :]
    return nc.softmax(sim, mask=mask)


def visual_context(weights: Tensor, visual: Tensor) -> Tensor:
    """Row j is sum_i w[j, i] * visual[i]."""
    return nc.matmul(weights, visual)


def mask_input_vcam(audio: Tensor, context: Tensor) -> Tensor:
    if audio.shape[:-1] != context.shape[:-1]:
        raise nc.ShapeError(f"frame counts differ: {audio.shape} vs {context.shape}")
    return nc.concat([audio, context], axis=-1)


def channel_code(shape_prefix: tuple, m: int, n_channels: int) -> np.ndarray:
    if not 0 <= m < n_channels:
        raise IndexError(f"channel {m} outside [0, {n_channels})")
    code = np.zeros(tuple(shape_prefix) + (n_channels,))
    code[..., m] = 1.0
    return code


def mask_input_audio_only(audio: Tensor, m, n_channels: int) -> Tensor:
    """Append the one-hot code of channel ``m`` to every encoded audio frame.

    For batched audio ``m`` may be a sequence giving one channel per row.
    """
    if np.ndim(m) == 0:
        code = channel_code(audio.shape[:-1], int(m), n_channels)
    else:
        code = np.stack([channel_code(audio.shape[1:-1], int(c), n_channels) for c in m])
    return nc.concat([audio, nc.constant(code, dtype=audio.dtype)], axis=-1)


def attend(audio: Tensor, visual: Tensor, visual_mask=None, temperature: bool = False):
    """Similarity, weights and context for one track; returns (context, weights, similarity)."""
    s = similarity(audio, visual, temperature)
    w = attention_weights(s, visual_mask)
    return visual_context(w, visual), w, s


# -- export ----------------------------------------------------------------

def to_pgm(weights: np.ndarray) -> bytes:
    """8-bit grayscale rendering, each row scaled so its maximum is 255."""
    w = np.asarray(weights, dtype=np.float64)
    peak = w.max(axis=1, keepdims=True)
    img = np.where(peak > 0, w / np.where(peak > 0, peak, 1.0), 0.0)
    pix = np.rint(img * 255).astype(np.uint8)
    h, wd = pix.shape
    return f"P5\n{wd} {h}\n255\n".encode() + pix.tobytes()


def read_pgm(buf: bytes) -> np.ndarray:
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    wd, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, wd)


def export_map(amap: AttentionMap, out_dir, stem: str) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vct = out_dir / f"{stem}.vct"
    pgm = out_dir / f"{stem}.pgm"
    nc.save(vct, amap.weights)
    pgm.write_bytes(to_pgm(amap.weights))
    return [vct, pgm]
