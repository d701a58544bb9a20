"""Transformer-transducer encoders, the label encoder and the joint network."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TTConfig:
    layers: int
    heads: int
    model_dim: int
    ff_dim: int
    dropout: float = 0.0

    def __post_init__(self):
        if self.layers < 0 or self.heads < 1 or self.model_dim < 1 or self.ff_dim < 1:
            raise ConfigError(f"invalid encoder sizes: {self}")
        if self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")


# Sizes used by the full-scale system; the desk defaults keep the same roles.
FULL_AUDIO = TTConfig(layers=6, heads=8, model_dim=1024, ff_dim=4096)
FULL_VISUAL = TTConfig(layers=4, heads=4, model_dim=1024, ff_dim=4096)
FULL_MASK = TTConfig(layers=6, heads=6, model_dim=1026, ff_dim=4096)
DESK_AUDIO = TTConfig(layers=2, heads=2, model_dim=64, ff_dim=128)
DESK_VISUAL = TTConfig(layers=2, heads=2, model_dim=64, ff_dim=128)
DESK_MASK = TTConfig(layers=2, heads=2, model_dim=64, ff_dim=128)
DESK_LABEL = TTConfig(layers=2, heads=2, model_dim=64, ff_dim=128)


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _dense(rng, fan_in, fan_out):
    return Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)), requires_grad=True)


def _zeros(*shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(*shape):
    return Tensor(np.ones(shape), requires_grad=True)


def init_tt_params(cfg: TTConfig, in_dim: int, rng: np.random.Generator, prefix: str) -> dict:
    d = cfg.model_dim
    p = {f"{prefix}.in.w": _dense(rng, in_dim, d), f"{prefix}.in.b": _zeros(d)}
    for i in range(cfg.layers):
        q = f"{prefix}.l{i}"
        p.update({
            f"{q}.qkv.w": _dense(rng, d, 3 * d), f"{q}.qkv.b": _zeros(3 * d),
            f"{q}.out.w": _dense(rng, d, d), f"{q}.out.b": _zeros(d),
            f"{q}.ln1.g": _ones(d), f"{q}.ln1.b": _zeros(d),
            f"{q}.ff1.w": _dense(rng, d, cfg.ff_dim), f"{q}.ff1.b": _zeros(cfg.ff_dim),
            f"{q}.ff2.w": _dense(rng, cfg.ff_dim, d), f"{q}.ff2.b": _zeros(d),
            f"{q}.ln2.g": _ones(d), f"{q}.ln2.b": _zeros(d),
        })
    return p


def linear(x: Tensor, params: dict, name: str) -> Tensor:
    return nc.add(nc.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def self_attention(x: Tensor, key_mask, params: dict, prefix: str, heads: int,
                   causal: bool = False) -> Tensor:
    b, t, d = x.shape
    hd = d // heads
    qkv = linear(x, params, f"{prefix}.qkv")
    qkv = nc.transpose(nc.reshape(qkv, (b, t, 3, heads, hd)), (2, 0, 3, 1, 4))  # (3,B,H,T,hd)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = nc.scale(nc.matmul(q, nc.swap_last(k)), 1.0 / np.sqrt(hd))
    mask = np.ones((b, 1, t, t), dtype=bool)
    if key_mask is not None:
        mask &= np.asarray(key_mask, dtype=bool)[:, None, None, :]
    if causal:
        mask &= np.tril(np.ones((t, t), dtype=bool))[None, None]
    attn = nc.softmax(scores, mask=mask)
    ctx = nc.reshape(nc.transpose(nc.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
    return linear(ctx, params, f"{prefix}.out")


def tt_encode(x, cfg: TTConfig, params: dict, prefix: str, key_mask=None,
              positions: bool = True, causal: bool = False,
              rng: np.random.Generator | None = None) -> Tensor:
    """Encode a (B, T, D_in) sequence (or a single (T, D_in) one) to (B, T, model_dim).

    Input projection plus sinusoidal positions, then ``cfg.layers`` post-norm
    blocks of self-attention and GELU feed-forward. ``key_mask`` (B, T) marks
    valid frames of padded batches.
    """
    x = x if isinstance(x, Tensor) else nc.constant(x)
    single = x.ndim == 2
    if single:
        x = nc.reshape(x, (1,) + x.shape)
    w_in = params[f"{prefix}.in.w"]
    if x.shape[-1] != w_in.shape[0]:
        raise ConfigError(f"{prefix}: input dim {x.shape[-1]} != expected {w_in.shape[0]}")
    b, t, _ = x.shape
    h = linear(x, params, f"{prefix}.in")
    if positions:
        pe = nc.constant(np.broadcast_to(sinusoidal_positions(t, cfg.model_dim), (b, t, cfg.model_dim)))
        h = nc.add(h, pe)
    drop = cfg.dropout if rng is not None else 0.0
    for i in range(cfg.layers):
        q = f"{prefix}.l{i}"
        a = nc.dropout(self_attention(h, key_mask, params, q, cfg.heads, causal), drop, rng)
        h = nc.layer_norm(nc.add(h, a), params[f"{q}.ln1.g"], params[f"{q}.ln1.b"])
        f = linear(nc.gelu(linear(h, params, f"{q}.ff1")), params, f"{q}.ff2")
        f = nc.dropout(f, drop, rng)
        h = nc.layer_norm(nc.add(h, f), params[f"{q}.ln2.g"], params[f"{q}.ln2.b"])
    if single:
        h = nc.reshape(h, h.shape[1:])
    return h


# -- label encoder ---------------------------------------------------------

def init_label_params(cfg: TTConfig, vocab_size: int, rng: np.random.Generator,
                      prefix: str = "label") -> dict:
    p = {f"{prefix}.embed": Tensor(rng.normal(0, 1.0, (vocab_size, cfg.model_dim)), requires_grad=True)}
    p.update(init_tt_params(cfg, cfg.model_dim, rng, prefix))
    return p


def label_encode(ys, cfg: TTConfig, params: dict, vocab_size: int, prefix: str = "label",
                 rng=None) -> Tensor:
    """Encode label prefixes.

    ``ys`` is a list of token sequences (or one sequence). Row 0 of each
    output is the start state (fed the blank id), row u encodes y_1..y_u.
    Returns (B, U_max+1, D); shorter sequences are right-padded, and the
    causal mask keeps padding from leaking into earlier rows.
    """
    single = len(ys) == 0 or not isinstance(ys[0], (list, tuple, np.ndarray))
    if single:
        ys = [ys]
    u_max = max(len(y) for y in ys)
    ids = np.zeros((len(ys), u_max + 1), dtype=np.int64)
    for i, y in enumerate(ys):
        y = np.asarray(y, dtype=np.int64)
        if y.size and (y.min() < 1 or y.max() >= vocab_size):
            raise ValueError(f"token outside vocabulary [1, {vocab_size})")
        ids[i, 1:1 + len(y)] = y
    emb = nc.embedding(params[f"{prefix}.embed"], ids)
    out = tt_encode(emb, cfg, params, prefix, causal=True, rng=rng)
    if single:
        out = nc.reshape(out, out.shape[1:])
    return out


# -- joint network ---------------------------------------------------------

def init_joint_params(enc_dim: int, label_dim: int, joint_dim: int, vocab_size: int,
                      rng: np.random.Generator, prefix: str = "joint") -> dict:
    return {
        f"{prefix}.enc.w": _dense(rng, enc_dim, joint_dim), f"{prefix}.enc.b": _zeros(joint_dim),
        f"{prefix}.lab.w": _dense(rng, label_dim, joint_dim),
        f"{prefix}.out.w": _dense(rng, joint_dim, vocab_size), f"{prefix}.out.b": _zeros(vocab_size),
    }


def joint(mask_out: Tensor, label_rows: Tensor, params: dict, prefix: str = "joint") -> Tensor:
    """Log-probabilities over blank+tokens for every (frame, label-state) pair.

    (B, T, D) and (B, U+1, D_l) give a (B, T, U+1, V) lattice.
    """
    e = linear(mask_out, params, f"{prefix}.enc")
    l = nc.matmul(label_rows, params[f"{prefix}.lab.w"])
    h = nc.tanh(nc.outer_add(e, l))
    return nc.log_softmax(linear(h, params, f"{prefix}.out"))


def joint_step(mask_vec: Tensor, label_vec: Tensor, params: dict, prefix: str = "joint") -> Tensor:
    """Log-probabilities for a single (frame, label-state) pair."""
    lat = joint(nc.reshape(mask_vec, (1, 1, -1)), nc.reshape(label_vec, (1, 1, -1)), params, prefix)
    return nc.reshape(lat, (lat.shape[-1],))
