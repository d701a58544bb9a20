"""Transducer loss, the summed multi-channel loss, and greedy decoding.

Lattice convention: ``logp[t, u, k]`` is log P(k | frame t, first u labels
emitted); index 0 of the last axis is blank. A blank advances t, a label
advances u, and every alignment ends with a blank out of (T-1, U).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .numcore import Tensor
from .synthgen import BLANK

MAX_SYMBOLS_PER_FRAME = 10


def _lattice_terms(lp: np.ndarray, targets: np.ndarray):
    """Blank and next-label log-probs: (B,T,U1) and (B,T,U1-1)."""
    lb = lp[..., BLANK]
    if targets.shape[1] == 0:
        return lb, np.zeros(lp.shape[:2] + (0,))
    idx = np.broadcast_to(targets[:, None, :, None], lp.shape[:2] + (targets.shape[1], 1))
    ly = np.take_along_axis(lp[:, :, :-1, :], idx, axis=-1)[..., 0]
    return lb, ly


def _forward_backward(lb, ly, t_len, u_len):
    """Log-space alpha/beta tables for a padded batch (float64)."""
    bsz, tmax, u1 = lb.shape
    ninf = -np.inf
    # prefix sums of label log-probs along u; C[..., u] = sum_{l<u} ly[..., l]
    csum = np.concatenate([np.zeros((bsz, tmax, 1)), np.cumsum(ly, axis=-1)], axis=-1)

    alpha = np.empty((bsz, tmax, u1))
    alpha[:, 0] = csum[:, 0]
    for t in range(1, tmax):
        a = alpha[:, t - 1] + lb[:, t - 1]
        c = csum[:, t]
        alpha[:, t] = c + np.logaddexp.accumulate(a - c, axis=-1)

    uu = np.arange(u1)[None, :]
    tt_last = (t_len - 1)[:, None]
    beta = np.full((bsz, tmax, u1), ninf)
    # bterm[t, u]: log-weight of leaving (t, u) by a blank and finishing
    bterm = np.full((bsz, tmax, u1), ninf)
    nxt = np.full((bsz, u1), ninf)
    for t in range(tmax - 1, -1, -1):
        term = np.where(uu == u_len[:, None], lb[:, t], ninf)
        cont = lb[:, t] + nxt
        bt = np.where(t == tt_last, term, np.where(t < tt_last, cont, ninf))
        bt = np.where(uu <= u_len[:, None], bt, ninf)
        bterm[:, t] = bt
        c = csum[:, t]
        with np.errstate(invalid="ignore"):
            rev = np.logaddexp.accumulate((bt + c)[:, ::-1], axis=-1)[:, ::-1]
        beta[:, t] = rev - c
        nxt = beta[:, t]
    return alpha, beta, bterm


def rnnt_loss_batch(logp: Tensor, targets, t_len=None, u_len=None) -> Tensor:
    """Per-sequence transducer loss for a padded (B, T, U_max+1, V) lattice batch.

    ``targets`` is (B, U_max) with any padding value; ``t_len``/``u_len`` give
    the true extents (default: full). Returns a (B,) tensor of -log P(y|x)
    whose backward is the exact alpha-beta gradient w.r.t. ``logp``.
    """
    lp = np.asarray(logp.data, dtype=np.float64)
    bsz, tmax, u1, _ = lp.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(bsz, u1 - 1)
    t_len = np.full(bsz, tmax) if t_len is None else np.asarray(t_len, dtype=np.int64)
    u_len = np.full(bsz, u1 - 1) if u_len is None else np.asarray(u_len, dtype=np.int64)
    if np.any(t_len < 1) or np.any(t_len > tmax) or np.any(u_len < 0) or np.any(u_len > u1 - 1):
        raise ValueError("sequence lengths outside the lattice extents")
    safe_targets = np.where(np.arange(u1 - 1)[None, :] < u_len[:, None], targets, BLANK)
    lb, ly = _lattice_terms(lp, safe_targets)
    alpha, beta, bterm = _forward_backward(lb, ly, t_len, u_len)
    log_z = beta[:, 0, 0]
    if not np.all(np.isfinite(log_z)):
        raise nc.NumericError("transducer loss is not finite")
    loss = -log_z

    def bw(g):
        g = np.asarray(g, dtype=np.float64)
        norm = log_z[:, None, None]
        gb = -np.exp(alpha + bterm - norm)
        grad = np.zeros_like(lp)
        grad[..., BLANK] = gb
        if u1 > 1:
            valid = np.arange(u1 - 1)[None, None, :] < u_len[:, None, None]
            with np.errstate(invalid="ignore"):
                ey = alpha[:, :, :-1] + ly + beta[:, :, 1:] - norm
            gy = np.where(valid, -np.exp(np.where(valid, ey, -np.inf)), 0.0)
            idx = np.broadcast_to(safe_targets[:, None, :, None], (bsz, tmax, u1 - 1, 1))
            sub = np.zeros((bsz, tmax, u1 - 1, lp.shape[-1]))
            np.put_along_axis(sub, idx, gy[..., None], axis=-1)
            grad[:, :, :-1] += sub
        grad *= g[:, None, None, None]
        return (grad.astype(logp.dtype),)

    return nc.make_result(loss.astype(logp.dtype), (logp,), bw)


def rnnt_loss(lattice, y) -> Tensor:
    """Transducer loss of one (T, U+1, V) lattice for label sequence ``y``."""
    lat = lattice if isinstance(lattice, Tensor) else nc.constant(lattice)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if lat.ndim != 3 or lat.shape[1] != len(y) + 1:
        raise ValueError(f"lattice {lat.shape} does not match {len(y)} labels")
    batched = nc.reshape(lat, (1,) + lat.shape)
    return nc.reshape(rnnt_loss_batch(batched, y[None, :]), ())


def multichannel_loss(lattices: Sequence, refs: Sequence) -> Tensor:
    """Sum of per-channel losses; channel m is scored only against reference m."""
    if len(lattices) != len(refs) or not lattices:
        raise ValueError(f"{len(lattices)} lattices for {len(refs)} references")
    total = rnnt_loss(lattices[0], refs[0])
    for lat, y in zip(lattices[1:], refs[1:]):
        total = nc.add(total, rnnt_loss(lat, y))
    return total


# -- decoding --------------------------------------------------------------

@dataclass
class ChannelHypothesis:
    tokens: list
    track: int
    frame_emissions: list = field(default_factory=list)  # 1-based frame of each token


def greedy_search(n_frames: int, scorer: Callable[[int, list], np.ndarray], track: int = 0,
                  max_symbols: int = MAX_SYMBOLS_PER_FRAME) -> ChannelHypothesis:
    """Frame-synchronous greedy search.

    ``scorer(t, prefix)`` returns log-probs over blank+tokens at 0-based frame
    ``t`` after emitting ``prefix``. At each frame the argmax is emitted while
    it is not blank, at most ``max_symbols`` times, then the frame advances.
    """
    tokens: list = []
    frames: list = []
    for t in range(n_frames):
        for _ in range(max_symbols):
            k = int(np.argmax(scorer(t, tokens)))
            if k == BLANK:
                break
            tokens.append(k)
            frames.append(t + 1)
    return ChannelHypothesis(tokens=tokens, track=track, frame_emissions=frames)


def greedy_decode_lattice(lattice, track: int = 0) -> ChannelHypothesis:
    """Greedy walk over a precomputed (T, U+1, V) lattice (label states clamp at U)."""
    lat = np.asarray(lattice.data if isinstance(lattice, Tensor) else lattice)
    u_top = lat.shape[1] - 1
    return greedy_search(lat.shape[0], lambda t, pre: lat[t, min(len(pre), u_top)], track)
