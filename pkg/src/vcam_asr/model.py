"""Multi-talker transducer models assembled from the encoder blocks.

Three variants share audio encoder, mask encoder, label encoder and joint
network, and differ only in what is appended to each encoded audio frame
before the mask encoder:

* ``mt_vcam``: the attention-weighted visual context of the channel's track
* ``mt_audio``: a one-hot channel code
* ``single_channel_av``: the channel's encoded visual frame, unattended
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import encoders as enc
from . import numcore as nc
from .frontend import FrameAtlas, VisualConfig, conv2plus1d, init_visual_params
from .numcore import Tensor
from .transducer import ChannelHypothesis, greedy_search, rnnt_loss_batch
from .vcam import AttentionMap, attend, mask_input_audio_only, mask_input_vcam

VARIANTS = ("single_channel_av", "mt_audio", "mt_vcam")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "mt_vcam"
    audio_in: int = 48
    vocab_size: int = 33
    audio: enc.TTConfig = enc.DESK_AUDIO
    visual: enc.TTConfig = enc.DESK_VISUAL
    mask: enc.TTConfig = enc.DESK_MASK
    label: enc.TTConfig = enc.DESK_LABEL
    front: VisualConfig = field(default_factory=VisualConfig)
    joint_dim: int = 64
    n_channels: int = 2
    attn_temperature: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.uses_video and self.visual.model_dim != self.audio.model_dim and self.variant == "mt_vcam":
            raise enc.ConfigError("attention needs equal audio and visual encoder widths")

    @property
    def uses_video(self) -> bool:
        return self.variant != "mt_audio"

    @property
    def mask_in(self) -> int:
        if self.variant == "mt_audio":
            return self.audio.model_dim + self.n_channels
        return self.audio.model_dim + self.visual.model_dim


def init_params(cfg: ModelConfig, seed: int) -> dict:
    rng = np.random.default_rng([seed, 7])
    p = {}
    p.update(enc.init_tt_params(cfg.audio, cfg.audio_in, rng, "audio"))
    if cfg.uses_video:
        p.update(init_visual_params(cfg.front, rng))
        p.update(enc.init_tt_params(cfg.visual, cfg.front.feature_dim, rng, "visual"))
    p.update(enc.init_tt_params(cfg.mask, cfg.mask_in, rng, "mask"))
    p.update(enc.init_label_params(cfg.label, cfg.vocab_size, rng))
    p.update(enc.init_joint_params(cfg.mask.model_dim, cfg.label.model_dim, cfg.joint_dim,
                                   cfg.vocab_size, rng))
    return p


@dataclass
class Batch:
    """Padded model inputs, channel-major for everything per-channel.

    ``audio`` (B, T, D_in); ``video`` (C*B, 3T, H, W, 3) or None; ``refs`` C*B
    token lists where entry c*B+b is channel c of example b; ``channels`` the
    track index each of those rows is bound to.
    """
    audio: np.ndarray
    t_len: np.ndarray
    video: np.ndarray | None
    refs: list
    channels: list

    @property
    def size(self) -> int:
        return self.audio.shape[0]

    @property
    def n_rows(self) -> int:
        return len(self.refs)


def pad_batch(feats: list, videos: list | None, refs: list, channels: list) -> Batch:
    """``feats``: B stacked-audio matrices; ``videos``: C*B raw-frame tracks (channel-major).

    A track may also be given as (distinct_frames, per_frame_index); if all
    are, the batch video is a FrameAtlas instead of a dense array.
    """
    b = len(feats)
    tmax = max(f.shape[0] for f in feats)
    audio = np.zeros((b, tmax, feats[0].shape[1]), dtype=np.float32)
    for i, f in enumerate(feats):
        audio[i, : f.shape[0]] = f
    t_len = np.array([f.shape[0] for f in feats])
    video = None
    if videos is not None and all(isinstance(v, tuple) for v in videos):
        video = _atlas_video(videos, 3 * tmax)
    elif videos is not None:
        shape = videos[0].shape[1:]
        video = np.zeros((len(videos), 3 * tmax) + shape, dtype=np.float32)
        for i, v in enumerate(videos):
            n = min(v.shape[0], 3 * tmax)
            video[i, :n] = v[:n]
    return Batch(audio=audio, t_len=t_len, video=video, refs=refs, channels=channels)


def feature_stats(feats: list) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and standard deviation over all frames (float64 accumulation)."""
    x = np.concatenate([np.asarray(f, dtype=np.float64) for f in feats], axis=0)
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), 1e-3)
    return mean.astype(np.float32), std.astype(np.float32)


def _atlas_video(tracks: list, n_frames: int) -> FrameAtlas:
    shape = tracks[0][0].shape[1:]
    parts = [np.zeros((1,) + shape, dtype=np.float32)]
    index = np.zeros((len(tracks), n_frames), dtype=np.int64)
    offset = 1
    for r, (frames, idx) in enumerate(tracks):
        n = min(len(idx), n_frames)
        index[r, :n] = np.asarray(idx[:n]) + offset
        parts.append(np.asarray(frames, dtype=np.float32))
        offset += len(frames)
    return FrameAtlas(np.concatenate(parts), index)


class TransducerModel:
    """Model parameters plus fixed audio-feature standardisation statistics."""

    def __init__(self, cfg: ModelConfig, params: dict, norm: tuple | None = None):
        self.cfg = cfg
        self.params = params
        if norm is None:
            norm = (np.zeros(cfg.audio_in, dtype=np.float32), np.ones(cfg.audio_in, dtype=np.float32))
        self.norm = norm

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0) -> "TransducerModel":
        return cls(cfg, init_params(cfg, seed))

    # -- forward pieces -------------------------------------------------

    def encode(self, batch: Batch, keep_maps: bool = False):
        """Mask-encoder outputs for every (channel, example) row: (C*B, T, D).

        Returns (mask_out, key_mask, maps) where ``maps`` holds the attention
        weights (C*B, T, T) for the VCAM variant when ``keep_maps`` is set.
        """
        cfg, p = self.cfg, self.params
        b = batch.size
        reps = batch.n_rows // b
        tmax = batch.audio.shape[1]
        key_mask = np.arange(tmax)[None, :] < batch.t_len[:, None]
        feats = (batch.audio - self.norm[0]) / self.norm[1]
        a = enc.tt_encode(feats.astype(batch.audio.dtype), cfg.audio, p, "audio", key_mask=key_mask)
        a_rows = nc.concat([a] * reps, axis=0) if reps > 1 else a
        row_mask = np.concatenate([key_mask] * reps, axis=0)
        maps = None
        if cfg.variant == "mt_audio":
            mask_in = mask_input_audio_only(a_rows, batch.channels, cfg.n_channels)
        else:
            feats = conv2plus1d(batch.video, p, cfg.front)
            v = enc.tt_encode(feats, cfg.visual, p, "visual", key_mask=row_mask)
            if cfg.variant == "mt_vcam":
                ctx, w, s = attend(a_rows, v, visual_mask=row_mask, temperature=cfg.attn_temperature)
                mask_in = mask_input_vcam(a_rows, ctx)
                if keep_maps:
                    maps = (w.data, s.data)
            else:
                mask_in = nc.concat([a_rows, v], axis=-1)
        out = enc.tt_encode(mask_in, cfg.mask, p, "mask", key_mask=row_mask)
        return out, row_mask, maps

    def loss(self, batch: Batch) -> Tensor:
        """Summed per-channel transducer loss, averaged over examples."""
        cfg, p = self.cfg, self.params
        mask_out, row_mask, _ = self.encode(batch)
        lab = enc.label_encode(batch.refs, cfg.label, p, cfg.vocab_size)
        lattice = enc.joint(mask_out, lab, p)
        u_len = np.array([len(y) for y in batch.refs])
        targets = np.zeros((len(batch.refs), lab.shape[1] - 1), dtype=np.int64)
        for i, y in enumerate(batch.refs):
            targets[i, : len(y)] = y
        t_len = row_mask.sum(axis=1)
        per_row = rnnt_loss_batch(lattice, targets, t_len, u_len)
        return nc.scale(nc.reduce_sum(per_row), 1.0 / batch.size)

    # -- decoding -------------------------------------------------------

    def decode(self, batch: Batch) -> tuple[list, list]:
        """Greedy hypotheses for every row, plus per-row attention maps (VCAM only)."""
        with nc.no_record():
            mask_out, row_mask, maps = self.encode(batch, keep_maps=True)
        p = self.params
        e = mask_out.data @ p["joint.enc.w"].data + p["joint.enc.b"].data
        w_lab, w_out, b_out = p["joint.lab.w"].data, p["joint.out.w"].data, p["joint.out.b"].data
        hyps, amaps = [], []
        b = batch.size
        for r in range(batch.n_rows):
            t_len = int(row_mask[r].sum())
            cache: dict = {}

            def scorer(t, prefix, r=r):
                key = len(prefix)
                if key not in cache:
                    with nc.no_record():
                        rows = enc.label_encode(list(prefix), self.cfg.label, p, self.cfg.vocab_size)
                    cache.clear()
                    cache[key] = rows.data[-1] @ w_lab
                z = np.tanh(e[r, t] + cache[key]) @ w_out + b_out
                return z

            hyp = greedy_search(t_len, scorer, track=batch.channels[r])
            hyps.append(hyp)
            if maps is not None:
                amaps.append(AttentionMap(weights=maps[0][r, :t_len, :t_len].astype(np.float64),
                                          similarities=maps[1][r, :t_len, :t_len].astype(np.float64),
                                          track=batch.channels[r]))
            else:
                amaps.append(None)
        return hyps, amaps

    def with_params(self, params: dict) -> "TransducerModel":
        return TransducerModel(self.cfg, params, self.norm)


def scaled_config(cfg: ModelConfig, **changes) -> ModelConfig:
    return replace(cfg, **changes)
