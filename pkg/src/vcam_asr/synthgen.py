"""Synthetic single-speaker audio-visual utterances.

Audio is produced directly as non-negative band energies at a 30 ms frame
period: each token contributes a fixed spectral template, the speaker adds a
signature offset, and Gaussian noise is rectified away. Video is one
thumbnail per audio frame; it renders the speaker's face style plus a mouth
shape picked by the token's viseme class, so several tokens share a mouth
shape and the picture alone cannot spell out the transcript.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FRAME_SECONDS = 0.03
BLANK = 0
ENERGY_GRID = 2 ** 16


@dataclass(frozen=True)
class SynthConfig:
    n_tokens: int = 32
    n_bands: int = 16
    thumb_size: int = 16
    n_visemes: int = 8
    signature_gain: float = 0.15
    lexicon_seed: int = 20220521
    voice_follows_face: bool = True

    @property
    def vocab_size(self) -> int:
        """Token count including the blank symbol (id 0)."""
        return self.n_tokens + 1


@dataclass(frozen=True)
class SpeakerProfile:
    id: int
    audio_signature: np.ndarray
    visual_style: np.ndarray


@dataclass
class AVUtterance:
    labels: tuple
    audio_raw: np.ndarray          # (F, B) non-negative energies
    video: np.ndarray              # (F, H, W, 3) in [0, 1]
    speech_interval: tuple         # [start, end) in frames
    speaker_id: int
    frame_tokens: np.ndarray = field(repr=False, default=None)  # token active at each frame

    @property
    def n_frames(self) -> int:
        return self.audio_raw.shape[0]

    @property
    def seconds(self) -> float:
        return self.n_frames * FRAME_SECONDS


def token_templates(cfg: SynthConfig) -> np.ndarray:
    """Per-token spectral templates, shape (vocab_size, n_bands); row 0 (blank) is silence."""
    rng = np.random.default_rng([cfg.lexicon_seed, 0])
    tmpl = rng.random((cfg.vocab_size, cfg.n_bands)) ** 3
    tmpl /= tmpl.max(axis=1, keepdims=True)
    tmpl[BLANK] = 0.0
    return tmpl


def viseme_of(token: int, cfg: SynthConfig) -> int:
    return (token - 1) % cfg.n_visemes


def voice_of_face(style: np.ndarray, cfg: SynthConfig = SynthConfig()) -> np.ndarray:
    """Band offsets implied by a face's base colour (a fixed smooth map shared by all speakers)."""
    w = np.random.default_rng([cfg.lexicon_seed, 3]).normal(size=(cfg.n_bands, 3))
    return np.tanh(3.0 * w @ (np.asarray(style[:3]) - 0.55))


def sample_speaker(seed: int, cfg: SynthConfig = SynthConfig()) -> SpeakerProfile:
    """Random speaker identity.

    With ``voice_follows_face`` the audio signature is a function of the face
    colour, so a face predicts its voice even for unseen speakers; otherwise
    the two are drawn independently.
    """
    rng = np.random.default_rng([seed, 1])
    signature = rng.uniform(-1.0, 1.0, cfg.n_bands)
    # base rgb, stripe frequencies (2), stripe phase
    style = np.concatenate([rng.uniform(0.25, 0.85, 3), rng.uniform(0.5, 3.0, 2), rng.uniform(0, 2 * np.pi, 1)])
    if cfg.voice_follows_face:
        signature = voice_of_face(style, cfg)
    return SpeakerProfile(id=seed, audio_signature=signature, visual_style=style)


def render_thumbnail(token: int, style: np.ndarray, cfg: SynthConfig = SynthConfig()) -> np.ndarray:
    """Deterministic H x W x 3 picture of a face with the mouth shape for ``token``."""
    n = cfg.thumb_size
    yy, xx = np.mgrid[0:n, 0:n] / n
    base = style[:3]
    stripes = 0.12 * np.sin(2 * np.pi * (style[3] * xx + style[4] * yy) + style[5])
    img = np.clip(base[None, None, :] + stripes[..., None], 0.0, 1.0)
    v = viseme_of(token, cfg)
    height = max(1, round((1 + v % 4) * n / 16))
    width = max(2, round((4 + 4 * (v // 4)) * n / 16))
    cy, cx = int(0.7 * n), n // 2
    top = cy - height // 2
    left = cx - width // 2
    img[top:top + height, left:left + width, :] = 0.3 * base
    return img.astype(np.float32)


def synth_utterance(profile: SpeakerProfile, labels, frames_per_token: int, noise_level: float,
                    seed: int = 0, cfg: SynthConfig = SynthConfig()) -> AVUtterance:
    labels = tuple(int(t) for t in labels)
    if not labels:
        raise ValueError("an utterance needs at least one label")
    if frames_per_token < 2:
        raise ValueError("frames_per_token must be >= 2")
    if any(t < 1 or t > cfg.n_tokens for t in labels):
        raise ValueError("label outside the token vocabulary")
    tmpl = token_templates(cfg)
    frame_tokens = np.repeat(np.asarray(labels), frames_per_token)
    clean = tmpl[frame_tokens] + cfg.signature_gain * profile.audio_signature[None, :]
    rng = np.random.default_rng([seed, profile.id, 2])
    noise = noise_level * rng.standard_normal(clean.shape) if noise_level > 0 else 0.0
    # energies live on a 2^-16 grid so that adding two utterances (and
    # subtracting one back out) is exact in 32-bit floats
    audio = (np.round(np.maximum(clean + noise, 0.0) * ENERGY_GRID) / ENERGY_GRID).astype(np.float32)

    frames = {t: render_thumbnail(t, profile.visual_style, cfg) for t in set(labels)}
    video = np.stack([frames[t] for t in frame_tokens])
    return AVUtterance(labels=labels, audio_raw=audio, video=video,
                       speech_interval=(0, len(frame_tokens)), speaker_id=profile.id,
                       frame_tokens=frame_tokens)
