import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vcam_asr.synthgen import (BLANK, SynthConfig, render_thumbnail, sample_speaker, synth_utterance,
                               token_templates, voice_of_face)


def test_same_seed_same_profile():
    a, b = sample_speaker(7), sample_speaker(7)
    np.testing.assert_array_equal(a.audio_signature, b.audio_signature)
    np.testing.assert_array_equal(a.visual_style, b.visual_style)


def test_distinct_seeds_distinct_signatures():
    assert np.any(sample_speaker(0).audio_signature != sample_speaker(1).audio_signature)


def test_signature_range():
    sig = sample_speaker(42).audio_signature
    assert np.all(np.isfinite(sig)) and np.all(np.abs(sig) <= 1.0)


def test_voice_is_a_function_of_face_colour():
    for seed in range(20):
        p = sample_speaker(seed)
        np.testing.assert_array_equal(p.audio_signature, voice_of_face(p.visual_style))
    sigs = np.stack([sample_speaker(s).audio_signature for s in range(200)])
    assert len(np.unique(sigs, axis=0)) == 200
    # the map is smooth: nearby colours give nearby voices
    style = sample_speaker(3).visual_style
    nudged = style.copy()
    nudged[0] += 1e-3
    assert np.abs(voice_of_face(nudged) - voice_of_face(style)).max() < 0.05


def test_independent_voice_option():
    cfg = SynthConfig(voice_follows_face=False)
    p = sample_speaker(5, cfg)
    assert np.abs(p.audio_signature - voice_of_face(p.visual_style)).max() > 0.1
    np.testing.assert_array_equal(p.visual_style, sample_speaker(5).visual_style)


def test_zero_noise_frames_repeat():
    u = synth_utterance(sample_speaker(0), [5], frames_per_token=3, noise_level=0.0)
    assert u.audio_raw.shape[0] == 3
    np.testing.assert_array_equal(u.audio_raw[0], u.audio_raw[1])
    np.testing.assert_array_equal(u.audio_raw[1], u.audio_raw[2])


def test_distinct_tokens_distinct_frames():
    u = synth_utterance(sample_speaker(0), [3, 9], frames_per_token=2, noise_level=0.0)
    assert np.any(u.audio_raw[0] != u.audio_raw[2])


def test_utterance_is_deterministic():
    p = sample_speaker(3)
    a = synth_utterance(p, [1, 2, 3], 4, 0.1, seed=9)
    b = synth_utterance(p, [1, 2, 3], 4, 0.1, seed=9)
    assert a.audio_raw.tobytes() == b.audio_raw.tobytes()
    assert a.video.tobytes() == b.video.tobytes()


@pytest.mark.parametrize("labels,fpt", [([], 3), ([1], 1), ([0], 3), ([33], 3)])
def test_invalid_utterances_rejected(labels, fpt):
    with pytest.raises(ValueError):
        synth_utterance(sample_speaker(0), labels, fpt, 0.0)


def test_audio_and_video_aligned_and_in_range():
    u = synth_utterance(sample_speaker(5), [4, 8, 15], 5, 0.2, seed=1)
    assert u.audio_raw.shape[0] == u.video.shape[0] == 15
    assert np.all(u.audio_raw >= 0)
    assert u.video.min() >= 0 and u.video.max() <= 1
    assert u.speech_interval == (0, 15)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 32), min_size=1, max_size=12), st.integers(2, 6), st.integers(0, 10_000))
def test_nearest_centroid_recovers_labels(labels, fpt, spk):
    """Zero-noise frames decode exactly by nearest template (after removing the speaker offset)."""
    cfg = SynthConfig()
    p = sample_speaker(spk)
    u = synth_utterance(p, labels, fpt, 0.0)
    tmpl = token_templates(cfg)[1:]
    clean = u.audio_raw - cfg.signature_gain * p.audio_signature
    # rectification only clips where template + offset < 0; compare on the rectified templates
    cands = np.maximum(tmpl + cfg.signature_gain * p.audio_signature, 0.0)
    d = ((u.audio_raw[:, None, :] - cands[None]) ** 2).sum(-1)
    decoded = d.argmin(axis=1) + 1
    assert list(decoded[::fpt]) == list(labels)
    assert clean.shape == u.audio_raw.shape


def test_blank_template_is_silent():
    assert np.all(token_templates(SynthConfig())[BLANK] == 0)


def test_thumbnails_differ_between_speakers():
    a = synth_utterance(sample_speaker(1), [2, 2], 2, 0.0)
    b = synth_utterance(sample_speaker(2), [2, 2], 2, 0.0)
    assert np.any(a.video != b.video)


def test_thumbnail_depends_on_viseme_only():
    style = sample_speaker(4).visual_style
    cfg = SynthConfig()
    np.testing.assert_array_equal(render_thumbnail(1, style), render_thumbnail(1 + cfg.n_visemes, style))
    assert np.any(render_thumbnail(1, style) != render_thumbnail(2, style))
