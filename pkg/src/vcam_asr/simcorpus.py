"""Simulated overlapping-speech corpus.

Two single-speaker utterances are mixed by delaying the second so that the
pair overlaps for a chosen duration and adding their band energies. Each
speaker's mouth-track is placed at the speaker's offset and padded out to
the full mixture with forward-backward repetitions of that speaker's own
frames. Single-speaker records pair the target with a silent second face
(TwoFace) or with blank thumbnails (OneFace).

On disk a corpus directory holds one manifest per split plus a ``data/``
folder of tensor containers. A track is stored as a frame atlas (the
distinct thumbnails) with a per-frame atlas index and a provenance table
(speaker id, source frame; -1 for blank frames).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .synthgen import FRAME_SECONDS, AVUtterance, SynthConfig, sample_speaker, synth_utterance

SCENARIOS = ("Overlap", "TwoFace", "OneFace")
SPLITS = {
    "train": "train.tsv",
    "test_overlap": "test_overlap.tsv",
    "test_twoface": "test_twoface.tsv",
    "test_oneface": "test_oneface.tsv",
}


class CorpusError(ValueError):
    pass


@dataclass
class OverlappedExample:
    audio_raw: np.ndarray                  # (F, B) mixed energies
    tracks: list                           # M arrays (F, H, W, 3)
    refs: list                             # M token tuples
    speech_intervals: list                 # M (start, end); (0, 0) for a silent face
    overlap_interval: tuple | None
    scenario: str = "Overlap"
    provenance: list = field(default_factory=list)  # M arrays (F, 2): speaker id, source frame

    @property
    def n_frames(self) -> int:
        return self.audio_raw.shape[0]


def seconds_to_frames(seconds: float) -> int:
    return int(round(seconds / FRAME_SECONDS))


def sample_overlap_seconds(rng: np.random.Generator, low: float = 1.0, high: float = 5.0) -> float:
    return float(rng.uniform(low, high))


def pingpong_indices(n: int, length: int, side: str) -> np.ndarray:
    """Source indices for ``length`` frames reflected off one end of an n-frame run.

    The run is extended as ...f3 f2 f1 f2 ... fN fN-1 ... (period 2(N-1));
    ``side`` picks the frames just before index 0 or just after index N-1,
    returned in temporal order.
    """
    if n < 1:
        raise CorpusError("cannot fill from an empty track")
    if side == "after":
        k = np.arange(n, n + length)
    elif side == "before":
        k = np.arange(-length, 0)
    else:
        raise ValueError(f"side must be 'before' or 'after', got {side!r}")
    if n == 1:
        return np.zeros(length, dtype=np.int64)
    period = 2 * (n - 1)
    r = np.mod(k, period)
    return np.where(r < n, r, period - r).astype(np.int64)


def pingpong_fill(frames, length: int, side: str):
    frames = np.asarray(frames)
    return frames[pingpong_indices(len(frames), length, side)]


def place_track(video: np.ndarray, start: int, total: int) -> tuple[np.ndarray, np.ndarray]:
    """Put ``video`` at [start, start+len) of a ``total``-frame track, reflection-filled.

    Returns (frames, source_index) where source_index[f] is the frame of
    ``video`` shown at output frame f.
    """
    n = len(video)
    before = pingpong_indices(n, start, "before")
    after = pingpong_indices(n, total - start - n, "after")
    src = np.concatenate([before, np.arange(n), after])
    return video[src], src


def _provenance(speaker: int, src: np.ndarray) -> np.ndarray:
    return np.stack([np.full(len(src), speaker), src], axis=1)


def make_overlap(u1: AVUtterance, u2: AVUtterance, overlap_s: float) -> OverlappedExample:
    """Mix ``u2`` into ``u1`` so the two overlap for ``overlap_s`` seconds."""
    n1, n2 = u1.n_frames, u2.n_frames
    n_ov = seconds_to_frames(overlap_s)
    if overlap_s <= 0 or n_ov < 1:
        raise CorpusError(f"overlap must be positive, got {overlap_s}")
    if n_ov > n1 or n_ov > n2:
        raise CorpusError(f"overlap of {overlap_s:.2f}s exceeds an utterance ({n1}, {n2} frames)")
    offset = n1 - n_ov
    total = offset + n2
    audio = np.zeros((total, u1.audio_raw.shape[1]), dtype=np.float32)
    audio[:n1] += u1.audio_raw
    audio[offset:] += u2.audio_raw
    t1, s1 = place_track(u1.video, 0, total)
    t2, s2 = place_track(u2.video, offset, total)
    iv1 = (u1.speech_interval[0], u1.speech_interval[1])
    iv2 = (offset + u2.speech_interval[0], offset + u2.speech_interval[1])
    ov = (max(iv1[0], iv2[0]), min(iv1[1], iv2[1]))
    return OverlappedExample(
        audio_raw=audio, tracks=[t1, t2], refs=[tuple(u1.labels), tuple(u2.labels)],
        speech_intervals=[iv1, iv2], overlap_interval=ov if ov[1] > ov[0] else None,
        scenario="Overlap", provenance=[_provenance(u1.speaker_id, s1), _provenance(u2.speaker_id, s2)])


def make_twoface(u: AVUtterance, distractor: AVUtterance) -> OverlappedExample:
    """Target audio with a second, silent on-screen face taken from another speaker."""
    if distractor.speaker_id == u.speaker_id:
        raise CorpusError("the distractor face must come from a different speaker")
    n = u.n_frames
    if distractor.n_frames >= n:
        src2 = np.arange(n)
    else:
        src2 = np.concatenate([np.arange(distractor.n_frames),
                               pingpong_indices(distractor.n_frames, n - distractor.n_frames, "after")])
    return OverlappedExample(
        audio_raw=u.audio_raw.copy(), tracks=[u.video.copy(), distractor.video[src2]],
        refs=[tuple(u.labels), ()], speech_intervals=[tuple(u.speech_interval), (0, 0)],
        overlap_interval=None, scenario="TwoFace",
        provenance=[_provenance(u.speaker_id, np.arange(n)), _provenance(distractor.speaker_id, src2)])


def make_oneface(u: AVUtterance) -> OverlappedExample:
    """Target audio with blank thumbnails standing in for the second face."""
    n = u.n_frames
    return OverlappedExample(
        audio_raw=u.audio_raw.copy(), tracks=[u.video.copy(), np.zeros_like(u.video)],
        refs=[tuple(u.labels), ()], speech_intervals=[tuple(u.speech_interval), (0, 0)],
        overlap_interval=None, scenario="OneFace",
        provenance=[_provenance(u.speaker_id, np.arange(n)), np.full((n, 2), -1)])


# -- corpus construction ---------------------------------------------------

@dataclass(frozen=True)
class CorpusConfig:
    n_train: int = 2000
    n_test: int = 200
    seed: int = 0
    utt_seconds: tuple = (3.0, 8.0)
    test_single_seconds: tuple = (2.5, 8.0)
    test_overlap_seconds: tuple = (2.7, 14.7)
    overlap_seconds: tuple = (1.0, 5.0)
    frames_per_token: tuple = (12, 18)
    noise_level: float = 0.05
    n_train_speakers: int = 400
    n_test_speakers: int = 100
    synth: SynthConfig = field(default_factory=SynthConfig)


class _Source:
    """Draws utterances with controlled durations from a speaker pool."""

    def __init__(self, cfg: CorpusConfig, rng: np.random.Generator, speaker_base: int, n_speakers: int):
        self.cfg, self.rng = cfg, rng
        self.speakers = [sample_speaker(speaker_base + i, cfg.synth) for i in range(n_speakers)]

    def utterance(self, lo_frames: int, hi_frames: int, exclude: int | None = None) -> AVUtterance:
        cfg, rng = self.cfg, self.rng
        fpt = int(rng.integers(cfg.frames_per_token[0], cfg.frames_per_token[1] + 1))
        n_lo = max(1, math.ceil(lo_frames / fpt))
        n_hi = hi_frames // fpt
        if n_hi < n_lo:
            raise CorpusError(f"no token count fits [{lo_frames}, {hi_frames}] frames at {fpt} frames/token")
        n_tok = int(rng.integers(n_lo, n_hi + 1))
        labels = rng.integers(1, cfg.synth.n_tokens + 1, n_tok)
        while True:
            spk = self.speakers[int(rng.integers(len(self.speakers)))]
            if spk.id != exclude:
                break
        return synth_utterance(spk, labels, fpt, cfg.noise_level, seed=int(rng.integers(2**31)),
                               cfg=cfg.synth)


def _frames(seconds: float) -> int:
    return seconds_to_frames(seconds)


def _overlap_example(src: _Source, utt_range: tuple, total_range: tuple | None) -> OverlappedExample:
    cfg, rng = src.cfg, src.rng
    max_span = cfg.frames_per_token[1]
    for _ in range(200):
        ov = sample_overlap_seconds(rng, *cfg.overlap_seconds)
        n_ov = seconds_to_frames(ov)
        lo = max(_frames(utt_range[0]), n_ov + 1)
        hi = _frames(utt_range[1])
        if hi - lo < max_span:
            continue
        try:
            u1 = src.utterance(lo, hi)
            u2 = src.utterance(lo, hi, exclude=u1.speaker_id)
        except CorpusError:
            continue
        total = u1.n_frames + u2.n_frames - n_ov
        if total_range and not (_frames(total_range[0]) <= total <= _frames(total_range[1])):
            continue
        return make_overlap(u1, u2, ov)
    raise CorpusError("duration constraints cannot be satisfied; widen utterance or overlap ranges")


def _single_example(src: _Source, utt_range: tuple, scenario: str) -> OverlappedExample:
    lo, hi = _frames(utt_range[0]), _frames(utt_range[1])
    if hi - lo < src.cfg.frames_per_token[1]:
        raise CorpusError("single-speaker duration range too narrow for the token length")
    u = src.utterance(lo, hi)
    if scenario == "OneFace":
        return make_oneface(u)
    d = src.utterance(lo, hi, exclude=u.speaker_id)
    return make_twoface(u, d)


def build_examples(cfg: CorpusConfig) -> dict:
    """Generate every split in memory: {split: [(id, OverlappedExample), ...]}."""
    if cfg.overlap_seconds[0] <= 0 or cfg.overlap_seconds[1] < cfg.overlap_seconds[0]:
        raise CorpusError("invalid overlap range")
    if _frames(cfg.utt_seconds[1]) <= _frames(cfg.overlap_seconds[0]):
        raise CorpusError("utterances too short for the smallest overlap")
    out = {}
    train_src = _Source(cfg, np.random.default_rng([cfg.seed, 11]), 0, cfg.n_train_speakers)
    n_ov = cfg.n_train // 2
    train = []
    for i in range(cfg.n_train):
        ex = (_overlap_example(train_src, cfg.utt_seconds, None) if i < n_ov
              else _single_example(train_src, cfg.utt_seconds, "TwoFace"))
        train.append((f"train{i:05d}", ex))
    # interleave so any prefix of the manifest stays balanced
    order = [j for pair in zip(range(n_ov), range(n_ov, cfg.n_train)) for j in pair]
    order += [j for j in range(cfg.n_train) if j not in set(order)]
    out["train"] = [train[j] for j in order]

    test_base = 1_000_000
    for split, scenario, salt in (("test_overlap", "Overlap", 12), ("test_twoface", "TwoFace", 13),
                                  ("test_oneface", "OneFace", 14)):
        src = _Source(cfg, np.random.default_rng([cfg.seed, salt]), test_base, cfg.n_test_speakers)
        items = []
        for i in range(cfg.n_test):
            if scenario == "Overlap":
                ex = _overlap_example(src, cfg.utt_seconds, cfg.test_overlap_seconds)
            else:
                ex = _single_example(src, cfg.test_single_seconds, scenario)
            items.append((f"{split}{i:05d}", ex))
        out[split] = items
    return out


# -- storage ---------------------------------------------------------------

@dataclass
class Record:
    id: str
    scenario: str
    audio: str
    tracks: list
    refs: list
    speech_intervals: list
    overlap: tuple | None
    n_frames: int

    @property
    def seconds(self) -> float:
        return self.n_frames * FRAME_SECONDS

    @property
    def overlap_seconds(self) -> float:
        return 0.0 if self.overlap is None else (self.overlap[1] - self.overlap[0]) * FRAME_SECONDS

    def to_line(self) -> str:
        refs = "|".join(" ".join(str(t) for t in r) for r in self.refs)
        ivs = ",".join(f"{s}-{e}" for s, e in self.speech_intervals)
        ov = "-" if self.overlap is None else f"{self.overlap[0]}-{self.overlap[1]}"
        return "\t".join([self.id, self.scenario, self.audio, ",".join(self.tracks), refs, ivs, ov,
                          str(self.n_frames)])

    @classmethod
    def from_line(cls, line: str) -> "Record":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 8:
            raise CorpusError(f"manifest line has {len(parts)} fields, expected 8")
        rid, scenario, audio, tracks, refs, ivs, ov, n = parts
        if scenario not in SCENARIOS:
            raise CorpusError(f"unknown scenario tag {scenario!r}")

        def span(s):
            a, b = s.split("-")
            return int(a), int(b)

        return cls(id=rid, scenario=scenario, audio=audio, tracks=tracks.split(","),
                   refs=[tuple(int(t) for t in r.split()) for r in refs.split("|")],
                   speech_intervals=[span(s) for s in ivs.split(",")],
                   overlap=None if ov == "-" else span(ov), n_frames=int(n))


def _atlas(frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distinct frames in order of first appearance, plus each frame's atlas index."""
    flat = np.ascontiguousarray(frames).reshape(len(frames), -1)
    seen: dict = {}
    idx = np.array([seen.setdefault(row.tobytes(), len(seen)) for row in flat], dtype=np.int64)
    _, first = np.unique(idx, return_index=True)
    return frames[first], idx


def write_example(root: Path, rid: str, ex: OverlappedExample) -> Record:
    data = root / "data"
    data.mkdir(parents=True, exist_ok=True)
    audio = f"data/{rid}.audio.vct"
    nc.save(root / audio, ex.audio_raw)
    stems = []
    for m, (frames, prov) in enumerate(zip(ex.tracks, ex.provenance)):
        stem = f"data/{rid}.t{m}"
        atlas, idx = _atlas(frames)
        nc.save(root / f"{stem}.atlas.vct", atlas)
        nc.save(root / f"{stem}.index.vct", idx)
        nc.save(root / f"{stem}.prov.vct", prov)
        stems.append(stem)
    return Record(id=rid, scenario=ex.scenario, audio=audio, tracks=stems, refs=[tuple(r) for r in ex.refs],
                  speech_intervals=[tuple(int(v) for v in iv) for iv in ex.speech_intervals],
                  overlap=None if ex.overlap_interval is None else tuple(int(v) for v in ex.overlap_interval),
                  n_frames=ex.n_frames)


def write_manifest(path: Path, records: list) -> None:
    Path(path).write_text("".join(r.to_line() + "\n" for r in records))


def read_manifest(path) -> list:
    lines = Path(path).read_text().splitlines()
    return [Record.from_line(l) for l in lines if l.strip()]


def load_track(root: Path, stem: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(atlas, per-frame atlas index, provenance) for one stored track."""
    atlas = nc.load(root / f"{stem}.atlas.vct")
    idx = nc.load(root / f"{stem}.index.vct").astype(np.int64)
    prov = nc.load(root / f"{stem}.prov.vct").astype(np.int64)
    return atlas, idx, prov


def load_example(root, rec: Record) -> OverlappedExample:
    root = Path(root)
    audio = nc.load(root / rec.audio)
    tracks, provs = [], []
    for stem in rec.tracks:
        atlas, idx, prov = load_track(root, stem)
        tracks.append(atlas[idx])
        provs.append(prov)
    ex = OverlappedExample(audio_raw=audio, tracks=tracks, refs=list(rec.refs),
                           speech_intervals=list(rec.speech_intervals), overlap_interval=rec.overlap,
                           scenario=rec.scenario, provenance=provs)
    if any(len(t) != ex.n_frames for t in tracks):
        raise CorpusError(f"{rec.id}: track length differs from audio length")
    return ex


def build_corpus(cfg: CorpusConfig, out_dir) -> dict:
    """Generate and store every split; returns {split: [Record, ...]}."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    manifests = {}
    for split, items in build_examples(cfg).items():
        recs = [write_example(root, rid, ex) for rid, ex in items]
        write_manifest(root / SPLITS[split], recs)
        manifests[split] = recs
    return manifests
