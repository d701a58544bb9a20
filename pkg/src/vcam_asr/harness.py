"""Training and evaluation orchestration: run configs, WER, checkpoints, reports."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import asd
from . import encoders as enc
from . import numcore as nc
from . import simcorpus as sc
from .frontend import VisualConfig, stack_audio
from .model import VARIANTS, ModelConfig, TransducerModel, feature_stats, pad_batch
from .vcam import export_map


TEST_SETS = (("Overlap", "test_overlap"), ("Single-TwoFace", "test_twoface"), ("Single-OneFace", "test_oneface"))


class HarnessError(RuntimeError):
    pass


class DivergenceError(HarnessError):
    pass


class CapabilityError(HarnessError):
    pass


# -- configuration ---------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    variant: str = "mt_vcam"
    model_dim: int = 64
    heads: int = 2
    ff_dim: int = 128
    audio_layers: int = 2
    visual_layers: int = 2
    mask_layers: int = 2
    label_layers: int = 2
    joint_dim: int = 64
    visual_feature_dim: int = 512
    vocab_size: int = 33
    n_bands: int = 16
    optimizer: str = "adam"
    lr: float = 2e-3
    momentum: float = 0.9
    clip_norm: float = 5.0
    warmup: int = 300
    steps: int = 800
    batch_size: int = 8
    train_examples: int = 0       # 0 = whole manifest
    log_every: int = 50
    seed: int = 0
    attn_temperature: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")

    def model_config(self) -> ModelConfig:
        def tt(layers):
            return enc.TTConfig(layers=layers, heads=self.heads, model_dim=self.model_dim, ff_dim=self.ff_dim)

        return ModelConfig(variant=self.variant, audio_in=3 * self.n_bands, vocab_size=self.vocab_size,
                           audio=tt(self.audio_layers), visual=tt(self.visual_layers), mask=tt(self.mask_layers),
                           label=tt(self.label_layers), front=VisualConfig(feature_dim=self.visual_feature_dim),
                           joint_dim=self.joint_dim, attn_temperature=self.attn_temperature)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))


def _coerce(kind, text: str):
    if kind is bool or kind == "bool":
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    if kind in (tuple, "tuple"):
        return tuple(float(v) for v in text.split(","))
    return text


def parse_kv(text: str) -> dict:
    """Parse ``key=value`` lines; '#' starts a comment."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _from_kv(cls, kv: dict, ignore=()):
    types = {f.name: f.type for f in fields(cls)}
    defaults = cls()
    args = {}
    for k, v in kv.items():
        if k in ignore:
            continue
        if k not in types:
            raise ValueError(f"unknown {cls.__name__} key {k!r}")
        args[k] = _coerce(type(getattr(defaults, k)), v)
    return cls(**args)


def run_config_from_text(text: str) -> RunConfig:
    return _from_kv(RunConfig, parse_kv(text))


def corpus_config_from_text(text: str, seed: int | None = None) -> sc.CorpusConfig:
    kv = parse_kv(text)
    cfg = _from_kv(sc.CorpusConfig, kv)
    return replace(cfg, seed=seed) if seed is not None else cfg


# -- WER -------------------------------------------------------------------

@dataclass(frozen=True)
class EditCounts:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_len: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    def __add__(self, o: "EditCounts") -> "EditCounts":
        return EditCounts(self.substitutions + o.substitutions, self.deletions + o.deletions,
                          self.insertions + o.insertions, self.ref_len + o.ref_len)

    @property
    def wer(self) -> float:
        if self.ref_len == 0:
            raise ValueError("WER is undefined for an empty reference")
        return self.errors / self.ref_len


def edit_counts(ref, hyp) -> EditCounts:
    """Minimum-edit alignment of two token sequences, split into S/D/I."""
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    # cost table plus back-pointers; ties prefer substitution/match, then deletion
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]), d[i - 1, j] + 1, d[i, j - 1] + 1)
    s = dl = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dl += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(int(s), dl, ins, n)


def wer(ref, hyp) -> float:
    if len(ref) == 0:
        raise ValueError("WER is undefined for an empty reference")
    return edit_counts(ref, hyp).wer


# -- data ------------------------------------------------------------------

@dataclass
class Item:
    """An example prepared for batching: stacked audio plus per-track frame atlases."""
    id: str
    feats: np.ndarray
    atlases: list
    indices: list
    refs: list
    record: sc.Record

    def track(self, m: int) -> tuple:
        """(distinct frames, per-frame index) covering the stacked-audio span."""
        n = 3 * self.feats.shape[0]
        return self.atlases[m], self.indices[m][:n]


def load_items(root, records) -> list:
    root = Path(root)
    items = []
    for rec in records:
        audio = nc.load(root / rec.audio)
        atl, idx = [], []
        for stem in rec.tracks:
            a, i, _ = sc.load_track(root, stem)
            atl.append(a)
            idx.append(i)
        items.append(Item(rec.id, stack_audio(audio), atl, idx, list(rec.refs), rec))
    return items


def make_batch(items: list, variant: str, channels=None):
    """Channel-major batch. ``channels`` restricts which tracks become rows."""
    if channels is None:
        channels = [0] if variant == "single_channel_av" else [0, 1]
    rows = [(c, it) for c in channels for it in items]
    videos = None if variant == "mt_audio" else [it.track(c) for c, it in rows]
    return pad_batch([it.feats for it in items], videos, [list(it.refs[c]) for c, it in rows],
                     [c for c, _ in rows])


def training_pool(items: list, variant: str) -> list:
    """Single-channel models only see single-speaker records (their target has one talker)."""
    if variant == "single_channel_av":
        return [it for it in items if it.record.scenario != "Overlap"]
    return items


# -- optimisation ----------------------------------------------------------

class Optimizer:
    def __init__(self, params: dict, cfg: RunConfig):
        self.cfg = cfg
        self.names = sorted(params)
        self.state = {k: [np.zeros_like(params[k].data), np.zeros_like(params[k].data)] for k in self.names}
        self.t = 0

    def step(self, params: dict) -> float:
        cfg = self.cfg
        self.t += 1
        grads = {k: (params[k].grad if params[k].grad is not None else np.zeros_like(params[k].data))
                 for k in self.names}
        norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
        if not math.isfinite(norm):
            raise DivergenceError(f"non-finite gradient norm at step {self.t}")
        clip = min(1.0, cfg.clip_norm / norm) if norm > 0 and cfg.clip_norm > 0 else 1.0
        lr = cfg.lr * min(1.0, self.t / max(1, cfg.warmup))
        for k in self.names:
            g = grads[k] * clip
            m, v = self.state[k]
            if cfg.optimizer == "sgd":
                m *= cfg.momentum
                m += g
                params[k].data -= lr * m
            else:
                m *= 0.9
                m += 0.1 * g
                v *= 0.999
                v += 0.001 * g * g
                mh = m / (1 - 0.9 ** self.t)
                vh = v / (1 - 0.999 ** self.t)
                params[k].data -= (lr * mh / (np.sqrt(vh) + 1e-8)).astype(params[k].data.dtype)
            params[k].grad = None
        return norm


def train(cfg: RunConfig, items: list, log_fn=None) -> tuple[TransducerModel, list]:
    """Minimise the summed per-channel transducer loss; returns (model, loss log)."""
    model = TransducerModel.create(cfg.model_config(), cfg.seed)
    pool = training_pool(items, cfg.variant)
    if cfg.train_examples:
        pool = pool[: cfg.train_examples]
    if not pool and cfg.steps:
        raise HarnessError("no training examples for this variant")
    if pool:
        model.norm = feature_stats([it.feats for it in pool])
    opt = Optimizer(model.params, cfg)
    rng = np.random.default_rng([cfg.seed, 3])
    order = np.array([], dtype=np.int64)
    history = []
    for step in range(cfg.steps):
        if len(order) < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(len(pool))])
        idx, order = order[: cfg.batch_size], order[cfg.batch_size:]
        batch = make_batch([pool[i] for i in idx], cfg.variant)
        try:
            with nc.Tape() as tape:
                loss = model.loss(batch)
        except nc.NumericError as exc:
            raise DivergenceError(f"step {step}: {exc} (parameters are no longer finite)") from exc
        value = float(loss.item())
        if not math.isfinite(value):
            raise DivergenceError(f"loss became {value} at step {step}")
        tape.backward(loss)
        norm = opt.step(model.params)
        history.append(value)
        if log_fn and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log_fn(step, value, norm)
    return model, history


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(model: TransducerModel, cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    names = sorted(model.params)
    (out / "params.txt").write_text("".join(f"{n}\n" for n in names))
    for n in names:
        nc.save(out / f"{n}.vct", model.params[n].data)
    nc.save(out / "feature_norm.vct", np.stack(model.norm))
    return out


def load_checkpoint(ckpt) -> tuple[TransducerModel, RunConfig]:
    ckpt = Path(ckpt)
    cfg = run_config_from_text((ckpt / "config.txt").read_text())
    model = TransducerModel.create(cfg.model_config(), cfg.seed)
    names = (ckpt / "params.txt").read_text().split()
    if sorted(names) != sorted(model.params):
        raise HarnessError("checkpoint parameters do not match its configuration")
    for n in names:
        arr = nc.load(ckpt / f"{n}.vct")
        if arr.shape != model.params[n].shape:
            raise HarnessError(f"{n}: stored shape {arr.shape} != expected {model.params[n].shape}")
        model.params[n].data = arr.astype(model.params[n].data.dtype)
    norm = nc.load(ckpt / "feature_norm.vct")
    model.norm = (norm[0], norm[1])
    return model, cfg


# -- evaluation ------------------------------------------------------------

@dataclass
class SetResult:
    name: str
    counts: EditCounts
    channel_counts: list
    n_examples: int

    @property
    def wer(self) -> float:
        return self.counts.wer


@dataclass
class EvalReport:
    variant: str
    sets: list
    map: float | None = None
    pooled_ap: float | None = None
    overlap_frame_fraction: float | None = None
    interval_contrast: float | None = None   # fraction of tracks scoring higher inside their interval
    recall_table: list | None = None          # (threshold, precision, recall, recall_ov, recall_nonov)
    wall_clock: float = 0.0

    def set(self, name: str) -> SetResult:
        for s in self.sets:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_tsv(self) -> str:
        lines = ["# per-test-set word error rates",
                 "set\texamples\tref_tokens\tsubstitutions\tdeletions\tinsertions\twer\t"
                 + "\t".join(f"wer_ch{m}" for m in range(2))]
        for s in self.sets:
            c = s.counts
            per = "\t".join(f"{cc.wer:.6f}" if cc.ref_len else "nan" for cc in s.channel_counts)
            lines.append(f"{s.name}\t{s.n_examples}\t{c.ref_len}\t{c.substitutions}\t{c.deletions}\t"
                         f"{c.insertions}\t{c.wer:.6f}\t{per}")
        if self.map is not None:
            lines += ["# active speaker detection on the Overlap set",
                      f"mAP\t{self.map:.6f}", f"pooled_AP\t{self.pooled_ap:.6f}",
                      f"overlap_frame_fraction\t{self.overlap_frame_fraction:.6f}",
                      f"tracks_higher_inside_interval\t{self.interval_contrast:.6f}",
                      "threshold\tprecision\trecall\trecall_overlap\trecall_nonoverlap"]
            lines += ["\t".join(f"{v:.6f}" for v in row) for row in self.recall_table]
        return "\n".join(lines) + "\n"

    def to_jsonl(self) -> str:
        out = []
        for s in self.sets:
            c = s.counts
            out.append({"kind": "wer", "set": s.name, "examples": s.n_examples, "ref_tokens": c.ref_len,
                        "substitutions": c.substitutions, "deletions": c.deletions,
                        "insertions": c.insertions, "wer": c.wer,
                        "channel_wer": [cc.wer if cc.ref_len else None for cc in s.channel_counts]})
        if self.map is not None:
            out.append({"kind": "asd", "mAP": self.map, "pooled_AP": self.pooled_ap,
                        "overlap_frame_fraction": self.overlap_frame_fraction,
                        "tracks_higher_inside_interval": self.interval_contrast,
                        "recall_table": [list(r) for r in self.recall_table]})
        return "".join(json.dumps({"variant": self.variant, **o}, sort_keys=True) + "\n" for o in out)


def _decode_set(model: TransducerModel, items: list, channels: list, batch_size: int):
    """Hypotheses and attention maps: out[i][c] for every item and requested channel."""
    hyps = [dict() for _ in items]
    maps = [dict() for _ in items]
    order = sorted(range(len(items)), key=lambda i: items[i].feats.shape[0])
    for s in range(0, len(order), batch_size):
        chunk = order[s:s + batch_size]
        batch = make_batch([items[i] for i in chunk], model.cfg.variant, channels)
        h, a = model.decode(batch)
        for r in range(batch.n_rows):
            i = chunk[r % len(chunk)]
            c = batch.channels[r]
            hyps[i][c] = h[r]
            maps[i][c] = a[r]
    return hyps, maps


def evaluate_set(model: TransducerModel, name: str, items: list, batch_size: int = 16):
    single = model.cfg.variant == "single_channel_av"
    if single and name != "Overlap":
        channels = [0]        # a single-channel model only serves the on-screen target
    else:
        channels = [0, 1]
    hyps, maps = _decode_set(model, items, channels, batch_size)
    per_ch = [EditCounts(), EditCounts()]
    for it, h in zip(items, hyps):
        for m in range(2):
            hyp = h[m].tokens if m in h else []
            per_ch[m] = per_ch[m] + edit_counts(it.refs[m], hyp)
    total = per_ch[0] + per_ch[1]
    return SetResult(name, total, per_ch, len(items)), maps


def asd_summary(items: list, maps: list) -> dict:
    tracks = []
    for it, mp in zip(items, maps):
        rec = it.record
        t = it.feats.shape[0]
        for m in (0, 1):
            fs = asd.score_frames(mp[m], asd.frames_to_blocks(rec.speech_intervals[m], t))
            ov = (asd.block_labels(asd.frames_to_blocks(rec.overlap, t), t) if rec.overlap
                  else np.zeros(t, dtype=bool))
            tracks.append((fs, ov))
    return asd.summarize_tracks(tracks)


def evaluate(model: TransducerModel, data_dir, limit: int = 0, batch_size: int = 16) -> EvalReport:
    t0 = time.perf_counter()
    sets, maps_overlap, overlap_items = [], None, None
    for name, split in TEST_SETS:
        path = Path(data_dir) / sc.SPLITS[split]
        if not path.exists():
            raise HarnessError(f"missing test manifest {path}")
        recs = sc.read_manifest(path)
        if limit:
            recs = recs[:limit]
        items = load_items(data_dir, recs)
        res, maps = evaluate_set(model, name, items, batch_size)
        sets.append(res)
        if name == "Overlap":
            maps_overlap, overlap_items = maps, items
    report = EvalReport(variant=model.cfg.variant, sets=sets)
    if model.cfg.variant == "mt_vcam":
        summ = asd_summary(overlap_items, maps_overlap)
        report.map = summ["map"]
        report.pooled_ap = summ["pooled_ap"]
        report.overlap_frame_fraction = summ["overlap_fraction"]
        report.interval_contrast = summ["contrast_fraction"]
        report.recall_table = summ["recall_table"]
    report.wall_clock = time.perf_counter() - t0
    return report


def write_report(report: EvalReport, path) -> list:
    """Write <path> (TSV), <path>.jsonl and a <path>.timing sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_tsv())
    jl = path.with_name(path.name + ".jsonl")
    jl.write_text(report.to_jsonl())
    timing = path.with_name(path.name + ".timing")
    timing.write_text(f"wall_clock_seconds\t{report.wall_clock:.3f}\n")
    return [path, jl, timing]


# -- attention export ------------------------------------------------------

def export_attention(model: TransducerModel, data_dir, example_id: str, out_dir) -> list:
    if model.cfg.variant != "mt_vcam":
        raise CapabilityError(f"variant {model.cfg.variant} has no attention maps")
    data_dir = Path(data_dir)
    rec = None
    for split in sc.SPLITS.values():
        p = data_dir / split
        if p.exists():
            for r in sc.read_manifest(p):
                if r.id == example_id:
                    rec = r
                    break
        if rec:
            break
    if rec is None:
        raise HarnessError(f"example {example_id!r} not found under {data_dir}")
    item = load_items(data_dir, [rec])[0]
    batch = make_batch([item], "mt_vcam")
    _, maps = model.decode(batch)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for amap in maps:
        written += export_map(amap, out, f"{example_id}.track{amap.track}")
    t = item.feats.shape[0]
    lines = ["track\tspeech_start\tspeech_end\tunit"]
    for m, iv in enumerate(rec.speech_intervals):
        lines.append(f"{m}\t{iv[0]}\t{iv[1]}\tframe")
        b = asd.frames_to_blocks(iv, t)
        lines.append(f"{m}\t{b[0]}\t{b[1]}\tencoded_frame")
    if rec.overlap:
        b = asd.frames_to_blocks(rec.overlap, t)
        lines.append(f"overlap\t{rec.overlap[0]}\t{rec.overlap[1]}\tframe")
        lines.append(f"overlap\t{b[0]}\t{b[1]}\tencoded_frame")
    ann = out / f"{example_id}.intervals.tsv"
    ann.write_text("\n".join(lines) + "\n")
    written.append(ann)
    return written
