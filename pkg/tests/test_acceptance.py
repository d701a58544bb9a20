"""Acceptance suite: one test per criterion.

Criteria 1-4 and 7 are exact oracle checks and run in seconds. Criteria 5, 6
and 8 share one desk-scale experiment (default corpus, three variants, three
model seeds) and criterion 9 repeats a full VCAM pipeline through the command
line and compares bytes with it. The whole desk experiment runs single-threaded.
A PASS/FAIL line per criterion is printed at the end of the session.
"""
import statistics
import time
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from oracles import ap_threshold_sweep, mini_vcam, rnnt_brute_force
from vcam_asr import asd, cli
from vcam_asr import harness as h
from vcam_asr import numcore as nc
from vcam_asr import simcorpus as sc
from vcam_asr.model import VARIANTS
from vcam_asr.numcore.gradcheck import analytic_grads, numeric_grad, rel_error
from vcam_asr.synthgen import sample_speaker, synth_utterance
from vcam_asr.transducer import rnnt_loss
from vcam_asr.vcam import AttentionMap, attend

SEEDS = (0, 1, 2)
BUDGET_SECONDS = 30 * 60


# -- 1 ---------------------------------------------------------------------

def test_criterion_1_transducer_loss_matches_alignment_enumeration(record_property):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst, n = 0.0, 0
    with nc.precision(64):
        for t in range(1, 5):
            for u in range(0, 4):
                for v in range(2, 5):
                    for _ in range(3):
                        x = rng.normal(size=(t, u + 1, v)) * 2
                        lp = x - np.log(np.exp(x).sum(-1, keepdims=True))
                        y = list(rng.integers(1, v, u))
                        got = float(rnnt_loss(nc.constant(lp), y).item())
                        ref = rnnt_brute_force(lp, y)
                        worst = max(worst, abs(got - ref) / abs(ref))
                        n += 1
    elapsed = time.perf_counter() - t0
    record_property("lattices", n)
    record_property("max_rel_err", f"{worst:.2e}")
    record_property("seconds", f"{elapsed:.1f}")
    assert n >= 100
    assert worst < 1e-6
    assert elapsed < 10


# -- 2 ---------------------------------------------------------------------

def test_criterion_2_mini_vcam_gradients_match_finite_differences(record_property):
    t0 = time.perf_counter()
    with nc.precision(64):
        model, batch = mini_vcam(seed=0, t=3, dim=4)
        names = sorted(model.params)
        params = [model.params[k] for k in names]

        def fn():
            return model.loss(batch)

        worst = 0.0
        for p, ga in zip(params, analytic_grads(fn, params)):
            worst = max(worst, float(rel_error(ga, numeric_grad(fn, p, 1e-5)).max()))
    elapsed = time.perf_counter() - t0
    record_property("parameter_tensors", len(names))
    record_property("max_rel_err", f"{worst:.2e}")
    record_property("seconds", f"{elapsed:.1f}")
    assert worst < 1e-3
    assert elapsed < 60


# -- 3 ---------------------------------------------------------------------

def test_criterion_3_attention_contract(record_property):
    rng = np.random.default_rng(3)
    worst_row = 0.0
    for trial in range(50):
        t, d = int(rng.integers(1, 40)), int(rng.integers(1, 32))
        b = int(rng.integers(1, 4))
        bits = 64 if trial % 2 else 32
        with nc.precision(bits):
            a = nc.constant(rng.normal(size=(b, t, d)) * 3)
            v = nc.constant(rng.normal(size=(b, t, d)) * 3)
            ctx, w, s = attend(a, v)
        for r in range(b):
            amap = AttentionMap(w.data[r].astype(np.float64), s.data[r].astype(np.float64))
            amap.check(1e-6)
            worst_row = max(worst_row, float(np.abs(amap.weights.sum(axis=1) - 1).max()))
            if bits == 64:
                lo, hi = v.data[r].min(axis=0), v.data[r].max(axis=0)
                assert np.all(ctx.data[r] >= lo - 1e-12) and np.all(ctx.data[r] <= hi + 1e-12)
            # inner products against a per-pair loop, bit for bit
            oracle = np.empty((t, t), dtype=s.dtype)
            for i in range(t):
                for j in range(t):
                    oracle[i, j] = np.sum(a.data[r, i] * v.data[r, j])
            assert s.data[r].tobytes() == oracle.tobytes()
    record_property("max_row_sum_err", f"{worst_row:.1e}")


# -- 4 ---------------------------------------------------------------------

def _exact_frames(spk, n):
    u = synth_utterance(sample_speaker(spk), [1 + i % 32 for i in range(n)], 2, 0.0)
    u.audio_raw, u.video, u.frame_tokens = u.audio_raw[:n], u.video[:n], u.frame_tokens[:n]
    u.speech_interval = (0, n)
    return u


@pytest.fixture(scope="module")
def desk_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("desk")


@pytest.fixture(scope="module")
def desk_corpus(desk_dir):
    t0 = time.perf_counter()
    with threadpool_limits(1):
        splits = sc.build_corpus(sc.CorpusConfig(seed=0), desk_dir / "corpus")
    return desk_dir / "corpus", splits, time.perf_counter() - t0


def test_criterion_4_corpus_statistics(desk_corpus, record_property):
    rng = np.random.default_rng(4)
    x = np.array([sc.sample_overlap_seconds(rng) for _ in range(10_000)])
    record_property("overlap_mean_s", f"{x.mean():.3f}")
    assert x.min() >= 1.0 and x.max() <= 5.0
    assert abs(x.mean() - 3.0) <= 0.1

    _, splits, _ = desk_corpus
    train = splits["train"]
    n_ov = sum(r.scenario == "Overlap" for r in train)
    n_two = sum(r.scenario == "TwoFace" for r in train)
    record_property("train_overlap_twoface", f"{n_ov}/{n_two}")
    assert len(train) == 2000 and n_ov == n_two == 1000

    # first talker covers frames 0-134, the second 63-205
    ex = sc.make_overlap(_exact_frames(1, 135), _exact_frames(2, 143), 72 * 0.03)
    assert ex.speech_intervals == [(0, 135), (63, 206)]
    assert ex.overlap_interval == (63, 135)


# -- 7 ---------------------------------------------------------------------

def test_criterion_7_average_precision_oracle(record_property):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        s = np.round(rng.random(n), int(rng.integers(1, 4)))      # rounding creates ties
        y = rng.random(n) < rng.uniform(0.1, 0.9)
        y[rng.integers(n)] = True
        worst = max(worst, abs(asd.average_precision(s, y) - ap_threshold_sweep(s, y)))
    record_property("max_abs_err", f"{worst:.1e}")
    assert worst <= 1e-9
    assert asd.average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(0.8333, abs=5e-5)


# -- desk-scale experiment (5, 6, 8, 9) --------------------------------------

@pytest.fixture(scope="module")
def desk_runs(desk_corpus, desk_dir):
    """Train and evaluate every variant for every seed; returns reports and wall-clock."""
    root, splits, corpus_seconds = desk_corpus
    t0 = time.perf_counter()
    reports = {}
    with threadpool_limits(1):
        items = h.load_items(root, splits["train"])
        for seed in SEEDS:
            for variant in VARIANTS:
                cfg = h.RunConfig(variant=variant, seed=seed)
                model, _ = h.train(cfg, items)
                ck = h.save_checkpoint(model, cfg, desk_dir / f"ck_{variant}_{seed}")
                rep = h.evaluate(model, root)
                h.write_report(rep, desk_dir / f"report_{variant}_{seed}.tsv")
                reports[variant, seed] = rep
                print(f"{variant} seed {seed}: " + ", ".join(f"{s.name} {s.wer:.3f}" for s in rep.sets)
                      + (f", mAP {rep.map:.3f}" if rep.map is not None else ""), flush=True)
    return reports, corpus_seconds + time.perf_counter() - t0


def _median(reports, variant, fn):
    return statistics.median(fn(reports[variant, s]) for s in SEEDS)


def test_criterion_5_overlap_wer_ordering(desk_runs, record_property):
    reports, seconds = desk_runs
    med = {v: _median(reports, v, lambda r: r.set("Overlap").wer) for v in VARIANTS}
    for v in VARIANTS:
        record_property(f"overlap_wer_{v}", f"{100 * med[v]:.1f}")
    record_property("minutes", f"{seconds / 60:.1f}")
    assert med["single_channel_av"] - med["mt_audio"] >= 0.02
    assert med["mt_audio"] - med["mt_vcam"] >= 0.02
    assert seconds <= BUDGET_SECONDS


def test_criterion_6_single_speaker_degradation(desk_runs, record_property):
    reports, _ = desk_runs
    vcam_two = _median(reports, "mt_vcam", lambda r: r.set("Single-TwoFace").wer)
    vcam_one = _median(reports, "mt_vcam", lambda r: r.set("Single-OneFace").wer)
    single = _median(reports, "single_channel_av", lambda r: r.set("Single-TwoFace").wer)
    record_property("vcam_twoface", f"{100 * vcam_two:.1f}")
    record_property("singlechan_single", f"{100 * single:.1f}")
    record_property("vcam_oneface", f"{100 * vcam_one:.1f}")
    record_property("oneface_ge_twoface", vcam_one >= vcam_two)
    assert vcam_two - single <= 0.05


def test_criterion_8_attention_detects_active_speaker(desk_runs, record_property):
    reports, _ = desk_runs
    maps = [reports["mt_vcam", s].map for s in SEEDS]
    contrast = [reports["mt_vcam", s].interval_contrast for s in SEEDS]
    record_property("mAP", f"{statistics.median(maps):.3f}")
    record_property("tracks_higher_inside", f"{statistics.median(contrast):.3f}")
    record_property("overlap_frame_fraction", f"{reports['mt_vcam', 0].overlap_frame_fraction:.3f}")
    assert statistics.median(maps) >= 0.85
    assert statistics.median(contrast) >= 0.90


def _tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_9_pipeline_is_byte_reproducible(desk_runs, desk_dir, tmp_path, record_property):
    # rerun corpus generation, VCAM training and evaluation through the command line
    data, ck, rep = tmp_path / "corpus", tmp_path / "ck", tmp_path / "report.tsv"
    (tmp_path / "run.txt").write_text(h.RunConfig(variant="mt_vcam", seed=0).to_text())
    assert cli.main(["--single-thread", "gen-corpus", "--out", str(data), "--seed", "0"]) == 0
    assert cli.main(["--single-thread", "train", "--config", str(tmp_path / "run.txt"),
                     "--data", str(data), "--out", str(ck)]) == 0
    assert cli.main(["--single-thread", "eval", "--ckpt", str(ck), "--data", str(data),
                     "--report", str(rep)]) == 0

    first_corpus = _tree_bytes(desk_dir / "corpus")
    second_corpus = _tree_bytes(data)
    record_property("corpus_files_compared", len(first_corpus))
    assert sorted(first_corpus) == sorted(second_corpus)
    assert all(first_corpus[k] == second_corpus[k] for k in first_corpus)
    assert _tree_bytes(desk_dir / "ck_mt_vcam_0") == _tree_bytes(ck)
    first = desk_dir / "report_mt_vcam_0.tsv"
    assert first.read_bytes() == rep.read_bytes()
    assert Path(str(first) + ".jsonl").read_bytes() == Path(str(rep) + ".jsonl").read_bytes()
