"""Command-line entry points: gen-corpus, train, eval, export-attn."""
from __future__ import annotations

import argparse
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import harness as h
from . import simcorpus as sc

log = logging.getLogger("vcam_asr")


def _read_config(path) -> str:
    return Path(path).read_text() if path else ""


def cmd_gen_corpus(args) -> int:
    cfg = h.corpus_config_from_text(_read_config(args.config), seed=args.seed)
    splits = sc.build_corpus(cfg, args.out)
    for name, recs in splits.items():
        log.info("%s: %d examples", name, len(recs))
    return 0


def cmd_train(args) -> int:
    cfg = h.run_config_from_text(_read_config(args.config))
    records = sc.read_manifest(Path(args.data) / sc.SPLITS["train"])
    items = h.load_items(args.data, records)

    def log_fn(step, loss, norm):
        log.info("step %d loss %.4f grad_norm %.3f", step, loss, norm)

    model, _ = h.train(cfg, items, log_fn)
    h.save_checkpoint(model, cfg, args.out)
    log.info("checkpoint written to %s", args.out)
    return 0


def cmd_eval(args) -> int:
    model, _ = h.load_checkpoint(args.ckpt)
    report = h.evaluate(model, args.data, limit=args.limit)
    h.write_report(report, args.report)
    sys.stdout.write(report.to_tsv())
    return 0


def cmd_export_attn(args) -> int:
    model, _ = h.load_checkpoint(args.ckpt)
    for p in h.export_attention(model, args.data, args.example, args.out):
        log.info("wrote %s", p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vcam-asr", description=__doc__)
    p.add_argument("--single-thread", action="store_true",
                   help="limit BLAS to one thread for bitwise-reproducible runs")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="simulate the overlapped audio-visual corpus")
    g.add_argument("--config", help="key=value corpus settings (optional)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gen_corpus)

    t = sub.add_parser("train", help="train one model variant")
    t.add_argument("--config", help="key=value run settings (optional)")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="decode the test sets and write a report")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--limit", type=int, default=0, help="examples per test set (0 = all)")
    e.set_defaults(fn=cmd_eval)

    x = sub.add_parser("export-attn", help="dump VCAM attention maps for one example")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--example", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_export_attn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    with threadpool_limits(1) if args.single_thread else nullcontext():
        try:
            return args.fn(args)
        except (h.HarnessError, sc.CorpusError, ValueError, FileNotFoundError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2


if __name__ == "__main__":
    sys.exit(main())
