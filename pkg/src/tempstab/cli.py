"""Command line entry point: ``tempstab <subcommand> [options]``.

Every subcommand takes ``--config`` (a ``key = value`` file, see
``harness.format_config`` for the full key list), ``--seed``, ``--output-dir``
and ``--workers``; flags override values from the file.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import harness
from .metrics import TemporalFilter, evaluate_sequences
from .nn import load_checkpoint, save_checkpoint
from .procgen import (
    FramePair,
    SequenceSet,
    dump_sequences,
    generate_training_set,
    load_sequences,
)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="run seed (sweep: first of R consecutive seeds)")
    p.add_argument("--output-dir", help="where results, checkpoints and dumps go")
    p.add_argument("--workers", type=int, help="parallel seeds in a sweep")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tempstab", description="Temporal-stability regularization experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="dump the training patches and test sequences as PGM")
    _common(p)

    p = sub.add_parser("pretrain", help="reconstruction-only training from scratch")
    _common(p)
    p.add_argument("--epochs", type=int, help="override pretrain_epochs")

    p = sub.add_parser("finetune", help="regularized fine-tuning of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--reg-kind", default="transform-invariance")
    p.add_argument("--alpha", type=float, default=0.8)
    p.add_argument("--epochs", type=int, help="override finetune_epochs")
    p.add_argument("--max-steps", type=int)

    p = sub.add_parser("eval", help="masked PSNR and smoothness of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dumped sequence directory (default: generate from config)")
    p.add_argument("--dump", help="write predictions to this directory in the dump format")
    p.add_argument("--condition", default="eval")

    p = sub.add_parser("sweep", help="pretrain, fine-tune every condition, write results.csv")
    _common(p)
    p.add_argument("--gnuplot", action="store_true", help="also write summary.dat")

    p = sub.add_parser("metrics", help="compare two dumped sequence directories")
    _common(p)
    p.add_argument("--ref", required=True, help="reference dump (ground truth in y)")
    p.add_argument("--rec", required=True, help="reconstruction dump (prediction in y)")
    p.add_argument("--condition", default="rec")
    return ap


def _config(args, **extra) -> harness.ExperimentConfig:
    return harness.load_config(args.config, seed=args.seed, output_dir=args.output_dir,
                               workers=args.workers, **extra)


def _csv_line(values) -> None:
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(values)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output_dir)
    train = generate_training_set(cfg.scene_spec(), cfg.train_count)
    dump_sequences(SequenceSet([[p] for p in train]), out / "train", cfg.y_max)
    dump_sequences(harness.test_data(cfg), out / "test", cfg.y_max)
    print(out / "train" / "manifest.txt")
    print(out / "test" / "manifest.txt")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args, pretrain_epochs=args.epochs)
    path = Path(cfg.output_dir) / "checkpoints" / f"pretrain_seed{cfg.seed}.ckpt"
    path.parent.mkdir(parents=True, exist_ok=True)
    res = harness.pretrain(cfg, cfg.seed, checkpoint=path)
    print(f"{path} mse {res.initial_loss:.6g} -> {res.final_loss:.6g} "
          f"steps {res.steps} step_ms {res.step_ms:.2f} status {res.status}")
    return 0 if res.status == "ok" else 1


def cmd_finetune(args) -> int:
    cfg = _config(args, finetune_epochs=args.epochs)
    base = load_checkpoint(args.checkpoint)
    res = harness.finetune(base, cfg.loss_config(args.reg_kind, args.alpha), cfg, cfg.seed,
                           max_steps=args.max_steps)
    path = Path(cfg.output_dir) / "checkpoints" / f"{args.reg_kind}_a{args.alpha:.6f}_seed{cfg.seed}.ckpt"
    path.parent.mkdir(parents=True, exist_ok=True)
    if res.status == "ok":
        save_checkpoint(res.net, path)
    print(f"{path} mse {res.initial_loss:.6g} -> {res.final_loss:.6g} "
          f"steps {res.steps} step_ms {res.step_ms:.2f} status {res.status}")
    return 0 if res.status == "ok" else 1


def cmd_eval(args) -> int:
    cfg = _config(args)
    net = load_checkpoint(args.checkpoint)
    seqs = load_sequences(args.data) if args.data else harness.test_data(cfg)
    rep = harness.evaluate(net, seqs, peak=cfg.y_max)
    if args.dump:
        preds = harness.predict_sequences(net, seqs)
        out = SequenceSet([[FramePair(y=p, x=f.x, mask=f.mask) for f, p in zip(seq, pred)]
                           for seq, pred in zip(seqs.sequences, preds)], seqs.frame_rate)
        dump_sequences(out, args.dump, cfg.y_max)
    _csv_line([args.condition, repr(rep.psnr), repr(rep.smoothness), rep.masked_pixels])
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    path = harness.run_sweep(cfg, gnuplot=args.gnuplot)
    print(path)
    return 0


def cmd_metrics(args) -> int:
    cfg = _config(args)
    ref, rec = load_sequences(args.ref), load_sequences(args.rec)
    if len(ref.sequences) != len(rec.sequences):
        raise SystemExit("reference and reconstruction dumps hold different sequence counts")
    refs, recs, masks = [], [], []
    for k in range(len(ref.sequences)):
        _, y, m = ref.stacked(k)
        refs.append(y)
        masks.append(m)
        recs.append(rec.stacked(k)[1])
    rep = evaluate_sequences(refs, recs, masks, peak=cfg.y_max,
                             filt=TemporalFilter(frame_rate=ref.frame_rate))
    _csv_line([args.condition, repr(rep.psnr), repr(rep.smoothness), rep.masked_pixels])
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "metrics": cmd_metrics,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
