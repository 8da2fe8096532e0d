#!/usr/bin/env python3
"""Train a small dual encoder on synthetic pairs until it retrieves every partner.

    python3 scripts/overfit_demo.py --pairs 32 --out runs/overfit
"""
import argparse
from pathlib import Path

from pocketdex import encoder, synthetic, trainer


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", type=int, default=32)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--batch-size", type=int, default=16)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=None, help="directory for model.dcmp and history.csv")
    args = ap.parse_args()

    data = synthetic.random_dataset(args.pairs, seed=args.seed)
    cfg = trainer.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed)

    def report(row):
        print(f"epoch {row['epoch']:4d}  loss {row['total']:.4f}")

    def done(row, model):
        return row["total"] < 0.05 and trainer.retrieval_top1(model, data, cfg.metric) == 1.0

    result = trainer.fit(data, cfg, config=encoder.EncoderConfig(), on_epoch=report, stop_when=done)
    top1 = trainer.retrieval_top1(result.model, data, cfg.metric)
    print(f"stopped after {len(result.history)} epochs, top-1 retrieval {top1:.1%}")

    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        encoder.save_checkpoint(result.model, args.out / "model.dcmp")
        (args.out / "history.csv").write_text(trainer.history_csv(result.history, header=f"seed={args.seed}"))


if __name__ == "__main__":
    main()
