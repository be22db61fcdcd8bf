"""Train the toy model on a few sequences and report how well it memorizes them."""

import argparse

from gridmix.experiments import run_overfit


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--sequences", type=int, default=64)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--every", type=int, default=20, help="print the loss every N epochs")
    args = p.parse_args()

    def on_epoch(row):
        if row["epoch"] % args.every == 0:
            print(f"epoch {row['epoch']:4d}  total {row['total']:.3f}")

    rep = run_overfit(args.sequences, args.epochs, args.lr, args.batch_size, args.seed, on_epoch=on_epoch)
    print(f"loss {rep.initial_loss:.2f} -> {rep.final_loss:.2f} (ratio {rep.ratio:.4f}), "
          f"top-1 class accuracy {rep.accuracy:.3f}, {rep.seconds:.0f} s")


if __name__ == "__main__":
    main()
