"""Train on symmetric Y-forks and check that both branches survive suppression."""

import argparse

from gridmix.experiments import run_multimodal


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--tracks", type=int, default=2000)
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    def on_epoch(row):
        print(f"epoch {row['epoch']:3d}  total {row['total']:.3f}")

    rep = run_multimodal(args.tracks, args.epochs, args.lr, args.batch_size, args.k, args.seed, on_epoch=on_epoch)
    print(f"branch hit rate {rep.branch_hit_rate:.3f} over {rep.n_test} held-out forks")
    print(f"minADE(K={args.k}) {rep.min_ade:.2f} m, ADE {rep.ade:.2f} m, cell diagonal {rep.cell_diagonal:.2f} m")
    print(f"{rep.seconds:.0f} s")


if __name__ == "__main__":
    main()
