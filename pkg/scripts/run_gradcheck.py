"""Compare autograd gradients with central differences on the toy model."""

import argparse

from gridmix.experiments import gradcheck


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--points", type=int, default=5, help="random parameter draws")
    p.add_argument("--step", type=float, default=1e-4, help="finite-difference step")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    rep = gradcheck(n_points=args.points, step=args.step, seed=args.seed)
    for name, err in sorted(rep.per_param.items(), key=lambda kv: -kv[1]):
        print(f"{name:>12s}  {err:.3e}")
    print(f"worst tensor error {rep.worst:.3e}, worst coordinate {rep.worst_elementwise:.3e}, "
          f"{rep.points} points in {rep.seconds:.1f} s")


if __name__ == "__main__":
    main()
