"""Predictive coding on AR(2) sequences against the copy-last-frame baseline, for several horizons."""

import argparse

from isa_anh.experiments import run_apc


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--taus", type=int, nargs="+", default=[1, 2, 3])
    args = ap.parse_args()
    print(f"{'tau':>4} {'model':>9} {'copy':>9} {'gain':>7}")
    for tau in args.taus:
        r = run_apc(args.seed, tau=tau, max_steps=args.steps)
        print(f"{tau:>4} {r.model_loss:9.3f} {r.copy_last_loss:9.3f} {r.improvement:7.1%}")


if __name__ == "__main__":
    main()
