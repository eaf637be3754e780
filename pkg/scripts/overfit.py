"""Fit a handful of synthetic fused samples and report train-set scores."""

import argparse
import json
import logging

from cracksegdiff.experiments import overfit


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/overfit")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample-steps", type=int, default=100)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    result = overfit(args.out, args.steps, args.n, args.seed, args.sample_steps)
    print(json.dumps(result, indent=2))


if __name__ == "__main__":
    main()
