"""Train intensity, range and fused models with one budget and compare test IoU."""

import argparse
import json

from cracksegdiff.experiments import fusion_benefit


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/fusion")
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample-steps", type=int, default=25)
    args = p.parse_args()
    result = fusion_benefit(args.out, args.steps, args.n_train, args.n_test, args.seed, args.sample_steps)
    for modality, agg in result["per_modality"].items():
        print(f"{modality:>9}  f1 {agg['f1']:.4f}  iou {agg['iou']:.4f}  bf {agg['bf_score']:.4f}")
    print(f"fused minus best single modality: {result['margin_iou_points']:+.2f} IoU points")
    print(json.dumps({"out": args.out}))


if __name__ == "__main__":
    main()
