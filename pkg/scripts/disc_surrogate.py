"""Run the 32x32 colored-disc conditional surrogate and print its measurements.

Examples:
    python scripts/disc_surrogate.py                      # loss as specified
    python scripts/disc_surrogate.py --cls-fake-weight 0  # ablation: no fake term in the discriminator
"""

import argparse
import json

import numpy as np

from anigan.synthetic import run_disc_surrogate


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=10_000)
    parser.add_argument("--eval-every", type=int, default=500)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--lambda-adv", type=float, default=1.0)
    parser.add_argument("--lambda-gp", type=float, default=0.5)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--lr-decay-start", type=int, default=5_000)
    parser.add_argument("--lr-decay-interval", type=int, default=100)
    parser.add_argument("--fid-n", type=int, default=2000)
    parser.add_argument("--cls-reduction", default="sum")
    parser.add_argument("--cls-fake-weight", type=float, default=1.0)
    parser.add_argument("--out", help="optional JSON file for the results")
    args = parser.parse_args()
    result = run_disc_surrogate(
        steps=args.steps, eval_every=args.eval_every, seed=args.seed, lambda_adv=args.lambda_adv,
        lambda_gp=args.lambda_gp, lr=args.lr,
        lr_decay_start=args.lr_decay_start, lr_decay_interval=args.lr_decay_interval, fid_n=args.fid_n, cls_reduction=args.cls_reduction,
        cls_fake_weight=args.cls_fake_weight, log=print,
    )
    fids = np.array([v for _, v in result.fid_curve])
    trailing = np.convolve(fids, np.ones(5) / 5, mode="valid") if len(fids) >= 5 else fids
    doc = {"args": vars(args), "precision": result.precision, "fid_curve": result.fid_curve,
           "trailing5": trailing.tolist(), "min_precision": min(result.precision.values()),
           "trailing5_non_increasing": bool(np.all(np.diff(trailing) <= 0))}
    print(json.dumps({k: doc[k] for k in ("precision", "min_precision", "trailing5_non_increasing")}, indent=1))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(doc, fh, indent=1)


if __name__ == "__main__":
    main()
