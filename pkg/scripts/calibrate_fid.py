"""Record the FID self-distance bound used by the acceptance suite.

Twenty resampling trials split 2,000 disc-feature vectors into two disjoint
halves of 1,000 and measure the Frechet distance between them. The bound is
mean + 4 standard deviations of those trials, written to
tests/data/fid_self_distance.json. Calibration uses dataset seed 1 so the
acceptance check (dataset seed 0) runs on features it has never seen.
"""

import argparse
import json
from pathlib import Path

from anigan.evaluation import self_distance_trials
from anigan.synthetic import DiscFeatureExtractor, make_disc_dataset

HALF = 1000
TRIALS = 20


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default=Path(__file__).resolve().parents[1] / "tests/data/fid_self_distance.json")
    parser.add_argument("--dataset-seed", type=int, default=1)
    args = parser.parse_args()
    images, _, _ = make_disc_dataset(2 * HALF, size=32, seed=args.dataset_seed)
    trials = self_distance_trials(DiscFeatureExtractor()(images), HALF, TRIALS, seed=args.dataset_seed)
    doc = {
        "extractor_id": DiscFeatureExtractor.extractor_id,
        "dataset": {"generator": "make_disc_dataset", "n": 2 * HALF, "size": 32, "seed": args.dataset_seed},
        "half": HALF,
        "trials": [round(float(v), 6) for v in trials],
        "mean": float(trials.mean()),
        "std": float(trials.std(ddof=1)),
        "bound": float(trials.mean() + 4 * trials.std(ddof=1)),
    }
    Path(args.out).write_text(json.dumps(doc, indent=2) + "\n")
    print(json.dumps({k: doc[k] for k in ("mean", "std", "bound")}))


if __name__ == "__main__":
    main()
