"""Hot-only layer sweep on graded-outlier toy models.

Prints the mean cosine divergence from the full model as the share of executed
(most important) layers drops, per seed and averaged, so the knee below half
the layers is visible.

    python3 scripts/layer_sweep.py --seeds 5
"""

import argparse
import math

from layerplan.dispatch import layer_sweep
from layerplan.model import ModelSpec, build_toy_model, graded_outliers
from layerplan.profiler import synthetic_calibration

RATIOS = (1.0, 0.75, 0.5, 0.25)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--layers", type=int, default=8)
    args = ap.parse_args()

    print("seed " + " ".join(f"{r:>10.2f}" for r in RATIOS))
    cols = [[] for _ in RATIOS]
    for seed in range(args.seeds):
        model = graded_outliers(build_toy_model(ModelSpec(args.layers, 64, 128, 4, 256, seed=seed)), seed=seed)
        d = layer_sweep(model, synthetic_calibration(256, 12, seed=seed), RATIOS).metrics
        for c, v in zip(cols, d):
            c.append(v)
        print(f"{seed:>4} " + " ".join(f"{v:>10.5f}" for v in d))
    print("mean " + " ".join(f"{math.fsum(c) / len(c):>10.5f}" for c in cols))


if __name__ == "__main__":
    main()
