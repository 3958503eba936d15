#!/usr/bin/env python3
"""Marker-phrase prior-shift case study: erm vs cat.

Train carries a fixed phrase in every example with class proportions
10/80/10; test shifts them to 40/20/40.  A model that memorized the skewed
prior pays for it at test time.
"""

import argparse
from dataclasses import replace

import numpy as np

from cat_lab.cli import CASE_STUDY, preset_model_config, preset_train_config
from cat_lab.datagen import generate_case_study
from cat_lab.trainer import evaluate, train


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--n", type=int, default=100, help="train and test size")
    parser.add_argument("--data-seed", type=int, default=5)
    args = parser.parse_args()

    train_set, test_set = generate_case_study(
        n_train=args.n, n_test=args.n, seed=args.data_seed
    )
    model_config = preset_model_config(CASE_STUDY)
    print(f"train priors 10/80/10, test priors 40/20/40, n={args.n}")
    for preset in ("erm", "cat"):
        config = preset_train_config(preset, CASE_STUDY)
        accs = [
            evaluate(
                train(model_config, replace(config, seed=s), train_set,
                      task="classification")[0],
                test_set, "classification",
            )["accuracy"]
            for s in range(args.seeds)
        ]
        accs = np.array(accs)
        print(f"{preset:8s} test acc {accs.round(3)}  "
              f"mean {accs.mean():.4f} ± {accs.std():.4f}")


if __name__ == "__main__":
    main()
