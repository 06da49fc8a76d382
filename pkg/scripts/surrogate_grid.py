"""Train the 3x4 architecture/objective grid on the synthetic surrogate.

Writes the grid directory (reports, checkpoints, comparison table) and
prints the table plus the Conv1DNet+triplet confusion matrix.

    python3 scripts/surrogate_grid.py [--out surrogate_grid] [--seeds 0] [--jobs 1]
"""
import argparse
import dataclasses

from cdml import eval as E
from cdml import nn
from cdml.synthetic import SURROGATE, make_records, windowed_split
from cdml.train import LOSSES, TrainConfig, run_grid

# training budget used for the surrogate grid
SURROGATE_TRAIN = TrainConfig(epochs=15, classifier_epochs=100)


def surrogate_data():
    return windowed_split(make_records(SURROGATE), split_seed=0)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="surrogate_grid")
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--epochs", type=int, default=SURROGATE_TRAIN.epochs)
    args = ap.parse_args()
    split, _ = surrogate_data()
    base = dataclasses.replace(SURROGATE_TRAIN, epochs=args.epochs)
    seeds = [int(s) for s in args.seeds.split(",")]
    reports = run_grid(nn.ARCHITECTURES, LOSSES, seeds, split, args.out, base, jobs=args.jobs)
    print(E.compare_table(reports).text())
    model = nn.load(f"{args.out}/best_conv1dnet_triplet.ckpt")
    _, _, cm = E.evaluate(model, None, split.X_test, split.y_test)
    print(E.confusion_text(cm, "Conv1DNet + triplet"))


if __name__ == "__main__":
    main()
