"""Replay a source session and a perturbed "target robot" copy through a model.

Uses the Conv1DNet+triplet checkpoint of a surrogate grid, prints the
side-by-side event table and, with --sweep, failure rates over a range of
perturbation strengths.

    python3 scripts/generalization.py --grid surrogate_grid [--sweep]
"""
import argparse
import dataclasses

from cdml import nn, stream
from cdml.synthetic import SURROGATE, Perturbation, alternating_session, perturb_records

from surrogate_grid import surrogate_data

SOURCE = dataclasses.replace(SURROGATE, seed=11)
TARGET = Perturbation(torque_offset=1.0, noise_scale=0.3, time_warp=1.1, seed=1)


def sessions(n_contacts=32, perturbation=TARGET):
    src = alternating_session(n_contacts, SOURCE)
    return src, perturb_records(src, perturbation)


def evaluate(model, norm, perturbation=TARGET):
    src, tgt = sessions(perturbation=perturbation)
    return stream.generalization_eval(model, norm, stream.records_as_frames(src), stream.records_as_frames(tgt))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", default="surrogate_grid")
    ap.add_argument("--sweep", action="store_true")
    args = ap.parse_args()
    model = nn.load(f"{args.grid}/best_conv1dnet_triplet.ckpt")
    _, norm = surrogate_data()
    s, t, table = evaluate(model, norm)
    print(table)
    print(f"detection failure rate source {s.detection_failure_rate():.3f} target {t.detection_failure_rate():.3f}")
    print(f"class failure rate     source {s.class_failure_rate():.3f} target {t.class_failure_rate():.3f}")
    if args.sweep:
        for offset in (0.0, 0.5, 1.0, 2.0, 4.0):
            for noise in (0.0, 0.3, 1.0):
                for warp in (1.0, 1.1, 1.3):
                    p = Perturbation(offset, noise, warp, seed=1)
                    _, t, _ = evaluate(model, norm, p)
                    print(f"offset {offset} noise {noise} warp {warp}: detection "
                          f"{t.detection_failure_rate():.3f} class {t.class_failure_rate():.3f}")


if __name__ == "__main__":
    main()
