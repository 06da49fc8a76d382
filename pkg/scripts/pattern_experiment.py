"""Train Conv1DNet on the frequency-pattern windows with every objective.

Prints train/test accuracy and the PCA-2 silhouette of the learned
embedding for each loss, plus the untrained silhouette for contrast.

    python3 scripts/pattern_experiment.py [--epochs 20] [--classifier-epochs 150]
"""
import argparse
import time

from cdml import data, nn
from cdml import eval as E
from cdml.synthetic import pattern_windows
from cdml.train import LOSSES, SplitArrays, TrainConfig, train_cell


def pattern_split(n_train=200, n_test=40, nuisance=1.5):
    Xtr, ytr = pattern_windows(n_train, nuisance=nuisance, seed=0)
    Xte, yte = pattern_windows(n_test, nuisance=nuisance, seed=1)
    st = data.normalize_fit(Xtr)
    return SplitArrays(data.normalize_apply(st, Xtr), ytr, data.normalize_apply(st, Xte), yte)


def pca_silhouette(embedding_model, X, y):
    proj, _, _ = E.export_embeddings(embedding_model, X, y, y * 0, 2)
    return E.silhouette(proj, y)


def run(loss, split, epochs, classifier_epochs, arch="conv1dnet", seed=0):
    cfg = TrainConfig(arch=arch, loss=loss, seed=seed, epochs=epochs, classifier_epochs=classifier_epochs)
    model, report = train_cell(cfg, split)
    emb, _ = nn.split_head(model)
    return report, pca_silhouette(emb, split.X_test, split.y_test)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--classifier-epochs", type=int, default=150)
    ap.add_argument("--arch", default="conv1dnet")
    args = ap.parse_args()
    split = pattern_split()
    untrained = nn.init_params(nn.build_embedding(args.arch), 0)
    print(f"untrained silhouette {pca_silhouette(untrained, split.X_test, split.y_test):+.3f}")
    for loss in LOSSES:
        t0 = time.perf_counter()
        r, sil = run(loss, split, args.epochs, args.classifier_epochs, args.arch)
        print(f"{loss:9s} train {r.train_acc:.4f} test {r.test_acc:.4f} silhouette {sil:+.3f} "
              f"({time.perf_counter() - t0:.0f}s)")


if __name__ == "__main__":
    main()
