"""Offline metrics: accuracy, loss, confusion matrices, embedding exports."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cdml import nn
from cdml.cluster import pca_fit, pca_project
from cdml.data import CLASSES3, LABELS5
from cdml.losses import cross_entropy

CLASS_TAGS = ("C1", "C2", "C3")
ARCH_TITLES = {"facenet": "FaceNet", "conv2dnet": "Conv2DNet", "conv1dnet": "Conv1DNet"}
LOSS_TITLES = {"pairwise": "Pairwise", "magnet": "Magnet", "triplet": "Triplet", "baseline": "Baseline"}
CHUNK = 64


def embed(model: nn.NetworkModel, X, chunk: int = CHUNK) -> np.ndarray:
    """Inference-mode outputs for a stack of inputs, computed in chunks."""
    X = np.asarray(X, dtype=float)
    if len(X) == 0:
        return np.zeros((0, model.output_dim))
    return np.concatenate([nn.forward(model, X[i:i + chunk]) for i in range(0, len(X), chunk)])


predict_proba = embed


def confusion_matrix(predicted, true, n_classes: int = 3) -> np.ndarray:
    """counts[predicted][true]."""
    cm = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(cm, (np.asarray(predicted, int), np.asarray(true, int)), 1)
    return cm


def evaluate(embedding_model, classifier, X, y):
    """Returns ``(accuracy, mean cross-entropy, confusion matrix)``.

    `classifier` may be None when `embedding_model` already ends in the head.
    """
    model = embedding_model if classifier is None else nn.compose(embedding_model, classifier)
    probs = embed(model, X)
    y = np.asarray(y, dtype=int)
    pred = probs.argmax(axis=1)
    cm = confusion_matrix(pred, y)
    loss, _ = cross_entropy(probs, y)
    return float(np.trace(cm) / cm.sum()), loss, cm


def knn_accuracy(train_emb, train_y, test_emb, test_y, k: int = 5) -> float:
    """Majority vote of the k nearest training embeddings (ties -> lower class)."""
    train_emb = np.asarray(train_emb, float)
    test_emb = np.asarray(test_emb, float)
    train_y = np.asarray(train_y, int)
    d = _sq_dist(test_emb, train_emb)
    nearest = np.argsort(d, axis=1, kind="stable")[:, :k]
    votes = np.apply_along_axis(lambda r: np.bincount(r, minlength=3), 1, train_y[nearest])
    return float((votes.argmax(axis=1) == np.asarray(test_y)).mean())


def _sq_dist(a, b):
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2 * a @ b.T
    return np.maximum(sq, 0.0)


def silhouette(points, labels) -> float:
    """Mean silhouette coefficient under Euclidean distance."""
    x = np.asarray(points, float)
    labels = np.asarray(labels)
    d = np.sqrt(_sq_dist(x, x))
    np.fill_diagonal(d, 0.0)
    classes = np.unique(labels)
    if len(classes) < 2:
        return 0.0
    s = np.zeros(len(x))
    for i in range(len(x)):
        own = labels == labels[i]
        n_own = own.sum() - 1
        if n_own == 0:
            continue
        a = d[i, own].sum() / n_own
        b = min(d[i, labels == c].mean() for c in classes if c != labels[i])
        s[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(s.mean())


def export_embeddings(embedding_model, X, y3, y5, pca_m: int = 2, path=None):
    """Project embeddings to `pca_m` principal components and write the CSV.

    Returns ``(projections, pca_model, csv_text)``.
    """
    emb = embed(embedding_model, X)
    pca = pca_fit(emb, pca_m)
    proj = pca_project(pca, emb)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"pc{i + 1}" for i in range(pca_m)] + ["label3", "label5"])
    for row, a, b in zip(proj, y3, y5):
        w.writerow([repr(float(v)) for v in row] + [CLASSES3[int(a)], LABELS5[int(b)]])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return proj, pca, text


# -------------------------------------------------------------------- tables


def confusion_text(cm, title: str = "") -> str:
    """Rows are predicted labels, columns are true labels."""
    lines = [title] if title else []
    lines.append("predicted \\ true " + "".join(f"{t:>7}" for t in CLASS_TAGS))
    for tag, row in zip(CLASS_TAGS, cm):
        lines.append(f"{tag:<17}" + "".join(f"{int(v):>7d}" for v in row))
    lines.append("C1: noncontact, C2: intentional, C3: collision")
    return "\n".join(lines) + "\n"


def confusion_csv(cm) -> str:
    rows = ["predicted\\true," + ",".join(CLASS_TAGS)]
    for tag, row in zip(CLASS_TAGS, cm):
        rows.append(tag + "," + ",".join(str(int(v)) for v in row))
    return "\n".join(rows) + "\n"


@dataclass
class ComparisonTable:
    cells: dict  # (arch, loss) -> (test_loss, test_acc)
    archs: tuple = ("facenet", "conv2dnet", "conv1dnet")
    losses: tuple = ("pairwise", "magnet", "triplet", "baseline")

    def column_max(self) -> dict:
        """(arch -> loss name) with the highest accuracy in each column."""
        out = {}
        for a in self.archs:
            col = [(acc, -loss_v, l) for (arch, l), (loss_v, acc) in self.cells.items() if arch == a]
            if col:
                best = max(col, key=lambda c: (c[0], c[1]))
                out[a] = best[2]
        return out

    def text(self) -> str:
        if not self.cells:
            return ""
        maxima = self.column_max()
        head1 = f"{'':<10}" + "".join(f"{ARCH_TITLES[a]:<20}" for a in self.archs)
        head2 = f"{'':<10}" + "".join(f"{'Loss':<10}{'Acc':<10}" for _ in self.archs)
        lines = [head1.rstrip(), head2.rstrip()]
        for l in self.losses:
            row = f"{LOSS_TITLES[l]:<10}"
            for a in self.archs:
                if (a, l) in self.cells:
                    lv, acc = self.cells[(a, l)]
                    flag = "*" if maxima.get(a) == l else " "
                    row += f"{lv:<10.4f}{acc:.4f}{flag:<4}"
                else:
                    row += f"{'-':<10}{'-':<10}"
            lines.append(row.rstrip())
        lines.append("* highest accuracy in column")
        return "\n".join(lines) + "\n"

    def csv(self) -> str:
        maxima = self.column_max()
        rows = ["loss_fn,arch,test_loss,test_acc,column_max"]
        for l in self.losses:
            for a in self.archs:
                if (a, l) in self.cells:
                    lv, acc = self.cells[(a, l)]
                    rows.append(f"{l},{a},{lv:.6f},{acc:.6f},{int(maxima.get(a) == l)}")
        return "\n".join(rows) + "\n"


def best_per_cell(reports) -> dict:
    """Highest test accuracy per (arch, loss); ties go to lower test loss."""
    best = {}
    for r in reports:
        key = (r.arch, r.loss_fn)
        if key not in best or (r.test_acc, -r.test_loss) > (best[key].test_acc, -best[key].test_loss):
            best[key] = r
    return best


def compare_table(reports) -> ComparisonTable:
    """Accepts TrainReports or a ready mapping (arch, loss) -> (loss, acc)."""
    if isinstance(reports, dict):
        return ComparisonTable(dict(reports))
    return ComparisonTable({k: (r.test_loss, r.test_acc) for k, r in best_per_cell(reports).items()})
