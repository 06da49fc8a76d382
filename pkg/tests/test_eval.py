import csv
import io

import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.metrics import silhouette_score

from cdml import eval as E
from cdml import nn
from cdml.nn import LayerSpec, NetworkModel
from cdml.synthetic import pattern_windows
from cdml.train import TrainReport

# reference cell values, (arch, loss) -> (test loss, test accuracy)
REFERENCE = {
    ("facenet", "pairwise"): (0.3267, 0.8298), ("conv2dnet", "pairwise"): (0.4311, 0.7879),
    ("conv1dnet", "pairwise"): (0.3914, 0.9907),
    ("facenet", "magnet"): (0.2615, 0.9464), ("conv2dnet", "magnet"): (0.1506, 0.9534),
    ("conv1dnet", "magnet"): (0.2555, 0.9674),
    ("facenet", "triplet"): (0.1456, 0.9767), ("conv2dnet", "triplet"): (0.1597, 0.9767),
    ("conv1dnet", "triplet"): (0.1121, 0.9860),
    ("facenet", "baseline"): (0.1324, 0.9487), ("conv2dnet", "baseline"): (0.1604, 0.9487),
    ("conv1dnet", "baseline"): (0.1375, 0.9417),
}


def _perfect_classifier():
    """Reads the class off a one-hot encoded first row of the window."""
    m = NetworkModel([LayerSpec("flatten"), LayerSpec("dense", in_dim=784, size=3), LayerSpec("softmax")],
                     input_shape=(28, 28))
    m.params[1]["W"][:, :3] = 50 * np.eye(3)
    return m


def _onehot_windows(y):
    X = np.zeros((len(y), 28, 28))
    X[np.arange(len(y)), 0, y] = 1.0
    return X


def test_confusion_orientation():
    cm = E.confusion_matrix([0, 1, 1, 2], [0, 2, 1, 2])
    assert cm.tolist() == [[1, 0, 0], [0, 1, 1], [0, 0, 1]]
    assert cm.sum(axis=0).tolist() == [1, 1, 2]


def test_evaluate_perfect():
    y = np.array([0, 1, 2, 2, 1, 0, 0])
    acc, loss, cm = E.evaluate(_perfect_classifier(), None, _onehot_windows(y), y)
    assert acc == 1.0
    assert np.array_equal(cm, np.diag(np.bincount(y)))
    assert loss < 1e-10


@given(st.lists(st.integers(0, 2), min_size=1, max_size=40), st.integers(0, 1000))
def test_accuracy_from_matrix(true, seed):
    y = np.array(true)
    X = _onehot_windows(np.random.default_rng(seed).integers(0, 3, len(y)))
    acc, _, cm = E.evaluate(_perfect_classifier(), None, X, y)
    assert cm.sum() == len(y)
    assert cm.sum(axis=0).tolist() == np.bincount(y, minlength=3).tolist()
    assert acc == np.trace(cm) / cm.sum()
    pred = np.argmax(X[:, 0, :3], axis=1)
    assert acc == float((pred == y).mean())


def test_evaluate_split_models_equal_composite(rng):
    emb = nn.init_params(nn.build_embedding("facenet"), 0)
    head = nn.init_params(nn.build_classifier(), 1)
    head.params[2]["W"] = rng.normal(size=(3, 32))
    X, y = rng.normal(size=(10, 28, 28)), rng.integers(0, 3, 10)
    a = E.evaluate(emb, head, X, y)
    b = E.evaluate(nn.compose(emb, head), None, X, y)
    assert a[0] == b[0] and a[1] == b[1] and np.array_equal(a[2], b[2])


def test_confusion_outputs():
    cm = np.array([[228, 0, 0], [0, 102, 4], [0, 2, 93]])
    text = E.confusion_text(cm, "title")
    assert "predicted \\ true" in text and "228" in text
    rows = list(csv.reader(io.StringIO(E.confusion_csv(cm))))
    assert rows[0] == ["predicted\\true", "C1", "C2", "C3"]
    assert rows[2] == ["C2", "0", "102", "4"]


def test_knn_accuracy():
    tr = np.array([[0.0], [0.1], [5.0], [5.1], [9.0], [9.2]])
    ty = np.array([0, 0, 1, 1, 2, 2])
    assert E.knn_accuracy(tr, ty, np.array([[0.05], [5.05], [9.1]]), [0, 1, 2], k=1) == 1.0
    assert E.knn_accuracy(tr, ty, np.array([[0.05]]), [1], k=1) == 0.0


def test_silhouette_matches_sklearn(rng):
    for _ in range(3):
        x = rng.normal(size=(60, 5))
        y = rng.integers(0, 3, 60)
        x[y == 1] += 2.0
        assert abs(E.silhouette(x, y) - silhouette_score(x, y)) < 1e-10


def test_untrained_embedding_overlaps():
    X, y = pattern_windows(40, nuisance=1.5, seed=1)
    for arch in ("conv1dnet", "facenet"):
        emb = E.embed(nn.init_params(nn.build_embedding(arch), 0), X)
        assert abs(E.silhouette(emb, y)) < 0.2


def test_export_embeddings(tmp_path, rng):
    emb = nn.init_params(nn.build_embedding("facenet"), 0)
    X = rng.normal(size=(12, 28, 28))
    y5 = np.arange(12) % 5
    y3 = np.array([0, 1, 1, 2, 2])[y5]
    proj, pca, text = E.export_embeddings(emb, X, y3, y5, 2, tmp_path / "p.csv")
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["pc1", "pc2", "label3", "label5"]
    assert len(rows) == 13
    assert rows[4][2:] == ["collision", "incidental_l5"]
    assert (tmp_path / "p.csv").read_text() == text
    assert E.export_embeddings(emb, X, y3, y5, 2)[2] == text


# -------------------------------------------------------------------- tables


def test_table_reference_values_render():
    table = E.compare_table(REFERENCE)
    text = table.text()
    row = next(line for line in text.splitlines() if line.startswith("Triplet"))
    assert "0.1121" in row and "0.9860" in row
    assert table.column_max() == {"facenet": "triplet", "conv2dnet": "triplet", "conv1dnet": "pairwise"}
    pair = next(line for line in text.splitlines() if line.startswith("Pairwise"))
    assert "0.9907*" in pair
    lines = table.csv().splitlines()
    assert "pairwise,conv1dnet,0.391400,0.990700,1" in lines
    assert "triplet,conv1dnet,0.112100,0.986000,0" in lines


def test_table_missing_cells_are_gaps():
    cells = {k: v for k, v in REFERENCE.items() if k != ("facenet", "magnet")}
    text = E.compare_table(cells).text()
    magnet = next(line for line in text.splitlines() if line.startswith("Magnet"))
    assert "-" in magnet.split()[1]


def test_empty_table():
    assert E.compare_table([]).text() == ""
    assert E.compare_table({}).csv().splitlines() == ["loss_fn,arch,test_loss,test_acc,column_max"]


def test_best_per_cell_picks_top_seed():
    reps = [TrainReport("facenet", "triplet", s, test_loss=l, test_acc=a)
            for s, l, a in [(0, 0.3, 0.9), (1, 0.2, 0.95), (2, 0.1, 0.95)]]
    assert E.best_per_cell(reps)[("facenet", "triplet")].seed == 2
    assert E.compare_table(reps).cells[("facenet", "triplet")] == (0.1, 0.95)
