"""Training loops for the three metric-learning objectives and the baseline."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cdml import nn
from cdml.cluster import ClusterModel, nearest_imposter_clusters, refresh_clusters
from cdml.data import sample_pairs, sample_pk_batch
from cdml.errors import ContractError, TrainingAbort
from cdml.eval import embed, evaluate
from cdml.losses import (MagnetTerms, cross_entropy, magnet_loss, mine_semi_hard,
                         pairwise_loss, triplet_batch_loss)

log = logging.getLogger(__name__)

LOSSES = ("pairwise", "magnet", "triplet", "baseline")


@dataclass
class TrainConfig:
    loss: str = "triplet"
    arch: str = "conv1dnet"
    epochs: int = 200
    classifier_epochs: int = 50
    batch_size: int = 64  # pairs (pairwise) or windows (baseline, classifier)
    lr: float = 1e-3
    margin: float = 0.2
    alpha: float = 1.0
    K: int = 3
    refresh: int = 0  # magnet re-clustering period in steps; 0 = once per epoch
    M: int = 4
    D: int = 8
    P: int = 3
    Kp: int = 16
    normalize: bool = False
    seed: int = 0
    seeds: tuple = (0, 1, 2, 3, 4)

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ContractError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.arch not in nn.ARCHITECTURES:
            raise ContractError(f"arch must be one of {nn.ARCHITECTURES}, got {self.arch!r}")
        for name in ("batch_size", "K", "M", "D", "P", "Kp"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.epochs < 0 or self.classifier_epochs < 0 or self.refresh < 0:
            raise ContractError("epoch counts and refresh period must be non-negative")
        if not (self.lr > 0 and self.margin > 0):
            raise ContractError("lr and margin must be positive")
        self.seeds = tuple(int(s) for s in self.seeds)


def _coerce(f: dataclasses.Field, text: str):
    if f.name == "seeds":
        return tuple(int(s) for s in text.replace(" ", "").split(",") if s)
    if f.type in ("bool", bool):
        low = text.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no"):
            raise ContractError(f"{f.name}: not a boolean: {text!r}")
        return low in ("1", "true", "yes")
    if f.type in ("int", int):
        return int(text)
    if f.type in ("float", float):
        return float(text)
    return text.strip()


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Flat ``key=value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values = dataclasses.asdict(base or TrainConfig())
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"config line {n}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ContractError(f"config line {n}: unknown key {key!r}")
        values[key] = _coerce(fields[key], val)
    return TrainConfig(**values)


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config_text(Path(path).read_text(), base)


def config_text(cfg: TrainConfig) -> str:
    out = []
    for k, v in dataclasses.asdict(cfg).items():
        if k == "seeds":
            v = ",".join(str(s) for s in v)
        out.append(f"{k}={v}")
    return "\n".join(out) + "\n"


@dataclass
class SplitArrays:
    """Normalised training and test windows with three-way labels."""

    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray


@dataclass
class TrainReport:
    arch: str
    loss_fn: str
    seed: int
    epoch_losses: list = field(default_factory=list)
    classifier_losses: list = field(default_factory=list)
    train_acc: float = float("nan")
    test_loss: float = float("nan")
    test_acc: float = float("nan")
    wall_s: float = 0.0

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainReport":
        return cls(**json.loads(text))


class Adam:
    """Adam update applied in place to a list of arrays."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _streams(seed: int):
    """Independent generators for batches, dropout and head initialisation."""
    children = np.random.SeedSequence(seed).spawn(3)
    return [np.random.default_rng(c) for c in children]


def _check_finite(value, epoch, step):
    if not math.isfinite(value):
        raise TrainingAbort(f"non-finite loss {value}", epoch, step)


class EmbeddingTrainer:
    """Step-wise training of an embedding network with a metric-learning loss."""

    def __init__(self, config: TrainConfig, X, y):
        if config.loss == "baseline":
            raise ContractError("use BaselineTrainer for the cross-entropy baseline")
        self.cfg = config
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=int)
        if len(np.unique(self.y)) < 2:
            raise ContractError("training data must contain at least two classes")
        self.model = nn.init_params(nn.build_embedding(config.arch, config.normalize), config.seed)
        self.batch_rng, self.drop_rng, head_rng = _streams(config.seed)
        self.params = nn.flat_params(self.model)
        if config.loss == "pairwise":
            self.head_w = head_rng.uniform(-0.1, 0.1, nn.EMBEDDING_DIM)
            self.head_b = np.zeros(1)
            self.params = self.params + [self.head_w, self.head_b]
        self.opt = Adam(self.params, lr=config.lr)
        self.clusters: ClusterModel | None = None
        self.cluster_age = 0
        self.n_refresh = 0
        self.steps = 0
        self.epoch = 0
        per_batch = {"pairwise": 2 * config.batch_size, "triplet": config.P * config.Kp,
                     "magnet": (config.M + 1) * config.D}[config.loss]
        self.steps_per_epoch = max(1, math.ceil(len(self.X) / per_batch))
        self.refresh_period = config.refresh or self.steps_per_epoch

    # -- batches -----------------------------------------------------------

    def _forward(self, idx):
        cache = []
        emb = nn.forward(self.model, self.X[idx], mode="train", rng=self.drop_rng, cache=cache)
        return emb, cache

    def _apply(self, cache, grad_emb, extra=()):
        grads, _ = nn.backward(self.model, cache, grad_emb)
        self.opt.step(nn.flat_grads(self.model, grads) + list(extra))

    def _step_pairwise(self):
        b = sample_pairs(self.y, self.cfg.batch_size, self.batch_rng)
        idx = np.concatenate([b.a, b.b])
        emb, cache = self._forward(idx)
        n = len(b.a)
        loss, g = pairwise_loss(emb[:n], emb[n:], self.head_w, self.head_b[0], b.target)
        self._apply(cache, np.concatenate([g["a"], g["b"]]), [g["w"], np.array([g["bias"]])])
        return loss

    def _step_triplet(self):
        idx = sample_pk_batch(self.y, min(self.cfg.P, len(np.unique(self.y))), self.cfg.Kp, self.batch_rng).indices
        emb, cache = self._forward(idx)
        labels = self.y[idx]
        triplets = mine_semi_hard(emb, labels, self.cfg.margin)
        loss, g = triplet_batch_loss(emb, triplets, self.cfg.margin)
        if triplets:
            self._apply(cache, g)
        return loss

    def refresh(self):
        emb = embed(self.model, self.X)
        self.clusters = refresh_clusters(emb, self.y, self.cfg.K, seed=self.cfg.seed + self.n_refresh)
        self.n_refresh += 1
        self.cluster_age = 0

    def _step_magnet(self):
        if self.clusters is None or self.cluster_age >= self.refresh_period:
            self.refresh()
        cm = self.clusters
        rng = self.batch_rng
        n_clusters = len(cm.classes) * cm.K
        pick = int(rng.integers(n_clusters))
        seed_cluster = (int(cm.classes[pick // cm.K]), pick % cm.K)
        neighbours, _ = nearest_imposter_clusters(seed_cluster, cm, self.cfg.M)
        idx = []
        for c, j in [seed_cluster] + neighbours:
            members = np.flatnonzero((self.y == c) & (cm.assignments == j))
            if len(members) == 0:
                continue
            replace = len(members) < self.cfg.D
            idx.append(rng.choice(members, self.cfg.D, replace=replace))
        idx = np.concatenate(idx)
        emb, cache = self._forward(idx)
        terms = MagnetTerms(self.cfg.alpha, cm.K, cm.variance)
        loss, g = magnet_loss(emb, self.y[idx], cm.centroids, cm.assignments[idx], terms,
                              centroid_labels=cm.classes)
        self._apply(cache, g)
        self.cluster_age += 1
        return loss

    def step(self) -> float:
        loss = {"pairwise": self._step_pairwise, "triplet": self._step_triplet,
                "magnet": self._step_magnet}[self.cfg.loss]()
        _check_finite(loss, self.epoch, self.steps)
        self.steps += 1
        return loss

    def run_epoch(self) -> float:
        losses = [self.step() for _ in range(self.steps_per_epoch)]
        self.epoch += 1
        return float(np.mean(losses))


def train_embedding(config: TrainConfig, data: SplitArrays, report: TrainReport | None = None):
    """Train the embedding network alone. Returns ``(model, report)``."""
    t0 = time.perf_counter()
    tr = EmbeddingTrainer(config, data.X_train, data.y_train)
    report = report or TrainReport(config.arch, config.loss, config.seed)
    for _ in range(config.epochs):
        report.epoch_losses.append(tr.run_epoch())
    report.wall_s += time.perf_counter() - t0
    return tr.model, report


def _fit_classifier(model: nn.NetworkModel, X, y, config: TrainConfig, epochs: int, rng, drop_rng, losses: list):
    opt = Adam(nn.flat_params(model), lr=config.lr)
    n = len(X)
    for ep in range(epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            cache = []
            probs = nn.forward(model, X[idx], mode="train", rng=drop_rng, cache=cache)
            loss, g = cross_entropy(probs, y[idx])
            _check_finite(loss, ep, s // config.batch_size)
            grads, _ = nn.backward(model, cache, g, from_logits=True)
            opt.step(nn.flat_grads(model, grads))
            total += loss * len(idx)
            count += len(idx)
        losses.append(total / max(count, 1))
    return model


def train_classifier(embedding_model: nn.NetworkModel, data: SplitArrays, config: TrainConfig,
                     report: TrainReport | None = None):
    """Fit the three-way head on frozen embeddings. Returns ``(classifier, report)``."""
    t0 = time.perf_counter()
    report = report or TrainReport(config.arch, config.loss, config.seed)
    rng, drop_rng, _ = _streams(config.seed + 1)
    emb_train = embed(embedding_model, data.X_train)
    head = nn.init_params(nn.build_classifier(embedding_model.output_dim), config.seed)
    _fit_classifier(head, emb_train, np.asarray(data.y_train, int), config, config.classifier_epochs,
                    rng, drop_rng, report.classifier_losses)
    _finish(nn.compose(embedding_model, head), data, report)
    report.wall_s += time.perf_counter() - t0
    return head, report


def train_baseline(config: TrainConfig, data: SplitArrays, report: TrainReport | None = None):
    """Embedding architecture plus head trained end to end with cross-entropy."""
    t0 = time.perf_counter()
    report = report or TrainReport(config.arch, "baseline", config.seed)
    emb = nn.init_params(nn.build_embedding(config.arch, config.normalize), config.seed)
    head = nn.init_params(nn.build_classifier(emb.output_dim), config.seed)
    model = nn.compose(emb, head)
    rng, drop_rng, _ = _streams(config.seed)
    _fit_classifier(model, np.asarray(data.X_train, float), np.asarray(data.y_train, int), config,
                    config.epochs, rng, drop_rng, report.epoch_losses)
    _finish(model, data, report)
    report.wall_s += time.perf_counter() - t0
    return model, report


def _finish(model, data: SplitArrays, report: TrainReport):
    report.train_acc = evaluate(model, None, data.X_train, data.y_train)[0]
    if len(data.y_test):
        acc, loss, _ = evaluate(model, None, data.X_test, data.y_test)
        report.test_acc, report.test_loss = acc, loss


def train_cell(config: TrainConfig, data: SplitArrays):
    """Full pipeline for one (architecture, loss, seed): returns ``(composite, report)``.

    The composite is the embedding network followed by its classifier head.
    """
    if config.loss == "baseline":
        return train_baseline(config, data)
    emb, report = train_embedding(config, data)
    head, report = train_classifier(emb, data, config, report)
    return nn.compose(emb, head), report


# ---------------------------------------------------------------------- grid

REPORT_HEADER = "arch,loss_fn,seed,test_loss,test_acc,wall_s"


def _cell_name(arch, loss, seed):
    return f"{arch}_{loss}_{seed}"


def _run_cell(args):
    cfg, data, out, record_wall = args
    name = _cell_name(cfg.arch, cfg.loss, cfg.seed)
    try:
        model, report = train_cell(cfg, data)
    except TrainingAbort as e:
        log.error("cell %s aborted: %s", name, e)
        (out / "cells" / f"{name}.abort").write_text(str(e) + "\n")
        return None
    if not record_wall:
        report.wall_s = 0.0
    nn.save(model, out / "cells" / f"{name}.ckpt")
    (out / "cells" / f"{name}.json").write_text(report.to_json() + "\n")
    return report


def run_grid(archs, losses, seeds, data: SplitArrays, out_dir, base: TrainConfig | None = None,
             jobs: int = 1, record_wall: bool = True) -> list[TrainReport]:
    """Train every (arch, loss, seed) cell, resuming cells already on disk.

    Writes ``cells/``, ``reports.csv``, ``epochs.jsonl``, ``table.txt`` and
    ``best_<arch>_<loss>.ckpt`` under `out_dir`.
    """
    archs, losses, seeds = list(archs), list(losses), list(seeds)
    if not (archs and losses and seeds):
        raise ContractError("grid needs at least one architecture, loss and seed")
    base = base or TrainConfig()
    out = Path(out_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    todo = []
    for a in archs:
        for l in losses:
            for s in seeds:
                if not (out / "cells" / f"{_cell_name(a, l, s)}.json").exists():
                    cfg = dataclasses.replace(base, arch=a, loss=l, seed=s)
                    todo.append((cfg, data, out, record_wall))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_run_cell, todo))
    else:
        for t in todo:
            _run_cell(t)
    return _collect(out, archs, losses, seeds)


def _collect(out: Path, archs, losses, seeds) -> list[TrainReport]:
    from cdml.eval import best_per_cell, compare_table

    reports = []
    for a in archs:
        for l in losses:
            for s in seeds:
                p = out / "cells" / f"{_cell_name(a, l, s)}.json"
                if p.exists():
                    reports.append(TrainReport.from_json(p.read_text()))
    (out / "reports.csv").write_text(reports_csv(reports))
    (out / "epochs.jsonl").write_text(epochs_jsonl(reports))
    for (a, l), r in best_per_cell(reports).items():
        src = out / "cells" / f"{_cell_name(a, l, r.seed)}.ckpt"
        (out / f"best_{a}_{l}.ckpt").write_bytes(src.read_bytes())
    table = compare_table(reports)
    (out / "table.txt").write_text(table.text())
    (out / "table.csv").write_text(table.csv())
    return reports


def reports_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER.split(","))
    for r in reports:
        w.writerow([r.arch, r.loss_fn, r.seed, f"{r.test_loss:.6f}", f"{r.test_acc:.6f}", f"{r.wall_s:.3f}"])
    return buf.getvalue()


def epochs_jsonl(reports) -> str:
    lines = []
    for r in reports:
        for i, v in enumerate(r.epoch_losses):
            lines.append(json.dumps({"arch": r.arch, "loss_fn": r.loss_fn, "seed": r.seed, "epoch": i + 1, "loss": v}))
    return "".join(l + "\n" for l in lines)
