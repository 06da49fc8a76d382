"""Sensor-log ingestion, 28x28 window construction, splits and batch samplers."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from cdml.errors import ContractError, LabelError, ParseError

log = logging.getLogger(__name__)

N_JOINTS = 7
N_FEATURES = 28
WINDOW = 28
SAMPLE_PERIOD = 0.005  # seconds, 200 Hz
DEFAULT_STRIDE = 14
TRAIN_FRACTION = 0.8

LABELS5 = ("noncontact", "intentional_l5", "intentional_l6", "incidental_l5", "incidental_l6")
CLASSES3 = ("noncontact", "intentional", "collision")
_LABEL5_TO_3 = (0, 1, 1, 2, 2)

FEATURE_COLUMNS = (
    [f"tauJ{j}" for j in range(1, 8)]
    + [f"tauExt{j}" for j in range(1, 8)]
    + [f"e{j}" for j in range(1, 8)]
    + [f"de{j}" for j in range(1, 8)]
)
LOG_HEADER = ["record_id", "label", "t"] + FEATURE_COLUMNS
WINDOW_HEADER = ["window_id", "label", "t"] + FEATURE_COLUMNS


def label5_index(name: str, line=None) -> int:
    try:
        return LABELS5.index(name)
    except ValueError:
        raise LabelError(f"unknown label {name!r}; expected one of {LABELS5}", line) from None


def map_label(label5: int) -> int:
    """Five-way contact label -> (noncontact, intentional, collision)."""
    return _LABEL5_TO_3[label5]


@dataclass(frozen=True)
class SensorFrame:
    timestamp: float
    tau_J: tuple
    tau_ext: tuple
    e: tuple
    e_dot: tuple

    def __post_init__(self):
        for name in ("tau_J", "tau_ext", "e", "e_dot"):
            v = getattr(self, name)
            if len(v) != N_JOINTS:
                raise ContractError(f"{name} must have {N_JOINTS} joints, got {len(v)}")
        if not np.all(np.isfinite(self.features())):
            raise ContractError("sensor frame has non-finite features")

    def features(self) -> np.ndarray:
        """28 features in window column order."""
        return np.concatenate([self.tau_J, self.tau_ext, self.e, self.e_dot]).astype(float)

    @classmethod
    def from_features(cls, timestamp, features) -> "SensorFrame":
        f = [float(v) for v in features]
        return cls(float(timestamp), tuple(f[0:7]), tuple(f[7:14]), tuple(f[14:21]), tuple(f[21:28]))


@dataclass
class Record:
    """One labelled capture: timestamps (T,) and features (T, 28)."""

    record_id: str
    label5: int
    t: np.ndarray
    features: np.ndarray

    @property
    def label3(self) -> int:
        return map_label(self.label5)

    def frames(self) -> list[SensorFrame]:
        return [SensorFrame.from_features(t, f) for t, f in zip(self.t, self.features)]


@dataclass
class SensorWindow:
    matrix: np.ndarray  # (28 time, 28 features)
    label3: int
    label5: int
    record_id: str = ""
    t: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def span(self) -> float:
        """Time covered by the window including the last sample period."""
        return float(self.t[-1] - self.t[0] + SAMPLE_PERIOD)


# -------------------------------------------------------------------- parsing


def parse_rows(rows: Iterable[list[str]], first_line: int = 2):
    """Parse data rows of the log schema into ``[(record, label5)]``.

    Rows of one record need not be contiguous; records come out in order of
    first appearance.
    """
    order: list[str] = []
    acc: dict[str, dict] = {}
    for line, row in enumerate(rows, start=first_line):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != len(LOG_HEADER):
            raise ParseError(f"expected {len(LOG_HEADER)} columns, got {len(row)}", line)
        rid, label = row[0], row[1]
        lab = label5_index(label.strip(), line)
        try:
            vals = [float(v) for v in row[2:]]
        except ValueError as e:
            raise ParseError(f"non-numeric value ({e})", line) from None
        if not np.all(np.isfinite(vals)):
            raise ParseError("non-finite value", line)
        if rid not in acc:
            order.append(rid)
            acc[rid] = {"label": lab, "t": [], "f": [], "line": line}
        rec = acc[rid]
        if rec["label"] != lab:
            raise ParseError(f"record {rid!r} changes label from {LABELS5[rec['label']]} to {label}", line)
        if rec["t"] and vals[0] <= rec["t"][-1]:
            raise ParseError(f"record {rid!r} has non-monotone timestamps", line)
        rec["t"].append(vals[0])
        rec["f"].append(vals[1:])
    out = []
    for rid in order:
        rec = acc[rid]
        r = Record(rid, rec["label"], np.array(rec["t"]), np.array(rec["f"]).reshape(-1, N_FEATURES))
        out.append((r, rec["label"]))
    return out


def parse_log(path) -> list[tuple[Record, int]]:
    """Read a sensor log CSV. Returns ``[(record, label5), ...]``."""
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_stream(fh)


def parse_stream(fh) -> list[tuple[Record, int]]:
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None:
        raise ParseError("empty log", 1)
    if [h.strip() for h in header] != LOG_HEADER:
        raise ParseError(f"bad header; expected {','.join(LOG_HEADER)}", 1)
    return parse_rows(reader)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_log(records: Iterable[Record], path_or_fh) -> None:
    """Write records in the log CSV schema (LF line endings)."""
    own = not hasattr(path_or_fh, "write")
    fh = open(path_or_fh, "w", newline="", encoding="utf-8") if own else path_or_fh
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in records:
            name = LABELS5[r.label5]
            for t, f in zip(r.t, r.features):
                w.writerow([r.record_id, name, _fmt(t)] + [_fmt(v) for v in f])
    finally:
        if own:
            fh.close()


def records_to_csv(records) -> str:
    buf = io.StringIO()
    write_log(records, buf)
    return buf.getvalue()


# -------------------------------------------------------------------- windows


def build_windows(record: Record, stride: int = DEFAULT_STRIDE) -> list[SensorWindow]:
    """Sliding 28-frame windows over one record. Short records yield none."""
    if stride < 1:
        raise ContractError("stride must be positive")
    n = len(record.t)
    if n < WINDOW:
        return []
    out = []
    for start in range(0, n - WINDOW + 1, stride):
        sl = slice(start, start + WINDOW)
        out.append(SensorWindow(record.features[sl].copy(), record.label3, record.label5,
                                record.record_id, record.t[sl].copy()))
    return out


def build_all_windows(records, stride: int = DEFAULT_STRIDE):
    """Windows for every record; returns ``(windows, skipped_record_count)``."""
    windows, skipped = [], 0
    for r in records:
        w = build_windows(r, stride)
        if not w:
            skipped += 1
        windows.extend(w)
    if skipped:
        log.warning("skipped %d records shorter than %d frames", skipped, WINDOW)
    return windows, skipped


def stack(windows):
    """``(X, y3, y5)`` arrays for a list of windows."""
    if not windows:
        return np.zeros((0, WINDOW, N_FEATURES)), np.zeros(0, int), np.zeros(0, int)
    X = np.stack([w.matrix for w in windows])
    y3 = np.array([w.label3 for w in windows])
    y5 = np.array([w.label5 for w in windows])
    return X, y3, y5


def window_id(record_id: str, k: int) -> str:
    return f"{record_id}#{k:04d}"


def write_windows(windows, path_or_fh) -> None:
    """Windows cache: 28 rows per window in the log schema keyed by window id."""
    own = not hasattr(path_or_fh, "write")
    fh = open(path_or_fh, "w", newline="", encoding="utf-8") if own else path_or_fh
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(WINDOW_HEADER)
        counter: dict[str, int] = {}
        for win in windows:
            k = counter.get(win.record_id, 0)
            counter[win.record_id] = k + 1
            wid = window_id(win.record_id, k)
            for t, f in zip(win.t, win.matrix):
                w.writerow([wid, LABELS5[win.label5], _fmt(t)] + [_fmt(v) for v in f])
    finally:
        if own:
            fh.close()


def read_windows(path) -> list[SensorWindow]:
    """Inverse of `write_windows`."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != WINDOW_HEADER:
            raise ParseError(f"bad header; expected {','.join(WINDOW_HEADER)}", 1)
        out, cur, rows = [], None, []

        def flush(line):
            if cur is None:
                return
            if len(rows) != WINDOW:
                raise ParseError(f"window {cur[0]!r} has {len(rows)} rows, expected {WINDOW}", line)
            arr = np.array(rows)
            lab = cur[1]
            out.append(SensorWindow(arr[:, 1:], _LABEL5_TO_3[lab], lab, cur[0].rsplit("#", 1)[0], arr[:, 0]))

        line = 1
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(WINDOW_HEADER):
                raise ParseError(f"expected {len(WINDOW_HEADER)} columns, got {len(row)}", line)
            lab = label5_index(row[1].strip(), line)
            if cur is None or row[0] != cur[0]:
                flush(line)
                cur, rows = (row[0], lab), []
            try:
                rows.append([float(v) for v in row[2:]])
            except ValueError as e:
                raise ParseError(f"non-numeric value ({e})", line) from None
        flush(line)
    return out


# ---------------------------------------------------------------------- split


@dataclass
class DatasetSplit:
    train: list  # records
    test: list
    seed: int

    def windows(self, stride: int = DEFAULT_STRIDE):
        return build_all_windows(self.train, stride)[0], build_all_windows(self.test, stride)[0]


def split_dataset(records, seed: int) -> DatasetSplit:
    """Stratified (by five-way label) record-level 80/20 split.

    The overall test count is round(0.2 * N); classes receive their share by
    largest remainder, ties going to the lower label index.
    """
    records = list(records)
    if len(records) < 5:
        raise ContractError(f"need at least 5 records to split, got {len(records)}")
    by_label: dict[int, list] = {}
    for r in records:
        by_label.setdefault(r.label5, []).append(r)
    for lab, rs in by_label.items():
        if len(rs) < 2:
            raise ContractError(f"cannot stratify: label {LABELS5[lab]} has {len(rs)} record(s)")
    labels = sorted(by_label)
    n_test = int(round((1 - TRAIN_FRACTION) * len(records)))
    quota = {lab: (1 - TRAIN_FRACTION) * len(by_label[lab]) for lab in labels}
    alloc = {lab: int(np.floor(q)) for lab, q in quota.items()}
    rest = n_test - sum(alloc.values())
    for lab in sorted(labels, key=lambda l: (-(quota[l] - alloc[l]), l))[:max(rest, 0)]:
        alloc[lab] += 1
    rng = np.random.default_rng(seed)
    train, test = [], []
    for lab in labels:
        rs = by_label[lab]
        perm = rng.permutation(len(rs))
        k = min(alloc[lab], len(rs) - 1)
        test.extend(rs[i] for i in perm[:k])
        train.extend(rs[i] for i in perm[k:])
    return DatasetSplit(train, test, seed)


# -------------------------------------------------------------- normalisation


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_json(self) -> str:
        return json.dumps({"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "NormStats":
        d = json.loads(text)
        return cls(np.array(d["mean"], dtype=float), np.array(d["std"], dtype=float))

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls.from_json(Path(path).read_text())


def normalize_fit(windows) -> NormStats:
    """Per-feature z-score statistics over every frame of the given windows."""
    X = windows if isinstance(windows, np.ndarray) else stack(windows)[0]
    rows = X.reshape(-1, N_FEATURES)
    return NormStats(rows.mean(axis=0), np.maximum(rows.std(axis=0), 1e-8))


def normalize_apply(stats: NormStats, window):
    """Works on a SensorWindow, a (28, 28) matrix, or a stack of them."""
    if isinstance(window, SensorWindow):
        out = SensorWindow(normalize_apply(stats, window.matrix), window.label3, window.label5,
                           window.record_id, window.t)
        return out
    return (np.asarray(window, dtype=float) - stats.mean) / stats.std


# ------------------------------------------------------------------- samplers


@dataclass
class PairBatch:
    a: np.ndarray
    b: np.ndarray
    target: np.ndarray  # 1 = same class
    with_replacement: bool = False


@dataclass
class PKBatch:
    indices: np.ndarray
    with_replacement: bool = False


def sample_pairs(labels, n: int, seed) -> PairBatch:
    """`n` index pairs, half same-class (first) and half different-class."""
    labels = np.asarray(labels)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    classes = np.unique(labels)
    members = {c: np.flatnonzero(labels == c) for c in classes}
    if len(classes) < 2:
        raise ContractError("sample_pairs needs at least two classes")
    n_sim = n // 2
    a, b, t = [], [], []
    replaced = False
    for _ in range(n_sim):
        c = classes[rng.integers(len(classes))]
        m = members[c]
        if len(m) >= 2:
            i, j = rng.choice(m, 2, replace=False)
        else:
            replaced = True
            i = j = m[0]
        a.append(i); b.append(j); t.append(1)
    for _ in range(n - n_sim):
        c1, c2 = rng.choice(classes, 2, replace=False)
        a.append(rng.choice(members[c1])); b.append(rng.choice(members[c2])); t.append(0)
    return PairBatch(np.array(a, int), np.array(b, int), np.array(t, int), replaced)


def sample_pk_batch(labels, P: int, Kp: int, seed) -> PKBatch:
    """`P` classes times `Kp` samples each, grouped by class."""
    labels = np.asarray(labels)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if Kp < 2:
        raise ContractError("Kp must be at least 2 for triplet batches")
    classes = np.unique(labels)
    if P > len(classes):
        raise ContractError(f"P={P} exceeds the {len(classes)} available classes")
    chosen = np.sort(rng.choice(classes, P, replace=False))
    out, replaced = [], False
    for c in chosen:
        m = np.flatnonzero(labels == c)
        if len(m) >= Kp:
            out.append(rng.choice(m, Kp, replace=False))
        else:
            replaced = True
            out.append(rng.choice(m, Kp, replace=True))
    return PKBatch(np.concatenate(out), replaced)
