"""Frame-by-frame log replay with a trailing 28-frame window and event scoring."""
from __future__ import annotations

import csv
import io
import json
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from cdml import nn
from cdml.data import LOG_HEADER, N_FEATURES, SAMPLE_PERIOD, WINDOW, NormStats, label5_index, map_label
from cdml.errors import ContractError, ParseError

NONCONTACT, INTENTIONAL, COLLISION = 0, 1, 2
CONTACT_CLASSES = (INTENTIONAL, COLLISION)
DEFAULT_HOLD = 3
BUDGET_MS = 50.0


@dataclass
class Frame:
    index: int  # 1-based position in the stream
    t: float
    features: np.ndarray
    label3: int | None = None


@dataclass
class Prediction:
    frame: int
    class3: int
    probs: np.ndarray
    infer_ms: float

    def to_json(self, timestamps: bool = True) -> str:
        return json.dumps({
            "frame": self.frame,
            "class3": int(self.class3),
            "probs": [round(float(p), 6) for p in self.probs],
            "infer_ms": round(self.infer_ms, 4) if timestamps else None,
        })


@dataclass
class ContactEvent:
    """A debounced contact, in window (prediction) indices."""

    cls: int
    first: int  # first window of the agreeing run that opened it
    opened: int  # window at which the open condition was met
    last: int  # last contact window before closing
    closed: int | None  # window at which the close condition was met


@dataclass
class StreamEvent:
    kind: str  # contact_start | contact_end
    class3: int
    frame: int
    latency_ms: float


@dataclass(frozen=True)
class Span:
    cls: int
    start: int  # frame, inclusive
    end: int  # frame, inclusive

    def overlaps(self, other: "Span") -> bool:
        return self.start <= other.end and other.start <= self.end


# ------------------------------------------------------------------- sources


def iter_frames(source) -> Iterator[Frame]:
    """Frames from a path, an open text stream, or an iterable of CSV lines.

    A header row is optional when reading lines (stdin); labels are kept as
    ground truth when present.
    """
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, newline="", encoding="utf-8") as fh:
            yield from iter_frames(fh)
        return
    reader = csv.reader(source)
    index = 0
    for line, row in enumerate(reader, start=1):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if [c.strip() for c in row] == LOG_HEADER:
            continue
        if len(row) != len(LOG_HEADER):
            raise ParseError(f"expected {len(LOG_HEADER)} columns, got {len(row)}", line)
        lab = map_label(label5_index(row[1].strip(), line)) if row[1].strip() else None
        try:
            vals = np.array([float(v) for v in row[2:]])
        except ValueError as e:
            raise ParseError(f"non-numeric value ({e})", line) from None
        index += 1
        yield Frame(index, float(vals[0]), vals[1:], lab)


def records_as_frames(records) -> list[Frame]:
    out, i = [], 0
    for r in records:
        for t, f in zip(r.t, r.features):
            i += 1
            out.append(Frame(i, float(t), np.asarray(f, float), r.label3))
    return out


# -------------------------------------------------------------------- replay


@dataclass
class ReplayResult:
    predictions: list = field(default_factory=list)
    frame_labels: list = field(default_factory=list)  # ground truth per frame (None if unlabeled)
    events: list = field(default_factory=list)  # ContactEvent
    stream_events: list = field(default_factory=list)  # StreamEvent
    warmup: int = 0
    dropped: int = 0
    frame_intervals_ms: list = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return len(self.frame_labels)

    def latency(self) -> dict:
        ms = np.array([p.infer_ms for p in self.predictions]) if self.predictions else np.zeros(0)
        if ms.size == 0:
            return {"count": 0, "median_ms": float("nan"), "p95_ms": float("nan"), "max_ms": float("nan"),
                    "budget_ms": BUDGET_MS, "within_budget": float("nan")}
        return {
            "count": int(ms.size),
            "median_ms": float(np.median(ms)),
            "p95_ms": float(np.percentile(ms, 95)),
            "max_ms": float(ms.max()),
            "budget_ms": BUDGET_MS,
            "within_budget": float((ms < BUDGET_MS).mean()),
        }

    def pacing(self) -> dict:
        """Share of inter-frame intervals within 5 ms +- 20% (realtime mode only)."""
        iv = np.array(self.frame_intervals_ms)
        if iv.size == 0:
            return {"count": 0, "within_tolerance": float("nan")}
        nominal = SAMPLE_PERIOD * 1000
        ok = np.abs(iv - nominal) <= 0.2 * nominal
        return {"count": int(iv.size), "within_tolerance": float(ok.mean())}


class _Classifier:
    def __init__(self, model: nn.NetworkModel, norm: NormStats | None):
        if tuple(model.input_shape) != (WINDOW, N_FEATURES):
            raise ContractError(f"stream model must take ({WINDOW}, {N_FEATURES}) windows")
        if model.output_dim != 3:
            raise ContractError("stream model must end in the three-way classifier")
        self.model = model
        self.norm = norm
        self.buf: deque = deque(maxlen=WINDOW)

    def push(self, frame: Frame):
        f = frame.features if self.norm is None else (frame.features - self.norm.mean) / self.norm.std
        self.buf.append(f)
        if len(self.buf) < WINDOW:
            return None
        t0 = time.perf_counter()
        probs = nn.forward(self.model, np.array(self.buf))
        ms = (time.perf_counter() - t0) * 1000.0
        return Prediction(frame.index, int(np.argmax(probs)), probs, ms)


def replay(source, model: nn.NetworkModel, norm: NormStats | None = None, speed: str = "max",
           hold: int = DEFAULT_HOLD, on_prediction=None, queue_size: int = 256) -> ReplayResult:
    """Classify every trailing window of a frame stream.

    `source` is anything `iter_frames` accepts or an iterable of Frame.
    ``speed="realtime"`` paces frames at the nominal 5 ms through a bounded
    queue (dropping the oldest frame on overflow); ``"max"`` is lossless.
    """
    if speed not in ("max", "realtime"):
        raise ContractError(f"speed must be 'max' or 'realtime', got {speed!r}")
    frames = source if _is_frame_iterable(source) else iter_frames(source)
    clf = _Classifier(model, norm)
    res = ReplayResult()

    def consume(frame: Frame):
        res.frame_labels.append(frame.label3)
        p = clf.push(frame)
        if p is None:
            res.warmup += 1
            return
        res.predictions.append(p)
        if on_prediction is not None:
            on_prediction(p)

    if speed == "max":
        for fr in frames:
            consume(fr)
    else:
        _realtime(frames, consume, res, queue_size)
    res.events = debounce([p.class3 for p in res.predictions], hold)
    res.stream_events = to_stream_events(res.events, res.predictions)
    return res


def _is_frame_iterable(source) -> bool:
    if isinstance(source, (list, tuple)):
        return bool(source) and isinstance(source[0], Frame)
    return False


def _realtime(frames: Iterable[Frame], consume, res: ReplayResult, queue_size: int):
    q: queue.Queue = queue.Queue(maxsize=queue_size)
    done = object()
    lock = threading.Lock()
    errors = []

    def produce():
        try:
            start = time.perf_counter()
            last = None
            for k, fr in enumerate(frames):
                delay = start + k * SAMPLE_PERIOD - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)
                now = time.perf_counter()
                if last is not None:
                    res.frame_intervals_ms.append((now - last) * 1000.0)
                last = now
                with lock:
                    while True:
                        try:
                            q.put_nowait(fr)
                            break
                        except queue.Full:
                            try:
                                q.get_nowait()
                                res.dropped += 1
                            except queue.Empty:
                                pass
        except Exception as e:  # surfaced in the consumer thread
            errors.append(e)
        finally:
            q.put(done)

    th = threading.Thread(target=produce, daemon=True)
    th.start()
    while True:
        item = q.get()
        if item is done:
            break
        consume(item)
    th.join()
    if errors:
        raise errors[0]


# ------------------------------------------------------------------- events


def debounce(predictions, hold: int = DEFAULT_HOLD) -> list[ContactEvent]:
    """Turn per-window classes into contact events.

    An event opens once `hold` consecutive windows agree on the same contact
    class and closes after `hold` consecutive non-contact windows (or at the
    end of the stream). Its class is the majority contact class over the
    event's contact windows; ties go to the class that opened it.
    """
    if hold < 1:
        raise ContractError("hold must be >= 1")
    preds = [int(p) for p in predictions]
    events = []
    open_ev = None
    run_cls, run_len, run_start = None, 0, 0
    quiet = 0
    counts = {INTENTIONAL: 0, COLLISION: 0}
    for i, c in enumerate(preds):
        if open_ev is None:
            if c in CONTACT_CLASSES:
                if c == run_cls:
                    run_len += 1
                else:
                    run_cls, run_len, run_start = c, 1, i
                if run_len >= hold:
                    open_ev = ContactEvent(c, run_start, i, i, None)
                    counts = {INTENTIONAL: 0, COLLISION: 0}
                    for j in range(run_start, i + 1):
                        counts[preds[j]] += 1
                    quiet = 0
            else:
                run_cls, run_len = None, 0
        else:
            if c in CONTACT_CLASSES:
                counts[c] += 1
                open_ev.last = i
                quiet = 0
            else:
                quiet += 1
                if quiet >= hold:
                    open_ev.closed = i
                    open_ev.cls = _majority(counts, open_ev.cls)
                    events.append(open_ev)
                    open_ev = None
                    run_cls, run_len = None, 0
    if open_ev is not None:
        open_ev.cls = _majority(counts, open_ev.cls)
        events.append(open_ev)
    return events


def _majority(counts, opener):
    a, b = counts[INTENTIONAL], counts[COLLISION]
    if a == b:
        return opener
    return INTENTIONAL if a > b else COLLISION


def to_stream_events(events, predictions) -> list[StreamEvent]:
    out = []
    for ev in events:
        p = predictions[ev.opened]
        out.append(StreamEvent("contact_start", ev.cls, p.frame, p.infer_ms))
        if ev.closed is not None:
            q = predictions[ev.closed]
            out.append(StreamEvent("contact_end", ev.cls, q.frame, q.infer_ms))
    return out


def event_spans(events, predictions) -> list[Span]:
    """Frame spans covered by each event's contact windows."""
    return [Span(ev.cls, predictions[ev.first].frame, predictions[ev.last].frame) for ev in events]


# ------------------------------------------------------------------ scoring


def ground_truth_segments(frame_labels, first_frame: int = WINDOW) -> list[Span]:
    """Maximal runs of equal per-frame labels, clipped to frames >= first_frame."""
    segs = []
    start = None
    for i, lab in enumerate(frame_labels, start=1):
        if start is None or lab != frame_labels[start - 1]:
            if start is not None:
                segs.append(Span(frame_labels[start - 1], start, i - 1))
            start = i
    if start is not None:
        segs.append(Span(frame_labels[start - 1], start, len(frame_labels)))
    out = []
    for s in segs:
        if s.cls is None or s.end < first_frame:
            continue
        out.append(Span(s.cls, max(s.start, first_frame), s.end))
    return out


@dataclass
class EventScore:
    """Per-class detection failures (over ground-truth segments) and false
    alarms (over predicted spans), plus contact-vs-no-contact failures."""

    failures: dict  # class -> (x, n)
    false_alarms: dict  # class -> (x, n)
    contact_failures: tuple  # (x, n) contact segments with no overlapping event at all

    def cell(self, kind: str, cls: int) -> str:
        x, n = (self.failures if kind == "failures" else self.false_alarms)[cls]
        return f"{x}/{n}"

    def failure_rate(self, cls: int) -> float:
        x, n = self.failures[cls]
        return x / n if n else 0.0

    def detection_failure_rate(self) -> float:
        """Contact vs no contact: missed contacts plus failed non-contact segments."""
        x = self.contact_failures[0] + self.failures[NONCONTACT][0]
        n = self.contact_failures[1] + self.failures[NONCONTACT][1]
        return x / n if n else 0.0

    def class_failure_rate(self) -> float:
        """Failures over the intentional and collision segments together."""
        x = self.failures[INTENTIONAL][0] + self.failures[COLLISION][0]
        n = self.failures[INTENTIONAL][1] + self.failures[COLLISION][1]
        return x / n if n else 0.0

    def to_dict(self) -> dict:
        return {
            "failures": {str(k): list(v) for k, v in self.failures.items()},
            "false_alarms": {str(k): list(v) for k, v in self.false_alarms.items()},
            "contact_failures": list(self.contact_failures),
        }


def noncontact_spans(spans: list[Span], first: int, last: int) -> list[Span]:
    """Gaps between predicted contact spans within [first, last]."""
    out, cur = [], first
    for s in sorted(spans, key=lambda s: s.start):
        if s.start > cur:
            out.append(Span(NONCONTACT, cur, s.start - 1))
        cur = max(cur, s.end + 1)
    if cur <= last:
        out.append(Span(NONCONTACT, cur, last))
    return out


def score_events(predicted: list[Span], segments: list[Span], first: int | None = None,
                 last: int | None = None) -> EventScore:
    """Score predicted contact spans against ground-truth segments (frame indices).

    A segment of class c fails when no predicted span of class c overlaps it.
    A predicted span of class c is a false alarm when it overlaps no segment
    of class c. Non-contact is scored the same way using the gaps between
    predicted contacts, over the frame range [first, last].
    """
    segs = sorted(segments, key=lambda s: s.start)
    for a, b in zip(segs, segs[1:]):
        if a.overlaps(b):
            raise ContractError(f"ground-truth segments overlap: {a} and {b}")
    if first is None:
        first = segs[0].start if segs else 1
    if last is None:
        last = segs[-1].end if segs else first - 1
    contacts = [p for p in predicted if p.cls != NONCONTACT]
    pred = contacts + noncontact_spans(contacts, first, last)
    failures, alarms = {}, {}
    for c in (NONCONTACT, INTENTIONAL, COLLISION):
        gt_c = [s for s in segs if s.cls == c]
        pr_c = [p for p in pred if p.cls == c]
        failures[c] = (sum(1 for s in gt_c if not any(p.overlaps(s) for p in pr_c)), len(gt_c))
        alarms[c] = (sum(1 for p in pr_c if not any(p.overlaps(s) for s in gt_c)), len(pr_c))
    contact_gt = [s for s in segs if s.cls in CONTACT_CLASSES]
    contact_pr = [p for p in pred if p.cls in CONTACT_CLASSES]
    missed = sum(1 for s in contact_gt if not any(p.overlaps(s) for p in contact_pr))
    return EventScore(failures, alarms, (missed, len(contact_gt)))


def score_replay(res: ReplayResult) -> EventScore:
    if any(lab is None for lab in res.frame_labels):
        raise ContractError("stream has unlabeled frames; cannot score")
    if not res.predictions:
        raise ContractError("stream produced no predictions")
    first, last = res.predictions[0].frame, res.predictions[-1].frame
    segs = ground_truth_segments(res.frame_labels, first)
    return score_events(event_spans(res.events, res.predictions), segs, first, last)


def score_table(columns: list[tuple[str, EventScore]]) -> str:
    """Render scores side by side in the detection-failure / false-alarm layout."""
    head1 = f"{'':<20}" + "".join(f"{name:<30}" for name, _ in columns)
    head2 = f"{'':<20}" + "".join("".join(f"{t:<10}" for t in ("C1", "C2", "C3")) for _ in columns)
    rows = [head1.rstrip(), head2.rstrip()]
    for kind, title in (("failures", "Detection failures"), ("false_alarms", "False alarms")):
        row = f"{title:<20}"
        for _, sc in columns:
            row += "".join(f"{sc.cell(kind, c):<10}" for c in (0, 1, 2))
        rows.append(row.rstrip())
    row = f"{'Contact missed':<20}"
    for _, sc in columns:
        x, n = sc.contact_failures
        row += f"{f'{x}/{n}':<30}"
    rows.append(row.rstrip())
    rows.append("C1: noncontact, C2: intentional, C3: collision")
    return "\n".join(rows) + "\n"


def generalization_eval(model: nn.NetworkModel, norm: NormStats | None, source_frames, target_frames,
                        hold: int = DEFAULT_HOLD):
    """Replay and score source and target logs; returns ``(source, target, table)``."""
    src = score_replay(replay(source_frames, model, norm, hold=hold))
    tgt = score_replay(replay(target_frames, model, norm, hold=hold))
    return src, tgt, score_table([("Source robot", src), ("Target robot", tgt)])


def predictions_jsonl(res: ReplayResult, timestamps: bool = True) -> str:
    buf = io.StringIO()
    for p in res.predictions:
        buf.write(p.to_json(timestamps) + "\n")
    return buf.getvalue()
