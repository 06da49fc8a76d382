import io
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cdml import data as D
from cdml import nn
from cdml import stream as S
from cdml.errors import ContractError, LabelError, ParseError
from cdml.nn import LayerSpec, NetworkModel
from cdml.stream import EventScore, Frame, Span
from oracles import debounce_rule, score_rule


def _oracle_model():
    """Classifies a window by the one-hot code in features 0..2 of its last frame."""
    m = NetworkModel([LayerSpec("flatten"), LayerSpec("dense", in_dim=784, size=3), LayerSpec("softmax")],
                     input_shape=(28, 28))
    m.params[1]["W"][:, 27 * 28:27 * 28 + 3] = 40 * np.eye(3)
    return m


def _frames(labels, encode=None):
    """Frames carrying ground truth `labels` and the one-hot code of `encode`."""
    encode = labels if encode is None else encode
    out = []
    for i, (lab, code) in enumerate(zip(labels, encode), start=1):
        f = np.zeros(28)
        f[code] = 1.0
        out.append(Frame(i, (i - 1) * D.SAMPLE_PERIOD, f, lab))
    return out


def _session_labels(pattern):
    """Expand [(cls, length), ...] into per-frame labels."""
    return [c for c, n in pattern for _ in range(n)]


# -------------------------------------------------------------------- replay


def test_replay_count_200_frames():
    model = nn.compose(nn.init_params(nn.build_embedding("facenet"), 0), nn.init_params(nn.build_classifier(), 1))
    res = S.replay(_frames([0] * 200), model)
    assert len(res.predictions) == 173 and res.warmup == 27
    assert [p.frame for p in res.predictions] == list(range(28, 201))


@given(st.integers(0, 80))
def test_replay_count_property(n):
    res = S.replay(_frames([0] * n), _oracle_model()) if n else S.ReplayResult()
    assert len(res.predictions) == max(0, n - 27)


def test_constant_noncontact_log_has_no_events():
    res = S.replay(_frames([0] * 150), _oracle_model(), hold=1)
    assert res.events == [] and res.stream_events == []
    assert all(p.class3 == 0 for p in res.predictions)


def test_replay_from_csv_text_and_path(tmp_path):
    rec = D.Record("r", 3, np.arange(40) * D.SAMPLE_PERIOD, np.zeros((40, 28)))
    text = D.records_to_csv([rec])
    path = tmp_path / "log.csv"
    path.write_text(text)
    from_path = S.replay(path, _oracle_model())
    no_header = S.replay(io.StringIO(text.split("\n", 1)[1]), _oracle_model())
    assert len(from_path.predictions) == len(no_header.predictions) == 13
    assert from_path.frame_labels == [2] * 40


def test_iter_frames_errors():
    rec = D.Record("r", 0, np.arange(3) * D.SAMPLE_PERIOD, np.zeros((3, 28)))
    lines = D.records_to_csv([rec]).splitlines()
    with pytest.raises(ParseError) as err:
        list(S.iter_frames(lines[:2] + [lines[2] + ",1"]))
    assert err.value.line == 3
    with pytest.raises(LabelError):
        list(S.iter_frames([lines[1].replace("noncontact", "poke")]))


def test_unlabeled_frames_allowed_but_not_scored():
    rec = D.Record("r", 0, np.arange(30) * D.SAMPLE_PERIOD, np.zeros((30, 28)))
    lines = D.records_to_csv([rec]).splitlines()[1:]
    lines = [",".join([l.split(",")[0], ""] + l.split(",")[2:]) for l in lines]
    res = S.replay(lines, _oracle_model())
    assert len(res.predictions) == 3
    with pytest.raises(ContractError, match="unlabeled"):
        S.score_replay(res)


def test_replay_rejects_non_classifier():
    with pytest.raises(ContractError):
        S.replay(_frames([0] * 30), nn.build_embedding("facenet"))
    with pytest.raises(ContractError):
        S.replay(_frames([0] * 30), _oracle_model(), speed="warp")


def test_replay_normalises_with_stats():
    norm = D.NormStats(np.full(28, 1.0), np.full(28, 0.5))
    frames = _frames([0] * 30)
    for f in frames:
        f.features = f.features * 0.5 + 1.0  # undone exactly by the stats
    a = S.replay(frames, _oracle_model(), norm)
    b = S.replay(_frames([0] * 30), _oracle_model())
    assert [p.class3 for p in a.predictions] == [p.class3 for p in b.predictions]
    np.testing.assert_allclose(a.predictions[0].probs, b.predictions[0].probs, atol=1e-12)


def test_realtime_matches_max_speed():
    labels = _session_labels([(0, 40), (1, 20), (0, 30)])
    fast = S.replay(_frames(labels), _oracle_model())
    slow = S.replay(_frames(labels), _oracle_model(), speed="realtime")
    assert slow.dropped == 0
    assert [p.class3 for p in slow.predictions] == [p.class3 for p in fast.predictions]
    assert len(slow.frame_intervals_ms) == len(labels) - 1
    assert slow.pacing()["count"] == len(labels) - 1
    lat = slow.latency()
    assert lat["count"] == len(slow.predictions) and lat["budget_ms"] == 50.0


def test_realtime_bounded_queue_drops_oldest():
    seen = []

    def slow_consumer(p):
        import time
        time.sleep(0.02)
        seen.append(p.frame)

    res = S.replay(_frames([0] * 80), _oracle_model(), speed="realtime", on_prediction=slow_consumer, queue_size=2)
    assert res.dropped > 0
    assert len(res.frame_labels) + res.dropped == 80
    assert seen == sorted(seen)


def test_predictions_jsonl_timestamps():
    res = S.replay(_frames([0] * 30), _oracle_model())
    rows = [json.loads(l) for l in S.predictions_jsonl(res, timestamps=False).splitlines()]
    assert [r["frame"] for r in rows] == [28, 29, 30]
    assert all(r["infer_ms"] is None for r in rows)
    rows = [json.loads(l) for l in S.predictions_jsonl(res).splitlines()]
    assert all(r["infer_ms"] >= 0 for r in rows)


# ------------------------------------------------------------------ debounce


def test_debounce_examples():
    ev = S.debounce([1, 1, 1], hold=3)
    assert [(e.cls, e.first, e.opened, e.closed) for e in ev] == [(1, 0, 2, None)]
    assert S.debounce([0, 0, 2, 0, 0, 0], hold=3) == []
    with pytest.raises(ContractError):
        S.debounce([1], hold=0)


def test_debounce_alternating_hold1():
    preds = [1, 0] * 10
    got = [(e.cls, e.first, e.opened, e.last, e.closed) for e in S.debounce(preds, 1)]
    assert got == debounce_rule(preds, 1)
    assert len(got) == 10


def test_debounce_majority_and_tie():
    ev = S.debounce([2, 2, 1, 1, 1, 1, 0, 0], hold=2)
    assert len(ev) == 1 and ev[0].cls == 1 and ev[0].opened == 1 and ev[0].closed == 7
    ev = S.debounce([2, 2, 1, 1, 0, 0], hold=2)
    assert ev[0].cls == 2  # tie goes to the opener


def test_debounce_matches_rule_on_random_logs():
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(1, 120))
        hold = int(rng.integers(1, 5))
        # sticky random sequences so events actually form
        preds, cur = [], 0
        for _ in range(n):
            if rng.random() < 0.2:
                cur = int(rng.integers(0, 3))
            preds.append(cur)
        got = [(e.cls, e.first, e.opened, e.last, e.closed) for e in S.debounce(preds, hold)]
        assert got == debounce_rule(preds, hold)


def test_stream_events_alternate():
    labels = _session_labels([(0, 40), (1, 20), (0, 30), (2, 10), (0, 30)])
    res = S.replay(_frames(labels), _oracle_model(), hold=3)
    kinds = [e.kind for e in res.stream_events]
    assert kinds == ["contact_start", "contact_end"] * 2
    frames = [e.frame for e in res.stream_events]
    assert frames == sorted(frames)
    assert [e.class3 for e in res.stream_events] == [1, 1, 2, 2]


# ------------------------------------------------------------------- scoring


def test_ground_truth_segments():
    labels = _session_labels([(0, 30), (1, 5), (0, 10)])
    assert S.ground_truth_segments(labels) == [Span(0, 28, 30), Span(1, 31, 35), Span(0, 36, 45)]
    assert S.ground_truth_segments([1] * 10 + [0] * 30) == [Span(0, 28, 40)]


def test_perfect_predictions_score_zero():
    labels = _session_labels([(0, 40), (1, 20), (0, 30), (2, 15), (0, 20), (1, 8), (0, 30)])
    res = S.replay(_frames(labels), _oracle_model(), hold=1)
    sc = S.score_replay(res)
    for c in (0, 1, 2):
        assert sc.failures[c][0] == 0 and sc.false_alarms[c][0] == 0
    assert sc.failures == {0: (0, 4), 1: (0, 2), 2: (0, 1)}
    assert sc.contact_failures == (0, 3)


def test_overlapping_ground_truth_rejected():
    with pytest.raises(ContractError, match="overlap"):
        S.score_events([], [Span(0, 1, 10), Span(1, 10, 12)])


def _random_case(rng):
    first = 28
    cuts = np.sort(rng.choice(np.arange(first + 1, 400), 9, replace=False))
    bounds = [first] + cuts.tolist() + [400]
    gt = [Span(int(rng.integers(0, 3)), bounds[i], bounds[i + 1] - 1) for i in range(10)]
    preds, cur = [], 0
    for _ in range(400 - first + 1):
        if rng.random() < 0.05:
            cur = int(rng.integers(0, 3))
        preds.append(cur)
    events = S.debounce(preds, int(rng.integers(1, 4)))
    spans = [Span(e.cls, first + e.first, first + e.last) for e in events]
    return gt, spans, first, 399


def test_score_matches_rule_on_random_logs():
    rng = np.random.default_rng(11)
    for _ in range(100):
        gt, spans, first, last = _random_case(rng)
        sc = S.score_events(spans, gt, first, last)
        fail, alarm = score_rule([(s.cls, s.start, s.end) for s in spans],
                                 [(s.cls, s.start, s.end) for s in gt], first, last)
        assert sc.failures == fail and sc.false_alarms == alarm
        for c in (0, 1, 2):
            assert sc.failures[c][0] <= sc.failures[c][1]
            assert sc.false_alarms[c][0] <= sc.false_alarms[c][1]


def test_crafted_source_robot_shape():
    # 447 back-to-back non-contact records; the first 30 are each followed by
    # a contact (19 intentional, 11 collision); 6 intentional and 1 collision
    # contacts are detected with the wrong class
    contacts = [1] * 19 + [2] * 11
    gt, pred, f = [], [], 1
    for i in range(447):
        gt.append(Span(0, f, f + 9))
        f += 10
        if i < len(contacts):
            cls = contacts[i]
            gt.append(Span(cls, f, f + 9))
            wrong = i < 6 or i == 19
            pred.append(Span(3 - cls if wrong else cls, f + 2, f + 9))
            f += 10
    sc = S.score_events(pred, gt, 1, f - 1)
    assert [sc.cell("failures", c) for c in (0, 1, 2)] == ["0/447", "6/19", "1/11"]
    assert sc.contact_failures == (0, 30)
    assert sc.false_alarms[1] == (1, 14) and sc.false_alarms[2] == (6, 16)


def test_target_shape_renders():
    src = EventScore({0: (0, 447), 1: (6, 19), 2: (1, 11)}, {0: (0, 40), 1: (1, 14), 2: (6, 16)}, (0, 30))
    tgt = EventScore({0: (0, 410), 1: (17, 34), 2: (13, 30)}, {0: (0, 60), 1: (13, 30), 2: (17, 34)}, (0, 64))
    text = S.score_table([("Source robot", src), ("Target robot", tgt)])
    lines = text.splitlines()
    assert "Source robot" in lines[0] and "Target robot" in lines[0]
    fail = next(l for l in lines if l.startswith("Detection failures")).split()
    assert fail[2:] == ["0/447", "6/19", "1/11", "0/410", "17/34", "13/30"]
    assert "C1: noncontact" in text
    assert tgt.failure_rate(1) == 0.5


def test_identical_slots_identical_scores():
    labels = _session_labels([(0, 40), (1, 20), (0, 30), (2, 12), (0, 30)])
    code = list(labels)
    code[50:53] = [2, 2, 2]
    src, tgt, table = S.generalization_eval(_oracle_model(), None, _frames(labels, code), _frames(labels, code))
    assert src == tgt
    fail = next(l for l in table.splitlines() if l.startswith("Detection failures")).split()[2:]
    assert fail[:3] == fail[3:]


def test_score_json_dict():
    sc = EventScore({0: (0, 2), 1: (1, 3), 2: (0, 1)}, {0: (0, 2), 1: (0, 2), 2: (1, 1)}, (1, 4))
    assert json.loads(json.dumps(sc.to_dict()))["failures"]["1"] == [1, 3]


def test_aggregate_failure_rates():
    sc = EventScore({0: (1, 10), 1: (2, 4), 2: (1, 4)}, {0: (0, 1), 1: (0, 1), 2: (0, 1)}, (1, 8))
    assert sc.detection_failure_rate() == 2 / 18
    assert sc.class_failure_rate() == 3 / 8
    empty = EventScore({0: (0, 0), 1: (0, 0), 2: (0, 0)}, {}, (0, 0))
    assert empty.detection_failure_rate() == 0.0 and empty.class_failure_rate() == 0.0
