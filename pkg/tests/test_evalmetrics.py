import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from boxgen import as_tuples, random_corpus
from alsskit import evalmetrics as E
from alsskit.boxloss import Box

FIX = Path(__file__).parent / "fixtures"


def det(img, cls, box, conf):
    return E.Detection(img, cls, Box(*box), conf)


def gt(img, cls, box):
    return E.GtBox(img, cls, Box(*box))


# --- matching -------------------------------------------------------------------


def test_match_examples():
    g = [gt("a", 0, (0.5, 0.5, 0.2, 0.2))]
    assert E.match_detections([det("a", 0, (0.5, 0.5, 0.2, 0.2), 0.9)], g, 0.5).tolist() == [True]
    two = [det("a", 0, (0.51, 0.5, 0.2, 0.2), 0.8), det("a", 0, (0.5, 0.5, 0.2, 0.2), 0.9)]
    assert E.match_detections(two, g, 0.5).tolist() == [False, True]
    # other image / other class never match
    assert E.match_detections([det("b", 0, (0.5, 0.5, 0.2, 0.2), 0.9)], g).tolist() == [False]
    assert E.match_detections([det("a", 1, (0.5, 0.5, 0.2, 0.2), 0.9)], g).tolist() == [False]
    with pytest.raises(ValueError):
        E.match_detections([], g, 1.0)


def test_match_takes_highest_iou_gt():
    gs = [gt("a", 0, (0.40, 0.5, 0.2, 0.2)), gt("a", 0, (0.52, 0.5, 0.2, 0.2))]
    d = [det("a", 0, (0.5, 0.5, 0.2, 0.2), 0.9), det("a", 0, (0.42, 0.5, 0.2, 0.2), 0.5)]
    assert E.match_detections(d, gs).tolist() == [True, True]


def test_match_equals_oracle_on_random_instances():
    for seed in range(50):
        dets, gts = random_corpus(seed)
        d, g = as_tuples(dets, gts)
        assert E.match_detections(dets, gts, 0.5).tolist() == oracles.greedy_match(d, g, 0.5)


def test_match_is_independent_of_input_order_for_distinct_confidences():
    dets, gts = random_corpus(7, 30)
    flags = E.match_detections(dets, gts)
    perm = np.random.default_rng(0).permutation(len(dets))
    again = E.match_detections([dets[i] for i in perm], gts)
    assert again.tolist() == flags[perm].tolist()


def test_tie_order_can_change_tp_count():
    # two equal-confidence detections compete for the same gt; only one has a fallback
    # first det: IoU 2/3 with g0, 7/13 with g1; second det: IoU 17/23 with g0 only
    gs = [gt("a", 0, (0.5, 0.5, 0.2, 0.2)), gt("a", 0, (0.6, 0.5, 0.2, 0.2))]
    d = [det("a", 0, (0.54, 0.5, 0.2, 0.2), 0.8), det("a", 0, (0.47, 0.5, 0.2, 0.2), 0.8)]
    first = E.match_detections(d, gs).sum()
    swapped = E.match_detections(d[::-1], gs).sum()
    assert {int(first), int(swapped)} == {1, 2}
    dd, gg = as_tuples(d, gs)
    assert oracles.tp_counts_over_tie_orders(dd, gg, 0.5) == {1, 2}


def test_tie_order_keeps_tp_count_when_candidates_are_unique():
    # each detection overlaps one gt at most: reordering ties never changes the count
    gs = [gt("a", 0, (0.2, 0.2, 0.1, 0.1)), gt("a", 0, (0.8, 0.8, 0.1, 0.1))]
    d = [det("a", 0, (0.2, 0.2, 0.1, 0.1), 0.5), det("a", 0, (0.21, 0.2, 0.1, 0.1), 0.5),
         det("a", 0, (0.8, 0.8, 0.1, 0.1), 0.5)]
    dd, gg = as_tuples(d, gs)
    assert oracles.tp_counts_over_tie_orders(dd, gg, 0.5) == {2}
    assert E.match_detections(d, gs).sum() == 2


# --- curves ----------------------------------------------------------------------


def test_pr_curve_cases():
    c = E.pr_curve([True, True], [0.9, 0.8], 4)
    assert c.precision.tolist() == [1, 1] and c.recall[-1] == 0.5
    c = E.pr_curve([False] * 3, [0.9, 0.8, 0.7], 2)
    assert c.precision.tolist() == [0, 0, 0] and c.recall.tolist() == [0, 0, 0]
    c = E.pr_curve([True, False, True], [0.9, 0.8, 0.7], 2)
    np.testing.assert_allclose(c.precision, [1, 1 / 2, 2 / 3])
    np.testing.assert_allclose(c.recall, [1 / 2, 1 / 2, 1])
    c = E.pr_curve([False], [0.3], 0)
    assert not c.recall_defined and c.recall.tolist() == [0.0]
    with pytest.raises(ValueError):
        E.pr_curve([], [], -1)


def test_average_precision_cases():
    assert E.average_precision(E.pr_curve([True] * 3, [0.9, 0.8, 0.7], 3)) == 1.0
    assert E.average_precision(E.pr_curve([False] * 3, [0.9, 0.8, 0.7], 3)) == 0.0
    assert E.average_precision(E.pr_curve([], [], 3)) == 0.0
    ap = E.average_precision(E.pr_curve([True, False, True], [0.9, 0.8, 0.7], 2))
    assert ap == pytest.approx(5 / 6, abs=1e-15)


def test_f1_sweep_cases():
    thr, best, samples = E.f1_sweep([True, False, True], [0.9, 0.8, 0.7], 2)
    np.testing.assert_allclose([s[3] for s in samples], [2 / 3, 1 / 2, 4 / 5])
    assert best == pytest.approx(4 / 5) and thr == 0.7
    thr, best, _ = E.f1_sweep([True, True], [0.9, 0.6], 2)
    assert best == 1.0 and thr == 0.6
    assert E.f1_sweep([False, False], [0.9, 0.6], 2)[1] == 0.0
    assert E.f1_sweep([], [], 2) == (None, 0.0, [])
    # P = R gives F1 = P
    _, best, samples = E.f1_sweep([True, False], [0.9, 0.1], 2)
    assert samples[-1][1] == samples[-1][2] == samples[-1][3] == 0.5


def test_f1_tie_goes_to_highest_threshold():
    # F1 = 2/3 with the top two kept and with all eight kept
    flags = [True, True, False, False, False, False, True, True]
    conf = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2]
    thr, best, samples = E.f1_sweep(flags, conf, 4)
    f1s = {s[0]: s[3] for s in samples}
    assert f1s[0.8] == pytest.approx(f1s[0.2]) == pytest.approx(best) == pytest.approx(2 / 3)
    assert thr == 0.8


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.floats(0.01, 0.99)), min_size=1, max_size=15), st.integers(1, 20))
def test_curve_properties(pairs, extra_gt):
    flags = [f for f, _ in pairs]
    conf = [c for _, c in pairs]
    num_gt = sum(flags) + extra_gt
    c = E.pr_curve(flags, conf, num_gt)
    assert np.all(np.diff(c.recall) >= 0)
    assert np.all(np.diff(E.precision_envelope(c.precision)) <= 0)
    ap = E.average_precision(c)
    assert 0.0 <= ap <= 1.0
    # strictly increasing rescale of confidences leaves AP unchanged
    assert E.average_precision(E.pr_curve(flags, [c**3 * 0.5 for c in conf], num_gt)) == ap
    # one more false positive anywhere never helps
    for extra in (0.0, 0.5, 1.0):
        assert E.average_precision(E.pr_curve(flags + [False], conf + [extra], num_gt)) <= ap + 1e-15


# --- evaluate ------------------------------------------------------------------------


def test_evaluate_simple_cases():
    g = [gt("a", 0, (0.5, 0.5, 0.2, 0.2)), gt("a", 1, (0.2, 0.2, 0.1, 0.1))]
    perfect = [det(x.image_id, x.class_id, (x.box.cx, x.box.cy, x.box.w, x.box.h), 1.0) for x in g]
    r = E.evaluate(perfect[:1], g[:1])
    assert r.map == 1.0 and r.f1 == 1.0
    r = E.evaluate([perfect[0], det("a", 1, (0.8, 0.8, 0.1, 0.1), 0.9)], g)
    assert r.per_class_ap == {0: 1.0, 1: 0.0} and r.map == 0.5
    r = E.evaluate([], g)
    assert r.map == 0.0 and any("false negative" in n for n in r.notes)
    r = E.evaluate(perfect, g, classes=range(3))
    assert r.excluded_classes == [2] and r.map == 1.0
    r = E.evaluate(perfect, g, classes=[0])
    assert any("outside" in n for n in r.notes) and r.map == 1.0


def test_evaluate_f1_consistent_with_p_and_r():
    dets, gts = random_corpus(3, 40)
    r = E.evaluate(dets, gts)
    assert r.f1 == pytest.approx(2 * r.precision * r.recall / (r.precision + r.recall))
    assert r.map == pytest.approx(np.mean(list(r.per_class_ap.values())))


def test_evaluate_matches_scalar_oracle():
    for seed in range(100):
        dets, gts = random_corpus(seed)
        d, g = as_tuples(dets, gts)
        r = E.evaluate(dets, gts, classes=[0, 1])
        aps, m, (t, p, rec, f) = oracles.evaluate(d, g, [0, 1])
        assert r.per_class_ap.keys() == aps.keys()
        for k in aps:
            assert r.per_class_ap[k] == pytest.approx(aps[k], abs=1e-12)
        assert r.map == pytest.approx(m, abs=1e-12)
        assert (r.threshold, r.precision, r.recall) == (t, pytest.approx(p), pytest.approx(rec))
        assert r.f1 == pytest.approx(f, abs=1e-12)


# --- files -----------------------------------------------------------------------


def test_fixture_hand_values():
    gts = E.read_boxes(FIX / "eval_gt.txt", detections=False)
    dets = E.read_boxes(FIX / "eval_det.txt", detections=True)
    r = E.evaluate(dets, gts)
    assert r.per_class_ap == {0: pytest.approx(5 / 9, abs=1e-15), 1: 0.5}
    assert r.map == pytest.approx(19 / 36, abs=1e-15)
    assert (r.threshold, r.precision, r.recall) == (0.7, 0.75, 0.6)
    assert r.f1 == pytest.approx(2 / 3, abs=1e-15)
    golden = json.loads((FIX / "eval_golden.json").read_text())
    assert r.map == pytest.approx(golden["mAP"], abs=1e-12)


def test_json_and_text_inputs_agree():
    a = E.read_boxes(FIX / "eval_det.txt", detections=True)
    b = E.read_boxes(FIX / "eval_det.json", detections=True)
    assert a == b


@pytest.mark.parametrize(
    "text,line",
    [
        ("a 0 0.5 0.5 0.2\n", 1),
        ("\n# c\na 0 0.5 0.5 0.2 0.2 0.9\nb x 0.5 0.5 0.2 0.2 0.9\n", 4),
        ("a 0 0.5 0.5 0 0.2 0.9\n", 1),
        ("a 0 0.5 0.5 0.2 0.2 1.5\n", 1),
        ('[{"image_id": "a", "class_id": 0}]', 1),
    ],
)
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(E.BoxFileError) as e:
        E.parse_boxes(text, detections=True)
    assert e.value.line == line


def test_report_serialization():
    gts = E.read_boxes(FIX / "eval_gt.txt", detections=False)
    dets = E.read_boxes(FIX / "eval_det.txt", detections=True)
    r = E.evaluate(dets, gts)
    d = json.loads(r.to_json())
    assert d["mAP"] == r.map and d["operating_point"]["threshold"] == 0.7
    assert len(d["f1_curve"]) == 6
    assert r.to_csv().splitlines() == ["class_id,ap", "0,0.555556", "1,0.5", "mAP,0.527778"]


# --- head decoding ----------------------------------------------------------------


def test_decode_and_nms():
    reg = 16
    o = np.full((1, 4 * reg + 2, 2, 2), -20.0)
    # one confident cell at (0, 1) on the stride-8 map: side distances of 2 bins each
    o[0, : 4 * reg, 0, 1] = -20.0
    for side in range(4):
        o[0, side * reg + 2, 0, 1] = 20.0
    o[0, 4 * reg + 1, 0, 1] = 5.0
    dets = E.decode_head([o], strides=(8,), reg_max=reg, conf_threshold=0.5, image_ids=["img"])
    assert len(dets) == 1
    d = dets[0]
    assert d.class_id == 1 and d.image_id == "img"
    assert (d.box.cx, d.box.cy) == pytest.approx((12.0, 4.0))
    assert (d.box.w, d.box.h) == pytest.approx((32.0, 32.0))
    dup = [d, E.Detection("img", 1, d.box.shifted(1, 0), 0.5), E.Detection("img", 0, d.box, 0.4)]
    kept = E.nms(dup, 0.7)
    assert kept == [d, dup[2]]
