"""Detection metrics against a naive reference implementation."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densefpn.evaluator import (
    FP,
    IGNORED,
    TP,
    GroundTruthBox,
    average_precision,
    evaluate,
    match_detections,
    per_class_report,
)
from densefpn.geometry import Box, Detection

from oracles import evaluate_reference


def gt(x1, y1, x2, y2, c, ignore=False):
    return GroundTruthBox(np.array([x1, y1, x2, y2], dtype=float), c, ignore)


def det(x1, y1, x2, y2, s, c):
    return Detection(Box(x1, y1, x2, y2), s, c)


def random_instance(rng, max_images=10, max_boxes=20, n_classes=3):
    dets, gts = {}, {}
    for i in range(int(rng.integers(1, max_images + 1))):
        key = f"img{i:02d}"
        n_gt = int(rng.integers(0, max_boxes + 1))
        g = []
        for _ in range(n_gt):
            xy = rng.uniform(0, 80, 2)
            wh = rng.uniform(5, 30, 2)
            c = int(rng.integers(0, n_classes))
            ignore = rng.random() < 0.1
            g.append(GroundTruthBox(np.r_[xy, xy + wh], None if ignore and rng.random() < 0.5 else c, ignore))
        gts[key] = g
        d = []
        for _ in range(int(rng.integers(0, max_boxes + 1))):
            if g and rng.random() < 0.6:
                base = g[int(rng.integers(len(g)))].box
                b = base + rng.normal(0, 3, 4)
                b[2:] = np.maximum(b[2:], b[:2] + 1)
            else:
                xy = rng.uniform(0, 80, 2)
                b = np.r_[xy, xy + rng.uniform(5, 30, 2)]
            # coarse scores create cross-image ties
            d.append(Detection(Box.from_array(b), float(rng.integers(1, 11)) / 10, int(rng.integers(0, n_classes))))
        dets[key] = d
    return dets, gts


def to_reference(dets, gts):
    rd = {k: [(d.score, d.box.as_array(), d.class_id) for d in v] for k, v in dets.items()}
    rg = {k: [(g.box, g.class_id, g.ignore) for g in v] for k, v in gts.items()}
    return rd, rg


class TestMatching:
    def test_threshold(self):
        # IoU 0.6: [0,10]x[0,10] vs [0,10]x[0,...]: height 6/10 overlap of same width
        g = [gt(0, 0, 10, 10, 1)]
        d = [det(0, 0, 10, 6, 0.9, 1)]
        assert match_detections(d, g, 0.5).tolist() == [TP]
        assert match_detections(d, g, 0.75).tolist() == [FP]

    def test_greedy_crafted(self):
        g = [gt(0, 0, 10, 10, 0), gt(5, 0, 15, 10, 0)]
        d = [det(2, 0, 12, 10, 0.9, 0), det(0, 0, 10, 10, 0.8, 0), det(5, 0, 15, 10, 0.7, 0)]
        # d0 overlaps g0 (8/12) and g1 (7/13): takes g0; d1 then only g1 (5/15 < 0.5) -> FP; d2 takes g1
        assert match_detections(d, g, 0.5).tolist() == [TP, FP, TP]

    def test_class_respected(self):
        assert match_detections([det(0, 0, 10, 10, 0.9, 2)], [gt(0, 0, 10, 10, 1)], 0.5).tolist() == [FP]

    def test_ignored_absorbs_and_is_not_consumed(self):
        g = [gt(0, 0, 10, 10, None, ignore=True)]
        d = [det(0, 0, 10, 10, 0.9, 3), det(0, 0, 10, 10, 0.8, 5)]
        assert match_detections(d, g, 0.5).tolist() == [IGNORED, IGNORED]


class TestAveragePrecision:
    def test_all_tp(self):
        assert average_precision([TP, TP, TP], 3) == 1.0

    def test_no_dets(self):
        assert average_precision([], 4) == 0.0

    def test_no_gt_undefined(self):
        assert math.isnan(average_precision([FP], 0))

    def test_tp_fp_tp(self):
        # recall 0.5 at precision 1, recall 1 at precision 2/3
        expected = (51 * 1.0 + 50 * (2 / 3)) / 101
        assert average_precision([TP, FP, TP], 2) == pytest.approx(expected, abs=1e-15)

    def test_exact_recall_hits_sample_point(self):
        # recall 7/10 must count for the 0.70 point (linspace(0, 1, 101)[70] > 0.7)
        flags = [TP] * 7
        assert average_precision(flags, 10) == pytest.approx(71 / 101, abs=1e-15)

    def test_ignored_entries_skipped(self):
        assert average_precision([TP, IGNORED, FP, TP], 2) == average_precision([TP, FP, TP], 2)


class TestEvaluate:
    def test_perfect(self):
        gts = {"a": [gt(0, 0, 10, 10, 0), gt(20, 20, 40, 30, 4)], "b": [gt(5, 5, 25, 25, 4)]}
        dets = {k: [Detection(Box.from_array(g.box), 1.0, g.class_id) for g in v] for k, v in gts.items()}
        r = evaluate(dets, gts)
        for name in ("ap_5095", "ap_50", "ap_75", "ar_10", "ar_100", "ar_500"):
            assert getattr(r, name) == 1.0
        assert r.ar_1 < 1.0

    def test_empty(self):
        r = evaluate({}, {"a": [gt(0, 0, 10, 10, 0)]})
        assert all(v == 0.0 for v in r.as_dict().values())

    def test_unknown_image(self):
        with pytest.raises(ValueError):
            evaluate({"zzz": [det(0, 0, 1, 1, 0.5, 0)]}, {"a": []})

    def test_cap_500(self):
        g = {"a": [gt(0, 0, 10, 10, 0)]}
        junk = [det(50, 50, 60, 60, 0.9, 0)] * 500
        late = [det(0, 0, 10, 10, 0.1, 0)]
        assert evaluate({"a": junk + late}, g).ar_500 == 0.0
        assert evaluate({"a": junk[:499] + late}, g).ar_500 == 1.0

    @pytest.mark.parametrize("seed", range(30))
    def test_reference(self, seed):
        dets, gts = random_instance(np.random.default_rng(seed))
        got = evaluate(dets, gts).as_dict()
        ref = evaluate_reference(*to_reference(dets, gts))
        for k in got:
            assert got[k] == pytest.approx(ref[k], abs=1e-9), k

    @given(st.integers(0, 10_000), st.floats(0.01, 1.0))
    @settings(max_examples=25, deadline=None)
    def test_score_scaling_invariant(self, seed, factor):
        dets, gts = random_instance(np.random.default_rng(seed), max_images=4, max_boxes=8)
        scaled = {k: [Detection(d.box, d.score * factor, d.class_id) for d in v] for k, v in dets.items()}
        assert evaluate(dets, gts).as_dict() == pytest.approx(evaluate(scaled, gts).as_dict(), abs=1e-12)

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_ar_nondecreasing_and_bounded(self, seed):
        r = evaluate(*random_instance(np.random.default_rng(seed), max_images=4, max_boxes=8))
        assert r.ar_1 <= r.ar_10 <= r.ar_100 <= r.ar_500
        assert all(0.0 <= v <= 1.0 for v in r.as_dict().values())

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_permutation_invariant(self, seed):
        dets, gts = random_instance(np.random.default_rng(seed), max_images=5, max_boxes=6)
        rev_d = dict(reversed(list(dets.items())))
        rev_g = dict(reversed(list(gts.items())))
        assert evaluate(dets, gts) == evaluate(rev_d, rev_g)

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_adding_true_positive_never_hurts_ap(self, seed):
        rng = np.random.default_rng(seed)
        dets, gts = random_instance(rng, max_images=3, max_boxes=6)
        key = next((k for k, v in gts.items() if any(not g.ignore for g in v)), None)
        if key is None:
            return
        g = next(g for g in gts[key] if not g.ignore)
        before = evaluate(dets, gts)
        extra = dict(dets)
        extra[key] = list(dets[key]) + [Detection(Box.from_array(g.box), 1.0, g.class_id)]
        after = evaluate(extra, gts)
        for name in ("ap_5095", "ap_50", "ap_75"):
            assert getattr(after, name) >= getattr(before, name) - 1e-12


class TestPerClass:
    def test_absent_class_undefined(self):
        out = per_class_report({}, {"a": [gt(0, 0, 10, 10, 2)]})
        assert out[2] == 0.0 and all(v is None for i, v in enumerate(out) if i != 2)

    def test_single_class_perfect(self):
        g = {"a": [gt(0, 0, 10, 10, 6)]}
        assert per_class_report({"a": [det(0, 0, 10, 10, 0.8, 6)]}, g)[6] == 1.0

    def test_two_classes_against_reference(self):
        rng = np.random.default_rng(5)
        dets, gts = random_instance(rng, max_images=4, max_boxes=10, n_classes=2)
        out = per_class_report(dets, gts)
        for c in (0, 1):
            only_d = {k: [d for d in v if d.class_id == c] for k, v in dets.items()}
            only_g = {k: [g for g in v if g.class_id in (c, None)] for k, v in gts.items()}
            if not any(g.class_id == c and not g.ignore for v in gts.values() for g in v):
                assert out[c] is None
                continue
            ref = evaluate_reference(*to_reference(only_d, only_g))
            assert out[c] == pytest.approx(ref["ap_5095"], abs=1e-9)

    def test_report_formats(self):
        r = evaluate({"a": [det(0, 0, 10, 10, 0.8, 6)]}, {"a": [gt(0, 0, 10, 10, 6)]})
        assert "AP@0.50" in r.format_text() and "100.00" in r.format_text()
        assert "ap_5095=1.0" in r.format_kv()
