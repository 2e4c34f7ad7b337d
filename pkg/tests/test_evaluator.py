import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import TABLE_I, brute_match, threshold_ap
from srpn.anchors import AnchorSpec
from srpn.evaluator import (Detection, EvalConfig, average_precision, detect, evaluate_f1ap, evaluate_ringcell,
                            f1_report, match, s_nr, summary_text, write_report_csv)
from srpn.geometry import BBox, iou_matrix
from srpn.head import HeadConfig, build
from srpn.synth import SceneSpec, generate_dataset, generate_negatives


@pytest.mark.parametrize("row", TABLE_I)
def test_table_rows(row):
    tp, fp, fn, p, r, f1 = row
    rep = f1_report(tp, fp, fn)
    assert abs(rep.precision - p) <= 1e-4
    assert abs(rep.recall - r) <= 1e-4
    assert abs(rep.f1 - f1) <= 1e-4


def test_f1_degenerate_counts():
    assert f1_report(0, 0, 0).f1 == 0.0
    rep = f1_report(0, 3, 0)
    assert rep.precision == 0.0 and rep.recall == 0.0
    with pytest.raises(ValueError):
        f1_report(-1, 0, 0)


def _random_scene(rng, n_det, n_gt):
    def boxes(n):
        return [BBox(*map(float, np.r_[rng.integers(0, 40, 2), rng.integers(3, 20, 2)])) for _ in range(n)]
    gts = boxes(n_gt)
    dets = [Detection(b, float(s)) for b, s in zip(boxes(n_det), rng.choice([0.2, 0.5, 0.9], n_det))]
    return dets, gts


def test_match_against_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(300):
        dets, gts = _random_scene(rng, rng.integers(0, 12), rng.integers(0, 8))
        m = match(dets, gts, 0.3)
        assert (m.tp, m.fp, m.fn) == brute_match(dets, gts, 0.3)
        used = [g for _, g in m.matching]
        assert len(used) == len(set(used))
        for d, g in m.matching:
            assert iou_matrix([dets[d].box], [gts[g]])[0, 0] >= 0.3


def test_match_threshold_is_inclusive():
    gt = [BBox(0, 0, 10, 10)]
    half = BBox(0, 0, 10, 20)     # IoU 0.5
    assert match([Detection(half, 0.9)], gt, 0.5).tp == 1
    assert match([Detection(half, 0.9)], gt, 0.5000001).tp == 0


def test_duplicates_count_as_false_positives():
    gt = [BBox(0, 0, 10, 10)]
    m = match([Detection(gt[0], 0.9), Detection(gt[0], 0.8)], gt)
    assert (m.tp, m.fp, m.fn) == (1, 1, 0)


def test_ap_against_threshold_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        per_img = [_random_scene(rng, rng.integers(0, 8), rng.integers(1, 5)) for _ in range(3)]
        # distinct scores so every cumulative step is a threshold point
        scores = rng.permutation(100)[:sum(len(d) for d, _ in per_img)] / 100.0 + 0.001
        k = 0
        dets_all, flags, n_gt = [], [], 0
        for dets, gts in per_img:
            dets[:] = [Detection(d.box, float(scores[k + i])) for i, d in enumerate(dets)]
            k += len(dets)
            flags.extend(match(dets, gts).det_is_tp)
            dets_all.append(dets)
            n_gt += len(gts)
        flat = [d.score for dets in dets_all for d in dets]
        ap = average_precision(dets_all, [g for _, g in per_img])
        expected = threshold_ap(flat, flags, n_gt) if flat else 0.0
        assert ap == pytest.approx(expected, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_ap_invariant_under_monotone_rescoring(seed):
    rng = np.random.default_rng(seed)
    dets, gts = _random_scene(rng, 10, 4)
    dets = [Detection(d.box, float(s)) for d, s in zip(dets, rng.permutation(10) / 10 + 0.05)]
    squashed = [Detection(d.box, float(np.tanh(3 * d.score) ** 3)) for d in dets]
    assert average_precision([dets], [gts]) == pytest.approx(average_precision([squashed], [gts]), abs=1e-12)


def test_ap_perfect_and_empty():
    gts = [BBox(0, 0, 5, 5), BBox(10, 10, 5, 5)]
    assert average_precision([[Detection(g, 0.9) for g in gts]], [gts]) == 1.0
    assert average_precision([[]], [gts]) == 0.0


def test_s_nr_formula():
    assert s_nr([0, 0, 0]) == 1.0
    assert s_nr([100]) == 0.0
    assert s_nr([150, 250]) == 0.0
    assert s_nr([10, 30]) == pytest.approx(0.8, abs=1e-15)
    with pytest.raises(ValueError):
        s_nr([])


@pytest.fixture(scope="module")
def tiny_model():
    return build(HeadConfig(), 0)


def test_detect_contracts(tiny_model):
    img = generate_dataset(SceneSpec(), 1, seed=0)[0].image
    spec = AnchorSpec()
    dets = detect(tiny_model, img, spec, score_threshold=0.0)
    assert dets
    scores = [d.score for d in dets]
    assert scores == sorted(scores, reverse=True)
    b = np.array([tuple(d.box) for d in dets])
    assert np.all(b[:, 0] >= 0) and np.all(b[:, 1] >= 0)
    assert np.all(b[:, 0] + b[:, 3] <= 64 + 1e-9) and np.all(b[:, 1] + b[:, 2] <= 64 + 1e-9)
    ious = iou_matrix(b, b)
    np.fill_diagonal(ious, 0)
    assert ious.max() <= 0.3
    assert detect(tiny_model, img, spec, score_threshold=1.0) == []


def test_reports(tiny_model, tmp_path):
    pos = generate_dataset(SceneSpec(), 2, seed=1)
    neg = generate_negatives(SceneSpec(), 2, seed=2)
    rep = evaluate_f1ap(tiny_model, pos, AnchorSpec(), EvalConfig(score_threshold=0.0))
    assert rep.tp + rep.fn == sum(len(p.boxes) for p in pos)
    assert 0 <= rep.ap <= 1
    ring = evaluate_ringcell(tiny_model, pos, neg, AnchorSpec())
    assert 0 <= ring.s_nr <= 1 and 0 <= ring.recall <= 1
    path = str(tmp_path / "r.csv")
    write_report_csv(path, rep)
    text = open(path).read()
    assert text.startswith("metric,value\n") and "f1," in text
    assert (tmp_path / "r_per_image.csv").exists()
    assert "f1" in summary_text(rep)
