import json
from pathlib import Path

import pytest

from oracles import ap101_direct, iou_xywh, match_bruteforce, pr_points_by_counting

from deadwood.coco_io import CocoError
from deadwood.evaluation import (
    Detection,
    GroundTruth,
    PRCurve,
    PRPoint,
    average_precision_101,
    category_counts,
    coco_map,
    evaluate,
    ground_truths_from_coco,
    match,
    mean_prf,
    pr_curve,
    read_detections,
    write_report,
)
from deadwood.geom import BBox, InstanceMask

DATA = Path(__file__).parent / "data"


def det(image_id, cat, box, score) -> Detection:
    return Detection(image_id=image_id, category_id=cat, box=BBox(*box), score=score)


def gt(gt_id, image_id, cat, box, iscrowd=0) -> GroundTruth:
    return GroundTruth(id=gt_id, image_id=image_id, category_id=cat, box=BBox(*box),
                       iscrowd=iscrowd)


def random_instance(rng, n_dets=6, n_gts=4, images=2, cats=2):
    dets = [det(int(rng.integers(1, images + 1)), int(rng.integers(1, cats + 1)),
                (rng.uniform(0, 20), rng.uniform(0, 20), rng.uniform(2, 10), rng.uniform(2, 10)),
                float(rng.random()))
            for _ in range(int(rng.integers(1, n_dets + 1)))]
    gts = [gt(j + 1, int(rng.integers(1, images + 1)), int(rng.integers(1, cats + 1)),
              (rng.uniform(0, 20), rng.uniform(0, 20), rng.uniform(2, 10), rng.uniform(2, 10)))
           for j in range(int(rng.integers(1, n_gts + 1)))]
    return dets, gts


class TestMatch:
    def test_exact_hit_is_tp(self):
        result = match([det(1, 1, (0, 0, 10, 10), 0.9)], [gt(1, 1, 1, (0, 0, 10, 10))], 0.5)
        assert result.det_matches[0].is_tp
        assert result.det_matches[0].gt_id == 1
        assert result.n_tp == 1 and result.n_fn == 0

    def test_below_threshold_is_fp(self):
        # IoU is exactly 0.49: 10x4.9 inside 10x10.
        d = det(1, 1, (0, 0, 10, 4.9), 0.9)
        g = gt(1, 1, 1, (0, 0, 10, 10))
        assert iou_xywh((0, 0, 10, 4.9), (0, 0, 10, 10)) == pytest.approx(0.49)
        result = match([d], [g], 0.5)
        assert not result.det_matches[0].is_tp
        assert result.matched_gt_ids == set()
        assert result.n_fn == 1

    def test_greedy_takes_best_remaining(self):
        # Higher-score det takes the better gt; the next det gets the rest.
        d1 = det(1, 1, (0, 0, 10, 10), 0.9)
        d2 = det(1, 1, (0, 0, 10, 9), 0.8)
        g1 = gt(1, 1, 1, (0, 0, 10, 10))
        g2 = gt(2, 1, 1, (0, 0, 10, 8))
        result = match([d1, d2], [g1, g2], 0.5)
        assert result.det_matches[0].gt_id == 1
        assert result.det_matches[1].gt_id == 2

    def test_single_use_of_gts(self):
        d1 = det(1, 1, (0, 0, 10, 10), 0.9)
        d2 = det(1, 1, (0, 0, 10, 10), 0.8)
        result = match([d1, d2], [gt(1, 1, 1, (0, 0, 10, 10))], 0.5)
        assert result.det_matches[0].is_tp and not result.det_matches[1].is_tp

    def test_category_and_image_isolation(self):
        d_wrong_cat = det(1, 2, (0, 0, 10, 10), 0.9)
        d_wrong_img = det(2, 1, (0, 0, 10, 10), 0.9)
        result = match([d_wrong_cat, d_wrong_img], [gt(1, 1, 1, (0, 0, 10, 10))], 0.5)
        assert not any(d.is_tp for d in result.det_matches)

    def test_crowd_gts_never_match_nor_count(self):
        result = match([det(1, 1, (0, 0, 10, 10), 0.9)],
                       [gt(1, 1, 1, (0, 0, 10, 10), iscrowd=1)], 0.5)
        assert not result.det_matches[0].is_tp
        assert result.n_gts == 0

    def test_equal_scores_break_to_lower_index(self):
        d1 = det(1, 1, (0, 0, 10, 10), 0.8)
        d2 = det(1, 1, (0, 0, 10, 10), 0.8)
        result = match([d1, d2], [gt(1, 1, 1, (0, 0, 10, 10))], 0.5)
        assert result.det_matches[0].is_tp and not result.det_matches[1].is_tp

    def test_against_bruteforce(self, rng):
        for _ in range(300):
            dets, gts = random_instance(rng)
            thresh = float(rng.uniform(0.1, 0.9))
            got = match(dets, gts, thresh)
            expected = match_bruteforce(
                [{"image_id": d.image_id, "category_id": d.category_id,
                  "box": (d.box.x, d.box.y, d.box.w, d.box.h), "score": d.score}
                 for d in dets],
                [{"id": g.id, "image_id": g.image_id, "category_id": g.category_id,
                  "box": (g.box.x, g.box.y, g.box.w, g.box.h), "iscrowd": g.iscrowd}
                 for g in gts],
                thresh)
            assert [(d.is_tp, d.gt_id) for d in got.det_matches] == \
                [(e["tp"], e["gt_id"]) for e in expected]

    def test_mask_matching(self):
        box_a = InstanceMask.zeros(20, 20)
        box_a.data[0:10, 0:10] = True
        box_b = InstanceMask.zeros(20, 20)
        box_b.data[0:10, 0:6] = True
        d = Detection(1, 1, BBox(0, 0, 6, 10), 0.9, mask=box_b)
        g = GroundTruth(1, 1, 1, BBox(0, 0, 10, 10), mask=box_a)
        assert match([d], [g], 0.5, use_masks=True).det_matches[0].is_tp
        assert not match([d], [g], 0.7, use_masks=True).det_matches[0].is_tp

    def test_mask_matching_requires_masks(self):
        with pytest.raises(ValueError, match="mask"):
            match([det(1, 1, (0, 0, 2, 2), 0.5)], [gt(1, 1, 1, (0, 0, 2, 2))], 0.5,
                  use_masks=True)


class TestPrCurve:
    def test_all_tp_precision_one(self):
        gts = [gt(i, 1, 1, (i * 20, 0, 10, 10)) for i in range(1, 4)]
        dets = [det(1, 1, (i * 20, 0, 10, 10), 1 - 0.1 * i) for i in range(1, 4)]
        curve = pr_curve(match(dets, gts, 0.5))
        assert all(p.precision == 1.0 for p in curve.points)
        assert curve.points[-1].recall == 1.0

    def test_tp_then_fp_hand_case(self):
        gts = [gt(1, 1, 1, (0, 0, 10, 10))]
        dets = [det(1, 1, (0, 0, 10, 10), 0.9), det(1, 1, (50, 50, 10, 10), 0.8)]
        curve = pr_curve(match(dets, gts, 0.5))
        assert [(p.precision, p.recall) for p in curve.points] == [(1.0, 1.0), (0.5, 1.0)]
        assert [p.threshold for p in curve.points] == [0.9, 0.8]

    def test_zero_gts_explicit_empty(self):
        curve = pr_curve(match([det(1, 1, (0, 0, 2, 2), 0.9)], [], 0.5))
        assert curve.n_gts == 0 and curve.points == []

    def test_recalls_nondecreasing(self, rng):
        for _ in range(50):
            dets, gts = random_instance(rng)
            curve = pr_curve(match(dets, gts, 0.5))
            recalls = [p.recall for p in curve.points]
            assert recalls == sorted(recalls)

    def test_against_counting_oracle(self, rng):
        for _ in range(100):
            dets, gts = random_instance(rng)
            result = match(dets, gts, 0.5)
            curve = pr_curve(result)
            expected = pr_points_by_counting(
                [(d.score, d.is_tp) for d in result.det_matches], result.n_gts)
            assert [(p.precision, p.recall) for p in curve.points] == expected


class TestAveragePrecision101:
    def test_perfect_detector(self):
        curve = PRCurve(points=[PRPoint(0.9, 1.0, 1.0)], n_gts=3)
        assert average_precision_101(curve) == 1.0

    def test_interpolation_takes_max(self):
        # One TP covering all gts at precision 1, then FPs: interpolated
        # precision stays 1 at every recall grid point.
        curve = PRCurve(points=[PRPoint(0.9, 1.0, 1.0), PRPoint(0.5, 0.33, 1.0)], n_gts=1)
        assert average_precision_101(curve) == 1.0

    def test_empty_curve(self):
        assert average_precision_101(PRCurve(points=[], n_gts=0)) == 0.0

    def test_against_direct_summation(self, rng):
        for _ in range(200):
            n = int(rng.integers(1, 12))
            points = []
            recall = 0.0
            for _k in range(n):
                recall = min(1.0, recall + float(rng.uniform(0, 0.2)))
                points.append(PRPoint(float(rng.random()), float(rng.random()), recall))
            curve = PRCurve(points=points, n_gts=10)
            expected = ap101_direct([(p.precision, p.recall) for p in points])
            assert average_precision_101(curve) == pytest.approx(expected, abs=1e-12)

    def test_bounded(self, rng):
        for _ in range(50):
            dets, gts = random_instance(rng)
            value = average_precision_101(pr_curve(match(dets, gts, 0.5)))
            assert 0.0 <= value <= 1.0

    def test_one_iff_perfect_point(self):
        has_perfect = PRCurve(points=[PRPoint(0.5, 1.0, 1.0), PRPoint(0.4, 0.9, 1.0)], n_gts=2)
        assert average_precision_101(has_perfect) == 1.0
        near = PRCurve(points=[PRPoint(0.5, 1.0, 0.99)], n_gts=100)
        assert average_precision_101(near) < 1.0


class TestCocoMap:
    def test_perfect_detections(self):
        gts = [gt(1, 1, 1, (0, 0, 10, 10)), gt(2, 1, 2, (20, 20, 8, 8))]
        dets = [det(1, 1, (0, 0, 10, 10), 0.9), det(1, 2, (20, 20, 8, 8), 0.8)]
        summary = coco_map(dets, gts)
        assert summary.ap50 == summary.ap75 == summary.mean_ap == 1.0

    def test_jittered_between_50_and_75(self):
        # IoU 0.6 exactly: perfect at the 0.5 threshold, zero at 0.75.
        gts = [gt(1, 1, 1, (0, 0, 10, 10))]
        dets = [det(1, 1, (0, 0, 10, 6), 0.9)]
        assert iou_xywh((0, 0, 10, 6), (0, 0, 10, 10)) == pytest.approx(0.6)
        summary = coco_map(dets, gts)
        assert summary.ap50 == 1.0
        assert summary.ap75 == 0.0

    def test_no_gts_is_an_error(self):
        with pytest.raises(ValueError):
            coco_map([det(1, 1, (0, 0, 2, 2), 0.5)], [])

    def test_ap_antitone_in_threshold(self, rng):
        for _ in range(100):
            dets, gts = random_instance(rng, n_dets=8, n_gts=5)
            summary = coco_map(dets, gts)
            values = [summary.ap_by_threshold[t] for t in sorted(summary.ap_by_threshold)]
            assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))
            assert summary.ap50 >= summary.ap75

    def test_adding_fp_never_increases_ap(self, rng):
        for _ in range(30):
            dets, gts = random_instance(rng)
            base = coco_map(dets, gts).ap50
            dets_plus = dets + [det(gts[0].image_id, gts[0].category_id,
                                    (400, 400, 5, 5), float(rng.random()))]
            assert coco_map(dets_plus, gts).ap50 <= base + 1e-12

    def test_adding_top_tp_never_decreases_ap(self, rng):
        for _ in range(30):
            dets, gts = random_instance(rng)
            unmatched = [g for g in gts
                         if not any(d.category_id == g.category_id and
                                    d.image_id == g.image_id for d in dets)]
            if not unmatched:
                continue
            base = coco_map(dets, gts).ap50
            g0 = unmatched[0]
            dets_plus = dets + [Detection(g0.image_id, g0.category_id, g0.box, 1.0)]
            assert coco_map(dets_plus, gts).ap50 >= base - 1e-12


class TestMeanPrf:
    def test_every_image_perfect(self):
        gts = [gt(1, 1, 1, (0, 0, 10, 10)), gt(2, 2, 1, (0, 0, 10, 10))]
        dets = [det(1, 1, (0, 0, 10, 10), 0.9), det(2, 1, (0, 0, 10, 10), 0.9)]
        per_image = {i: match([d for d in dets if d.image_id == i],
                              [g for g in gts if g.image_id == i], 0.5) for i in (1, 2)}
        prf = mean_prf(per_image)
        assert (prf.m_precision, prf.m_recall, prf.m_f1) == (1.0, 1.0, 1.0)

    def test_hand_case_one_tp_one_fn(self):
        gts = [gt(1, 1, 1, (0, 0, 10, 10)), gt(2, 1, 1, (30, 30, 10, 10))]
        dets = [det(1, 1, (0, 0, 10, 10), 0.9)]
        prf = mean_prf({1: match(dets, gts, 0.5)})
        assert prf.m_precision == 1.0
        assert prf.m_recall == 0.5
        assert prf.m_f1 == pytest.approx(2 / 3, abs=1e-12)

    def test_zero_gt_images_skipped_and_counted(self):
        populated = match([det(1, 1, (0, 0, 10, 10), 0.9)], [gt(1, 1, 1, (0, 0, 10, 10))], 0.5)
        empty = match([], [], 0.5)
        fp_only = match([det(3, 1, (0, 0, 4, 4), 0.8)], [], 0.5)
        prf = mean_prf({1: populated, 2: empty, 3: fp_only})
        assert prf.n_images_evaluated == 1
        assert prf.n_images_skipped == 2
        assert prf.m_precision == 1.0
        # Pooled counts include the stray false positive.
        assert prf.pooled_precision == 0.5

    def test_f1_identity_per_image(self, rng):
        for _ in range(50):
            dets, gts = random_instance(rng)
            result = match(dets, gts, 0.5)
            prf = mean_prf({1: result})
            p, r = prf.m_precision, prf.m_recall
            assert prf.m_f1 == pytest.approx(2 * p * r / (p + r) if p + r else 0.0, abs=1e-12)

    def test_histogram_bins_sum_to_images(self, rng):
        per_image = {}
        for i in range(1, 21):
            dets, gts = random_instance(rng)
            for d in dets:
                d.image_id = i
            for g in gts:
                g.image_id = i
            per_image[i] = match(dets, gts, 0.5)
        prf = mean_prf(per_image)
        for counts in prf.histograms.values():
            assert len(counts) == 20
            assert sum(counts) == prf.n_images_evaluated

    def test_boundary_value_lands_in_last_bin(self):
        per_image = {1: match([det(1, 1, (0, 0, 10, 10), 0.9)],
                              [gt(1, 1, 1, (0, 0, 10, 10))], 0.5)}
        prf = mean_prf(per_image)
        assert prf.histograms["precision"][19] == 1


class TestCategoryCounts:
    def test_empty(self):
        assert category_counts([]) == {}

    def test_counting(self):
        dets = [det(1, 1, (0, 0, 2, 2), 0.5)] * 3 + [det(1, 2, (0, 0, 2, 2), 0.5)] * 2
        assert category_counts(dets) == {1: 3, 2: 2}

    def test_order_invariant(self, rng):
        dets, _ = random_instance(rng, n_dets=12)
        base = category_counts(dets)
        shuffled = list(dets)
        rng.shuffle(shuffled)
        assert category_counts(shuffled) == base


class TestEvaluateAndIo:
    def test_regression_fixture_report(self):
        from deadwood.coco_io import read_coco
        ds = read_coco(DATA / "regression" / "gts.json")
        dets = read_detections(DATA / "regression" / "dets.json")
        gts = ground_truths_from_coco(ds)
        report = evaluate(dets, gts, matching_iou=0.5, image_ids=[i.id for i in ds.images])
        expected = json.loads((DATA / "regression" / "expected_report.json").read_text())
        got = report.to_dict()
        for key, value in expected.items():
            if isinstance(value, float):
                assert got[key] == pytest.approx(value, abs=1e-9), key
            else:
                assert got[key] == value, key
        assert report.m_precision > report.m_recall

    def test_read_detections_rejects_non_array(self, tmp_path):
        path = tmp_path / "dets.json"
        path.write_text("{}")
        with pytest.raises(CocoError, match="array"):
            read_detections(path)

    def test_read_detections_reports_bad_record(self, tmp_path):
        path = tmp_path / "dets.json"
        path.write_text('[{"image_id": 1, "category_id": 1, "bbox": [0, 0, 2], "score": 0.5}]')
        with pytest.raises(CocoError, match="detection 0"):
            read_detections(path)

    def test_write_report_files(self, tmp_path):
        gts = [gt(1, 1, 1, (0, 0, 10, 10))]
        dets = [det(1, 1, (0, 0, 10, 10), 0.9)]
        report = evaluate(dets, gts)
        write_report(report, tmp_path / "report.json", tmp_path / "report.csv")
        doc = json.loads((tmp_path / "report.json").read_text())
        assert doc["ap50"] == 1.0
        csv_lines = (tmp_path / "report.csv").read_text().splitlines()
        assert csv_lines[0] == "metric,value"
        assert any(line.startswith("ap50,") for line in csv_lines)
        hist_lines = (tmp_path / "report.hist.csv").read_text().splitlines()
        assert hist_lines[0] == "metric,bin_lo,bin_hi,count"
        assert len(hist_lines) == 1 + 3 * 20

    def test_detection_score_validated(self):
        with pytest.raises(ValueError):
            Detection(1, 1, BBox(0, 0, 2, 2), 1.5)
