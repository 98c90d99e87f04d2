import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from vlmad.errors import InputError, UndefinedMetricError
from vlmad.metrics import (
    CategoryMetrics,
    EvalReport,
    ScoreRecord,
    aupro,
    auroc,
    average_precision,
    build_report,
    evaluate_category,
    load_report,
    merge_reports,
    per_defect_auroc,
    report_from_json,
    report_to_json,
    report_to_text,
)

from oracles import aupro_exhaustive, auroc_pairwise, average_precision_staircase


class TestAuroc:
    def test_perfect_ranking(self):
        assert auroc([0.1, 0.9], [0, 1]) == 1.0

    def test_inverted_ranking(self):
        assert auroc([0.9, 0.1], [0, 1]) == 0.0

    def test_tie_counts_half(self):
        assert auroc([0.5, 0.5, 0.7], [0, 1, 1]) == pytest.approx(0.75, abs=1e-12)

    def test_single_class_raises(self):
        with pytest.raises(UndefinedMetricError):
            auroc([0.1, 0.2], [1, 1])

    def test_non_binary_labels_rejected(self):
        with pytest.raises(InputError):
            auroc([0.1, 0.2], [0, 2])

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(2, 40))
    def test_matches_pairwise_oracle(self, seed, n):
        rng = np.random.default_rng(seed)
        scores = rng.choice(np.linspace(0, 1, 7), size=n)  # coarse grid forces ties
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        assert auroc(scores, labels) == pytest.approx(auroc_pairwise(scores, labels), abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_invariant_under_strictly_increasing_transform(self, seed):
        rng = np.random.default_rng(seed)
        scores = rng.uniform(0, 1, 20)
        labels = rng.integers(0, 2, 20)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        transformed = np.exp(3 * scores) + 7
        assert auroc(scores, labels) == pytest.approx(auroc(transformed, labels), abs=1e-12)

    def test_complement_under_negation_without_ties(self):
        rng = np.random.default_rng(1)
        scores = rng.permutation(20) / 20.0
        labels = rng.integers(0, 2, 20)
        labels[0], labels[1] = 0, 1
        assert auroc(scores, labels) + auroc(-scores, labels) == pytest.approx(1.0, abs=1e-12)


class TestAveragePrecision:
    def test_perfect_ranking(self):
        assert average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0

    def test_all_positives(self):
        assert average_precision([0.3, 0.9, 0.5], [1, 1, 1]) == 1.0

    def test_staircase_hand_case(self):
        assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(5 / 6, abs=1e-12)

    def test_no_positives_raises(self):
        with pytest.raises(UndefinedMetricError):
            average_precision([0.2, 0.3], [0, 0])

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(1, 40))
    def test_matches_staircase_oracle(self, seed, n):
        rng = np.random.default_rng(seed)
        scores = rng.choice(np.linspace(0, 1, 5), size=n)
        labels = rng.integers(0, 2, size=n)
        if labels.max() == 0:
            labels[-1] = 1
        assert average_precision(scores, labels) == pytest.approx(
            average_precision_staircase(scores, labels), abs=1e-12
        )


def pixel_record(image_id, scores, mask, label=None):
    mask = np.asarray(mask) > 0
    label = int(mask.any()) if label is None else label
    return ScoreRecord(
        image_id=image_id,
        image_score=float(np.max(scores)),
        image_label=label,
        pixel_scores=np.asarray(scores, dtype=np.float64),
        pixel_mask=mask,
    )


class TestAupro:
    def test_perfect_prediction_is_one(self):
        mask = np.zeros((8, 8), dtype=bool)
        mask[1:3, 1:3] = True
        rec = pixel_record("a", mask.astype(float), mask)
        assert aupro([rec], fpr_cap=0.3) == pytest.approx(1.0, abs=1e-12)
        assert aupro([rec], fpr_cap=1.0) == pytest.approx(1.0, abs=1e-12)

    def test_constant_prediction_traces_diagonal(self):
        mask = np.zeros((8, 8), dtype=bool)
        mask[2:4, 5:7] = True
        rec = pixel_record("a", np.full((8, 8), 0.4), mask)
        assert aupro([rec], fpr_cap=1.0) == pytest.approx(0.5, abs=1e-9)
        assert aupro([rec], fpr_cap=1.0) == pytest.approx(
            aupro_exhaustive([rec.pixel_scores], [rec.pixel_mask], 1.0), abs=1e-9
        )
        assert aupro([rec], fpr_cap=0.3) == pytest.approx(
            aupro_exhaustive([rec.pixel_scores], [rec.pixel_mask], 0.3), abs=1e-9
        )

    def test_two_component_hand_case_matches_oracle(self):
        rng = np.random.default_rng(5)
        mask = np.zeros((8, 8), dtype=bool)
        mask[1:3, 1:4] = True  # component of 6 pixels
        mask[6, 6] = True  # single-pixel component
        scores = rng.uniform(0, 1, (8, 8))
        scores[1:3, 1:4] += 0.5
        scores = np.clip(scores, 0, 1)
        rec = pixel_record("a", scores, mask)
        for cap in (0.3, 1.0):
            assert aupro([rec], fpr_cap=cap) == pytest.approx(
                aupro_exhaustive([scores], [mask], cap), abs=1e-6
            )

    def test_pooling_across_records(self):
        rng = np.random.default_rng(9)
        records, score_maps, masks = [], [], []
        for i in range(3):
            mask = np.zeros((6, 6), dtype=bool)
            if i > 0:
                mask[i : i + 2, 1:3] = True
            scores = rng.uniform(0, 1, (6, 6))
            records.append(pixel_record(f"r{i}", scores, mask))
            score_maps.append(scores)
            masks.append(mask)
        for cap in (0.3, 1.0):
            assert aupro(records, fpr_cap=cap) == pytest.approx(
                aupro_exhaustive(score_maps, masks, cap), abs=1e-6
            )

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 100_000), cap=st.sampled_from([0.3, 1.0]))
    def test_random_instances_match_exhaustive_oracle(self, seed, cap):
        rng = np.random.default_rng(seed)
        h, w = int(rng.integers(4, 17)), int(rng.integers(4, 17))
        mask = rng.uniform(size=(h, w)) < 0.25
        if not mask.any():
            mask[0, 0] = True
        if mask.all():
            mask[-1, -1] = False
        scores = rng.choice(np.linspace(0, 1, 23), size=(h, w))
        rec = pixel_record("r", scores, mask)
        assert aupro([rec], fpr_cap=cap) == pytest.approx(
            aupro_exhaustive([scores], [mask], cap), abs=1e-6
        )

    def test_threshold_subsampling_stays_close(self):
        rng = np.random.default_rng(3)
        mask = np.zeros((16, 16), dtype=bool)
        mask[2:9, 3:10] = True
        scores = rng.uniform(0, 1, (16, 16)) * 0.5
        scores[mask] += 0.4
        rec = pixel_record("r", scores, mask)
        exact = aupro([rec], fpr_cap=0.3)
        sampled = aupro([rec], fpr_cap=0.3, max_thresholds=50)
        assert sampled == pytest.approx(exact, abs=0.02)

    def test_no_anomalous_region_raises(self):
        rec = pixel_record("a", np.zeros((4, 4)), np.zeros((4, 4), dtype=bool), label=0)
        with pytest.raises(UndefinedMetricError):
            aupro([rec])

    def test_bad_cap_rejected(self):
        mask = np.ones((2, 2), dtype=bool)
        mask[0, 0] = False
        rec = pixel_record("a", np.ones((2, 2)) * 0.5, mask)
        with pytest.raises(InputError):
            aupro([rec], fpr_cap=0.0)

    def test_records_without_pixels_rejected(self):
        rec = ScoreRecord(image_id="x", image_score=0.5, image_label=1)
        with pytest.raises(InputError):
            aupro([rec])


def make_records(seed=0, n_good=4, n_bad=4, hw=8, separation=0.5):
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_good + n_bad):
        bad = i >= n_good
        mask = np.zeros((hw, hw), dtype=bool)
        scores = rng.uniform(0, 0.4, (hw, hw))
        if bad:
            mask[2:5, 2:5] = True
            scores[mask] += separation
        records.append(
            ScoreRecord(
                image_id=f"img{i}",
                image_score=float(scores.max()),
                image_label=int(bad),
                pixel_scores=scores,
                pixel_mask=mask,
                category="cat",
                defect="square" if bad else "good",
            )
        )
    return records


class TestEvaluateCategory:
    def test_full_metric_record(self):
        metrics = evaluate_category(make_records())
        assert metrics.n_images == 8
        assert metrics.cls_auroc == 1.0
        assert metrics.cls_ap == 1.0
        assert metrics.seg_auroc > 0.9
        assert 0.0 <= metrics.seg_aupro <= 1.0

    def test_duplicate_ids_rejected(self):
        records = make_records()
        records[1] = ScoreRecord(
            image_id="img0", image_score=0.1, image_label=0,
            pixel_scores=records[1].pixel_scores, pixel_mask=records[1].pixel_mask,
        )
        with pytest.raises(InputError):
            evaluate_category(records)

    def test_mixed_pixel_presence_rejected(self):
        records = make_records()[:3]
        records.append(ScoreRecord(image_id="plain", image_score=0.9, image_label=1))
        with pytest.raises(InputError):
            evaluate_category(records)

    def test_image_only_records_skip_segmentation(self):
        records = [
            ScoreRecord(image_id="a", image_score=0.2, image_label=0),
            ScoreRecord(image_id="b", image_score=0.9, image_label=1),
        ]
        metrics = evaluate_category(records)
        assert metrics.seg_auroc is None
        assert metrics.seg_aupro is None

    def test_single_class_category_raises(self):
        records = [r for r in make_records() if r.image_label == 0]
        with pytest.raises(UndefinedMetricError):
            evaluate_category(records)


def metric_row(cls_auroc, seg_auroc=0.8, n=10):
    return CategoryMetrics(cls_auroc=cls_auroc, cls_ap=0.9, seg_auroc=seg_auroc,
                           seg_aupro=0.7, n_images=n)


class TestReports:
    def test_single_category_average_is_itself(self):
        report = build_report({"only": metric_row(0.8)})
        assert report.averages.cls_auroc == pytest.approx(0.8)
        assert report.averages.n_images == 10

    def test_two_category_average(self):
        report = build_report({"a": metric_row(0.8), "b": metric_row(1.0)})
        assert report.averages.cls_auroc == pytest.approx(0.9, abs=1e-12)

    def test_merge_is_permutation_invariant(self):
        parts = [
            build_report({"a": metric_row(0.7)}),
            build_report({"b": metric_row(0.8)}),
            build_report({"c": metric_row(0.9)}),
        ]
        forward = merge_reports(parts)
        backward = merge_reports(parts[::-1])
        assert forward.averages == backward.averages
        assert list(forward.per_category) == list(backward.per_category)

    def test_merge_rejects_duplicate_category(self):
        a = build_report({"x": metric_row(0.7)})
        b = build_report({"x": metric_row(0.9)})
        with pytest.raises(InputError):
            merge_reports([a, b])

    def test_merge_rejects_conflicting_meta(self):
        a = build_report({"x": metric_row(0.7)}, meta={"aupro_cap": 0.3})
        b = build_report({"y": metric_row(0.9)}, meta={"aupro_cap": 1.0})
        with pytest.raises(InputError):
            merge_reports([a, b])

    def test_text_rendering_has_header_and_average_row(self):
        report = build_report({"bottle": metric_row(0.8)}, meta={"aupro_cap": 0.3})
        text = report_to_text(report)
        assert text.startswith("# aupro_cap=0.3 connectivity=4")
        assert "average" in text
        assert "bottle" in text

    def test_json_round_trip(self, tmp_path):
        report = build_report(
            {"a": metric_row(0.8), "b": metric_row(0.95)}, meta={"aupro_cap": 0.3, "seed": 1}
        )
        payload = report_to_json(report)
        restored = report_from_json(payload)
        assert restored.per_category == report.per_category
        assert restored.averages == report.averages
        path = tmp_path / "report.json"
        path.write_text(payload)
        assert load_report(path).averages == report.averages


class TestPerDefectAuroc:
    def test_defect_groups_scored_against_goods(self):
        records = make_records()
        table = per_defect_auroc(records)
        assert set(table) == {("cat", "square")}
        assert table[("cat", "square")] == 1.0

    def test_missing_category_metadata_rejected(self):
        records = [ScoreRecord(image_id="a", image_score=0.5, image_label=0)]
        with pytest.raises(InputError):
            per_defect_auroc(records)
