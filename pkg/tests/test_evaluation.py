"""Recall harness: hit tests, aggregation against brute force, CSV emission."""

import csv

import numpy as np
import pytest

from refnms.evaluation import (
    EvalExample,
    RecallReport,
    RecallRow,
    build_eval_set,
    contextual_recall,
    recall_curve,
    referent_hit,
    write_report,
)
from refnms.geometry import Box, hits
from refnms.ingest import (
    DetectionRecord,
    EmbeddingTable,
    ExpressionRecord,
    GroundTruthRegion,
    ImageDetections,
)
from refnms.nms import NmsConfig


def random_box(rng, span=100.0):
    x1, y1 = rng.uniform(0, span, size=2)
    w, h = rng.uniform(5, 40, size=2)
    return Box(x1, y1, x1 + w, y1 + h)


def image_of(records, image_id="img"):
    return ImageDetections(image_id, tuple(records))


def record(box, conf, category=0):
    return DetectionRecord(box, category, "obj", conf, np.zeros(2))


# hit tests ---------------------------------------------------------------------


def test_referent_hit_exact_box():
    b = Box(0, 0, 10, 10)
    assert referent_hit([Box(50, 50, 60, 60), b], b) is True


def test_referent_hit_empty_proposals():
    assert referent_hit([], Box(0, 0, 10, 10)) is False


def test_referent_hit_requires_more_than_half_iou():
    referent = Box(0, 0, 10, 10)
    # nested proposal: inter 40, union 100 -> IoU 0.4
    proposal = Box(0, 0, 10, 4)
    assert referent_hit([proposal], referent) is False


def test_contextual_recall_empty_region_set():
    assert contextual_recall([Box(0, 0, 5, 5)], []) == (0, 0)


def test_contextual_recall_perfect_match():
    regions = [Box(0, 0, 10, 10), Box(20, 20, 30, 30)]
    assert contextual_recall(list(regions), regions) == (2, 2)


def test_contextual_recall_one_proposal_may_match_many_regions():
    # two nearly identical regions both hit by the same proposal
    regions = [Box(0, 0, 10, 10), Box(0.5, 0, 10.5, 10)]
    proposal = Box(0, 0, 10, 10)
    assert hits(proposal, regions[1])
    assert contextual_recall([proposal], regions) == (2, 2)


# aggregation -------------------------------------------------------------------


def curve_fixture(rng, n_expressions=5, boxes=12):
    examples = []
    for e in range(n_expressions):
        records = [record(random_box(rng), float(rng.uniform(0.05, 1.0))) for _ in range(boxes)]
        referent = records[int(rng.integers(boxes))].box
        pseudo = tuple(r.box for r in records if rng.random() < 0.3)
        examples.append(
            EvalExample(f"e{e}", "val", image_of(records, f"img{e}"), referent, pseudo)
        )
    return examples


def test_recall_hundred_percent_when_proposals_contain_referent():
    rng = np.random.default_rng(81)
    examples = []
    for e in range(4):
        box = random_box(rng)
        examples.append(
            EvalExample(f"e{e}", "val", image_of([record(box, 0.9)], f"img{e}"), box, (box,))
        )
    report = recall_curve(examples, "baseline_conf", [1, 5])
    for row in report.rows.values():
        assert row.referent_recall == 100.0
        assert row.contextual_recall == 100.0


def test_recall_monotone_over_nested_budgets():
    rng = np.random.default_rng(82)
    examples = curve_fixture(rng, n_expressions=8)
    report = recall_curve(examples, "baseline_conf", [5, 10, 20, 50])
    rows = list(report.rows.values())
    for smaller, larger in zip(rows, rows[1:]):
        assert larger.referent_hits >= smaller.referent_hits
        assert larger.contextual_matched >= smaller.contextual_matched


def test_recall_matches_brute_force_recomputation():
    from refnms.nms import ProposalBudget, baseline_pipeline, select_proposals

    rng = np.random.default_rng(83)
    for trial in range(20):
        examples = curve_fixture(rng, n_expressions=int(rng.integers(2, 6)))
        budgets = [3, 7]
        report = recall_curve(examples, "baseline_conf", budgets)
        for budget in budgets:
            hits_count = 0
            ctx_matched = ctx_total = 0
            for ex in examples:
                kept = baseline_pipeline(ex.detections, 0.05, NmsConfig())
                boxes = [
                    p.box
                    for p in select_proposals(kept, ProposalBudget.top_n(budget), "confidence")
                ]
                if any(hits(b, ex.referent) for b in boxes):
                    hits_count += 1
                if ex.pseudo_boxes:
                    for region in ex.pseudo_boxes:
                        ctx_total += 1
                        if any(hits(b, region) for b in boxes):
                            ctx_matched += 1
            row = report.rows[("val", "baseline_conf", str(budget))]
            assert row.referent_hits == hits_count
            assert row.contextual_matched == ctx_matched
            assert row.contextual_total == ctx_total


def test_expressions_without_pseudo_regions_leave_the_denominator():
    rng = np.random.default_rng(84)
    box = random_box(rng)
    with_pseudo = EvalExample("e0", "val", image_of([record(box, 0.9)]), box, (box,))
    without = EvalExample("e1", "val", image_of([record(box, 0.9)], "i2"), box, ())
    report = recall_curve([with_pseudo, without], "baseline_conf", [5])
    row = report.rows[("val", "baseline_conf", "5")]
    assert row.contextual_total == 1
    assert row.referent_total == 2


def test_recall_curve_rejects_empty_or_mixed_splits():
    rng = np.random.default_rng(85)
    with pytest.raises(ValueError):
        recall_curve([], "baseline_conf", [5])
    box = random_box(rng)
    a = EvalExample("e0", "val", image_of([record(box, 0.9)]), box, ())
    b = EvalExample("e1", "train", image_of([record(box, 0.9)], "i2"), box, ())
    with pytest.raises(ValueError, match="split"):
        recall_curve([a, b], "baseline_conf", [5])


def test_recall_curve_real_case_uses_score_threshold():
    rng = np.random.default_rng(86)
    strong = random_box(rng)
    weak = Box(strong.x1 + 200, strong.y1, strong.x2 + 200, strong.y2)
    records = [record(strong, 0.9), record(weak, 0.3)]
    # referent is the weak box: visible at top-5 but absent in the real case
    ex = EvalExample("e0", "val", image_of(records), weak, ())
    report = recall_curve([ex], "baseline_conf", [5, "real_case"], real_case_min_score=0.65)
    assert report.rows[("val", "baseline_conf", "5")].referent_hits == 1
    assert report.rows[("val", "baseline_conf", "real_case")].referent_hits == 0


def test_higher_similarity_threshold_shrinks_contextual_denominator():
    table = EmbeddingTable(
        2, {"cat": np.array([1.0, 0.0]), "dog": np.array([0.8, 0.6]), "the": np.array([0.1, 0.1])}
    )
    expr = ExpressionRecord("e0", "img", ("the", "cat"), ("DET", "NOUN"), Box(0, 0, 10, 10), "val")
    regions = {
        "img": [
            GroundTruthRegion("r1", "img", Box(0, 0, 10, 10), "cat"),
            GroundTruthRegion("r2", "img", Box(20, 0, 30, 10), "dog"),  # cosine 0.8
        ]
    }
    detections = {"img": image_of([record(Box(0, 0, 10, 10), 0.9)], "img")}
    loose = build_eval_set([expr], detections, regions, table, similarity_threshold=0.4)
    strict = build_eval_set([expr], detections, regions, table, similarity_threshold=0.9)
    assert len(loose[0].pseudo_boxes) == 2
    assert len(strict[0].pseudo_boxes) == 1


# report emission ------------------------------------------------------------------


def test_empty_report_writes_header_only(tmp_path):
    path = tmp_path / "report.csv"
    write_report(RecallReport(), path)
    content = path.read_text().strip().splitlines()
    assert len(content) == 1
    assert content[0].startswith("split,method,budget,referent_recall")


def test_report_rows_round_trip_through_csv(tmp_path):
    report = RecallReport()
    report.rows[("val", "baseline_conf", "10")] = RecallRow(2, 3, 5, 8)
    path = tmp_path / "report.csv"
    write_report(report, path)
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    row = rows[0]
    assert row["split"] == "val"
    assert row["budget"] == "10"
    assert row["referent_hits"] == "2"
    assert row["referent_total"] == "3"
    assert row["contextual_matched"] == "5"


def test_two_thirds_renders_with_two_decimals(tmp_path):
    report = RecallReport()
    report.rows[("val", "baseline_conf", "5")] = RecallRow(2, 3, 0, 0)
    path = tmp_path / "report.csv"
    write_report(report, path)
    line = path.read_text().strip().splitlines()[1]
    assert ",66.67," in line
    assert line.endswith(",0.00,0,0")


def test_recall_row_validates_counts():
    with pytest.raises(ValueError):
        RecallRow(4, 3, 0, 0)
    with pytest.raises(ValueError):
        RecallRow(0, 0, 2, 1)
