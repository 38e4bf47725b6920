from fractions import Fraction

import numpy as np
import pytest
import torch

from miscalib.dataset import synth_frames
from miscalib.evaluation import (UNDEFINED, ConfusionCounts, bench, compute_metrics,
                                 evaluate_config, evaluate_configs, evaluation_pairs, report_csv,
                                 report_table, write_report)
from miscalib.model import MiscalibrationDetector, count_parameters, save_checkpoint

SIZE = (64, 32)


class TestMetrics:
    def test_hand_counted(self):
        # tp=9 fp=1 tn=8 fn=2: acc 17/20, prec 9/10, recall 9/11
        m = compute_metrics(ConfusionCounts(9, 1, 8, 2), "x")
        assert m.accuracy == Fraction(17, 20) and float(m.accuracy) == 0.85
        assert m.precision == Fraction(9, 10)
        assert m.recall == Fraction(9, 11) and round(float(m.recall), 4) == 0.8182

    def test_from_predictions(self):
        probs = np.array([0.9, 0.6, 0.5, 0.2, 0.49, 0.7])
        labels = np.array([1, 0, 1, 0, 1, 1])
        assert ConfusionCounts.from_predictions(probs, labels, 0.5) == ConfusionCounts(3, 1, 1, 1)

    def test_no_positive_predictions(self):
        m = compute_metrics(ConfusionCounts(0, 0, 5, 5))
        assert m.precision == UNDEFINED and m.recall == 0 and m.accuracy == Fraction(1, 2)

    def test_empty(self):
        m = compute_metrics(ConfusionCounts())
        assert m.accuracy == m.precision == m.recall == UNDEFINED

    def test_negative_counts(self):
        with pytest.raises(ValueError):
            ConfusionCounts(-1, 0, 0, 0)

    def test_additive(self):
        assert ConfusionCounts(1, 2, 3, 4) + ConfusionCounts(1, 1, 1, 1) == ConfusionCounts(2, 3, 4, 5)

    def test_threshold_monotone(self):
        rng = np.random.default_rng(0)
        probs, labels = rng.random(300), rng.integers(0, 2, 300)
        prev_pos, prev_rec = None, None
        for t in np.linspace(0, 1, 11):
            c = ConfusionCounts.from_predictions(probs, labels, t)
            rec = compute_metrics(c).recall
            if prev_pos is not None:
                assert c.tp + c.fp <= prev_pos and rec <= prev_rec
            prev_pos, prev_rec = c.tp + c.fp, rec

    def test_reports(self, tmp_path):
        entries = [compute_metrics(ConfusionCounts(9, 1, 8, 2), "Rot hard"),
                   compute_metrics(ConfusionCounts(0, 0, 5, 5), "Trans easy")]
        rows = report_csv(entries).strip().splitlines()
        assert len(rows) == 3 and rows[1].startswith("Rot hard,0.5,20,9,1,8,2,0.850000")
        assert rows[2].split(",")[-2] == ""
        table = report_table(entries)
        assert "85.00%" in table and UNDEFINED in table
        write_report(entries, tmp_path)
        assert (tmp_path / "metrics.csv").read_text() == report_csv(entries)


@pytest.fixture(scope="module")
def frames():
    return synth_frames(4, 5, n_points=500, image_size=SIZE)


def test_evaluation_pairs(frames):
    pairs = evaluation_pairs(frames, "Rot hard", 0, SIZE)
    assert [p.label for p in pairs].count(1) == len(frames)
    neg = [p for p in pairs if p.label == 0]
    assert all(p.perturbation.source_config == "Noise" for p in neg)
    intr = evaluation_pairs(frames, "intrinsic hard", 0, SIZE)
    assert any(p.perturbation.intrinsic_error is not None for p in intr)
    with pytest.raises(KeyError):
        evaluation_pairs(frames, "Calibrated", 0, SIZE)
    with pytest.raises(KeyError):
        evaluation_pairs(frames, "Rot medium", 0, SIZE)


def test_evaluate_checkpoint(frames, tmp_path):
    torch.manual_seed(0)
    path = tmp_path / "m.npz"
    save_checkpoint(path, MiscalibrationDetector(), stage="classifier", input_size=SIZE)
    entry, probs, labels = evaluate_config(path, frames, "Trans easy", return_probs=True)
    assert entry.counts.total == 2 * len(frames) == len(probs)
    assert ((probs > 0) & (probs < 1)).all()
    assert compute_metrics(ConfusionCounts.from_predictions(probs, labels), "Trans easy") == entry


def test_bench_reports_sizes():
    res = bench(MiscalibrationDetector(), SIZE, n_warmup=1, n_iter=3)
    assert len(res.latencies_ms) == 3 and res.mean_ms > 0
    assert res.parameters == count_parameters(MiscalibrationDetector())
    text = res.to_csv()
    assert text.startswith("# hardware:") and "resnet18_small" in text


def test_metrics_report(frames):
    torch.manual_seed(0)
    report = evaluate_configs(MiscalibrationDetector(), frames, ["Rot hard", "Trans easy"], input_size=SIZE)
    assert [e.config for e in report.entries] == ["Rot hard", "Trans easy"]
    assert report["Trans easy"].counts.total == 2 * len(frames)
    assert report.to_csv().count("\n") == 3
