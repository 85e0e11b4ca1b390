import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import unit_rows
from capsadapter.errors import EmptyReport, LengthMismatch, NoCommonClasses
from capsadapter.evaluate import (
    EvalReport,
    emit_report,
    load_json_report,
    per_class_accuracy,
    render_csv,
    support_similarity,
    top1_accuracy,
)


class TestAccuracy:
    def test_all_correct(self):
        assert top1_accuracy(np.eye(3), [0, 1, 2]) == 1.0

    def test_half(self):
        assert top1_accuracy(np.eye(4), [0, 1, 0, 0]) == 0.5

    def test_tie_goes_to_lowest(self):
        assert top1_accuracy([[1.0, 1.0]], [0]) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            top1_accuracy(np.eye(2), [0])

    def test_per_class(self):
        assert per_class_accuracy([[2.0, 1.0]] * 3, [0, 0, 0], 1) == [1.0]
        assert per_class_accuracy([[2.0, 1.0], [0.0, 1.0]], [0, 0], 2) == [0.5, None]
        # predictions 0,0,1,1,0 against labels 0,1,1,1,0: class 0 -> 2/2, class 1 -> 2/3
        logits = [[1, 0], [1, 0], [0, 1], [0, 1], [1, 0]]
        assert per_class_accuracy(logits, [0, 1, 1, 1, 0], 2) == [1.0, pytest.approx(2 / 3)]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_monotone_transform_and_weighting(self, seed):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(30, 4))
        y = rng.integers(0, 4, size=30)
        acc = top1_accuracy(logits, y)
        assert top1_accuracy(np.exp(3 * logits) + 7, y) == acc
        per = per_class_accuracy(logits, y, 4)
        counts = np.bincount(y, minlength=4)
        weighted = sum(p * c for p, c in zip(per, counts) if p is not None) / counts.sum()
        assert abs(weighted - acc) <= 1e-9


class TestSimilarity:
    def test_self(self, rng):
        f = unit_rows(rng, 6, 8)
        c = [0, 0, 0, 1, 1, 1]
        assert support_similarity(f, c, f, c) == pytest.approx(100.0 * np.mean(
            [np.mean(f[:3] @ f[:3].T), np.mean(f[3:] @ f[3:].T)]))

    def test_identical_single_vectors(self):
        f = np.eye(3)
        assert support_similarity(f, [0, 1, 2], f, [0, 1, 2]) == pytest.approx(100.0, abs=1e-9)

    def test_orthogonal(self):
        s = np.eye(4)[[0, 2]]
        t = np.eye(4)[[1, 3]]
        assert support_similarity(s, [0, 1], t, [0, 1]) == pytest.approx(0.0, abs=1e-9)

    def test_matches_pairwise_loop(self, rng):
        s, t = unit_rows(rng, 7, 5), unit_rows(rng, 9, 5)
        sc, tc = [0, 0, 1, 1, 1, 2, 2], [0, 1, 1, 1, 2, 2, 3, 3, 3]
        per = []
        for k in (0, 1, 2):
            pairs = [s[i] @ t[j] for i in range(7) for j in range(9) if sc[i] == k and tc[j] == k]
            per.append(np.mean(pairs))
        assert support_similarity(s, sc, t, tc) == pytest.approx(100 * np.mean(per), abs=1e-9)
        every = np.mean([s[i] @ t[j] for i in range(7) for j in range(9)])
        assert support_similarity(s, sc, t, tc, per_class=False) == pytest.approx(100 * every, abs=1e-9)

    def test_symmetric(self, rng):
        s, t = unit_rows(rng, 6, 5), unit_rows(rng, 6, 5)
        c = [0, 0, 1, 1, 2, 2]
        assert support_similarity(s, c, t, c) == pytest.approx(support_similarity(t, c, s, c), abs=1e-12)

    def test_no_common(self, rng):
        with pytest.raises(NoCommonClasses):
            support_similarity(unit_rows(rng, 2, 3), [0, 0], unit_rows(rng, 2, 3), [1, 1])


class TestReport:
    def report(self, **kw):
        base = dict(method="m_adapter", backbone="RN50", dataset="ucf101", support_size=50, top1=0.6494)
        base.update(kw)
        return EvalReport(**base)

    def test_percent_formatting(self):
        text = render_csv([self.report()])
        header, row = text.strip().split("\n")
        assert header == "method,backbone,dataset,support_size,top1,similarity,wall_time_s"
        assert row.split(",")[4] == "64.94"

    def test_empty(self, tmp_path):
        with pytest.raises(EmptyReport):
            emit_report([], tmp_path / "r.csv")

    def test_json_round_trip(self, tmp_path):
        reports = [self.report(per_class=[0.5, None], similarity=72.64, wall_time_s=1.5),
                   self.report(method="zeroshot", top1=0.5966)]
        emit_report(reports, tmp_path / "r.json", "json")
        assert load_json_report(tmp_path / "r.json") == reports

    def test_csv_file(self, tmp_path):
        emit_report([self.report(similarity=72.64)], tmp_path / "r.csv")
        rows = list(csv.DictReader((tmp_path / "r.csv").open()))
        assert rows[0]["top1"] == "64.94" and rows[0]["similarity"] == "72.64"
        assert rows[0]["wall_time_s"] == ""

    def test_deterministic(self, tmp_path):
        r = [self.report()]
        emit_report(r, tmp_path / "a.json", "json")
        emit_report(r, tmp_path / "b.json", "json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        json.loads((tmp_path / "a.json").read_text())
