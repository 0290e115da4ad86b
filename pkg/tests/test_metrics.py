import itertools

import numpy as np
import pytest

from aakt.metrics import (
    MetricReport,
    PredictionRecord,
    acc,
    auc,
    auc_from_arrays,
    collect_predictions,
    compute_report,
    metric_correlations,
    overlap_ratio_sweep,
    per_position_auc,
    rmse,
    smoothed_auc,
)

from conftest import make_sequence


def records_of(labels, probs, position=1, fresh=True):
    return [
        PredictionRecord(
            student_id="s", interaction_index=i, position_in_window=position,
            prob=p, label=int(l), fresh=fresh,
        )
        for i, (l, p) in enumerate(zip(labels, probs))
    ]


def naive_pairwise_auc(labels, probs):
    """Oracle: enumerate every positive/negative pair."""
    pos = [p for l, p in zip(labels, probs) if l == 1]
    neg = [p for l, p in zip(labels, probs) if l == 0]
    if not pos or not neg:
        return None
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a, b in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


class TestAuc:
    def test_perfect_ranking(self):
        assert auc(records_of([1, 0], [0.9, 0.1])) == 1.0

    def test_all_ties(self):
        assert auc(records_of([1, 0, 1, 0], [0.4] * 4)) == 0.5

    def test_worked_example(self):
        assert auc(records_of([1, 1, 0, 0], [0.8, 0.4, 0.6, 0.2])) == pytest.approx(0.75)

    def test_single_class_absent(self):
        assert auc(records_of([1, 1], [0.2, 0.9])) is None

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 2, size=1000)
        probs = rng.choice(np.linspace(0, 1, 50), size=1000)  # force ties
        got = auc_from_arrays(labels, probs)
        assert got == pytest.approx(naive_pairwise_auc(labels, probs), abs=1e-9)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 2, size=200)
        probs = rng.random(200)
        base = auc_from_arrays(labels, probs)
        squashed = auc_from_arrays(labels, 1 / (1 + np.exp(-5 * probs)))
        assert squashed == pytest.approx(base, abs=1e-12)

    def test_label_as_probability_is_one(self):
        labels = np.array([0, 1, 1, 0, 1])
        assert auc_from_arrays(labels, labels.astype(float)) == 1.0

    def test_ignores_stale_records(self):
        fresh = records_of([1, 0], [0.9, 0.1])
        stale = records_of([0, 1], [0.9, 0.1], fresh=False)
        assert auc(fresh + stale) == 1.0


class TestAcc:
    def test_perfect(self):
        assert acc(records_of([1, 0], [0.9, 0.1])) == 1.0

    def test_tie_counts_as_positive(self):
        assert acc(records_of([1], [0.5])) == 1.0
        assert acc(records_of([0], [0.5])) == 0.0

    def test_two_thirds(self):
        assert acc(records_of([1, 0, 0], [0.6, 0.6, 0.4])) == pytest.approx(2 / 3)

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            acc([])


class TestRmse:
    def test_exact_predictions(self):
        assert rmse(records_of([1, 0], [1.0, 0.0])) == 0.0

    def test_balanced_half(self):
        assert rmse(records_of([1, 0, 1, 0], [0.5] * 4)) == pytest.approx(0.5)

    def test_single_record(self):
        assert rmse(records_of([1], [0.8])) == pytest.approx(0.2)

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            rmse([])


class TestPerPosition:
    def test_rising_profile(self):
        rng = np.random.default_rng(2)
        records = []
        for i in range(400):
            # Early slots random, late slots perfectly ranked.
            position = 1 + i % 4
            label = int(rng.random() < 0.5)
            prob = rng.random() if position <= 2 else 0.25 + 0.5 * label
            records.append(
                PredictionRecord("s", i, position, prob, label, True)
            )
        series = per_position_auc(records, max_len=8)
        assert len(series) == 4
        assert series[2] == 1.0 and series[3] == 1.0
        assert series[0] < 0.75

    def test_constant_data_constant_series(self):
        records = []
        for position in (1, 2, 3):
            records += records_of([1, 0], [0.7, 0.3], position=position)
        assert per_position_auc(records, 6) == [1.0, 1.0, 1.0]

    def test_single_class_position_absent(self):
        records = records_of([1, 1], [0.7, 0.3], position=2)
        series = per_position_auc(records, 4)
        assert series == [None, None]


class TestSmoothedAuc:
    def test_constant_series(self):
        assert smoothed_auc([0.7] * 10, window=4) == pytest.approx([0.7] * 7)

    def test_alternating_series(self):
        out = smoothed_auc([0.0, 1.0, 0.0, 1.0, 0.0, 1.0], window=2)
        assert out == pytest.approx([0.5] * 5)

    def test_output_length(self):
        series = list(np.linspace(0, 1, 20))
        window = max(1, round(0.2 * len(series)))
        assert len(smoothed_auc(series)) == len(series) - window + 1

    def test_short_series_collapses_to_mean(self):
        assert smoothed_auc([0.2, 0.4], window=5) == pytest.approx([0.3])


class TestCollectPredictions:
    def _scorer(self, value=0.5):
        def score(windows):
            return np.full((len(windows), windows[0].n_slots), value)
        return score

    def _hash_scorer(self):
        def score(windows):
            out = np.zeros((len(windows), windows[0].n_slots))
            for i, w in enumerate(windows):
                for slot in range(w.n_valid_slots):
                    tok = w.tokens[2 * slot]
                    out[i, slot] = (hash((w.student_id, tok.question_id)) % 997) / 997.0
            return out
        return score

    def sequences(self, n=3, length=12):
        return [
            make_sequence(
                [((s + k) % 5, (k % 2,), (s * k) % 2, 1_000) for k in range(length)],
                student_id=f"s{s}",
            )
            for s in range(n)
        ]

    def test_one_fresh_record_per_interaction(self):
        records = collect_predictions(self._scorer(), self.sequences(), 8, 0.5)
        fresh = [(r.student_id, r.interaction_index) for r in records if r.fresh]
        assert len(fresh) == len(set(fresh)) == 3 * 12

    def test_positions_in_range(self):
        records = collect_predictions(self._scorer(), self.sequences(), 8, 0.5)
        assert all(1 <= r.position_in_window <= 4 for r in records)

    def test_labels_match_source(self):
        seqs = self.sequences(n=1)
        records = collect_predictions(self._scorer(), seqs, 8, 0.0)
        by_index = {r.interaction_index: r.label for r in records if r.fresh}
        for k, inter in enumerate(seqs[0].interactions):
            assert by_index[k] == inter.correct

    def test_context_free_scorer_gives_identical_metrics_across_ratios(self):
        seqs = self.sequences(n=4, length=20)
        reports = []
        for ratio in (0.0, 0.5, 0.75):
            records = collect_predictions(self._hash_scorer(), seqs, 8, ratio)
            reports.append((auc(records), acc(records), rmse(records)))
        assert reports[0] == reports[1] == reports[2]


class TestSweep:
    def test_degenerate_model_flat_curve(self):
        seqs = TestCollectPredictions().sequences()

        def scorer(windows):
            return np.full((len(windows), windows[0].n_slots), 0.5)

        pairs = overlap_ratio_sweep(scorer, seqs, [0.0, 0.5], max_len=8)
        assert [value for _, value in pairs] == [0.5, 0.5]

    def test_single_zero_ratio_equals_plain_auc(self):
        seqs = TestCollectPredictions().sequences()
        scorer = TestCollectPredictions()._hash_scorer()
        pairs = overlap_ratio_sweep(scorer, seqs, [0.0], max_len=8)
        records = collect_predictions(scorer, seqs, 8, 0.0)
        assert pairs[0] == (0.0, auc(records))

    def test_deterministic(self):
        seqs = TestCollectPredictions().sequences()
        scorer = TestCollectPredictions()._hash_scorer()
        a = overlap_ratio_sweep(scorer, seqs, [0.0, 0.5, 0.75], max_len=8)
        b = overlap_ratio_sweep(scorer, seqs, [0.0, 0.5, 0.75], max_len=8)
        assert a == b


def report_with(auc_value, acc_value, rmse_value):
    return MetricReport(auc=auc_value, acc=acc_value, rmse=rmse_value)


class TestCorrelations:
    def test_identical_metrics_correlate_fully(self):
        reports = [report_with(v, v, 1 - v) for v in (0.6, 0.7, 0.8, 0.75)]
        corr = metric_correlations(reports)
        assert corr[("acc", "auc")] == pytest.approx(1.0)
        assert corr[("auc", "rmse")] == pytest.approx(-1.0)

    def test_matches_covariance_formula(self):
        reports = [
            report_with(0.61, 0.55, 0.48),
            report_with(0.72, 0.60, 0.44),
            report_with(0.68, 0.66, 0.47),
            report_with(0.80, 0.71, 0.40),
        ]
        corr = metric_correlations(reports)

        def pearson(xs, ys):
            mx, my = sum(xs) / len(xs), sum(ys) / len(ys)
            cov = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
            vx = sum((x - mx) ** 2 for x in xs)
            vy = sum((y - my) ** 2 for y in ys)
            return cov / (vx**0.5 * vy**0.5)

        aucs = [r.auc for r in reports]
        accs = [r.acc for r in reports]
        rmses = [r.rmse for r in reports]
        assert corr[("acc", "auc")] == pytest.approx(pearson(accs, aucs), abs=1e-12)
        assert corr[("auc", "rmse")] == pytest.approx(pearson(aucs, rmses), abs=1e-12)
        assert corr[("acc", "rmse")] == pytest.approx(pearson(accs, rmses), abs=1e-12)

    def test_zero_variance_absent(self):
        reports = [report_with(0.7, 0.5, v) for v in (0.1, 0.2, 0.3)]
        corr = metric_correlations(reports)
        assert corr[("acc", "auc")] is None

    def test_needs_three_points(self):
        with pytest.raises(ValueError):
            metric_correlations([report_with(0.5, 0.5, 0.5)] * 2)


class TestReport:
    def test_report_roundtrip(self, tmp_path):
        records = records_of([1, 0, 1, 0], [0.9, 0.2, 0.7, 0.4])
        report = compute_report(records, max_len=8)
        assert report.auc == 1.0
        assert report.counts["fresh"] == 4
        path = tmp_path / "report.json"
        report.save(path)
        assert path.exists()
