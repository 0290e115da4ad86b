import numpy as np
import pytest
from sklearn.base import clone

from aakt.estimator import AAKTClassifier, check_sequences
from aakt.synth import SynthConfig, generate

from conftest import make_sequence


@pytest.fixture(scope="module")
def synth_sequences():
    result = generate(
        SynthConfig(n_students=40, n_questions=10, n_skills=3, min_len=10, max_len=25, seed=9)
    )
    return result.dataset.sequences


def fast_estimator(**kw):
    base = dict(
        dim=16, n_blocks=1, n_heads=2, dropout=0.0, max_seq_len=16,
        batch_size=8, max_epochs=2, patience=2, seed=0,
    )
    base.update(kw)
    return AAKTClassifier(**base)


class TestCheckSequences:
    def test_accepts_tuples(self):
        seqs = check_sequences([[(0, 1, 1, 100), (1, (0, 2), 0, 50)]])
        assert len(seqs) == 1
        assert seqs[0].interactions[1].skill_ids == (0, 2)

    def test_rejects_empty_sequence(self):
        with pytest.raises(ValueError):
            check_sequences([[]])

    def test_rejects_garbage_records(self):
        with pytest.raises(TypeError):
            check_sequences([[("a", "b")]])

    def test_rejects_duplicate_ids(self):
        seq = make_sequence([(0, 0, 1, 10)], student_id="dup")
        with pytest.raises(ValueError):
            check_sequences([seq, seq])


class TestEstimatorApi:
    def test_get_set_params_roundtrip(self):
        est = fast_estimator()
        params = est.get_params()
        assert params["dim"] == 16
        est.set_params(dim=32)
        assert est.dim == 32

    def test_clone(self):
        est = fast_estimator(learning_rate=0.005)
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()

    def test_fit_predict_shapes(self, synth_sequences):
        est = fast_estimator().fit(synth_sequences[:30])
        test = synth_sequences[30:]
        proba = est.predict_proba(test)
        n = sum(len(s) for s in test)
        assert proba.shape == (n, 2)
        assert np.allclose(proba.sum(axis=1), 1.0)
        labels = est.predict(test)
        assert set(np.unique(labels)) <= {0, 1}

    def test_predict_rows_follow_corpus_order(self, synth_sequences):
        est = fast_estimator().fit(synth_sequences[:30])
        test = synth_sequences[30:32]
        both = est.predict_proba(test)[:, 1]
        first = est.predict_proba(test[:1])[:, 1]
        assert np.allclose(both[: len(first)], first)

    def test_score_is_auc(self, synth_sequences):
        est = fast_estimator().fit(synth_sequences[:30])
        score = est.score(synth_sequences[30:])
        assert 0.0 <= score <= 1.0

    def test_unfitted_predict_raises(self, synth_sequences):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            fast_estimator().predict_proba(synth_sequences[:2])

    def test_unknown_question_id_raises(self, synth_sequences):
        est = fast_estimator().fit(synth_sequences[:30])
        rogue = [make_sequence([(999, 0, 1, 100)])]
        with pytest.raises(IndexError):
            est.predict_proba(rogue)

    def test_deterministic_fit(self, synth_sequences):
        a = fast_estimator().fit(synth_sequences[:20])
        b = fast_estimator().fit(synth_sequences[:20])
        test = synth_sequences[20:25]
        assert np.array_equal(a.predict_proba(test), b.predict_proba(test))
