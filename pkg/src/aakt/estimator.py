"""Scikit-learn style front end for the knowledge-tracing pipeline.

``AAKTClassifier`` wraps windowing, training, and scoring behind the familiar
``fit`` / ``predict_proba`` surface so the model composes with model selection
and pipeline tooling from the wider ecosystem. Samples are whole student
sequences; probabilities come back one row per interaction, in corpus order.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import Interaction, StudentSequence
from . import metrics as metrics_mod
from .model import ModelConfig
from .training import ModelScorer, TrainConfig, train_single


def check_sequences(X) -> list[StudentSequence]:
    """Validate and normalize estimator input.

    Accepts a list of :class:`StudentSequence`, or a list of per-student
    iterables of ``(question_id, skill_ids, correct, time_ms)`` tuples (or
    Interaction objects), which get wrapped with synthetic student ids.
    """
    if isinstance(X, StudentSequence):
        raise TypeError("X must be a collection of sequences, not a single sequence")
    sequences = []
    for i, item in enumerate(X):
        if isinstance(item, StudentSequence):
            seq = item
        else:
            interactions = []
            for j, rec in enumerate(item):
                if isinstance(rec, Interaction):
                    interactions.append(rec)
                    continue
                try:
                    question_id, skill_ids, correct, time_ms = rec
                except (TypeError, ValueError):
                    raise TypeError(
                        f"sequence {i} record {j}: expected Interaction or "
                        "(question_id, skill_ids, correct, time_ms)"
                    ) from None
                if isinstance(skill_ids, int):
                    skill_ids = (skill_ids,)
                interactions.append(
                    Interaction(
                        question_id=int(question_id),
                        skill_ids=tuple(int(s) for s in skill_ids),
                        correct=int(correct),
                        time_ms=int(time_ms),
                        order_key=float(j),
                    )
                )
            seq = StudentSequence(student_id=f"x{i}", interactions=interactions)
        if len(seq) == 0:
            raise ValueError(f"sequence {i} is empty")
        sequences.append(seq)
    if not sequences:
        raise ValueError("X contains no sequences")
    ids = [s.student_id for s in sequences]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate student ids in X")
    return sequences


class AAKTClassifier(BaseEstimator):
    """Next-response correctness classifier over student exercise sequences.

    Parameters mirror the training configuration: embedding width, block
    count, window length (in alternate tokens, two per interaction), overlap
    ratio, and the optimizer settings. ``skill_mode`` selects how skill labels
    are used: "aux" routes them through the auxiliary classification loss,
    "additive" adds mean skill embeddings to question tokens, "none" ignores
    them.
    """

    def __init__(
        self,
        dim: int = 64,
        n_blocks: int = 2,
        n_heads: int = 8,
        dropout: float = 0.1,
        max_seq_len: int = 100,
        overlap_ratio: float = 0.5,
        eval_overlap_ratio: float | None = None,
        batch_size: int = 64,
        learning_rate: float = 0.001,
        max_epochs: int = 30,
        patience: int = 5,
        time_factor: float = 60_000.0,
        time_clip: float = 200_000.0,
        skill_mode: str = "aux",
        validation_fraction: float = 0.1,
        seed: int = 0,
    ):
        self.dim = dim
        self.n_blocks = n_blocks
        self.n_heads = n_heads
        self.dropout = dropout
        self.max_seq_len = max_seq_len
        self.overlap_ratio = overlap_ratio
        self.eval_overlap_ratio = eval_overlap_ratio
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.time_factor = time_factor
        self.time_clip = time_clip
        self.skill_mode = skill_mode
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=self.seed,
            max_seq_len=self.max_seq_len,
            overlap_ratio=self.overlap_ratio,
            eval_overlap_ratio=self.eval_overlap_ratio,
            time_factor=self.time_factor,
            time_clip=self.time_clip,
        )

    def fit(self, X, y=None):
        """Train on a collection of student sequences (labels live inside)."""
        sequences = check_sequences(X)
        n_questions = 1 + max(i.question_id for s in sequences for i in s.interactions)
        n_skills = 1 + max(k for s in sequences for i in s.interactions for k in i.skill_ids)
        model_cfg = ModelConfig(
            n_questions=n_questions,
            n_skills=n_skills,
            dim=self.dim,
            n_blocks=self.n_blocks,
            n_heads=self.n_heads,
            dropout=self.dropout,
            skill_mode=self.skill_mode,
            time_factor=self.time_factor,
            time_clip=self.time_clip,
        )
        rng = np.random.default_rng(self.seed)
        n_val = max(1, int(round(self.validation_fraction * len(sequences))))
        if n_val >= len(sequences):
            raise ValueError("validation_fraction leaves no training sequences")
        order = rng.permutation(len(sequences))
        val_idx = set(order[:n_val].tolist())
        train_seqs = [sequences[i] for i in range(len(sequences)) if i not in val_idx]
        val_seqs = [sequences[i] for i in range(len(sequences)) if i in val_idx]

        model, report, best_epoch, epochs_run = train_single(
            train_seqs, val_seqs, model_cfg, self._train_config()
        )
        self.model_ = model
        self.n_questions_ = n_questions
        self.n_skills_ = n_skills
        self.validation_report_ = report
        self.best_epoch_ = best_epoch
        self.epochs_run_ = epochs_run
        return self

    def _records(self, X) -> list[metrics_mod.PredictionRecord]:
        check_is_fitted(self, "model_")
        sequences = check_sequences(X)
        for s in sequences:
            for inter in s.interactions:
                if inter.question_id >= self.n_questions_:
                    raise IndexError(
                        f"question id {inter.question_id} outside the fitted "
                        f"range [0, {self.n_questions_})"
                    )
                if any(k >= self.n_skills_ for k in inter.skill_ids):
                    raise IndexError("skill id outside the fitted range")
        ratio = (
            self.overlap_ratio if self.eval_overlap_ratio is None else self.eval_overlap_ratio
        )
        return metrics_mod.collect_predictions(
            ModelScorer(self.model_),
            sequences,
            max_len=self.max_seq_len,
            overlap_ratio=ratio,
            time_factor=self.time_factor,
            time_clip=self.time_clip,
        )

    def predict_proba(self, X) -> np.ndarray:
        """(n_interactions, 2) array of [P(incorrect), P(correct)] rows.

        Rows follow corpus order: sequence by sequence, interaction by
        interaction, each interaction exactly once.
        """
        records = [r for r in self._records(X) if r.fresh]
        records.sort(key=lambda r: r.student_id)
        by_student: dict[str, list[metrics_mod.PredictionRecord]] = {}
        for r in records:
            by_student.setdefault(r.student_id, []).append(r)
        sequences = check_sequences(X)
        probs = []
        for seq in sequences:
            rows = sorted(by_student[seq.student_id], key=lambda r: r.interaction_index)
            probs.extend(r.prob for r in rows)
        p = np.asarray(probs, dtype=np.float64)
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def score(self, X, y=None) -> float:
        """Held-out AUC over fresh records (single-class input raises)."""
        value = metrics_mod.auc(self._records(X))
        if value is None:
            raise ValueError("AUC undefined: labels contain a single class")
        return value
