"""Interaction-log ingestion: parsing, cleaning, splitting, and dataset statistics.

Raw logs are delimited text with one exercise record per row. Parsing densifies
question and skill identifiers into contiguous 0-based indices and groups rows
into per-student sequences ordered by an explicit order column (or file order).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, TextIO

logger = logging.getLogger(__name__)

# Sequence-length histogram bucket edges: (0,10), [10,100), ..., [10000, inf).
LENGTH_BUCKET_EDGES = (10, 100, 1_000, 10_000)
LENGTH_BUCKET_LABELS = ("(0,10)", "[10,100)", "[100,1000)", "[1000,10000)", "[10000,inf)")


class ParseError(ValueError):
    """Structurally malformed input row (reported with its line number)."""


class ConfigError(ValueError):
    """Invalid column map or parameter configuration."""


@dataclass(frozen=True)
class Interaction:
    """One exercise record: a question attempt with its outcome and timing."""

    question_id: int
    skill_ids: tuple[int, ...]
    correct: int
    time_ms: int
    order_key: float = 0.0

    def __post_init__(self):
        if len(self.skill_ids) == 0:
            raise ValueError("skill_ids must be non-empty")
        if len(set(self.skill_ids)) != len(self.skill_ids):
            raise ValueError(f"skill_ids contains duplicates: {self.skill_ids}")
        if self.correct not in (0, 1):
            raise ValueError(f"correct must be 0 or 1, got {self.correct}")
        if self.time_ms < 0:
            raise ValueError(f"time_ms must be non-negative, got {self.time_ms}")
        object.__setattr__(self, "skill_ids", tuple(sorted(self.skill_ids)))


@dataclass
class StudentSequence:
    """All interactions of one student, in answering order."""

    student_id: str
    interactions: list[Interaction]

    def __len__(self) -> int:
        return len(self.interactions)


@dataclass
class Vocabulary:
    """Raw-id to dense-index maps shared by every split of a dataset."""

    questions: dict[str, int] = field(default_factory=dict)
    skills: dict[str, int] = field(default_factory=dict)

    @property
    def n_questions(self) -> int:
        return len(self.questions)

    @property
    def n_skills(self) -> int:
        return len(self.skills)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"questions": self.questions, "skills": self.skills}, fh, indent=1)

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(questions=dict(raw["questions"]), skills=dict(raw["skills"]))


@dataclass
class Dataset:
    """Parsed corpus: per-student sequences plus the shared vocabulary."""

    sequences: list[StudentSequence]
    vocab: Vocabulary
    rejected_rows: int = 0

    @property
    def n_students(self) -> int:
        return len(self.sequences)

    @property
    def n_records(self) -> int:
        return sum(len(s) for s in self.sequences)

    def replace_sequences(self, sequences: list[StudentSequence]) -> "Dataset":
        return Dataset(sequences=sequences, vocab=self.vocab, rejected_rows=self.rejected_rows)


@dataclass
class DatasetStats:
    n_students: int
    n_questions: int
    n_skills: int
    n_records: int
    correct_rate: float
    length_histogram: dict[str, float]  # bucket label -> share in percent


@dataclass
class ColumnMap:
    """Names of the raw-log columns and the delimiters used to parse them.

    ``order`` is optional; when absent, rows keep file order. The skill column
    holds one or more raw skill ids joined by ``skill_delimiter``.
    """

    student: str = "student_id"
    question: str = "question_id"
    skills: str = "skill_ids"
    correct: str = "correct"
    time: str = "time_ms"
    order: str | None = None
    skill_delimiter: str = ";"
    field_delimiter: str = ","

    def required_columns(self) -> list[str]:
        cols = [self.student, self.question, self.skills, self.correct, self.time]
        if self.order is not None:
            cols.append(self.order)
        return cols


CANONICAL_COLUMNS = ColumnMap()


def _open_source(source: str | Path | TextIO):
    if isinstance(source, (str, Path)):
        return open(source, encoding="utf-8", newline=""), True
    return source, False


def parse_interactions(source: str | Path | TextIO, columns: ColumnMap = CANONICAL_COLUMNS) -> Dataset:
    """Parse a delimited interaction log into per-student sequences.

    Question and skill ids are densified into contiguous 0-based indices in
    first-seen order; the mapping is returned in the dataset vocabulary. Rows
    whose correctness is not 0/1 (or whose time is negative) are rejected and
    counted, never silently dropped. Structurally broken rows raise
    :class:`ParseError` with the offending line number.
    """
    fh, owned = _open_source(source)
    try:
        reader = csv.DictReader(fh, delimiter=columns.field_delimiter, restval=None)
        if reader.fieldnames is None:
            raise ParseError("input has no header row")
        missing = [c for c in columns.required_columns() if c not in reader.fieldnames]
        if missing:
            raise ConfigError(f"columns not found in header: {missing}")

        vocab = Vocabulary()
        rejected = 0
        # student -> list of (order_key, file_index, Interaction)
        per_student: dict[str, list[tuple[float, int, Interaction]]] = {}
        for file_index, row in enumerate(reader):
            line_no = reader.line_num
            values = [row.get(c) for c in columns.required_columns()]
            if any(v is None for v in values) or row.get(None):
                raise ParseError(f"line {line_no}: wrong number of fields")
            try:
                correct = int(row[columns.correct])
                time_ms = int(float(row[columns.time]))
                order_key = float(row[columns.order]) if columns.order else float(file_index)
            except ValueError as exc:
                raise ParseError(f"line {line_no}: unparsable numeric field ({exc})") from None
            if correct not in (0, 1) or time_ms < 0:
                rejected += 1
                logger.debug("line %d rejected: correct=%r time_ms=%r", line_no, correct, time_ms)
                continue
            raw_skills = [s for s in row[columns.skills].split(columns.skill_delimiter) if s != ""]
            if not raw_skills:
                raise ParseError(f"line {line_no}: empty skill list")
            q_idx = vocab.questions.setdefault(row[columns.question], len(vocab.questions))
            skill_ids = []
            for s in raw_skills:
                idx = vocab.skills.setdefault(s, len(vocab.skills))
                if idx not in skill_ids:
                    skill_ids.append(idx)
            inter = Interaction(
                question_id=q_idx,
                skill_ids=tuple(skill_ids),
                correct=correct,
                time_ms=time_ms,
                order_key=order_key,
            )
            per_student.setdefault(row[columns.student], []).append((order_key, file_index, inter))
    finally:
        if owned:
            fh.close()

    sequences = []
    for student_id, rows in per_student.items():
        rows.sort(key=lambda r: r[0])  # stable: ties keep file order
        sequences.append(StudentSequence(student_id, [r[2] for r in rows]))
    if rejected:
        logger.warning("parse_interactions: rejected %d row(s)", rejected)
    return Dataset(sequences=sequences, vocab=vocab, rejected_rows=rejected)


def merge_multiskill_rows(seq: StudentSequence) -> StudentSequence:
    """Collapse consecutive rows that repeat one attempt once per skill.

    Some logs split a multi-skill question into one row per skill, all sharing
    the order key, question, correctness, and time. Such groups collapse to a
    single interaction whose skill set is the union. A group whose rows
    disagree on correctness is ambiguous source data and raises.
    """
    merged: list[Interaction] = []
    for inter in seq.interactions:
        prev = merged[-1] if merged else None
        if (
            prev is not None
            and prev.order_key == inter.order_key
            and prev.question_id == inter.question_id
            and prev.time_ms == inter.time_ms
        ):
            if prev.correct != inter.correct:
                raise ValueError(
                    f"student {seq.student_id}: duplicate rows for question "
                    f"{inter.question_id} at order {inter.order_key} disagree on correctness"
                )
            merged[-1] = Interaction(
                question_id=prev.question_id,
                skill_ids=tuple(set(prev.skill_ids) | set(inter.skill_ids)),
                correct=prev.correct,
                time_ms=prev.time_ms,
                order_key=prev.order_key,
            )
        else:
            merged.append(inter)
    return StudentSequence(seq.student_id, merged)


def filter_short_sequences(dataset: Dataset, min_interactions: int) -> Dataset:
    """Drop student sequences with fewer than ``min_interactions`` records."""
    if min_interactions < 0:
        raise ConfigError("min_interactions must be >= 0")
    kept = [s for s in dataset.sequences if len(s) >= min_interactions]
    if not kept:
        logger.warning("filter_short_sequences: no sequences of length >= %d remain", min_interactions)
    return dataset.replace_sequences(kept)


def split_cross_validation(
    dataset: Dataset, folds: int, seed: int
) -> list[tuple[Dataset, Dataset]]:
    """Partition students into ``folds`` disjoint test sets.

    The split is by student, never within a sequence. Fold sizes differ by at
    most one and the assignment is deterministic for a fixed seed.
    """
    if folds < 2:
        raise ConfigError("folds must be >= 2")
    if dataset.n_students < folds:
        raise ValueError(f"cannot split {dataset.n_students} students into {folds} folds")
    order = list(range(dataset.n_students))
    random.Random(seed).shuffle(order)
    n = len(order)
    base, extra = divmod(n, folds)
    partitions = []
    start = 0
    for i in range(folds):
        size = base + (1 if i < extra else 0)
        test_idx = set(order[start : start + size])
        start += size
        train = [dataset.sequences[j] for j in range(n) if j not in test_idx]
        test = [dataset.sequences[j] for j in range(n) if j in test_idx]
        partitions.append((dataset.replace_sequences(train), dataset.replace_sequences(test)))
    return partitions


def compute_dataset_stats(dataset: Dataset) -> DatasetStats:
    """Aggregate corpus-level counts, correct rate, and the length histogram."""
    if dataset.n_students == 0:
        raise ValueError("cannot compute stats of an empty dataset")
    n_records = dataset.n_records
    n_correct = sum(i.correct for s in dataset.sequences for i in s.interactions)
    counts = [0] * len(LENGTH_BUCKET_LABELS)
    for s in dataset.sequences:
        counts[_length_bucket(len(s))] += 1
    hist = {
        label: 100.0 * c / dataset.n_students for label, c in zip(LENGTH_BUCKET_LABELS, counts)
    }
    return DatasetStats(
        n_students=dataset.n_students,
        n_questions=dataset.vocab.n_questions,
        n_skills=dataset.vocab.n_skills,
        n_records=n_records,
        correct_rate=n_correct / n_records if n_records else math.nan,
        length_histogram=hist,
    )


def _length_bucket(length: int) -> int:
    for i, edge in enumerate(LENGTH_BUCKET_EDGES):
        if length < edge:
            return i
    return len(LENGTH_BUCKET_EDGES)


def save_dataset(dataset: Dataset, path: str | Path) -> Path:
    """Write the canonical dataset file plus its vocabulary sidecar.

    One record per line: student id, dense question index, ';'-joined dense
    skill indices, correctness, time in ms. The sidecar lives at
    ``<path>.vocab.json``.
    """
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["student_id", "question_id", "skill_ids", "correct", "time_ms"])
        for seq in dataset.sequences:
            for inter in seq.interactions:
                writer.writerow(
                    [
                        seq.student_id,
                        inter.question_id,
                        ";".join(str(s) for s in inter.skill_ids),
                        inter.correct,
                        inter.time_ms,
                    ]
                )
    dataset.vocab.save(vocab_sidecar_path(path))
    return path


def vocab_sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".vocab.json")


def load_dataset(path: str | Path) -> Dataset:
    """Read a canonical dataset file written by :func:`save_dataset`.

    Indices in the file are already dense, so they are trusted as-is instead
    of being re-densified (which would renumber them by first appearance).
    """
    path = Path(path)
    vocab = Vocabulary.load(vocab_sidecar_path(path))
    sequences: dict[str, StudentSequence] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for file_index, row in enumerate(reader):
            inter = Interaction(
                question_id=int(row["question_id"]),
                skill_ids=tuple(int(s) for s in row["skill_ids"].split(";")),
                correct=int(row["correct"]),
                time_ms=int(row["time_ms"]),
                order_key=float(file_index),
            )
            if inter.question_id >= vocab.n_questions or any(
                s >= vocab.n_skills for s in inter.skill_ids
            ):
                raise ParseError(f"line {reader.line_num}: index outside vocabulary")
            seq = sequences.setdefault(row["student_id"], StudentSequence(row["student_id"], []))
            seq.interactions.append(inter)
    return Dataset(sequences=list(sequences.values()), vocab=vocab)
