"""Alternate token sequences and overlapping sliding windows.

Each interaction becomes a (question, response) token pair, so a sequence of n
interactions yields 2n tokens with questions at even indices. Windows are
fixed-length slices of that stream; consecutive windows overlap by a
configurable ratio, and evaluation windows additionally carry a freshness mask
so every interaction is scored exactly once despite the overlaps.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field

from .data import ConfigError, Interaction, StudentSequence

DEFAULT_TIME_FACTOR = 60_000.0  # ms; divides clipped response times
DEFAULT_TIME_CLIP = 200_000.0  # ms; upper clip before normalization


class TokenKind(enum.IntEnum):
    QUESTION = 0
    RESPONSE = 1
    PAD = 2


@dataclass(frozen=True)
class Token:
    kind: TokenKind
    question_id: int = -1
    skill_ids: tuple[int, ...] = ()
    correct: int = -1
    time_norm: float = 0.0
    # Correctness supervising the question position: the model's output at a
    # question token predicts the response that follows it.
    label: int = -1


PAD_TOKEN = Token(kind=TokenKind.PAD)


@dataclass
class Window:
    """A fixed-length slice of one student's token stream.

    ``tokens`` always has length ``size`` with PAD at the tail; ``attn_len``
    counts the real tokens. ``fresh_mask`` has one flag per question slot
    (token index ``2 * slot``) and marks the slots this window is the first
    to cover.
    """

    tokens: list[Token]
    attn_len: int
    fresh_mask: list[bool]
    student_id: str = ""
    start: int = 0

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def n_slots(self) -> int:
        return len(self.tokens) // 2

    @property
    def n_valid_slots(self) -> int:
        return self.attn_len // 2


@dataclass
class Batch:
    windows: list[Window]
    provenance: list[tuple[str, int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.provenance:
            self.provenance = [(w.student_id, w.start) for w in self.windows]
        sizes = {w.size for w in self.windows}
        if len(sizes) > 1:
            raise ValueError(f"windows in a batch must share a size, got {sizes}")

    def __len__(self) -> int:
        return len(self.windows)


def normalize_time(time_ms: float, time_factor: float = DEFAULT_TIME_FACTOR,
                   time_clip: float = DEFAULT_TIME_CLIP) -> float:
    """Clip the response time, then divide by the normalization constant."""
    if time_factor <= 0 or time_clip <= 0:
        raise ConfigError("time_factor and time_clip must be positive")
    return min(time_ms, time_clip) / time_factor


def build_alternate_sequence(
    seq: StudentSequence,
    time_factor: float = DEFAULT_TIME_FACTOR,
    time_clip: float = DEFAULT_TIME_CLIP,
) -> list[Token]:
    """Interleave one student's interactions into [Q1, R1, Q2, R2, ...]."""
    tokens: list[Token] = []
    for inter in seq.interactions:
        tokens.append(
            Token(
                kind=TokenKind.QUESTION,
                question_id=inter.question_id,
                skill_ids=inter.skill_ids,
                label=inter.correct,
            )
        )
        tokens.append(
            Token(
                kind=TokenKind.RESPONSE,
                correct=inter.correct,
                time_norm=normalize_time(inter.time_ms, time_factor, time_clip),
            )
        )
    return tokens


def reconstruct_interactions(
    tokens: list[Token], time_factor: float = DEFAULT_TIME_FACTOR
) -> list[Interaction]:
    """Invert :func:`build_alternate_sequence` (times come back post-clipping)."""
    if len(tokens) % 2:
        raise ValueError("alternate sequence must have even length")
    out = []
    for k in range(len(tokens) // 2):
        q, r = tokens[2 * k], tokens[2 * k + 1]
        if q.kind is not TokenKind.QUESTION or r.kind is not TokenKind.RESPONSE:
            raise ValueError(f"tokens at {2 * k} do not alternate question/response")
        out.append(
            Interaction(
                question_id=q.question_id,
                skill_ids=q.skill_ids,
                correct=r.correct,
                time_ms=round(r.time_norm * time_factor),
                order_key=float(k),
            )
        )
    return out


def window_step(max_len: int, overlap_ratio: float) -> int:
    """Advance per window: ``max_len * (1 - overlap_ratio)``, which must be a
    positive even integer so windows never split a question/response pair."""
    if not 0.0 <= overlap_ratio < 1.0:
        raise ConfigError(f"overlap_ratio must be in [0, 1), got {overlap_ratio}")
    if max_len <= 0 or max_len % 2:
        raise ConfigError(f"max_len must be a positive even integer, got {max_len}")
    step_f = max_len * (1.0 - overlap_ratio)
    step = round(step_f)
    if abs(step_f - step) > 1e-9 or step <= 0 or step % 2:
        raise ConfigError(
            f"max_len * (1 - overlap_ratio) = {step_f} must be a positive even integer"
        )
    return step


def _cut_windows(tokens: list[Token], max_len: int, step: int, student_id: str) -> list[Window]:
    windows = []
    n = len(tokens)
    # A sequence that fits inside one window yields exactly that window;
    # further starts would only re-cover tokens without adding any.
    starts = [0] if n <= max_len else range(0, n, step)
    for start in starts:
        chunk = tokens[start : start + max_len]
        attn_len = len(chunk)
        chunk = chunk + [PAD_TOKEN] * (max_len - attn_len)
        windows.append(
            Window(
                tokens=chunk,
                attn_len=attn_len,
                fresh_mask=[False] * (max_len // 2),
                student_id=student_id,
                start=start,
            )
        )
    return windows


def window_train(
    tokens: list[Token], max_len: int, overlap_ratio: float, student_id: str = ""
) -> list[Window]:
    """Cut overlapping training windows; the tail past the sequence is PAD.

    Starts advance by the window step while they fall inside the sequence, so
    every token is covered at least once and the loss mask (``attn_len``)
    hides the padded remainder. Fresh flags are all-true in training: overlaps
    deliberately repeat data here.
    """
    step = window_step(max_len, overlap_ratio)
    windows = _cut_windows(tokens, max_len, step, student_id)
    for w in windows:
        w.fresh_mask = [i < w.n_valid_slots for i in range(w.n_slots)]
    return windows


def window_eval(
    tokens: list[Token], max_len: int, overlap_ratio: float, student_id: str = ""
) -> list[Window]:
    """Cut evaluation windows where each interaction is fresh exactly once.

    A question slot is fresh only in the first window that covers it; later
    windows see it again purely as context, so summing fresh slots over all
    windows reproduces the interaction count with no duplicates.
    """
    step = window_step(max_len, overlap_ratio)
    windows = _cut_windows(tokens, max_len, step, student_id)
    covered = 0  # tokens [0, covered) already belong to an earlier window
    for w in windows:
        for slot in range(w.n_valid_slots):
            w.fresh_mask[slot] = w.start + 2 * slot >= covered
        covered = max(covered, w.start + w.attn_len)
    return windows


def dataset_growth_ratio(before: int, after: int) -> float:
    """Window-count growth from overlap; roughly 1/(1 - overlap_ratio) on
    corpora of long sequences."""
    if before == 0:
        raise ValueError("window count without overlap is zero")
    return after / before


def pad_and_batch(
    windows: list[Window], batch_size: int, shuffle_seed: int | None = None
) -> list[Batch]:
    """Group windows into batches of at most ``batch_size``.

    With a seed the window order is shuffled deterministically (training);
    without one the corpus order is kept (evaluation).
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    ordered = list(windows)
    if shuffle_seed is not None:
        random.Random(shuffle_seed).shuffle(ordered)
    return [
        Batch(windows=ordered[i : i + batch_size]) for i in range(0, len(ordered), batch_size)
    ]
