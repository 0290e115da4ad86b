"""Synthetic student logs with known generative ground truth.

Students carry a latent per-skill mastery state: initially mastered with
probability p_init, and each attempt on a question teaches every unmastered
skill it touches with probability p_learn (mastery never decays). A response
is correct with probability 1 - p_slip when all of the question's skills are
mastered, else p_guess, so multi-skill questions need the full conjunction.
Response times are log-normal, conditioned on correctness. Because the true
per-record correctness probability is known, the generator also yields the
AUC of the generative probabilities, an upper bound no learned model should
beat systematically.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, Interaction, StudentSequence, Vocabulary, save_dataset
from .metrics import auc_from_arrays


@dataclass
class SynthConfig:
    n_students: int = 500
    n_questions: int = 50
    n_skills: int = 5
    # P(question has 1 skill), P(2 skills), ... ; must sum to 1.
    skills_per_question: tuple[float, ...] = (0.8, 0.2)
    p_init: float | Sequence[float] = 0.3
    p_learn: float | Sequence[float] = 0.15
    p_guess: float | Sequence[float] = 0.2
    p_slip: float | Sequence[float] = 0.1
    min_len: int = 40
    max_len: int = 120
    # Log-normal time model (natural-log ms), per correctness.
    time_log_mean_correct: float = 10.1
    time_log_sigma_correct: float = 0.5
    time_log_mean_wrong: float = 10.8
    time_log_sigma_wrong: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.skills_per_question) - 1.0) > 1e-9:
            raise ValueError("skills_per_question probabilities must sum to 1")
        if len(self.skills_per_question) > self.n_skills:
            raise ValueError("cannot assign more skills per question than exist")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        for name in ("p_init", "p_learn", "p_guess", "p_slip"):
            arr = self._per_skill(name)
            if arr.min() < 0 or arr.max() > 1:
                raise ValueError(f"{name} must lie in [0, 1]")

    def _per_skill(self, name: str) -> np.ndarray:
        value = getattr(self, name)
        arr = np.broadcast_to(np.asarray(value, dtype=np.float64), (self.n_skills,))
        return np.array(arr)


@dataclass
class SynthResult:
    dataset: Dataset
    # student_id -> per-interaction generative probability of a correct answer
    true_probs: dict[str, list[float]] = field(default_factory=dict)
    # student_id -> per-interaction mastery bitstring over all skills
    mastery: dict[str, list[str]] = field(default_factory=dict)

    def bayes_optimal_auc(self) -> float | None:
        labels, probs = [], []
        for seq in self.dataset.sequences:
            per_student = self.true_probs[seq.student_id]
            for inter, p in zip(seq.interactions, per_student):
                labels.append(inter.correct)
                probs.append(p)
        return auc_from_arrays(np.asarray(labels, dtype=np.float64), np.asarray(probs))

    def save(self, path: str | Path) -> Path:
        """Canonical dataset file plus a ground-truth sidecar CSV."""
        path = Path(path)
        save_dataset(self.dataset, path)
        with open(truth_sidecar_path(path), "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["student_id", "step", "true_prob", "mastery"])
            for seq in self.dataset.sequences:
                for step, (p, m) in enumerate(
                    zip(self.true_probs[seq.student_id], self.mastery[seq.student_id])
                ):
                    writer.writerow([seq.student_id, step, p, m])
        return path


def truth_sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".truth.csv")


def generate(config: SynthConfig) -> SynthResult:
    """Simulate the configured population; byte-identical for a fixed seed."""
    root = np.random.SeedSequence(config.seed)
    master = np.random.default_rng(root.spawn(1)[0])
    student_seeds = root.spawn(config.n_students)

    p_init = config._per_skill("p_init")
    p_learn = config._per_skill("p_learn")
    p_guess = config._per_skill("p_guess")
    p_slip = config._per_skill("p_slip")

    counts = master.choice(
        np.arange(1, len(config.skills_per_question) + 1),
        size=config.n_questions,
        p=np.asarray(config.skills_per_question),
    )
    question_skills = [
        tuple(sorted(master.choice(config.n_skills, size=int(c), replace=False)))
        for c in counts
    ]

    sequences = []
    true_probs: dict[str, list[float]] = {}
    mastery_log: dict[str, list[str]] = {}
    for s, seed_seq in enumerate(student_seeds):
        rng = np.random.default_rng(seed_seq)
        student_id = f"s{s:05d}"
        length = int(rng.integers(config.min_len, config.max_len + 1))
        mastered = rng.random(config.n_skills) < p_init
        interactions = []
        probs = []
        trail = []
        for step in range(length):
            q = int(rng.integers(config.n_questions))
            skills = question_skills[q]
            knows_all = all(mastered[k] for k in skills)
            if knows_all:
                p_correct = 1.0 - float(np.mean([p_slip[k] for k in skills]))
            else:
                p_correct = float(np.mean([p_guess[k] for k in skills]))
            correct = int(rng.random() < p_correct)
            if correct:
                mu, sigma = config.time_log_mean_correct, config.time_log_sigma_correct
            else:
                mu, sigma = config.time_log_mean_wrong, config.time_log_sigma_wrong
            time_ms = int(round(rng.lognormal(mu, sigma)))
            interactions.append(
                Interaction(
                    question_id=q,
                    skill_ids=skills,
                    correct=correct,
                    time_ms=max(time_ms, 0),
                    order_key=float(step),
                )
            )
            probs.append(p_correct)
            trail.append("".join("1" if m else "0" for m in mastered))
            for k in skills:
                if not mastered[k] and rng.random() < p_learn[k]:
                    mastered[k] = True
        sequences.append(StudentSequence(student_id, interactions))
        true_probs[student_id] = probs
        mastery_log[student_id] = trail

    vocab = Vocabulary(
        questions={str(q): q for q in range(config.n_questions)},
        skills={str(k): k for k in range(config.n_skills)},
    )
    dataset = Dataset(sequences=sequences, vocab=vocab)
    return SynthResult(dataset=dataset, true_probs=true_probs, mastery=mastery_log)
