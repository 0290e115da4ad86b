"""Loss computation, optimization loop, and cross-validation orchestration."""

from __future__ import annotations

import copy
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import ConfigError, Dataset, StudentSequence, split_cross_validation
from . import metrics as metrics_mod
from .model import AAKTModel, ModelConfig, collate_windows, save_checkpoint
from .sequencing import (
    DEFAULT_TIME_CLIP,
    DEFAULT_TIME_FACTOR,
    build_alternate_sequence,
    pad_and_batch,
    window_train,
)

logger = logging.getLogger(__name__)

BCE_CLAMP = 1e-7
KL_CLAMP = 1e-12


class TrainingAborted(RuntimeError):
    """Raised when too many optimization steps produced non-finite gradients."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    max_seq_len: int = 100  # in alternate tokens, i.e. 2x interactions
    overlap_ratio: float = 0.5
    eval_overlap_ratio: float | None = None  # defaults to overlap_ratio
    time_factor: float = DEFAULT_TIME_FACTOR
    time_clip: float = DEFAULT_TIME_CLIP
    deterministic: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")

    @property
    def eval_ratio(self) -> float:
        return self.overlap_ratio if self.eval_overlap_ratio is None else self.eval_overlap_ratio


@dataclass
class LossBreakdown:
    pred_loss: float
    aux_loss: float
    total: float


@dataclass
class EpochStats:
    losses: LossBreakdown
    n_steps: int
    skipped_steps: int


def bce_loss(probs: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over masked positions.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs. The mask
    selects real (non-PAD) question positions; overlap freshness is never
    applied here, training deliberately repeats overlapped data.
    """
    if not mask.any():
        raise ValueError("bce_loss needs at least one unmasked position")
    p = probs[mask].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    c = labels[mask]
    return -(c * torch.log(p) + (1.0 - c) * torch.log(1.0 - p)).mean()


def kl_aux_loss(
    true_dists: torch.Tensor, pred_dists: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Mean KL(true || predicted) over masked question positions.

    Terms with zero true mass contribute nothing; predicted mass is clamped
    at 1e-12 (and flagged) so degenerate predictions stay finite.
    """
    if not mask.any():
        raise ValueError("kl_aux_loss needs at least one unmasked position")
    p = true_dists[mask]
    q = pred_dists[mask]
    if bool((q[p > 0] < KL_CLAMP).any()):
        logger.warning("kl_aux_loss: predicted mass ~0 where true mass > 0; clamping at %g", KL_CLAMP)
    q = q.clamp_min(KL_CLAMP)
    terms = torch.where(p > 0, p * (torch.log(p.clamp_min(KL_CLAMP)) - torch.log(q)), p.new_zeros(()))
    return terms.sum(dim=-1).mean()


def total_loss(pred_loss: torch.Tensor | float, aux_loss: torch.Tensor | float) -> LossBreakdown:
    """Unweighted sum of the prediction and auxiliary components."""
    pred = float(pred_loss)
    aux = float(aux_loss)
    total = pred + aux
    if not np.isfinite(total):
        raise FloatingPointError(f"non-finite loss: pred={pred} aux={aux}")
    return LossBreakdown(pred_loss=pred, aux_loss=aux, total=total)


def batch_loss(model: AAKTModel, tensors: dict[str, torch.Tensor]) -> tuple[torch.Tensor, LossBreakdown]:
    """Forward a collated batch and build its loss (tensor + float breakdown)."""
    out = model(tensors)
    mask = tensors["q_valid"]
    pred = bce_loss(out.probs, tensors["labels"], mask)
    if out.aux_probs is not None:
        aux = kl_aux_loss(tensors["skill_dist"], out.aux_probs, mask)
        loss = pred + aux
    else:
        aux = torch.zeros((), dtype=pred.dtype)
        loss = pred
    return loss, total_loss(pred.detach(), aux.detach())


def train_epoch(
    model: AAKTModel,
    optimizer: torch.optim.Optimizer,
    batches: list[dict[str, torch.Tensor]],
    seed: int,
    epoch: int,
) -> EpochStats:
    """Run one optimization pass over pre-collated batches.

    Batch order is reshuffled deterministically from (seed, epoch). Steps with
    non-finite gradients are skipped and counted; more than 1% skipped aborts.
    """
    model.train()
    order = list(range(len(batches)))
    random.Random(seed * 1_000_003 + epoch).shuffle(order)
    sums = np.zeros(3)
    skipped = 0
    for idx in order:
        optimizer.zero_grad()
        loss, breakdown = batch_loss(model, batches[idx])
        loss.backward()
        finite = all(
            p.grad is None or bool(torch.isfinite(p.grad).all()) for p in model.parameters()
        )
        if not finite:
            skipped += 1
            optimizer.zero_grad()
            continue
        optimizer.step()
        sums += (breakdown.pred_loss, breakdown.aux_loss, breakdown.total)
    n_steps = len(order) - skipped
    if skipped > 0.01 * len(order):
        raise TrainingAborted(f"{skipped}/{len(order)} steps had non-finite gradients")
    if skipped:
        logger.warning("train_epoch: skipped %d step(s) with non-finite gradients", skipped)
    mean = sums / max(n_steps, 1)
    return EpochStats(
        losses=LossBreakdown(pred_loss=mean[0], aux_loss=mean[1], total=mean[2]),
        n_steps=n_steps,
        skipped_steps=skipped,
    )


def build_training_batches(
    sequences: list[StudentSequence], model_cfg: ModelConfig, cfg: TrainConfig
) -> list[dict[str, torch.Tensor]]:
    """Window every sequence, batch the windows, and collate once up front."""
    windows = []
    for seq in sequences:
        tokens = build_alternate_sequence(seq, cfg.time_factor, cfg.time_clip)
        windows.extend(window_train(tokens, cfg.max_seq_len, cfg.overlap_ratio, seq.student_id))
    batches = pad_and_batch(windows, cfg.batch_size, shuffle_seed=cfg.seed)
    return [collate_windows(b.windows, model_cfg.n_skills) for b in batches]


class ModelScorer:
    """Batched window scorer: windows in, per-slot correctness probabilities out."""

    def __init__(self, model: AAKTModel, batch_size: int = 128):
        self.model = model
        self.batch_size = batch_size

    @torch.no_grad()
    def __call__(self, windows) -> np.ndarray:
        self.model.eval()
        chunks = []
        for batch in pad_and_batch(list(windows), self.batch_size):
            tensors = collate_windows(batch.windows, self.model.cfg.n_skills)
            chunks.append(self.model(tensors).probs.numpy())
        return np.concatenate(chunks, axis=0)


class CachedEvalSet:
    """Evaluation windows collated once; per-epoch scoring reuses the tensors."""

    def __init__(self, sequences: list[StudentSequence], model_cfg: ModelConfig,
                 cfg: TrainConfig, batch_size: int = 128):
        self._windows: list = []
        self.records = metrics_mod.collect_predictions(
            self._remember_windows, sequences,
            max_len=cfg.max_seq_len, overlap_ratio=cfg.eval_ratio,
            time_factor=cfg.time_factor, time_clip=cfg.time_clip,
        )
        self.batches = [
            collate_windows(b.windows, model_cfg.n_skills)
            for b in pad_and_batch(self._windows, batch_size)
        ]

    def _remember_windows(self, windows) -> np.ndarray:
        self._windows = list(windows)
        # Placeholder probabilities; real ones are filled in by score().
        return np.zeros((len(windows), windows[0].n_slots))

    @torch.no_grad()
    def score(self, model: AAKTModel) -> list[metrics_mod.PredictionRecord]:
        model.eval()
        probs = []
        for tensors in self.batches:
            out = model(tensors).probs.numpy()
            valid = tensors["q_valid"].numpy()
            for row, mask in zip(out, valid):
                probs.extend(row[mask])
        assert len(probs) == len(self.records)
        return [
            metrics_mod.PredictionRecord(
                student_id=r.student_id,
                interaction_index=r.interaction_index,
                position_in_window=r.position_in_window,
                prob=float(p),
                label=r.label,
                fresh=r.fresh,
            )
            for r, p in zip(self.records, probs)
        ]


@dataclass
class FoldResult:
    fold: int
    report: metrics_mod.MetricReport | None
    best_epoch: int = -1
    epochs_run: int = 0
    checkpoint: str | None = None
    failed: bool = False
    error: str = ""


@dataclass
class FitReport:
    folds: list[FoldResult]
    mean_auc: float | None
    mean_acc: float | None
    mean_rmse: float | None
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "mean_auc": self.mean_auc,
            "mean_acc": self.mean_acc,
            "mean_rmse": self.mean_rmse,
            "config": self.config,
            "folds": [
                {
                    "fold": f.fold,
                    "failed": f.failed,
                    "error": f.error,
                    "best_epoch": f.best_epoch,
                    "epochs_run": f.epochs_run,
                    "checkpoint": f.checkpoint,
                    "report": None if f.report is None else f.report.to_dict(),
                }
                for f in self.folds
            ],
        }
        return json.dumps(payload, indent=1)


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def train_single(
    train_seqs: list[StudentSequence],
    val_seqs: list[StudentSequence],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    log_file: Path | None = None,
    fold: int = 0,
) -> tuple[AAKTModel, metrics_mod.MetricReport, int, int]:
    """Train one model with early stopping on validation AUC.

    Returns (best model, its validation report, best epoch, epochs run).
    """
    seed_everything(cfg.seed + fold, cfg.deterministic)
    model = AAKTModel(model_cfg)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8
    )
    batches = build_training_batches(train_seqs, model_cfg, cfg)
    eval_set = CachedEvalSet(val_seqs, model_cfg, cfg)

    best_auc = -float("inf")
    best_state = copy.deepcopy(model.state_dict())
    best_epoch = -1
    epochs_without_gain = 0
    log_fh = open(log_file, "a", encoding="utf-8") if log_file else None
    epoch = 0
    try:
        for epoch in range(cfg.max_epochs):
            stats = train_epoch(model, optimizer, batches, cfg.seed + fold, epoch)
            val_auc = metrics_mod.auc(eval_set.score(model))
            entry = {
                "fold": fold,
                "epoch": epoch,
                "pred_loss": stats.losses.pred_loss,
                "aux_loss": stats.losses.aux_loss,
                "val_auc": val_auc,
            }
            logger.info(
                "fold %d epoch %d: pred=%.4f aux=%.4f val_auc=%s",
                fold, epoch, stats.losses.pred_loss, stats.losses.aux_loss,
                "n/a" if val_auc is None else f"{val_auc:.4f}",
            )
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
            if val_auc is not None and val_auc > best_auc:
                best_auc = val_auc
                best_state = copy.deepcopy(model.state_dict())
                best_epoch = epoch
                epochs_without_gain = 0
            else:
                epochs_without_gain += 1
                if epochs_without_gain >= cfg.patience:
                    break
    finally:
        if log_fh:
            log_fh.close()
    model.load_state_dict(best_state)
    report = metrics_mod.compute_report(eval_set.score(model), cfg.max_seq_len)
    return model, report, best_epoch, epoch + 1


def fit(
    dataset: Dataset,
    model_cfg_base: dict,
    cfg: TrainConfig,
    folds: int = 5,
    out_dir: Path | None = None,
) -> FitReport:
    """Cross-validated training: one model per fold, best checkpoint kept.

    A fold that aborts is marked failed; the remaining folds still run.
    """
    partitions = split_cross_validation(dataset, folds, cfg.seed)
    model_cfg = ModelConfig(
        n_questions=dataset.vocab.n_questions, n_skills=dataset.vocab.n_skills, **model_cfg_base
    )
    if out_dir is not None:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    log_file = out_dir / "train_log.jsonl" if out_dir else None
    if log_file and log_file.exists():
        log_file.unlink()

    results = []
    for fold, (train_split, val_split) in enumerate(partitions):
        try:
            model, report, best_epoch, epochs_run = train_single(
                train_split.sequences, val_split.sequences, model_cfg, cfg,
                log_file=log_file, fold=fold,
            )
            ckpt = None
            if out_dir is not None:
                ckpt = str(save_checkpoint(model, out_dir / "checkpoints" / f"fold{fold}.npz"))
            results.append(
                FoldResult(fold=fold, report=report, best_epoch=best_epoch,
                           epochs_run=epochs_run, checkpoint=ckpt)
            )
        except TrainingAborted as exc:
            logger.error("fold %d aborted: %s", fold, exc)
            results.append(FoldResult(fold=fold, report=None, failed=True, error=str(exc)))

    def _mean(attr):
        vals = [getattr(r.report, attr) for r in results if r.report and getattr(r.report, attr) is not None]
        return float(np.mean(vals)) if vals else None

    return FitReport(
        folds=results,
        mean_auc=_mean("auc"),
        mean_acc=_mean("acc"),
        mean_rmse=_mean("rmse"),
        config={"model": model_cfg_base, "train": vars(cfg).copy(), "folds": folds},
    )
