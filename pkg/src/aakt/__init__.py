"""Alternate autoregressive knowledge tracing.

Student exercise logs become interleaved question/response token sequences; a
causal decoder predicts the correctness of each response from everything that
came before it, with skill labels injected through an auxiliary task and
response times folded into the response embeddings.
"""

__version__ = "0.1.0"

from .data import (
    ColumnMap,
    Dataset,
    DatasetStats,
    Interaction,
    StudentSequence,
    Vocabulary,
    compute_dataset_stats,
    filter_short_sequences,
    load_dataset,
    merge_multiskill_rows,
    parse_interactions,
    save_dataset,
    split_cross_validation,
)
from .estimator import AAKTClassifier, check_sequences
from .metrics import (
    MetricReport,
    PredictionRecord,
    acc,
    auc,
    collect_predictions,
    compute_report,
    metric_correlations,
    overlap_ratio_sweep,
    per_position_auc,
    rmse,
    smoothed_auc,
)
from .model import (
    AAKTModel,
    ForwardOutput,
    ModelConfig,
    collate_windows,
    load_checkpoint,
    predict_prob,
    rope_rotate,
    save_checkpoint,
    true_skill_distribution,
)
from .sequencing import (
    Batch,
    Token,
    TokenKind,
    Window,
    build_alternate_sequence,
    dataset_growth_ratio,
    pad_and_batch,
    reconstruct_interactions,
    window_eval,
    window_train,
)
from .synth import SynthConfig, SynthResult, generate
from .training import (
    FitReport,
    LossBreakdown,
    ModelScorer,
    TrainConfig,
    TrainingAborted,
    bce_loss,
    fit,
    kl_aux_loss,
    total_loss,
    train_epoch,
    train_single,
)

__all__ = [name for name in dir() if not name.startswith("_")]
