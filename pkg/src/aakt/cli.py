"""Command-line entry point for the full pipeline.

Subcommands: preprocess, synth, stats, train, eval, sweep, export-attention,
export-embeddings. Every run writes a manifest (arguments, config hash, seed,
library versions) next to its outputs so results can be traced and reruns
with identical inputs are byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import data as data_mod
from . import metrics as metrics_mod
from . import synth as synth_mod
from .model import AAKTModel, collate_windows, load_checkpoint
from .sequencing import build_alternate_sequence, pad_and_batch, window_eval
from .training import FitReport, ModelScorer, TrainConfig, fit, seed_everything

logger = logging.getLogger("aakt")

MODEL_FLAGS = ("dim", "n_blocks", "n_heads", "dropout", "skill_mode")
TRAIN_FLAGS = (
    "learning_rate", "batch_size", "max_epochs", "patience", "seed",
    "max_seq_len", "overlap_ratio", "time_factor", "time_clip",
)


def write_manifest(out_dir: Path, command: str, config: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    config = {k: v for k, v in config.items() if not callable(v)}
    canonical = json.dumps(config, sort_keys=True)
    manifest = {
        "command": command,
        "config": config,
        "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
        "seed": config.get("seed"),
        "versions": {
            "aakt": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _columns_from_args(args) -> data_mod.ColumnMap:
    return data_mod.ColumnMap(
        student=args.student_col,
        question=args.question_col,
        skills=args.skill_col,
        correct=args.correct_col,
        time=args.time_col,
        order=args.order_col,
        skill_delimiter=args.skill_delim,
        field_delimiter="\t" if args.format == "tsv" else ",",
    )


def cmd_preprocess(args) -> int:
    dataset = data_mod.parse_interactions(args.input, _columns_from_args(args))
    if args.merge_duplicates:
        dataset = dataset.replace_sequences(
            [data_mod.merge_multiskill_rows(s) for s in dataset.sequences]
        )
    dataset = data_mod.filter_short_sequences(dataset, args.min_len)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    data_mod.save_dataset(dataset, out_dir / "dataset.csv")
    if args.folds:
        partitions = data_mod.split_cross_validation(dataset, args.folds, args.seed)
        folds = [[s.student_id for s in test.sequences] for _, test in partitions]
        with open(out_dir / "folds.json", "w", encoding="utf-8") as fh:
            json.dump(folds, fh, indent=1)
    print(_format_stats(data_mod.compute_dataset_stats(dataset)))
    print(f"rejected rows: {dataset.rejected_rows}")
    write_manifest(out_dir, "preprocess", vars(args).copy())
    return 0


def cmd_synth(args) -> int:
    config = synth_mod.SynthConfig(**_load_config_file(args.config))
    if args.seed is not None:
        config.seed = args.seed
    result = synth_mod.generate(config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.save(out)
    bayes = result.bayes_optimal_auc()
    print(f"wrote {out} ({result.dataset.n_students} students, "
          f"{result.dataset.n_records} records, generative AUC "
          f"{'n/a' if bayes is None else f'{bayes:.4f}'})")
    write_manifest(out.parent, "synth", {**asdict(config), "out": str(out)})
    return 0


def _format_stats(stats: data_mod.DatasetStats) -> str:
    lines = [
        f"students:   {stats.n_students}",
        f"questions:  {stats.n_questions}",
        f"skills:     {stats.n_skills}",
        f"records:    {stats.n_records}",
        f"correct:    {100 * stats.correct_rate:.2f}%",
        "sequence length distribution:",
    ]
    for label, share in stats.length_histogram.items():
        lines.append(f"  {label:<14} {share:6.2f}%")
    return "\n".join(lines)


def cmd_stats(args) -> int:
    dataset = data_mod.load_dataset(args.data)
    print(_format_stats(data_mod.compute_dataset_stats(dataset)))
    return 0


def cmd_train(args) -> int:
    dataset = data_mod.load_dataset(args.data)
    if args.min_len:
        dataset = data_mod.filter_short_sequences(dataset, args.min_len)
    overrides = _load_config_file(args.config)
    model_cfg = {k: getattr(args, k) for k in MODEL_FLAGS}
    model_cfg.update({k: v for k, v in overrides.items() if k in MODEL_FLAGS})
    train_kwargs = {k: getattr(args, k) for k in TRAIN_FLAGS}
    train_kwargs.update({k: v for k, v in overrides.items() if k in TRAIN_FLAGS})
    cfg = TrainConfig(**train_kwargs)

    out_dir = Path(args.out)
    (out_dir / "metrics").mkdir(parents=True, exist_ok=True)
    report = fit(dataset, model_cfg, cfg, folds=args.folds, out_dir=out_dir)
    with open(out_dir / "metrics" / "report.json", "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    write_manifest(out_dir, "train", {"model": model_cfg, **train_kwargs, "folds": args.folds,
                                      "data": str(args.data)})
    print(f"mean AUC: {report.mean_auc}")
    failed = [f.fold for f in report.folds if f.failed]
    return 1 if failed else 0


def _load_eval_inputs(args):
    model = load_checkpoint(args.checkpoint)
    dataset = data_mod.load_dataset(args.data)
    return model, dataset


def cmd_eval(args) -> int:
    model, dataset = _load_eval_inputs(args)
    seed_everything(args.seed)
    records = metrics_mod.collect_predictions(
        ModelScorer(model, args.batch_size),
        dataset.sequences,
        max_len=args.max_seq_len,
        overlap_ratio=args.overlap_ratio,
        time_factor=model.cfg.time_factor,
        time_clip=model.cfg.time_clip,
    )
    report = metrics_mod.compute_report(records, args.max_seq_len)
    out_dir = Path(args.out)
    metrics_dir = out_dir / "metrics"
    metrics_dir.mkdir(parents=True, exist_ok=True)
    report.save(metrics_dir / "report.json")
    metrics_mod.write_series_csv(
        metrics_dir / "per_position_auc.csv", report.per_position_auc, "auc"
    )
    metrics_mod.write_series_csv(metrics_dir / "smoothed_auc.csv", report.smoothed_auc, "auc")
    write_manifest(out_dir, "eval", vars(args).copy())
    print(f"auc={report.auc} acc={report.acc:.4f} rmse={report.rmse:.4f}")
    return 0


def cmd_sweep(args) -> int:
    model, dataset = _load_eval_inputs(args)
    seed_everything(args.seed)
    ratios = [float(r) for r in args.ratios.split(",")]
    pairs = metrics_mod.overlap_ratio_sweep(
        ModelScorer(model, args.batch_size),
        dataset.sequences,
        ratios,
        max_len=args.max_seq_len,
        time_factor=model.cfg.time_factor,
        time_clip=model.cfg.time_clip,
    )
    out_dir = Path(args.out)
    metrics_dir = out_dir / "metrics"
    metrics_dir.mkdir(parents=True, exist_ok=True)
    metrics_mod.write_sweep_csv(metrics_dir / "overlap_sweep.csv", pairs)
    write_manifest(out_dir, "sweep", vars(args).copy())
    for ratio, value in pairs:
        print(f"r_o={ratio:.2f} auc={value}")
    return 0


def cmd_export_attention(args) -> int:
    model, dataset = _load_eval_inputs(args)
    seed_everything(args.seed)
    if not 0 <= args.layer < model.cfg.n_blocks:
        raise SystemExit(f"layer must be in [0, {model.cfg.n_blocks})")
    windows = []
    for seq in dataset.sequences:
        tokens = build_alternate_sequence(seq, model.cfg.time_factor, model.cfg.time_clip)
        windows.extend(window_eval(tokens, args.max_seq_len, args.overlap_ratio, seq.student_id))
        if len(windows) >= args.windows:
            break
    windows = windows[: args.windows]
    out_dir = Path(args.out)
    exports = out_dir / "exports"
    exports.mkdir(parents=True, exist_ok=True)
    out_path = exports / f"attention_layer{args.layer}.csv"
    model.eval()
    with torch.no_grad(), open(out_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("window,head,row,col,weight\n")
        for base in range(0, len(windows), args.batch_size):
            chunk = windows[base : base + args.batch_size]
            tensors = collate_windows(chunk, model.cfg.n_skills)
            out = model(tensors, collect_attention=True)
            weights = out.attn_weights[args.layer]
            for b, w in enumerate(chunk):
                mat = weights[b, :, : w.attn_len, : w.attn_len].numpy()
                for head in range(mat.shape[0]):
                    for row in range(mat.shape[1]):
                        for col in range(row + 1):
                            fh.write(
                                f"{base + b},{head},{row},{col},{float(mat[head, row, col])!r}\n"
                            )
    write_manifest(out_dir, "export-attention", vars(args).copy())
    print(f"wrote {out_path}")
    return 0


def cmd_export_embeddings(args) -> int:
    model, dataset = _load_eval_inputs(args)
    skills_by_question: dict[int, set[int]] = {}
    for seq in dataset.sequences:
        for inter in seq.interactions:
            skills_by_question.setdefault(inter.question_id, set()).update(inter.skill_ids)
    out_dir = Path(args.out)
    exports = out_dir / "exports"
    exports.mkdir(parents=True, exist_ok=True)
    out_path = exports / "question_embeddings.csv"
    table = model.question_emb.weight.detach().numpy()
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        dims = ",".join(f"e{i}" for i in range(table.shape[1]))
        fh.write(f"question_id,skills,{dims}\n")
        for q in range(table.shape[0]):
            skills = ";".join(str(s) for s in sorted(skills_by_question.get(q, ())))
            values = ",".join(repr(float(v)) for v in table[q])
            fh.write(f"{q},{skills},{values}\n")
    write_manifest(out_dir, "export-embeddings", vars(args).copy())
    print(f"wrote {out_path}")
    return 0


def _add_eval_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-seq-len", dest="max_seq_len", type=int, default=100)
    p.add_argument("--overlap-ratio", dest="overlap_ratio", type=float, default=0.5)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aakt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="parse a raw log into the canonical dataset format")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "tsv"), default="csv")
    p.add_argument("--student-col", default="student_id")
    p.add_argument("--question-col", default="question_id")
    p.add_argument("--skill-col", default="skill_ids")
    p.add_argument("--correct-col", default="correct")
    p.add_argument("--time-col", default="time_ms")
    p.add_argument("--order-col", default=None)
    p.add_argument("--skill-delim", default=";")
    p.add_argument("--min-len", dest="min_len", type=int, default=0)
    p.add_argument("--folds", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-merge", dest="merge_duplicates", action="store_false",
                   help="keep per-skill duplicate rows instead of merging them")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="generate a synthetic dataset with known ground truth")
    p.add_argument("--config", default=None, help="JSON file of generator settings")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="print dataset statistics")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="cross-validated training run")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON file overriding hyperparameters")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--min-len", dest="min_len", type=int, default=0)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--n-blocks", dest="n_blocks", type=int, default=2)
    p.add_argument("--n-heads", dest="n_heads", type=int, default=8)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--skill-mode", dest="skill_mode", choices=("aux", "additive", "none"),
                   default="aux")
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=0.001)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=64)
    p.add_argument("--max-epochs", dest="max_epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-seq-len", dest="max_seq_len", type=int, default=100)
    p.add_argument("--overlap-ratio", dest="overlap_ratio", type=float, default=0.5)
    p.add_argument("--time-factor", dest="time_factor", type=float, default=60_000.0)
    p.add_argument("--time-clip", dest="time_clip", type=float, default=200_000.0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint and write the metric report")
    _add_eval_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="mean AUC as a function of the overlap ratio")
    _add_eval_common(p)
    p.add_argument("--ratios", default="0.0,0.5,0.75")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-attention", help="dump attention weights of one layer to CSV")
    _add_eval_common(p)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--windows", type=int, default=4, help="number of windows to export")
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("export-embeddings",
                       help="dump question embedding rows with their skill labels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
