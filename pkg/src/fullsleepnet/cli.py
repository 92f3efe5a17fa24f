"""Command-line interface: synth, train, evaluate, predict.

Runs are driven by an INI config (sections [model], [training], [data],
[synth], [output]) plus flag overrides; flags win. Every command writes only
deterministic content (no timestamps), so identical configs and seeds
reproduce outputs byte for byte.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
The FSN_THREADS environment variable caps BLAS thread pools when the optional
threadpoolctl package is available.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import glob
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from .data import (
    FormatError,
    Record,
    SynthConfig,
    downsample_record_by2,
    generate_synthetic_record,
    next_pow2,
    prepare_example,
    read_record,
    split_dataset,
    write_record,
)
from .metrics import (
    auprc,
    classification_scores,
    confusion_matrix,
    epoch_stage_probabilities,
    evaluate,
    pr_points,
    resample_prediction_masks,
    roc_points,
)
from .model import (
    CheckpointError,
    ModelConfig,
    load_checkpoint,
    model_forward,
    save_checkpoint,
    variant_flags,
)
from .tensor import Tensor
from .training import (
    LossWeights,
    NonFiniteLossError,
    TrainConfig,
    train,
    write_history_tsv,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    """Configuration or invocation problem; maps to exit code 1."""


@dataclass
class DataConfig:
    records: str | None = None       # glob pattern
    split_seed: int = 0
    min_len: int | None = None       # fixed dataset length after padding
    downsample_by2: bool = False
    arousal_rule: str = "majority"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig.toy)
    training: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    out_dir: str = "out"
    precision: int = 64
    threshold: float = 0.5

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32


# config parsing -----------------------------------------------------------------

def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _parse_kernels(text: str) -> tuple[tuple[int, int], ...]:
    pairs = []
    for chunk in text.split(","):
        a, _, b = chunk.strip().partition(":")
        if not b:
            raise UsageError(f"kernel pair must look like 11:9, got {chunk!r}")
        pairs.append((int(a), int(b)))
    return tuple(pairs)


def _section(parser: configparser.ConfigParser, name: str) -> dict[str, str]:
    return dict(parser[name]) if parser.has_section(name) else {}


def _pop(values: dict[str, str], key: str, cast, default):
    if key not in values:
        return default
    raw = values.pop(key).strip()
    if raw == "":
        return default
    try:
        return cast(raw)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad value for {key}: {raw!r} ({exc})") from exc


def _model_from_section(values: dict[str, str]) -> ModelConfig:
    preset = _pop(values, "preset", str, "toy")
    if preset == "toy":
        base = ModelConfig.toy()
    elif preset == "paper":
        base = ModelConfig()
    else:
        raise UsageError(f"unknown model preset {preset!r}")
    kwargs = dataclasses.asdict(base)
    kwargs["kernels"] = tuple(tuple(k) for k in kwargs["kernels"])
    kwargs["filters"] = tuple(kwargs["filters"])
    variant = _pop(values, "variant", str, None)
    if variant is not None:
        rec, att = variant_flags(variant.upper())
        kwargs["enable_recurrent"] = rec
        kwargs["enable_attention"] = att
    kwargs["num_blocks"] = _pop(values, "num_blocks", int, kwargs["num_blocks"])
    filters = _pop(values, "filters", str, None)
    if filters is not None:
        kwargs["filters"] = tuple(int(f) for f in filters.split(","))
    kernels = _pop(values, "kernels", _parse_kernels, None)
    if kernels is not None:
        kwargs["kernels"] = kernels
    kwargs["lstm_layers"] = _pop(values, "lstm_layers", int, kwargs["lstm_layers"])
    kwargs["lstm_units"] = _pop(values, "lstm_units", int, kwargs["lstm_units"])
    kwargs["num_stages"] = _pop(values, "num_stages", int, kwargs["num_stages"])
    kwargs["seed"] = _pop(values, "seed", int, kwargs["seed"])
    try:
        return ModelConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(f"invalid model config: {exc}") from exc


def _training_from_section(values: dict[str, str]) -> TrainConfig:
    tc = TrainConfig()
    tc.lr = _pop(values, "lr", float, tc.lr)
    tc.beta1 = _pop(values, "beta1", float, tc.beta1)
    tc.beta2 = _pop(values, "beta2", float, tc.beta2)
    tc.epsilon = _pop(values, "epsilon", float, tc.epsilon)
    w1 = _pop(values, "w1", float, 1.0)
    w2 = _pop(values, "w2", float, 1.0)
    try:
        tc.weights = LossWeights(w1=w1, w2=w2)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    tc.patience = _pop(values, "patience", int, tc.patience)
    tc.max_epochs = _pop(values, "max_epochs", int, tc.max_epochs)
    tc.max_steps = _pop(values, "max_steps", int, tc.max_steps)
    tc.augment = _pop(values, "augment", _parse_bool, tc.augment)
    tc.clip_norm = _pop(values, "clip_norm", float, tc.clip_norm)
    tc.include_padding = _pop(values, "include_padding", _parse_bool, tc.include_padding)
    tc.seed = _pop(values, "seed", int, tc.seed)
    return tc


def _data_from_section(values: dict[str, str]) -> DataConfig:
    dc = DataConfig()
    dc.records = _pop(values, "records", str, dc.records)
    dc.split_seed = _pop(values, "split_seed", int, dc.split_seed)
    dc.min_len = _pop(values, "min_len", int, dc.min_len)
    dc.downsample_by2 = _pop(values, "downsample_by2", _parse_bool, dc.downsample_by2)
    dc.arousal_rule = _pop(values, "arousal_rule", str, dc.arousal_rule)
    return dc


def _synth_from_section(values: dict[str, str]) -> SynthConfig:
    kwargs = {}
    kwargs["fs"] = _pop(values, "fs", float, 128.0)
    kwargs["num_epochs"] = _pop(values, "num_epochs", int, 20)
    kwargs["length_samples"] = _pop(values, "length_samples", int, None)
    kwargs["arousal_rate"] = _pop(values, "arousal_rate", float, 0.05)
    lo = _pop(values, "arousal_duration_lo", float, 3.0)
    hi = _pop(values, "arousal_duration_hi", float, 15.0)
    kwargs["arousal_duration_s"] = (lo, hi)
    kwargs["min_preceding_sleep_s"] = _pop(values, "min_preceding_sleep", float, 10.0)
    kwargs["arousal_amplitude"] = _pop(values, "arousal_amplitude", float, 2.5)
    kwargs["noise_level"] = _pop(values, "noise_level", float, 0.25)
    kwargs["wake_bursts_per_epoch"] = _pop(values, "wake_bursts_per_epoch", int, 2)
    kwargs["seed"] = _pop(values, "seed", int, 0)
    try:
        return SynthConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(f"invalid synth config: {exc}") from exc


def load_run_config(path: str | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise UsageError(f"config file not found: {path}")
    model_values = _section(parser, "model")
    training_values = _section(parser, "training")
    data_values = _section(parser, "data")
    synth_values = _section(parser, "synth")
    output_values = _section(parser, "output")
    cfg.model = _model_from_section(model_values)
    cfg.training = _training_from_section(training_values)
    cfg.data = _data_from_section(data_values)
    cfg.synth = _synth_from_section(synth_values)
    cfg.out_dir = _pop(output_values, "dir", str, cfg.out_dir)
    cfg.precision = _pop(output_values, "precision", int, cfg.precision)
    cfg.threshold = _pop(output_values, "threshold", float, cfg.threshold)
    for section, leftovers in (("model", model_values), ("training", training_values),
                               ("data", data_values), ("synth", synth_values),
                               ("output", output_values)):
        if leftovers:
            raise UsageError(f"unknown keys in [{section}]: {sorted(leftovers)}")
    if cfg.precision not in (32, 64):
        raise UsageError(f"precision must be 32 or 64, got {cfg.precision}")
    return cfg


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if getattr(args, "variant", None):
        rec, att = variant_flags(args.variant)
        cfg.model = dataclasses.replace(cfg.model, enable_recurrent=rec, enable_attention=att)
    if getattr(args, "seed", None) is not None:
        cfg.model = dataclasses.replace(cfg.model, seed=args.seed)
        cfg.training.seed = args.seed
        cfg.synth = dataclasses.replace(cfg.synth, seed=args.seed)
        cfg.data.split_seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "records", None):
        cfg.data.records = args.records
    if getattr(args, "threshold", None) is not None:
        cfg.threshold = args.threshold
    if getattr(args, "precision", None) is not None:
        cfg.precision = args.precision
    return cfg


def write_resolved_config(cfg: RunConfig, path: str) -> None:
    parser = configparser.ConfigParser()
    parser["model"] = {
        "variant": cfg.model.variant,
        "num_blocks": str(cfg.model.num_blocks),
        "filters": ",".join(str(f) for f in cfg.model.filters),
        "kernels": ",".join(f"{a}:{b}" for a, b in cfg.model.kernels),
        "lstm_layers": str(cfg.model.lstm_layers),
        "lstm_units": str(cfg.model.lstm_units),
        "num_stages": str(cfg.model.num_stages),
        "seed": str(cfg.model.seed),
    }
    tc = cfg.training
    parser["training"] = {
        "lr": repr(tc.lr), "beta1": repr(tc.beta1), "beta2": repr(tc.beta2),
        "epsilon": repr(tc.epsilon), "w1": repr(tc.weights.w1), "w2": repr(tc.weights.w2),
        "patience": str(tc.patience), "max_epochs": str(tc.max_epochs),
        "max_steps": "" if tc.max_steps is None else str(tc.max_steps),
        "augment": str(tc.augment).lower(),
        "clip_norm": "" if tc.clip_norm is None else repr(tc.clip_norm),
        "include_padding": str(tc.include_padding).lower(),
        "seed": str(tc.seed),
    }
    parser["data"] = {
        "records": cfg.data.records or "",
        "split_seed": str(cfg.data.split_seed),
        "min_len": "" if cfg.data.min_len is None else str(cfg.data.min_len),
        "downsample_by2": str(cfg.data.downsample_by2).lower(),
        "arousal_rule": cfg.data.arousal_rule,
    }
    sc = cfg.synth
    parser["synth"] = {
        "fs": repr(sc.fs), "num_epochs": str(sc.num_epochs),
        "length_samples": "" if sc.length_samples is None else str(sc.length_samples),
        "arousal_rate": repr(sc.arousal_rate),
        "arousal_duration_lo": repr(sc.arousal_duration_s[0]),
        "arousal_duration_hi": repr(sc.arousal_duration_s[1]),
        "min_preceding_sleep": repr(sc.min_preceding_sleep_s),
        "arousal_amplitude": repr(sc.arousal_amplitude),
        "noise_level": repr(sc.noise_level),
        "wake_bursts_per_epoch": str(sc.wake_bursts_per_epoch),
        "seed": str(sc.seed),
    }
    parser["output"] = {
        "dir": cfg.out_dir,
        "precision": str(cfg.precision),
        "threshold": repr(cfg.threshold),
    }
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


# shared helpers ------------------------------------------------------------------

def _load_records(pattern: str | None) -> list[Record]:
    if not pattern:
        raise UsageError("no records given; use --records GLOB or the [data] section")
    paths = sorted(glob.glob(pattern))
    if not paths:
        raise FormatError(f"no record files match {pattern!r}")
    return [read_record(p) for p in paths]


def _predict_record(params, model_cfg: ModelConfig, record: Record, run: RunConfig):
    """Forward one record; returns (per-sample arousal, per-epoch codes, epoch prob rows, example)."""
    if run.data.downsample_by2:
        record = downsample_record_by2(record)
    if run.data.min_len is not None and record.num_samples > run.data.min_len:
        raise FormatError(
            f"record {record.id} has {record.num_samples} samples, longer than the "
            f"configured dataset length {run.data.min_len}; it would need padding to "
            f"{next_pow2(record.num_samples)}"
        )
    ex = prepare_example(
        record, num_blocks=model_cfg.num_blocks, min_len=run.data.min_len,
        dtype=run.dtype, arousal_rule=run.data.arousal_rule,
    )
    arousal_mask, stage_mask = model_forward(params, model_cfg, Tensor(ex.signal))
    factor = model_cfg.downsample_factor
    arousal_samples, stage_codes = resample_prediction_masks(
        arousal_mask.data, stage_mask.data, factor, ex.valid_len, ex.sampling_rate_hz
    )
    stage_probs = epoch_stage_probabilities(stage_mask.data, factor, ex.valid_len, ex.sampling_rate_hz)
    return arousal_samples, stage_codes, stage_probs, record


# commands -------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    run = apply_overrides(load_run_config(args.config), args)
    if args.count < 0:
        raise UsageError("--count must be nonnegative")
    os.makedirs(run.out_dir, exist_ok=True)
    entries = []
    for i in range(args.count):
        seed = run.synth.seed + i
        cfg_i = dataclasses.replace(run.synth, seed=seed)
        record_id = f"record_{i:04d}"
        record = generate_synthetic_record(cfg_i, record_id=record_id)
        filename = f"{record_id}.fsn1"
        write_record(record, os.path.join(run.out_dir, filename))
        entries.append({"id": record_id, "file": filename, "seed": seed})
    manifest = {
        "format_version": 1,
        "count": args.count,
        "base_seed": run.synth.seed,
        "records": entries,
        "synth_config": dataclasses.asdict(run.synth),
    }
    with open(os.path.join(run.out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {args.count} records to {run.out_dir}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    run = apply_overrides(load_run_config(args.config), args)
    records = _load_records(run.data.records)
    if run.data.downsample_by2:
        records = [downsample_record_by2(r) for r in records]
    by_id = {r.id: r for r in records}
    if len(by_id) != len(records):
        raise FormatError("duplicate record ids in the input set")
    train_ids, val_ids, test_ids = split_dataset(sorted(by_id), seed=run.data.split_seed)

    def prep(ids):
        return [
            prepare_example(by_id[i], num_blocks=run.model.num_blocks, min_len=run.data.min_len,
                            dtype=run.dtype, arousal_rule=run.data.arousal_rule)
            for i in ids
        ]

    result = train(run.model, prep(train_ids), prep(val_ids), run.training, dtype=run.dtype)

    os.makedirs(run.out_dir, exist_ok=True)
    save_checkpoint(result.params, run.model, os.path.join(run.out_dir, "checkpoint.fsnw"))
    write_history_tsv(result.history, os.path.join(run.out_dir, "history.tsv"))
    write_resolved_config(run, os.path.join(run.out_dir, "run_config.ini"))
    with open(os.path.join(run.out_dir, "splits.json"), "w", encoding="utf-8") as fh:
        json.dump({"train": train_ids, "val": val_ids, "test": test_ids}, fh, indent=2)
        fh.write("\n")
    best = result.state.best_val_loss
    print(f"trained {len(result.history)} epochs ({len(result.step_losses)} steps), "
          f"best validation loss {best:.6g}; outputs in {run.out_dir}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    run = apply_overrides(load_run_config(args.config), args)
    params, model_cfg = load_checkpoint(args.checkpoint)
    records = _load_records(run.data.records)
    predictions = []
    scored_records = []
    for record in records:
        arousal_samples, stage_codes, _, used = _predict_record(params, model_cfg, record, run)
        predictions.append((arousal_samples, stage_codes))
        scored_records.append(used)
    report = evaluate(scored_records, predictions, threshold=run.threshold)

    os.makedirs(run.out_dir, exist_ok=True)
    with open(os.path.join(run.out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")

    scores = np.concatenate([p[0] for p in predictions])
    labels = np.concatenate([r.arousal for r in scored_records]).astype(np.int64)
    fpr, tpr, roc_thr = roc_points(scores, labels)
    with open(os.path.join(run.out_dir, "roc.tsv"), "w", encoding="utf-8") as fh:
        fh.write("fpr\ttpr\tthreshold\n")
        for row in zip(fpr, tpr, roc_thr):
            fh.write("\t".join(f"{v:.10g}" for v in row) + "\n")
    recall, precision, pr_thr = pr_points(scores, labels)
    with open(os.path.join(run.out_dir, "pr.tsv"), "w", encoding="utf-8") as fh:
        fh.write("recall\tprecision\tthreshold\n")
        for row in zip(recall, precision, pr_thr):
            fh.write("\t".join(f"{v:.10g}" for v in row) + "\n")
    for record, (_, stage_codes) in zip(scored_records, predictions):
        path = os.path.join(run.out_dir, f"hypnogram_{record.id}.tsv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch_index\ttrue_stage\tpredicted_stage\n")
            for e, (t, p) in enumerate(zip(record.stages, stage_codes)):
                fh.write(f"{e}\t{int(t)}\t{int(p)}\n")

    block = report.arousal_sample
    print(f"evaluated {len(records)} records: stage acc {report.stage_scores.accuracy:.3f} "
          f"kappa {report.stage_kappa:.3f}; arousal AUPRC {block['auprc']:.3f} "
          f"AUROC {block['auroc']:.3f}; report in {run.out_dir}")
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    run = apply_overrides(load_run_config(args.config), args)
    params, model_cfg = load_checkpoint(args.checkpoint)
    records = _load_records(run.data.records)
    os.makedirs(run.out_dir, exist_ok=True)
    for record in records:
        arousal_samples, stage_codes, stage_probs, used = _predict_record(params, model_cfg, record, run)
        with open(os.path.join(run.out_dir, f"{used.id}_arousal.tsv"), "w", encoding="utf-8") as fh:
            fh.write("sample_index\tprobability\n")
            for i, p in enumerate(arousal_samples):
                fh.write(f"{i}\t{p:.8g}\n")
        with open(os.path.join(run.out_dir, f"{used.id}_stages.tsv"), "w", encoding="utf-8") as fh:
            header = "\t".join(f"p_{name}" for name in ("W", "N1", "N2", "N3", "REM"))
            fh.write(f"epoch_index\tstage\t{header}\n")
            for e in range(stage_codes.shape[0]):
                probs = "\t".join(f"{v:.8g}" for v in stage_probs[e])
                fh.write(f"{e}\t{int(stage_codes[e])}\t{probs}\n")
        parts = []
        if np.any(used.stages != 255):
            cm = confusion_matrix(used.stages, stage_codes, model_cfg.num_stages)
            parts.append(f"stage acc {classification_scores(cm).accuracy:.3f}")
        if used.arousal.any():
            parts.append(f"arousal AUPRC {auprc(arousal_samples, used.arousal.astype(np.int64)):.3f}")
        if parts:
            print(f"{used.id}: " + ", ".join(parts))
        else:
            print(f"{used.id}: predictions written (unlabeled record, no metrics)")
    return EXIT_OK


# entry point ------------------------------------------------------------------------

def _apply_thread_cap() -> None:
    cap = os.environ.get("FSN_THREADS")
    if not cap:
        return
    try:
        limit = int(cap)
    except ValueError:
        raise UsageError(f"FSN_THREADS must be an integer, got {cap!r}")
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(limit)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(limit)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fullsleepnet",
        description="Full-night EEG segmentation: synthetic data, training, evaluation, prediction.",
        exit_on_error=False,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--seed", type=int, help="override every seed in the config")
        p.add_argument("--variant", choices=["C", "CR", "CA", "CRA"], help="module ablation variant")
        p.add_argument("--out", help="output directory")
        p.add_argument("--records", help="glob of FSN1 record files")
        p.add_argument("--threshold", type=float, help="arousal decision threshold")
        p.add_argument("--precision", type=int, choices=[32, 64], help="float width")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="FSNW checkpoint path")

    p_synth = sub.add_parser("synth", help="generate synthetic records", exit_on_error=False)
    common(p_synth)
    p_synth.add_argument("--count", type=int, default=10, help="number of records")
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="split, train, checkpoint", exit_on_error=False)
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="score a checkpoint on records", exit_on_error=False)
    common(p_eval, checkpoint=True)
    p_eval.set_defaults(func=cmd_evaluate)

    p_pred = sub.add_parser("predict", help="emit per-record prediction files", exit_on_error=False)
    common(p_pred, checkpoint=True)
    p_pred.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except argparse.ArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:   # --help exits 0; argparse usage errors exit 2
        return EXIT_USAGE if exc.code == 2 else int(exc.code or 0)
    try:
        _apply_thread_cap()
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, CheckpointError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
