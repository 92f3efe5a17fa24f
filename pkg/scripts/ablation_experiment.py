#!/usr/bin/env python3
"""Train all four module variants on one synthetic dataset and compare them.

Reproduces the ablation table shape (arousal AUPRC/AUROC, stage ACC/F1/kappa
per variant) at desk scale. Expect the recurrent variants to win on arousal
AUPRC: the generator plants unlabeled high-frequency bursts in wake epochs, so
a purely local model cannot tell them from scored arousals.
"""

import argparse
import sys
import time

import numpy as np

from fullsleepnet.data import SynthConfig, generate_synthetic_record, prepare_example
from fullsleepnet.metrics import evaluate, resample_prediction_masks
from fullsleepnet.model import ModelConfig, model_forward
from fullsleepnet.tensor import Tensor
from fullsleepnet.training import TrainConfig, train


def score_variant(variant, train_ex, val_ex, test_records, test_ex, args):
    cfg = ModelConfig.toy(seed=args.seed, variant=variant)
    tc = TrainConfig(lr=args.lr, patience=args.patience, max_epochs=args.max_epochs,
                     seed=args.seed)
    t0 = time.perf_counter()
    result = train(cfg, train_ex, val_ex, tc, dtype=np.float32)
    elapsed = time.perf_counter() - t0
    predictions = []
    for ex in test_ex:
        arousal, stage = model_forward(result.params, cfg, Tensor(ex.signal))
        predictions.append(resample_prediction_masks(
            arousal.data, stage.data, cfg.downsample_factor, ex.valid_len, ex.sampling_rate_hz
        ))
    report = evaluate(test_records, predictions)
    return {
        "variant": variant,
        "auprc": report.arousal_sample["auprc"],
        "auroc": report.arousal_sample["auroc"],
        "acc": report.stage_scores.accuracy,
        "f1": report.stage_scores.macro_f1,
        "kappa": report.stage_kappa,
        "epochs": len(result.history),
        "minutes": elapsed / 60.0,
    }


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--train", type=int, default=16)
    parser.add_argument("--val", type=int, default=4)
    parser.add_argument("--test", type=int, default=4)
    parser.add_argument("--length", type=int, default=2 ** 14)
    parser.add_argument("--lr", type=float, default=2e-3)
    parser.add_argument("--patience", type=int, default=5)
    parser.add_argument("--max-epochs", type=int, default=25)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    total = args.train + args.val + args.test
    records = [
        generate_synthetic_record(SynthConfig(length_samples=args.length, seed=args.seed * 1000 + i))
        for i in range(total)
    ]
    examples = [prepare_example(r, num_blocks=3, dtype=np.float32) for r in records]
    train_ex = examples[:args.train]
    val_ex = examples[args.train:args.train + args.val]
    test_ex = examples[args.train + args.val:]
    test_records = records[args.train + args.val:]

    print(f"{'variant':8} {'AUPRC':>7} {'AUROC':>7} {'ACC':>7} {'F1':>7} {'kappa':>7} {'epochs':>7} {'min':>6}")
    for variant in ("C", "CA", "CR", "CRA"):
        row = score_variant(variant, train_ex, val_ex, test_records, test_ex, args)
        print(f"{row['variant']:8} {row['auprc']:7.3f} {row['auroc']:7.3f} {row['acc']:7.3f} "
              f"{row['f1']:7.3f} {row['kappa']:7.3f} {row['epochs']:7d} {row['minutes']:6.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
