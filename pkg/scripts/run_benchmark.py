#!/usr/bin/env python3
"""Base-to-new benchmark on the synthetic fixture.

Trains the standard configuration grid (zero-shot, baseline, text-to-text,
virtual classes, L1/L2 ablations) over several seeds and prints mean
base/new/H accuracies.
"""

import argparse

import numpy as np

from lasp.data import SyntheticDatasetSpec, make_synthetic_dataset
from lasp.encoders import EncoderConfig, TextEncoder
from lasp.evaluator import evaluate_standard, harmonic_mean
from lasp.model import PromptedClip
from lasp.prompts import (ClassVocabulary, init_prompts_from_words,
                          load_template_bank, split_templates)
from lasp.tokenizer import Tokenizer
from lasp.trainer import TrainConfig, Trainer, sample_few_shot


def train_one(enc, bank, data, seed, *, alpha_tt=20.0, loss_kind="ce",
              virtual=(), epochs=150):
    tok = Tokenizer(max_len=enc.max_len)
    prompts = init_prompts_from_words(TextEncoder(enc), tok,
                                     ["a", "photo", "of", "a"], 3, enc.d,
                                     seed, jitter=0.3)
    model = PromptedClip(enc, prompts, bank)
    cfg = TrainConfig(alpha_tt=alpha_tt, epochs=epochs,
                      warmup_epochs=min(5, epochs),
                      lr=0.02, seed=seed, loss_kind=loss_kind,
                      virtual_classes=tuple(virtual))
    trainer = Trainer(model, ClassVocabulary(list(data.base_names)), cfg)
    pool = data.splits["base-train"]
    trainer.fit(sample_few_shot(pool.images, pool.labels, cfg.shots, seed))
    return model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=150)
    ap.add_argument("--separation", type=float, default=16.0)
    ap.add_argument("--context-shift", type=float, default=0.3)
    args = ap.parse_args()

    enc = EncoderConfig()
    spec = SyntheticDatasetSpec(separation=args.separation,
                                context_shift=args.context_shift)
    data = make_synthetic_dataset(spec, enc, template_source="6")
    bank = split_templates(load_template_bank("6"), 3, 0)
    new = tuple(data.new_names)

    grid = [("zero-shot", None),
            ("baseline", dict(alpha_tt=0.0)),
            ("lasp", {}),
            ("lasp-v", dict(virtual=new)),
            ("l1", dict(loss_kind="l1", virtual=new)),
            ("l2", dict(loss_kind="l2", virtual=new))]

    print(f"{'config':10s} {'base':>7} {'new':>7} {'H':>7}")
    for label, over in grid:
        accs = []
        for seed in args.seeds:
            if over is None:
                tok = Tokenizer(max_len=enc.max_len)
                prompts = init_prompts_from_words(TextEncoder(enc), tok,
                                                  ["a"], 3, enc.d, 0, 0.0)
                model = PromptedClip(enc, prompts, bank)
                rep = evaluate_standard(model, data.splits["base-test"],
                                        data.splits["new-test"],
                                        data.base_names, data.new_names,
                                        mode="zero-shot")
                accs.append((rep.base_acc, rep.new_acc))
                continue
            model = train_one(enc, bank, data, seed, epochs=args.epochs, **over)
            rep = evaluate_standard(model, data.splits["base-test"],
                                    data.splits["new-test"],
                                    data.base_names, data.new_names)
            accs.append((rep.base_acc, rep.new_acc))
        b = float(np.mean([a for a, _ in accs]))
        n = float(np.mean([a for _, a in accs]))
        print(f"{label:10s} {b:7.2f} {n:7.2f} {harmonic_mean(b, n):7.2f}")


if __name__ == "__main__":
    main()
