import numpy as np
import pytest

from lasp.encoders import EncoderConfig, TextEncoder
from lasp.model import PromptedClip
from lasp.prompts import (ClassVocabulary, init_prompts,
                          init_prompts_from_words, load_template_bank,
                          split_templates)
from lasp.tokenizer import Tokenizer
from lasp.trainer import TrainConfig, Trainer, sample_few_shot


@pytest.fixture
def small_enc():
    """Narrow encoder config for fast unit tests."""
    return EncoderConfig(d_tok=8, d=8, n_layers=1, n_heads=2, max_len=16)


@pytest.fixture
def small_model(small_enc):
    prompts = init_prompts(2, 2, small_enc.d_tok, small_enc.d, 0)
    bank = split_templates(load_template_bank("6"), 2, 0)
    return PromptedClip(small_enc, prompts, bank)


class AcceptanceBench:
    """Shared trained-model cache for the directional acceptance criteria.

    The fixture dataset and every trained model are deterministic, so each
    (configuration, seed) pair is trained once and reused across criteria.
    """

    SEEDS = (0, 1, 2)

    def __init__(self):
        from lasp.data import (SyntheticDatasetSpec, _class_word_pool,
                               make_synthetic_dataset)
        import time
        t0 = time.monotonic()
        self.enc = EncoderConfig()
        spec = SyntheticDatasetSpec(separation=16.0, context_shift=0.3)
        self.data = make_synthetic_dataset(spec, self.enc, template_source="6")
        self.base = list(self.data.base_names)
        self.new = list(self.data.new_names)
        self.bank = split_templates(load_template_bank("6"), 3, 0)
        pool = _class_word_pool()
        order = np.random.default_rng(0).permutation(len(pool))
        picked = [pool[int(i)] for i in order]
        self.distractors = picked[20:30]
        self.dataset_time = time.monotonic() - t0
        self._models = {}
        self.train_time = {}

    def configs(self):
        return {
            "baseline": dict(alpha_tt=0.0),
            "lasp": {},
            "laspv": dict(virtual_classes=tuple(self.new)),
            "l1": dict(loss_kind="l1", virtual_classes=tuple(self.new)),
            "l2": dict(loss_kind="l2", virtual_classes=tuple(self.new)),
            "laspv+distract": dict(virtual_classes=tuple(self.new)
                                   + tuple(self.distractors)),
        }

    def model(self, label: str, seed: int) -> PromptedClip:
        import time
        key = (label, seed)
        if key in self._models:
            return self._models[key]
        t0 = time.monotonic()
        over = self.configs()[label]
        tok = Tokenizer(max_len=self.enc.max_len)
        prompts = init_prompts_from_words(TextEncoder(self.enc), tok,
                                          ["a", "photo", "of", "a"], 3,
                                          self.enc.d, seed, jitter=0.3)
        model = PromptedClip(self.enc, prompts, self.bank)
        cfg = TrainConfig(epochs=150, warmup_epochs=5, lr=0.02, seed=seed,
                          **over)
        trainer = Trainer(model, ClassVocabulary(list(self.base)), cfg)
        pool = self.data.splits["base-train"]
        train_set = sample_few_shot(pool.images, pool.labels, cfg.shots, seed)
        trainer.fit(train_set)
        self._models[key] = model
        self.train_time[key] = time.monotonic() - t0
        return model

    def mean_accs(self, label: str):
        from lasp.evaluator import evaluate_standard
        accs = []
        for seed in self.SEEDS:
            rep = evaluate_standard(self.model(label, seed),
                                    self.data.splits["base-test"],
                                    self.data.splits["new-test"],
                                    self.base, self.new)
            accs.append((rep.base_acc, rep.new_acc))
        return (float(np.mean([a for a, _ in accs])),
                float(np.mean([n for _, n in accs])))


@pytest.fixture(scope="session")
def bench():
    return AcceptanceBench()
