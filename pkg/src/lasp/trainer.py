"""Few-shot SGD training loop over the combined image-text / text-text objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor
from .encoders import trainable_parameters
from .errors import ConfigError, DataError, DivergenceError, InputError
from .losses import apply_bias_correction, combined_loss, grouped_tt_loss, vl_loss
from .model import PromptedClip
from .prompts import ClassVocabulary
from .serialization import load_tensors, save_tensors


@dataclass
class TrainConfig:
    alpha_vl: float = 1.0
    alpha_tt: float = 20.0
    lr: float = 0.002
    epochs: int = 10
    warmup_epochs: int = 1
    batch_size: int = 16
    shots: int = 16
    m_prompts: int = 4
    groups: int = 3
    ln_finetune: bool = False
    seed: int = 0
    loss_kind: str = "ce"
    virtual_classes: tuple[str, ...] = ()
    momentum: float = 0.0
    flip_augment: bool = False
    clip_norm: float = 10.0
    divergence_limit: float = 1e6

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("rates and counts must be positive")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive (use inf to disable)")
        if self.shots < 1 or self.m_prompts < 1 or self.groups < 1:
            raise ConfigError("shots, m_prompts and groups must be >= 1")
        if self.warmup_epochs < 0 or self.warmup_epochs > max(self.epochs, 1):
            raise ConfigError("warmup_epochs out of range")
        if self.loss_kind not in ("ce", "l1", "l2"):
            raise ConfigError(f"unknown loss kind {self.loss_kind!r}")


@dataclass
class FewShotDataset:
    images: np.ndarray       # (N, h, w, c)
    labels: np.ndarray       # (N,) integer indices into the class list
    split: str               # base-train | base-test | new-test

    def __len__(self) -> int:
        return len(self.labels)


def sample_few_shot(images: np.ndarray, labels: np.ndarray, shots: int,
                    seed: int, split: str = "base-train") -> FewShotDataset:
    """Deterministic per-class sample without replacement."""
    rng = np.random.default_rng(seed)
    picked = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < shots:
            raise DataError(f"class {c} has {idx.size} examples, need {shots}")
        picked.append(rng.choice(idx, size=shots, replace=False))
    sel = np.sort(np.concatenate(picked))
    return FewShotDataset(images[sel].copy(), labels[sel].copy(), split)


def learning_rate_at(step: int, total_steps: int, warmup_steps: int,
                     base_lr: float) -> float:
    """Linear ramp to ``base_lr`` over warmup, then cosine annealing to 0."""
    if not 0 <= step < total_steps:
        raise ConfigError(f"step {step} outside schedule of {total_steps}")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = total_steps - 1 - warmup_steps
    if span <= 0:
        return 0.0 if step == total_steps - 1 and span == 0 else base_lr
    t = (step - warmup_steps) / span
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * t))


def add_virtual_classes(vocabulary: ClassVocabulary,
                        names: list[str]) -> ClassVocabulary:
    overlap = set(vocabulary.all_names) & set(names)
    if overlap:
        raise InputError(f"virtual names collide with existing classes: {sorted(overlap)}")
    return vocabulary.with_virtual(list(names))


@dataclass
class StepResult:
    l_vl: float
    l_tt: float
    total: float


@dataclass
class TrainLog:
    rows: list[tuple[int, int, float, float, float, float]] = field(default_factory=list)

    def append(self, epoch, step, lr, res: StepResult):
        self.rows.append((epoch, step, lr, res.l_vl, res.l_tt, res.total))

    def lines(self) -> list[str]:
        return [f"{e}, {s}, {lr:.10g}, {a:.10g}, {b:.10g}, {t:.10g}"
                for e, s, lr, a, b, t in self.rows]


class Trainer:
    def __init__(self, model: PromptedClip, vocabulary: ClassVocabulary,
                 config: TrainConfig):
        if model.prompt_set.groups != config.groups:
            raise ConfigError("prompt set group count disagrees with config")
        self.model = model
        self.config = config
        self.vocabulary = vocabulary
        if config.virtual_classes:
            self.vocabulary = add_virtual_classes(vocabulary,
                                                  list(config.virtual_classes))
        self.params = trainable_parameters(model.prompt_set,
                                           model.vision_encoder,
                                           config.ln_finetune)
        model.vision_encoder.set_ln_trainable(config.ln_finetune)
        self._velocity = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        # anchors span base + virtual classes and stay constant all run
        self.anchors = model.anchors(self.vocabulary.all_names)

    def _losses(self, images: np.ndarray | None, labels: np.ndarray | None):
        cfg = self.config
        model = self.model
        base = self.vocabulary.base_names
        # Text-to-text regularizes the raw (pre-bias) prompt geometry over
        # base plus virtual names; the shared bias is a vision-alignment
        # correction, so only the image-facing rows receive it.
        rows_all_raw = model.class_rows(self.vocabulary.all_names,
                                        with_bias=False)
        nb = len(base)
        rows_base = apply_bias_correction(rows_all_raw[:, :nb, :],
                                          model.prompt_set.bias)
        l_vl = None
        if cfg.alpha_vl != 0.0:
            feats = model.encode_images(images)
            l_vl = vl_loss(rows_base, feats, labels, model.tau)
        l_tt = None
        if cfg.alpha_tt != 0.0:
            l_tt = grouped_tt_loss(self.anchors, rows_all_raw, model.bank,
                                   model.tau, kind=cfg.loss_kind)
        zero = Tensor(0.0)
        total = combined_loss(l_vl if l_vl is not None else zero,
                              l_tt if l_tt is not None else zero,
                              cfg.alpha_vl, cfg.alpha_tt)
        return l_vl, l_tt, total

    def train_step(self, images: np.ndarray, labels: np.ndarray,
                   lr: float, step_index: int = 0) -> StepResult:
        cfg = self.config
        for p in self.params.values():
            p.zero_grad()
        l_vl, l_tt, total = self._losses(images, labels)
        val = total.item()
        if not np.isfinite(val) or abs(val) > cfg.divergence_limit:
            raise DivergenceError(step_index, val)
        total.backward()
        # global-norm clipping: TT at tau=0.01 has near-flat plateaus next to
        # violent decision boundaries, so raw SGD steps can catapult prompts
        gnorm = np.sqrt(sum(float((p.grad ** 2).sum())
                            for p in self.params.values() if p.grad is not None))
        scale = min(1.0, cfg.clip_norm / max(gnorm, 1e-12))
        for k, p in self.params.items():
            if p.grad is None:
                continue
            if cfg.momentum:
                self._velocity[k] = cfg.momentum * self._velocity[k] + scale * p.grad
                p.data -= lr * self._velocity[k]
            else:
                p.data -= lr * scale * p.grad
            p.zero_grad()
        return StepResult(l_vl.item() if l_vl is not None else 0.0,
                          l_tt.item() if l_tt is not None else 0.0, val)

    def fit(self, train_set: FewShotDataset) -> TrainLog:
        cfg = self.config
        n = len(train_set)
        steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
        total_steps = cfg.epochs * steps_per_epoch
        warmup_steps = cfg.warmup_epochs * steps_per_epoch
        rng = np.random.default_rng(cfg.seed)
        log = TrainLog()
        step = 0
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            for b in range(steps_per_epoch):
                sel = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                images = train_set.images[sel]
                if cfg.flip_augment:
                    images = images.copy()
                    images[1::2] = images[1::2, :, ::-1, :]
                labels = train_set.labels[sel]
                lr = learning_rate_at(step, total_steps, warmup_steps, cfg.lr)
                res = self.train_step(images, labels, lr, step_index=step)
                log.append(epoch, step, lr, res)
                step += 1
        return log


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, model: PromptedClip, config: TrainConfig, steps: int):
    named = {"prompts.vectors": model.prompt_set.vectors.data,
             "prompts.bias": model.prompt_set.bias.data}
    for k, p in trainable_parameters(model.prompt_set, model.vision_encoder,
                                     True).items():
        named[k] = p.data
    meta = {"steps": str(steps), "seed": str(config.seed),
            "config": repr(config)}
    save_tensors(path, named, meta=meta)


def load_checkpoint(path, model: PromptedClip) -> dict[str, str]:
    named, meta = load_tensors(path)
    targets = trainable_parameters(model.prompt_set, model.vision_encoder, True)
    for k, p in targets.items():
        if k in named:
            p.data[...] = named[k]
    model._anchor_cache.clear()
    return meta
