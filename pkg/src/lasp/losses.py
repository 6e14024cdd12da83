"""Probability distributions and losses over the joint embedding space.

Anchor features (hand-crafted side) enter as plain numpy arrays: they are
constants and never receive gradients. Learnable class rows enter as
tensors so gradients reach the prompts and the shared bias.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (DegenerateInputError, Tensor, log_softmax,
                       normalize_rows, softmax)
from .errors import ConfigError, InputError
from .prompts import TemplateBank

LOSS_KINDS = ("ce", "l1", "l2")


def _normalize_const(anchors: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norm = np.sqrt((anchors * anchors).sum(axis=-1, keepdims=True))
    return anchors / np.maximum(norm, eps)


def _check_feature(f: Tensor):
    if np.linalg.norm(f.data, axis=-1).min() < 1e-12:
        raise DegenerateInputError("zero-norm feature vector")


def zero_shot_distribution(anchors_l: np.ndarray, f: Tensor, tau: float) -> Tensor:
    """Class distribution from one template's hand-crafted anchors."""
    _check_feature(f)
    an = _normalize_const(anchors_l)                      # (C, d)
    cos = Tensor(an) @ normalize_rows(f)                  # (C,)
    return softmax(cos * (1.0 / tau), axis=-1)


def vl_distribution(rows: Tensor, f: Tensor, tau: float) -> Tensor:
    """Class distribution from learnable-prompt rows for one group."""
    _check_feature(f)
    cos = normalize_rows(rows) @ normalize_rows(f)
    return softmax(cos * (1.0 / tau), axis=-1)


def grouped_cosine_scores(rows: Tensor, f: Tensor) -> Tensor:
    """Group-averaged cosine between class rows (G, C, d) and features.

    ``f`` may be (d,) or a batch (B, d); the result is (C,) or (B, C).
    """
    single = f.data.ndim == 1
    fb = f.reshape(1, *f.shape) if single else f
    cos = normalize_rows(fb) @ normalize_rows(rows).transpose(0, 2, 1)  # (G, B, C)
    scores = cos.mean(axis=0)
    return scores[0] if single else scores


def vl_loss(rows: Tensor, f: Tensor, labels, tau: float) -> Tensor:
    """Batch-mean cross-entropy of images against group-averaged class scores."""
    _check_feature(f)
    single = f.data.ndim == 1
    fb = f.reshape(1, *f.shape) if single else f
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n_classes = rows.shape[-2]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise InputError(f"label out of range [0, {n_classes})")
    scores = grouped_cosine_scores(rows, fb)              # (B, C)
    logp = log_softmax(scores * (1.0 / tau), axis=-1)
    onehot = np.zeros(logp.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    return -(logp * Tensor(onehot)).sum() * (1.0 / labels.size)


def text_class_distribution(anchors_s: np.ndarray, t_r: Tensor, tau: float) -> Tensor:
    """Mean over templates of per-template softmax class distributions.

    ``anchors_s`` is (S, C, d) for a non-empty template subset S; the
    average is over probability vectors, not logits.
    """
    if anchors_s.ndim != 3 or anchors_s.shape[0] == 0:
        raise ConfigError("need a non-empty (S, C, d) anchor stack")
    an = _normalize_const(anchors_s)
    cos = Tensor(an) @ normalize_rows(t_r)                # (S, C)
    probs = softmax(cos * (1.0 / tau), axis=-1)
    return probs.mean(axis=0)


def _tt_probs(anchors: np.ndarray, rows: Tensor, tau: float) -> Tensor:
    """(C_base, C_all) matrix of template-averaged classification probs."""
    an = _normalize_const(anchors)                        # (L, C_all, d)
    rows_n = normalize_rows(rows)                         # (C_base, d)
    cos = rows_n @ Tensor(an).transpose(0, 2, 1)          # (L, C_base, C_all)
    return softmax(cos * (1.0 / tau), axis=-1).mean(axis=0)


def tt_loss(anchors: np.ndarray, rows: Tensor, tau: float,
            kind: str = "ce") -> Tensor:
    """Text-to-text loss: each learnable class row classified against anchors.

    ``anchors`` is (L, C_all, d) covering base plus any virtual classes;
    ``rows`` is (C_base, d). Class ordering is base-first, so row c targets
    anchor column c. Averaged over classes so the loss scale is independent
    of how many classes a step carries.
    """
    if kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss kind {kind!r}")
    c_base = rows.shape[0]
    if anchors.shape[1] < c_base:
        raise InputError("anchor class set smaller than learnable class set")
    if kind == "ce":
        probs = _tt_probs(anchors, rows, tau)
        eye = np.eye(c_base, anchors.shape[1])
        return -((probs.log()) * Tensor(eye)).sum() * (1.0 / c_base)
    # ablation losses regress each row onto its class-mean anchor
    target = Tensor(anchors.mean(axis=0)[:c_base])
    diff = rows - target
    if kind == "l1":
        return diff.abs().mean(axis=-1).sum() * (1.0 / c_base)
    return (diff * diff).mean(axis=-1).sum() * (1.0 / c_base)


def grouped_tt_loss(anchors: np.ndarray, rows: Tensor, bank: TemplateBank,
                    tau: float, kind: str = "ce") -> Tensor:
    """Sum over groups of the text-to-text loss on that group's templates."""
    if rows.data.ndim != 3:
        raise ConfigError(f"expected (G, C_base, d) rows, got {rows.shape}")
    groups = rows.shape[0]
    if bank.groups != groups:
        raise ConfigError(f"bank has {bank.groups} groups, rows have {groups}")
    if len(bank) != anchors.shape[0]:
        raise ConfigError("anchor stack does not cover the template bank")
    total = None
    for g in range(groups):
        idx = bank.indices_of_group(g)
        if not idx:
            raise ConfigError(f"group {g} has no templates")
        part = tt_loss(anchors[idx], rows[g], tau, kind=kind)
        total = part if total is None else total + part
    return total


def combined_loss(l_vl, l_tt, alpha_vl: float, alpha_tt: float):
    if not (np.isfinite(alpha_vl) and np.isfinite(alpha_tt)):
        raise ConfigError("loss coefficients must be finite")
    return alpha_vl * l_vl + alpha_tt * l_tt


def apply_bias_correction(rows: Tensor, bias: Tensor) -> Tensor:
    """Shift every class row of every group by the single shared bias."""
    if rows.shape[-1] != bias.shape[-1]:
        raise ValueError(f"bias length {bias.shape} does not match rows {rows.shape}")
    return rows + bias


def grouped_inference_scores(rows: Tensor, f: Tensor, tau: float):
    """Group-averaged cosine scores and the matching softmax distribution."""
    scores = grouped_cosine_scores(rows, f)
    return scores, softmax(scores * (1.0 / tau), axis=-1)
