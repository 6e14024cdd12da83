"""Ties the frozen dual encoder to the learnable prompt state."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, no_grad, stack
from .encoders import EncoderConfig, TextEncoder, VisionEncoder
from .losses import apply_bias_correction
from .prompts import (PromptSet, TemplateBank, assemble_learnable_prompt,
                      render_template)
from .tokenizer import Tokenizer


class PromptedClip:
    """Synthetic-pretrained dual encoder plus a learnable prompt set."""

    def __init__(self, enc_cfg: EncoderConfig, prompt_set: PromptSet,
                 bank: TemplateBank, tokenizer: Tokenizer | None = None):
        self.cfg = enc_cfg
        self.tokenizer = tokenizer or Tokenizer(max_len=enc_cfg.max_len)
        self.text_encoder = TextEncoder(enc_cfg)
        self.vision_encoder = VisionEncoder(enc_cfg)
        self.prompt_set = prompt_set
        self.bank = bank
        self._anchor_cache: dict[tuple[str, ...], np.ndarray] = {}

    @property
    def tau(self) -> float:
        return self.cfg.tau

    # -- text side ------------------------------------------------------------

    def _encode_sequences(self, seqs: list[Tensor]) -> Tensor:
        """Encode variable-length sequences, batching equal lengths."""
        buckets: dict[int, list[int]] = {}
        for i, s in enumerate(seqs):
            buckets.setdefault(s.shape[0], []).append(i)
        rows: list[Tensor | None] = [None] * len(seqs)
        for length, idxs in buckets.items():
            batch = stack([seqs[i] for i in idxs], axis=0)
            out = self.text_encoder.encode_batch(batch)
            for j, i in enumerate(idxs):
                rows[i] = out[j]
        return stack(rows, axis=0)

    def anchors(self, class_names: list[str]) -> np.ndarray:
        """Frozen hand-crafted features, shape (L, C, d); cached per class set."""
        key = tuple(class_names)
        cached = self._anchor_cache.get(key)
        if cached is not None:
            return cached
        tok = self.tokenizer
        with no_grad():
            seqs = []
            for template in self.bank.templates:
                for name in class_names:
                    ids = tok.tokenize(render_template(template, name))
                    seqs.append(Tensor(self.text_encoder.embed_ids(ids)))
            flat = self._encode_sequences(seqs)
        out = flat.data.reshape(len(self.bank), len(class_names), self.cfg.d)
        self._anchor_cache[key] = out
        return out

    def class_rows(self, class_names: list[str], with_bias: bool = True) -> Tensor:
        """Learnable-prompt class features, shape (G, C, d), grad-connected."""
        groups = []
        for g in range(self.prompt_set.groups):
            seqs = [assemble_learnable_prompt(self.prompt_set, g, name,
                                              self.text_encoder, self.tokenizer)
                    for name in class_names]
            groups.append(self._encode_sequences(seqs))
        rows = stack(groups, axis=0)
        if with_bias:
            rows = apply_bias_correction(rows, self.prompt_set.bias)
        return rows

    # -- vision side ----------------------------------------------------------

    def encode_images(self, images: np.ndarray, requires_grad: bool = False) -> Tensor:
        batch = Tensor(np.asarray(images, dtype=np.float64),
                       requires_grad=requires_grad)
        if batch.data.ndim == 3:
            return self.vision_encoder.encode(batch)
        return self.vision_encoder.encode_batch(batch)
