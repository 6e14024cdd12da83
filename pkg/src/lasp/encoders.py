"""Frozen miniature dual encoder: transformer text tower and patch vision tower.

Weights are drawn once from a seeded Gaussian and frozen ("synthetic
pretrained"). Gradients flow only through inputs (prompt slots, image
pixels) and, when enabled, the vision tower's LayerNorm affine params.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, layer_norm, softmax
from .errors import ConfigError, InputError
from .serialization import load_tensors, save_tensors


@dataclass(frozen=True)
class EncoderConfig:
    d_tok: int = 32
    d: int = 32              # joint embedding dimension
    n_layers: int = 2
    n_heads: int = 2
    ffn_mult: int = 2
    vocab_size: int = 4096
    max_len: int = 32
    tau: float = 0.01        # temperature; frozen, CLIP's converged value
    image_size: int = 16
    channels: int = 3
    patch_size: int = 4
    emb_std: float = 1.0     # token/positional embedding scale
    weight_gain: float = 4.0  # weight std = gain / sqrt(fan_in)
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.d_tok % self.n_heads != 0:
            raise ConfigError("d_tok must divide evenly into heads")


def _gauss(rng, shape, std):
    return rng.normal(0.0, std, size=shape)


def _weight(rng, shape, gain):
    # width-scaled init keeps activations O(1) so the class token's
    # contribution survives the residual stream of a random network
    return rng.normal(0.0, gain / math.sqrt(shape[0]), size=shape)


class _Transformer:
    """Shared pre-LN transformer stack over (B, S, D) inputs."""

    def __init__(self, cfg: EncoderConfig, rng, width: int, prefix: str):
        self.cfg = cfg
        self.width = width
        self.prefix = prefix
        self.layers = []
        gain = cfg.weight_gain
        for i in range(cfg.n_layers):
            lyr = {
                "wq": Tensor(_weight(rng, (width, width), gain)),
                "wk": Tensor(_weight(rng, (width, width), gain)),
                "wv": Tensor(_weight(rng, (width, width), gain)),
                "wo": Tensor(_weight(rng, (width, width), gain)),
                "ln1_g": Tensor(np.ones(width)),
                "ln1_b": Tensor(np.zeros(width)),
                "w1": Tensor(_weight(rng, (width, width * cfg.ffn_mult), gain)),
                "b1": Tensor(np.zeros(width * cfg.ffn_mult)),
                "w2": Tensor(_weight(rng, (width * cfg.ffn_mult, width), gain)),
                "b2": Tensor(np.zeros(width)),
                "ln2_g": Tensor(np.ones(width)),
                "ln2_b": Tensor(np.zeros(width)),
            }
            self.layers.append(lyr)
        self.ln_f_g = Tensor(np.ones(width))
        self.ln_f_b = Tensor(np.zeros(width))

    def ln_params(self) -> list[Tensor]:
        out = []
        for lyr in self.layers:
            out += [lyr["ln1_g"], lyr["ln1_b"], lyr["ln2_g"], lyr["ln2_b"]]
        out += [self.ln_f_g, self.ln_f_b]
        return out

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for i, lyr in enumerate(self.layers):
            for k, v in lyr.items():
                out[f"{self.prefix}.layer{i}.{k}"] = v
        out[f"{self.prefix}.ln_f_g"] = self.ln_f_g
        out[f"{self.prefix}.ln_f_b"] = self.ln_f_b
        return out

    def _attention(self, x: Tensor, lyr) -> Tensor:
        cfg = self.cfg
        b, s, d = x.shape
        h, dh = cfg.n_heads, self.width // cfg.n_heads

        def heads(t: Tensor) -> Tensor:
            return t.reshape(b, s, h, dh).transpose(0, 2, 1, 3)

        q, k, v = heads(x @ lyr["wq"]), heads(x @ lyr["wk"]), heads(x @ lyr["wv"])
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
        mixed = softmax(scores, axis=-1) @ v
        merged = mixed.transpose(0, 2, 1, 3).reshape(b, s, d)
        return merged @ lyr["wo"]

    def forward(self, x: Tensor) -> Tensor:
        for lyr in self.layers:
            x = x + self._attention(layer_norm(x, lyr["ln1_g"], lyr["ln1_b"]), lyr)
            hdn = layer_norm(x, lyr["ln2_g"], lyr["ln2_b"])
            x = x + ((hdn @ lyr["w1"] + lyr["b1"]).tanh() @ lyr["w2"] + lyr["b2"])
        return layer_norm(x, self.ln_f_g, self.ln_f_b)


class TextEncoder:
    """Frozen text tower; pools at the end-token (last) position."""

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.embedding = _gauss(rng, (cfg.vocab_size, cfg.d_tok), cfg.emb_std)
        self.pos = Tensor(_gauss(rng, (cfg.max_len, cfg.d_tok), cfg.emb_std))
        self.trunk = _Transformer(cfg, rng, cfg.d_tok, "text")
        self.proj = Tensor(_weight(rng, (cfg.d_tok, cfg.d), cfg.weight_gain))

    def named_params(self) -> dict[str, Tensor]:
        out = {"text.embedding": Tensor(self.embedding), "text.pos": self.pos,
               "text.proj": self.proj}
        out.update(self.trunk.named_params())
        return out

    def embed_ids(self, ids: list[int]) -> np.ndarray:
        return self.embedding[np.asarray(ids, dtype=np.int64)]

    def embed_class_name(self, tokenizer, class_name: str) -> np.ndarray:
        """Word-embedding rows of the class-name tokens (no start/end)."""
        if not class_name.strip():
            raise InputError("empty class name")
        words = tokenizer.words_of(class_name.replace("_", " "))
        ids = [tokenizer.word_id(w) for w in words]
        return self.embed_ids(ids)

    def encode_batch(self, x: Tensor) -> Tensor:
        if x.data.ndim != 3:
            raise InputError(f"expected (B, S, d_tok) embeddings, got {x.shape}")
        b, s, _ = x.shape
        if s > self.cfg.max_len:
            raise InputError(f"sequence length {s} exceeds max {self.cfg.max_len}")
        h = x + self.pos[:s]
        h = self.trunk.forward(h)
        pooled = h[:, s - 1, :]          # end token is always last
        return pooled @ self.proj

    def encode(self, seq: Tensor) -> Tensor:
        if seq.data.ndim != 2:
            raise InputError(f"expected (S, d_tok) embeddings, got {seq.shape}")
        return self.encode_batch(seq.reshape(1, *seq.shape))[0]


class VisionEncoder:
    """Frozen patch-transformer vision tower with optionally trainable LN."""

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed + 1)
        p, c = cfg.patch_size, cfg.channels
        self.w_patch = Tensor(_weight(rng, (p * p * c, cfg.d_tok), cfg.weight_gain))
        self.cls = _gauss(rng, (cfg.d_tok,), cfg.emb_std)
        n_patches = (cfg.image_size // p) ** 2
        self.pos = Tensor(_gauss(rng, (n_patches + 1, cfg.d_tok), cfg.emb_std))
        self.trunk = _Transformer(cfg, rng, cfg.d_tok, "vision")
        self.proj = Tensor(_weight(rng, (cfg.d_tok, cfg.d), cfg.weight_gain))
        self.ln_trainable = False

    def set_ln_trainable(self, flag: bool):
        self.ln_trainable = bool(flag)
        for t in self.trunk.ln_params():
            t.requires_grad = self.ln_trainable

    def ln_params(self) -> list[Tensor]:
        return self.trunk.ln_params()

    def named_params(self) -> dict[str, Tensor]:
        out = {"vision.w_patch": self.w_patch, "vision.cls": Tensor(self.cls),
               "vision.pos": self.pos, "vision.proj": self.proj}
        out.update(self.trunk.named_params())
        return out

    def _patchify(self, images: Tensor) -> Tensor:
        p = self.cfg.patch_size
        b, h, w, c = images.shape
        x = images.reshape(b, h // p, p, w // p, p, c)
        x = x.transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, (h // p) * (w // p), p * p * c)

    def encode_batch(self, images: Tensor) -> Tensor:
        if images.data.ndim != 4:
            raise InputError(f"expected (B, h, w, c) images, got {images.shape}")
        b, h, w, c = images.shape
        p = self.cfg.patch_size
        if h % p or w % p:
            raise InputError(f"image dims {h}x{w} not divisible by patch size {p}")
        tokens = self._patchify(images) @ self.w_patch
        cls = Tensor(np.broadcast_to(self.cls, (b, 1, self.cfg.d_tok)).copy())
        x = concat([cls, tokens], axis=1) + self.pos
        x = self.trunk.forward(x)
        return x[:, 0, :] @ self.proj

    def encode(self, image: Tensor) -> Tensor:
        if image.data.ndim != 3:
            raise InputError(f"expected (h, w, c) image, got {image.shape}")
        return self.encode_batch(image.reshape(1, *image.shape))[0]


def trainable_parameters(prompt_set, vision_encoder: VisionEncoder,
                         ln_finetune: bool) -> dict[str, Tensor]:
    """Exactly {prompt vectors, shared bias} plus vision LN affines if enabled."""
    params = {"prompts.vectors": prompt_set.vectors, "prompts.bias": prompt_set.bias}
    if ln_finetune:
        for i, lyr in enumerate(vision_encoder.trunk.layers):
            for k in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
                params[f"vision.layer{i}.{k}"] = lyr[k]
        params["vision.ln_f_g"] = vision_encoder.trunk.ln_f_g
        params["vision.ln_f_b"] = vision_encoder.trunk.ln_f_b
    return params


def save_snapshot(path, text_encoder: TextEncoder, vision_encoder: VisionEncoder):
    named = {}
    for k, v in text_encoder.named_params().items():
        named[k] = v.data
    for k, v in vision_encoder.named_params().items():
        named[k] = v.data
    save_tensors(path, named, meta={"seed": str(text_encoder.cfg.seed)})


def load_snapshot(path, text_encoder: TextEncoder, vision_encoder: VisionEncoder):
    named, _ = load_tensors(path)
    for enc in (text_encoder, vision_encoder):
        for k, v in enc.named_params().items():
            if k == "text.embedding":
                text_encoder.embedding[...] = named[k]
            elif k == "vision.cls":
                vision_encoder.cls[...] = named[k]
            else:
                v.data[...] = named[k]
