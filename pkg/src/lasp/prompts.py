"""Learnable prompt groups, template banks, and prompt assembly."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .autodiff import Tensor, concat
from .errors import ConfigError, InputError, TemplateError
from .tokenizer import END_ID, START_ID

PLACEHOLDER = "{}"


@dataclass
class PromptSet:
    """G groups of M learnable prompt vectors plus the shared output bias."""

    vectors: Tensor          # (G, M, d_tok)
    bias: Tensor             # (d,)

    @property
    def groups(self) -> int:
        return self.vectors.shape[0]

    @property
    def m(self) -> int:
        return self.vectors.shape[1]


def init_prompts(groups: int, m: int, d_tok: int, d: int, seed: int) -> PromptSet:
    if groups < 1 or m < 1:
        raise ConfigError(f"need groups >= 1 and m >= 1, got G={groups}, M={m}")
    rng = np.random.default_rng(seed)
    vectors = Tensor(rng.normal(0.0, 0.02, size=(groups, m, d_tok)),
                     requires_grad=True)
    bias = Tensor(np.zeros(d), requires_grad=True)
    return PromptSet(vectors=vectors, bias=bias)


def init_prompts_from_words(text_encoder, tokenizer, words: list[str],
                            groups: int, d: int, seed: int,
                            jitter: float = 0.3) -> PromptSet:
    """Warm-start prompt vectors from the token embeddings of real words.

    Each group gets the same word-embedding backbone plus independent
    Gaussian jitter of scale ``jitter`` so groups start near a meaningful
    context instead of in the flat region around the origin.
    """
    if groups < 1 or not words:
        raise ConfigError("need groups >= 1 and a non-empty word list")
    ids = [tokenizer.word_id(w) for w in words]
    base = text_encoder.embedding[np.asarray(ids)]
    rng = np.random.default_rng(seed)
    vecs = np.stack([base + jitter * rng.standard_normal(base.shape)
                     for _ in range(groups)])
    return PromptSet(Tensor(vecs, requires_grad=True),
                     Tensor(np.zeros(d), requires_grad=True))


@dataclass
class TemplateBank:
    templates: list[str]
    group_of: list[int] = field(default_factory=list)   # template index -> group

    def __post_init__(self):
        for t in self.templates:
            if t.count(PLACEHOLDER) != 1:
                raise TemplateError(f"template needs exactly one {PLACEHOLDER!r}: {t!r}")
        if not self.group_of:
            self.group_of = [0] * len(self.templates)

    def __len__(self) -> int:
        return len(self.templates)

    @property
    def groups(self) -> int:
        return max(self.group_of) + 1 if self.group_of else 1

    def indices_of_group(self, g: int) -> list[int]:
        return [i for i, gi in enumerate(self.group_of) if gi == g]


def load_template_bank(source: str = "34") -> TemplateBank:
    """Shipped banks: "34" (default), "100", "6" (surface-form paraphrases
    of one context), "1" ("a photo of {}")."""
    if source == "1":
        return TemplateBank(["a photo of {}"])
    if source in ("6", "34", "100"):
        text = resources.files("lasp.assets").joinpath(f"templates_{source}.txt").read_text("utf-8")
    else:
        with open(source, "r", encoding="utf-8") as fh:
            text = fh.read()
    templates = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not templates:
        raise ConfigError(f"template source {source!r} is empty")
    return TemplateBank(templates)


def render_template(template: str, class_name: str) -> str:
    if template.count(PLACEHOLDER) != 1:
        raise TemplateError(f"template needs exactly one {PLACEHOLDER!r}: {template!r}")
    return template.replace(PLACEHOLDER, class_name.replace("_", " "))


def split_templates(bank: TemplateBank, groups: int, seed: int) -> TemplateBank:
    """Balanced random partition of the bank into ``groups`` subsets."""
    n = len(bank)
    if n < groups:
        raise ConfigError(f"cannot split {n} templates into {groups} groups")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    base, extra = divmod(n, groups)
    group_of = [0] * n
    pos = 0
    for g in range(groups):
        size = base + (1 if g < extra else 0)   # larger groups first
        for idx in order[pos : pos + size]:
            group_of[int(idx)] = g
        pos += size
    return TemplateBank(list(bank.templates), group_of)


def generate_random_templates(n: int, min_len: int, max_len: int, seed: int,
                              lexicon: list[str] | None = None) -> TemplateBank:
    """Random filler-word templates with the class placeholder at the end."""
    if not (1 <= min_len <= max_len):
        raise ConfigError(f"bad length range [{min_len}, {max_len}]")
    if lexicon is None:
        text = resources.files("lasp.assets").joinpath("filler_words.txt").read_text("utf-8")
        lexicon = [w for w in text.split() if w]
    rng = np.random.default_rng(seed)
    templates = []
    for _ in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        words = [lexicon[int(i)] for i in rng.integers(0, len(lexicon), size=length)]
        templates.append(" ".join(words) + " " + PLACEHOLDER)
    return TemplateBank(templates)


@dataclass
class ClassVocabulary:
    """Base classes (with images) followed by virtual classes (names only)."""

    base_names: list[str]
    virtual_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._check_unique()

    def _check_unique(self):
        union = self.base_names + self.virtual_names
        if len(set(union)) != len(union):
            dupes = sorted({n for n in union if union.count(n) > 1})
            raise InputError(f"duplicate class names: {dupes}")

    @property
    def all_names(self) -> list[str]:
        return self.base_names + self.virtual_names

    def with_virtual(self, names: list[str]) -> "ClassVocabulary":
        return ClassVocabulary(list(self.base_names),
                               self.virtual_names + list(names))


def assemble_learnable_prompt(prompts: PromptSet, group: int,
                              class_name: str, text_encoder, tokenizer) -> Tensor:
    """[start, p_1^g..p_M^g, class tokens, end] as a gradient-connected sequence."""
    if not 0 <= group < prompts.groups:
        raise IndexError(f"group {group} out of range for G={prompts.groups}")
    start = Tensor(text_encoder.embed_ids([START_ID]))
    end = Tensor(text_encoder.embed_ids([END_ID]))
    name_rows = Tensor(text_encoder.embed_class_name(tokenizer, class_name))
    return concat([start, prompts.vectors[group], name_rows, end], axis=0)
