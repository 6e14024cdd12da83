"""Dataset ingestion and the synthetic desk-scale fixture generator.

Synthetic classes are Gaussian image clusters whose centers are optimized
(by gradient ascent on the pixels) to align with the hand-crafted text
anchors of their class names, so that zero-shot structure exists for the
text-to-text machinery to exploit. ``separation`` scales the cluster
tightness: noise std is 1/separation.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .autodiff import Tensor, log_softmax, no_grad, normalize_rows
from .encoders import EncoderConfig
from .errors import DataError
from .model import PromptedClip
from .prompts import ClassVocabulary, init_prompts, load_template_bank
from .trainer import FewShotDataset

# -- image files ---------------------------------------------------------------

NPT_MAGIC = b"NPT1"


def write_image_npt(path, image: np.ndarray):
    image = np.asarray(image, dtype="<f8")
    h, w, c = image.shape
    with open(path, "wb") as fh:
        fh.write(NPT_MAGIC + f" {h} {w} {c}\n".encode())
        fh.write(np.ascontiguousarray(image).tobytes())


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw.startswith(NPT_MAGIC):
        header, _, payload = raw.partition(b"\n")
        try:
            h, w, c = (int(x) for x in header[len(NPT_MAGIC):].split())
        except ValueError as exc:
            raise DataError(f"{path}: malformed raw-tensor header") from exc
        need = h * w * c * 8
        if len(payload) < need:
            raise DataError(f"{path}: truncated raw-tensor payload")
        return np.frombuffer(payload, dtype="<f8", count=h * w * c).reshape(h, w, c).astype(np.float64)
    if raw.startswith(b"P6"):
        return _read_ppm(path, raw)
    raise DataError(f"{path}: unknown image format")


def _read_ppm(path, raw: bytes) -> np.ndarray:
    fields: list[bytes] = []
    i = 2
    while len(fields) < 3 and i < len(raw):
        while i < len(raw) and raw[i : i + 1].isspace():
            i += 1
        if raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(raw) and not raw[j : j + 1].isspace():
            j += 1
        fields.append(raw[i:j])
        i = j
    i += 1      # single whitespace after maxval
    try:
        w, h, maxval = int(fields[0]), int(fields[1]), int(fields[2])
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed PPM header") from exc
    need = w * h * 3
    data = np.frombuffer(raw, dtype=np.uint8, count=need, offset=i)
    if data.size < need:
        raise DataError(f"{path}: truncated PPM payload")
    return data.reshape(h, w, 3).astype(np.float64) / maxval


# -- manifests -----------------------------------------------------------------


@dataclass
class DatasetManifest:
    root: str
    base_classes: list[str]
    new_classes: list[str]
    images: dict[str, dict[str, list[str]]]    # class -> {"train"/"test": paths}
    image_format: str = "npt"

    def validate(self):
        overlap = set(self.base_classes) & set(self.new_classes)
        if overlap:
            raise DataError(f"overlapping base/new classes: {sorted(overlap)}")
        if not self.base_classes or not self.new_classes:
            raise DataError("manifest needs non-empty base and new class lists")
        for name in self.base_classes + self.new_classes:
            if name not in self.images:
                raise DataError(f"class {name!r} has no image lists")
            for files in self.images[name].values():
                for f in files:
                    p = os.path.join(self.root, f)
                    if not os.path.exists(p):
                        raise DataError(f"missing image file: {p}")


def load_manifest(path) -> DatasetManifest:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc
    m = DatasetManifest(root=os.path.dirname(os.path.abspath(path)),
                        base_classes=doc["base_classes"],
                        new_classes=doc["new_classes"],
                        images=doc["images"],
                        image_format=doc.get("image_format", "npt"))
    m.validate()
    return m


def load_dataset(manifest: DatasetManifest) -> dict[str, FewShotDataset]:
    """Decode every referenced image into the three tagged splits."""

    def gather(names: list[str], part: str, split: str) -> FewShotDataset:
        imgs, labels = [], []
        for li, name in enumerate(names):
            for f in manifest.images[name].get(part, []):
                imgs.append(read_image(os.path.join(manifest.root, f)))
                labels.append(li)
        if not imgs:
            raise DataError(f"split {split!r} has no images")
        return FewShotDataset(np.stack(imgs), np.asarray(labels, dtype=np.int64), split)

    return {
        "base-train": gather(manifest.base_classes, "train", "base-train"),
        "base-test": gather(manifest.base_classes, "test", "base-test"),
        "new-test": gather(manifest.new_classes, "test", "new-test"),
    }


# -- synthetic fixture ---------------------------------------------------------


@dataclass
class SyntheticDatasetSpec:
    n_base: int = 10
    n_new: int = 10
    samples_per_class: int = 20       # training pool per base class
    test_samples: int = 20
    separation: float = 4.0
    image_size: int = 16
    channels: int = 3
    seed: int = 0
    noise_seed: int = 100             # cluster noise stream, independent of seed
    center_steps: int = 600
    center_lr: float = 0.03
    context_shift: float = 0.0        # mix new-class targets toward shift_template
    shift_template: str = "a picture of a {}"

    def __post_init__(self):
        if self.separation <= 0:
            raise DataError("separation must be positive")
        if not 0.0 <= self.context_shift <= 1.0:
            raise DataError("context_shift must lie in [0, 1]")


@dataclass
class SyntheticDataset:
    vocabulary: ClassVocabulary
    splits: dict[str, FewShotDataset]
    centers: np.ndarray = field(repr=False, default=None)

    @property
    def base_names(self):
        return self.vocabulary.base_names

    @property
    def new_names(self):
        return self.vocabulary.virtual_names


def _class_word_pool() -> list[str]:
    text = resources.files("lasp.assets").joinpath("class_words.txt").read_text("utf-8")
    return [w for w in text.split() if w]


def _unit(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def _aligned_centers(model: PromptedClip, targets: np.ndarray,
                     spec: SyntheticDatasetSpec, rng) -> np.ndarray:
    """Gradient-ascend pixels so each class image is classified correctly
    against the given unit target directions (softmax over classes)."""
    an_t = Tensor(targets.T[None])                         # (1, d, C)
    n = len(targets)
    shape = (n, spec.image_size, spec.image_size, spec.channels)
    x = Tensor(0.5 + 0.15 * rng.standard_normal(shape), requires_grad=True)
    eye = Tensor(np.eye(n))
    m1 = np.zeros_like(x.data)
    m2 = np.zeros_like(x.data)
    tau_hi, tau_lo = 0.2, 0.02
    steps = spec.center_steps
    for it in range(steps):
        # annealed temperature: soft early for gradient signal, sharp late
        tau = tau_hi * (tau_lo / tau_hi) ** (it / max(steps - 1, 1))
        x.zero_grad()
        feats = model.vision_encoder.encode_batch(x)
        cos = normalize_rows(feats) @ an_t                 # (1, n, n)
        logp = log_softmax(cos * (1.0 / tau), axis=-1).mean(axis=0)
        (logp * eye).sum().backward()
        m1 = 0.9 * m1 + 0.1 * x.grad
        m2 = 0.999 * m2 + 0.001 * x.grad * x.grad
        x.data += spec.center_lr * m1 / (np.sqrt(m2) + 1e-8)
        np.clip(x.data, 0.0, 1.0, out=x.data)
    return x.data.copy()


def _center_targets(probe: PromptedClip, names: list[str],
                    spec: SyntheticDatasetSpec, enc_cfg: EncoderConfig) -> np.ndarray:
    """Unit target directions: template-mean anchors, with new-class targets
    optionally rotated toward an out-of-bank context so hand-crafted anchors
    are imperfect for exactly the classes that have no training images."""
    anchors = probe.anchors(names)                         # (L, C, d)
    base_dir = _unit(_unit(anchors).mean(axis=0))          # (C, d)
    if spec.context_shift == 0.0:
        return base_dir
    from .prompts import TemplateBank
    alt = PromptedClip(enc_cfg, init_prompts(1, 1, enc_cfg.d_tok, enc_cfg.d, 0),
                       TemplateBank([spec.shift_template]))
    alt_dir = _unit(alt.anchors(names)[0])
    g = spec.context_shift
    targets = base_dir.copy()
    targets[spec.n_base:] = _unit((1 - g) * base_dir[spec.n_base:]
                                  + g * alt_dir[spec.n_base:])
    return targets


def make_synthetic_dataset(spec: SyntheticDatasetSpec,
                           enc_cfg: EncoderConfig | None = None,
                           template_source: str = "34") -> SyntheticDataset:
    enc_cfg = enc_cfg or EncoderConfig(image_size=spec.image_size,
                                       channels=spec.channels)
    rng = np.random.default_rng(spec.seed)
    pool = _class_word_pool()
    order = rng.permutation(len(pool))
    names = [pool[int(i)] for i in order[: spec.n_base + spec.n_new]]
    base_names, new_names = names[: spec.n_base], names[spec.n_base :]
    bank = load_template_bank(template_source)
    probe = PromptedClip(enc_cfg, init_prompts(1, 1, enc_cfg.d_tok, enc_cfg.d, 0), bank)
    targets = _center_targets(probe, names, spec, enc_cfg)
    with_centers = _aligned_centers(probe, targets, spec,
                                    np.random.default_rng(spec.seed))

    std = 1.0 / spec.separation
    noise_rng = np.random.default_rng(spec.noise_seed)

    def cluster(class_idx: list[int], per_class: int, split: str) -> FewShotDataset:
        imgs, labels = [], []
        for li, ci in enumerate(class_idx):
            noise = noise_rng.normal(0.0, std,
                               size=(per_class, spec.image_size, spec.image_size,
                                     spec.channels))
            imgs.append(with_centers[ci] + noise)
            labels.extend([li] * per_class)
        return FewShotDataset(np.concatenate(imgs),
                              np.asarray(labels, dtype=np.int64), split)

    base_idx = list(range(spec.n_base))
    new_idx = list(range(spec.n_base, spec.n_base + spec.n_new))
    splits = {
        "base-train": cluster(base_idx, spec.samples_per_class, "base-train"),
        "base-test": cluster(base_idx, spec.test_samples, "base-test"),
        "new-test": cluster(new_idx, spec.test_samples, "new-test"),
    }
    vocab = ClassVocabulary(base_names, new_names)
    return SyntheticDataset(vocab, splits, centers=with_centers)


def write_dataset(out_dir, data: SyntheticDataset) -> str:
    """Persist a synthetic dataset as image files plus a JSON manifest."""
    os.makedirs(out_dir, exist_ok=True)
    images: dict[str, dict[str, list[str]]] = {}

    def dump(split: str, names: list[str], part: str):
        ds = data.splits[split]
        for i, (img, lab) in enumerate(zip(ds.images, ds.labels)):
            name = names[int(lab)]
            rel = os.path.join(name, f"{part}_{i:04d}.npt")
            os.makedirs(os.path.join(out_dir, name), exist_ok=True)
            write_image_npt(os.path.join(out_dir, rel), img)
            images.setdefault(name, {}).setdefault(part, []).append(rel)

    dump("base-train", data.base_names, "train")
    dump("base-test", data.base_names, "test")
    dump("new-test", data.new_names, "test")
    manifest = {
        "base_classes": data.base_names,
        "new_classes": data.new_names,
        "images": images,
        "image_format": "npt",
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path
