"""Labeled example pools: synthetic Gaussian mixtures and IDX image files.

Synthetic pools keep their generating parameters around so the oracle module
can compute exact Bayes ceilings for them. IDX is the one supported binary
image format; anything else converts upstream.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .oracles import GaussianMixtureRef


class ConfigurationError(ValueError):
    """A dataset, split, or generator parameter is out of range."""


class IdxFormatError(ValueError):
    """An IDX file violates the documented layout."""


@dataclass(eq=False)
class LabeledDataset:
    """Immutable pool of labeled example vectors.

    ``examples`` is (n, d) float64; ``labels`` holds one integer class label
    per row. A per-class row index supports fast class-conditional sampling.
    """

    examples: np.ndarray
    labels: np.ndarray
    provenance: str = "synthetic"
    by_class: dict[int, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        self.examples = np.asarray(self.examples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.examples.ndim != 2:
            raise ConfigurationError(
                f"examples must be a (n, d) matrix, got {self.examples.shape}")
        if self.labels.shape != (self.examples.shape[0],):
            raise ConfigurationError(
                f"labels shape {self.labels.shape} does not match "
                f"{self.examples.shape[0]} examples")
        self.by_class = {
            int(label): np.flatnonzero(self.labels == label)
            for label in np.unique(self.labels)
        }
        if not self.by_class:
            raise ConfigurationError("dataset has no examples")

    @property
    def dim(self) -> int:
        return self.examples.shape[1]

    @property
    def class_labels(self) -> list[int]:
        return sorted(self.by_class)

    def class_count(self, label: int) -> int:
        return len(self.by_class[label])


@dataclass
class SyntheticSpec:
    """Parameters of a synthetic Gaussian-mixture family.

    Class means are uniform in the hypercube [-mean_range, mean_range]^dim.
    Class covariances are R diag(e_1..e_d) R^T with log-spaced eigenvalues
    spanning exactly ``condition_number`` around ``scale`` and a seeded
    random rotation R, so anisotropy is controlled directly. ``seed``
    determines the mixture parameters; ``sample_seed`` (defaults to ``seed``)
    determines the drawn example pool, so fresh pools can be re-drawn from
    one family.
    """

    dim: int = 16
    classes: int = 5
    per_class: int = 200
    mean_range: float = 3.0
    condition_number: float = 1.0
    scale: float = 1.0
    seed: int = 0
    sample_seed: int | None = None

    def validate(self) -> None:
        if self.dim < 1:
            raise ConfigurationError(f"dim must be >= 1, got {self.dim}")
        if self.classes < 2:
            raise ConfigurationError(f"classes must be >= 2, got {self.classes}")
        if self.per_class < 1:
            raise ConfigurationError(f"per_class must be >= 1, got {self.per_class}")
        if self.condition_number < 1:
            raise ConfigurationError(
                f"condition_number must be >= 1, got {self.condition_number}")
        if self.scale <= 0:
            raise ConfigurationError(f"scale must be positive, got {self.scale}")
        if self.mean_range < 0:
            raise ConfigurationError(f"mean_range must be >= 0, got {self.mean_range}")


def _random_rotation(dim: int, rng: np.random.Generator) -> np.ndarray:
    m = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(m)
    return q * np.sign(np.diag(r))


def _class_covariance(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.condition_number == 1.0 or spec.dim == 1:
        return spec.scale * np.eye(spec.dim)
    half_span = np.sqrt(spec.condition_number)
    lo, hi = spec.scale / half_span, spec.scale * half_span
    if spec.dim == 2:
        eigs = np.array([lo, hi])
    else:
        # Endpoints pinned so the realized condition number is exact.
        inner = np.exp(rng.uniform(np.log(lo), np.log(hi), size=spec.dim - 2))
        eigs = np.concatenate([[lo], np.sort(inner), [hi]])
    rot = _random_rotation(spec.dim, rng)
    return rot @ np.diag(eigs) @ rot.T


def mixture_from_spec(spec: SyntheticSpec) -> GaussianMixtureRef:
    """Ground-truth mixture parameters implied by a spec (pure in ``seed``)."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    means = rng.uniform(-spec.mean_range, spec.mean_range,
                        size=(spec.classes, spec.dim))
    covs = np.stack([_class_covariance(spec, rng) for _ in range(spec.classes)])
    return GaussianMixtureRef(means, covs)


def generate_synthetic(spec: SyntheticSpec) -> tuple[LabeledDataset, GaussianMixtureRef]:
    """Draw a labeled pool from the spec's mixture; returns (pool, truth).

    Labels are 1..K. Identical specs produce bit-identical pools.
    """
    truth = mixture_from_spec(spec)
    sample_seed = spec.seed if spec.sample_seed is None else spec.sample_seed
    rng = np.random.default_rng(np.random.SeedSequence((sample_seed, 0x5a)))
    chols = [np.linalg.cholesky(truth.covariances[k]) for k in range(spec.classes)]
    examples = np.empty((spec.classes * spec.per_class, spec.dim))
    labels = np.empty(spec.classes * spec.per_class, dtype=np.int64)
    for k in range(spec.classes):
        z = rng.standard_normal((spec.per_class, spec.dim))
        rows = slice(k * spec.per_class, (k + 1) * spec.per_class)
        examples[rows] = truth.means[k] + z @ chols[k].T
        labels[rows] = k + 1
    return LabeledDataset(examples, labels, provenance="synthetic"), truth


# ---------------------------------------------------------------------------
# IDX binary format

_IDX_IMAGE_MAGIC = 0x00000803
_IDX_LABEL_MAGIC = 0x00000801


def _read_exact(data: bytes, offset: int, count: int, what: str) -> bytes:
    if len(data) < offset + count:
        raise IdxFormatError(
            f"truncated {what}: need {count} bytes at offset {offset}, "
            f"file has {len(data)}")
    return data[offset:offset + count]


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Load an IDX image/label file pair into a dataset.

    Pixel bytes are scaled to [0, 1]; images are flattened row-major.
    """
    with open(images_path, "rb") as fh:
        img = fh.read()
    with open(labels_path, "rb") as fh:
        lab = fh.read()

    (img_magic,) = struct.unpack(">I", _read_exact(img, 0, 4, "image header"))
    if img_magic != _IDX_IMAGE_MAGIC:
        raise IdxFormatError(
            f"bad image magic 0x{img_magic:08x} at byte 0 of {images_path}")
    n, rows, cols = struct.unpack(">III", _read_exact(img, 4, 12, "image header"))
    payload = _read_exact(img, 16, n * rows * cols, "image payload")
    if len(img) != 16 + n * rows * cols:
        raise IdxFormatError(
            f"image file has {len(img) - 16 - n * rows * cols} trailing bytes "
            f"after offset {16 + n * rows * cols}")

    (lab_magic,) = struct.unpack(">I", _read_exact(lab, 0, 4, "label header"))
    if lab_magic != _IDX_LABEL_MAGIC:
        raise IdxFormatError(
            f"bad label magic 0x{lab_magic:08x} at byte 0 of {labels_path}")
    (n_labels,) = struct.unpack(">I", _read_exact(lab, 4, 4, "label header"))
    if n_labels != n:
        raise IdxFormatError(
            f"label count {n_labels} (byte 4 of {labels_path}) does not match "
            f"image count {n}")
    label_payload = _read_exact(lab, 8, n_labels, "label payload")

    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(n, rows * cols)
    examples = pixels.astype(np.float64) / 255.0
    labels = np.frombuffer(label_payload, dtype=np.uint8).astype(np.int64)
    return LabeledDataset(examples, labels, provenance="file")


def write_idx(images_path, labels_path, examples, labels,
              rows: int, cols: int) -> None:
    """Write an IDX pair; values must be byte-representable (v*255 integral)."""
    examples = np.asarray(examples, dtype=np.float64)
    labels = np.asarray(labels)
    n, d = examples.shape
    if d != rows * cols:
        raise IdxFormatError(f"vector length {d} does not equal {rows}x{cols}")
    scaled = examples * 255.0
    rounded = np.rint(scaled)
    if np.abs(scaled - rounded).max() > 1e-9 or scaled.min() < 0 or scaled.max() > 255:
        raise IdxFormatError("examples are not byte-representable in [0, 1]")
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", _IDX_IMAGE_MAGIC, n, rows, cols))
        fh.write(rounded.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", _IDX_LABEL_MAGIC, n))
        fh.write(labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# Class splits and k-fold machinery


@dataclass
class ClassSplit:
    """Disjoint class-label sets for train / validation / test."""

    train: tuple[int, ...]
    validation: tuple[int, ...]
    test: tuple[int, ...]
    fold: int | None = None

    def part(self, name: str) -> tuple[int, ...]:
        return {"train": self.train, "validation": self.validation,
                "test": self.test}[name]


def split_classes(dataset: LabeledDataset, fractions, seed: int) -> ClassSplit:
    """Deterministically shuffle class labels and partition them.

    ``fractions`` are (train, validation, test) proportions; all must be
    positive and every split must receive at least two classes.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ConfigurationError(
            f"fractions must be three positive values, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"fractions must sum to 1, got {sum(fractions)}")
    labels = np.array(dataset.class_labels)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x51)))
    rng.shuffle(labels)
    n = len(labels)
    sizes = [int(np.floor(f * n)) for f in fractions]
    remainders = [f * n - s for f, s in zip(fractions, sizes)]
    for _ in range(n - sum(sizes)):
        grow = int(np.argmax(remainders))
        sizes[grow] += 1
        remainders[grow] = -1.0
    if min(sizes) < 2:
        raise ConfigurationError(
            f"each split needs >= 2 classes; {n} classes with fractions "
            f"{fractions} give sizes {sizes}")
    a, b = sizes[0], sizes[0] + sizes[1]
    return ClassSplit(train=tuple(int(x) for x in labels[:a]),
                      validation=tuple(int(x) for x in labels[a:b]),
                      test=tuple(int(x) for x in labels[b:]))


def kfold_splits(dataset_names, k: int, seed: int = 0) -> list[tuple[tuple[str, ...], tuple[str, ...]]]:
    """Assign named datasets to k folds of (in-domain, held-out) groups.

    Every dataset is held out in exactly one fold; fold sizes differ by at
    most one when the count does not divide evenly.
    """
    names = list(dataset_names)
    if k < 2:
        raise ConfigurationError(f"k must be >= 2, got {k}")
    if k > len(names):
        raise ConfigurationError(
            f"k = {k} exceeds the {len(names)} available datasets")
    order = np.array(names, dtype=object)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xf0)))
    rng.shuffle(order)
    groups = [list(order[i::k]) for i in range(k)]
    folds = []
    for i in range(k):
        held_out = tuple(groups[i])
        in_domain = tuple(x for j, g in enumerate(groups) if j != i for x in g)
        folds.append((in_domain, held_out))
    return folds
