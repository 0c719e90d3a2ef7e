"""Feature datasets, base/novel class splits, low-shot sampling, the
synthetic world generator, and the `LSF1` feature-store format.

Features are stored as float32 (matching the on-disk format exactly, so
save/load round-trips are bit-exact); all arithmetic on them promotes to
float64 at the point of use.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .rng import SeededRng, derive_seed
from .storeio import Reader, StoreParseError, Writer

FEATURE_MAGIC = b"LSF1"
FEATURE_VERSION = 1


@dataclass(frozen=True)
class FeatureDataset:
    """N feature vectors with integer class labels in [0, class_count)."""

    features: np.ndarray  # (N, d) float32
    labels: np.ndarray  # (N,) int64
    class_count: int

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ValueError("features must be a non-empty (N, d) array")
        if labels.shape != (feats.shape[0],):
            raise ValueError("labels must be one per example")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features must be finite")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValueError("labels must lie in [0, class_count)")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def count(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def indices_of_class(self, class_id: int) -> np.ndarray:
        return np.nonzero(self.labels == class_id)[0]

    def restrict_to(self, class_ids) -> np.ndarray:
        """Indices of all examples whose label is in class_ids."""
        mask = np.isin(self.labels, np.asarray(sorted(class_ids)))
        return np.nonzero(mask)[0]


@dataclass(frozen=True)
class ClassSplit:
    """Base/novel partition of class ids plus cross-validation halves.

    The cv halves partition base and novel: cv runs use the `_1` halves,
    final runs the `_2` halves, so hyperparameter search never sees the
    classes it is ultimately judged on.
    """

    base_ids: tuple[int, ...]
    novel_ids: tuple[int, ...]
    cv_base_1: tuple[int, ...]
    cv_base_2: tuple[int, ...]
    cv_novel_1: tuple[int, ...]
    cv_novel_2: tuple[int, ...]

    def __post_init__(self):
        base, novel = set(self.base_ids), set(self.novel_ids)
        if base & novel:
            raise ValueError("base and novel classes overlap")
        if set(self.cv_base_1) | set(self.cv_base_2) != base:
            raise ValueError("cv base halves must partition base")
        if set(self.cv_base_1) & set(self.cv_base_2):
            raise ValueError("cv base halves overlap")
        if set(self.cv_novel_1) | set(self.cv_novel_2) != novel:
            raise ValueError("cv novel halves must partition novel")
        if set(self.cv_novel_1) & set(self.cv_novel_2):
            raise ValueError("cv novel halves overlap")

    @property
    def all_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.base_ids + self.novel_ids))

    def cv_half(self, which: int) -> "ClassSplit":
        """Derived split over one cv half (1 = search, 2 = final)."""
        if which == 1:
            base, novel = self.cv_base_1, self.cv_novel_1
        elif which == 2:
            base, novel = self.cv_base_2, self.cv_novel_2
        else:
            raise ValueError("cv half must be 1 or 2")
        return make_trivial_split(base, novel)


def make_trivial_split(base_ids, novel_ids) -> ClassSplit:
    """ClassSplit with degenerate cv halves (everything in half 1)."""
    base = tuple(sorted(base_ids))
    novel = tuple(sorted(novel_ids))
    return ClassSplit(base, novel, base, (), novel, ())


def _random_partition(ids: np.ndarray, first_count: int, rng: SeededRng):
    perm = rng.permutation(ids.shape[0])
    shuffled = ids[perm]
    first = tuple(sorted(int(c) for c in shuffled[:first_count]))
    second = tuple(sorted(int(c) for c in shuffled[first_count:]))
    return first, second


def split_classes(class_count: int, base_fraction: float, seed: int) -> ClassSplit:
    """Uniformly random base/novel partition with cv halves inside each."""
    if class_count < 4:
        raise ValueError("need at least 4 classes to split")
    if not 0.0 < base_fraction < 1.0:
        raise ValueError("base_fraction must be in (0, 1)")
    n_base = round(base_fraction * class_count)
    if n_base < 1 or n_base >= class_count:
        raise ValueError(
            f"base_fraction={base_fraction} leaves an empty side "
            f"for {class_count} classes"
        )
    rng = SeededRng(seed)
    all_ids = np.arange(class_count)
    base, novel = _random_partition(all_ids, n_base, rng)
    cv_b1, cv_b2 = _random_partition(np.asarray(base), len(base) // 2, rng)
    cv_n1, cv_n2 = _random_partition(np.asarray(novel), len(novel) // 2, rng)
    return ClassSplit(base, novel, cv_b1, cv_b2, cv_n1, cv_n2)


@dataclass(frozen=True)
class LowShotTrainSet:
    """All base-class examples plus exactly n per novel class.

    Novel features are materialized arrays (hallucination appends to
    them); `novel_is_real` distinguishes drawn examples from generated
    ones.
    """

    base_features: np.ndarray
    base_labels: np.ndarray
    novel_features: np.ndarray
    novel_labels: np.ndarray
    novel_is_real: np.ndarray
    n: int
    trial_seed: int
    class_count: int

    def combined(self) -> tuple[np.ndarray, np.ndarray]:
        feats = np.concatenate([self.base_features, self.novel_features])
        labels = np.concatenate([self.base_labels, self.novel_labels])
        return feats, labels

    def novel_class_counts(self) -> dict[int, int]:
        ids, counts = np.unique(self.novel_labels, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}


def sample_low_shot(
    data: FeatureDataset, split: ClassSplit, n: int, seed: int
) -> LowShotTrainSet:
    """Keep all base-class examples, draw n per novel class uniformly
    without replacement. Deterministic under seed."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = SeededRng(seed)
    base_idx = data.restrict_to(split.base_ids)
    novel_parts = []
    for class_id in split.novel_ids:
        pool = data.indices_of_class(class_id)
        if pool.shape[0] < n:
            raise ValueError(
                f"novel class {class_id} has {pool.shape[0]} examples, "
                f"need {n}"
            )
        pick = rng.choice_without_replacement(pool.shape[0], n)
        novel_parts.append(pool[np.sort(pick)])
    novel_idx = (
        np.concatenate(novel_parts) if novel_parts else np.empty(0, dtype=np.int64)
    )
    return LowShotTrainSet(
        base_features=data.features[base_idx],
        base_labels=data.labels[base_idx],
        novel_features=data.features[novel_idx],
        novel_labels=data.labels[novel_idx],
        novel_is_real=np.ones(novel_idx.shape[0], dtype=bool),
        n=n,
        trial_seed=seed,
        class_count=data.class_count,
    )


@dataclass(frozen=True)
class SyntheticSpec:
    """World where every class shares the same M modes of variation.

    Examples are rectify(mu_c + t_m + eps): class mean mu_c, one of M
    shared mode vectors t_m, Gaussian noise eps. Because the t_m are
    identical across classes, the analogy "mode m1 of class a is to mode
    m2 of class a as mode m1 of class b is to ..." has an exact
    pre-rectification answer, which is what the hallucination pipeline
    is supposed to exploit.
    """

    raw_dim: int = 32
    base_classes: int = 40
    novel_classes: int = 20
    mode_count: int = 8
    class_mean_scale: float = 1.0
    mode_scale: float = 1.0
    noise_sigma: float = 0.25
    examples_per_class: int = 200
    test_examples_per_class: int = 50

    def __post_init__(self):
        if self.mode_count < 1:
            raise ValueError("mode_count must be at least 1")
        if self.class_mean_scale <= 0 or self.mode_scale <= 0:
            raise ValueError("scales must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.base_classes < 2 or self.novel_classes < 2:
            raise ValueError("need at least 2 base and 2 novel classes")

    @property
    def class_count(self) -> int:
        return self.base_classes + self.novel_classes


@dataclass(frozen=True)
class SyntheticParams:
    """Latent world parameters: class means and shared mode vectors."""

    class_means: np.ndarray  # (class_count, raw_dim)
    mode_vectors: np.ndarray  # (mode_count, raw_dim)


def synthetic_params(spec: SyntheticSpec, seed: int) -> SyntheticParams:
    rng = SeededRng(derive_seed(seed, "world-params"))
    means = rng.normal((spec.class_count, spec.raw_dim), scale=spec.class_mean_scale)
    modes = rng.normal((spec.mode_count, spec.raw_dim), scale=spec.mode_scale)
    return SyntheticParams(class_means=means, mode_vectors=modes)


def _sample_examples(
    spec: SyntheticSpec,
    params: SyntheticParams,
    per_class: int,
    rng: SeededRng,
) -> tuple[FeatureDataset, np.ndarray]:
    total = spec.class_count * per_class
    labels = np.repeat(np.arange(spec.class_count), per_class)
    modes = rng.integers(spec.mode_count, total)
    noise = rng.normal((total, spec.raw_dim), scale=spec.noise_sigma)
    raw = params.class_means[labels] + params.mode_vectors[modes] + noise
    feats = np.maximum(raw, 0.0)
    data = FeatureDataset(feats, labels, spec.class_count)
    return data, modes


def make_synthetic(
    spec: SyntheticSpec, seed: int
) -> tuple[FeatureDataset, np.ndarray]:
    """One dataset draw from the synthetic world (plus per-example modes)."""
    params = synthetic_params(spec, seed)
    rng = SeededRng(derive_seed(seed, "train-examples"))
    return _sample_examples(spec, params, spec.examples_per_class, rng)


@dataclass(frozen=True)
class SyntheticWorld:
    """Train/test draws sharing one set of latent world parameters."""

    spec: SyntheticSpec
    params: SyntheticParams
    train: FeatureDataset
    test: FeatureDataset
    train_modes: np.ndarray
    test_modes: np.ndarray
    split: ClassSplit


def make_world(spec: SyntheticSpec, seed: int) -> SyntheticWorld:
    params = synthetic_params(spec, seed)
    train_rng = SeededRng(derive_seed(seed, "train-examples"))
    test_rng = SeededRng(derive_seed(seed, "test-examples"))
    train, train_modes = _sample_examples(
        spec, params, spec.examples_per_class, train_rng
    )
    test, test_modes = _sample_examples(
        spec, params, spec.test_examples_per_class, test_rng
    )
    split = split_classes(
        spec.class_count,
        spec.base_classes / spec.class_count,
        derive_seed(seed, "class-split"),
    )
    return SyntheticWorld(spec, params, train, test, train_modes, test_modes, split)


def class_uniform_batches(
    data: FeatureDataset, batch: int, rng: SeededRng
) -> Iterator[np.ndarray]:
    """Endless stream of index batches: class uniform, then example
    uniform within the class (with replacement across batches)."""
    if batch < 1:
        raise ValueError("batch must be at least 1")
    per_class = [data.indices_of_class(c) for c in range(data.class_count)]
    counts = np.array([p.shape[0] for p in per_class])
    if counts.min() == 0:
        empty = int(np.argmin(counts))
        raise ValueError(f"class {empty} has no examples")
    # Ragged per-class index lists flattened for vectorized gather.
    offsets = np.concatenate([[0], np.cumsum(counts)])[:-1]
    flat = np.concatenate(per_class)
    while True:
        classes = rng.integers(data.class_count, batch)
        within = np.minimum(
            np.floor(rng.uniform(batch) * counts[classes]).astype(np.int64),
            counts[classes] - 1,
        )
        yield flat[offsets[classes] + within]


def save_feature_store(data: FeatureDataset, path) -> None:
    w = Writer()
    w.magic(FEATURE_MAGIC)
    w.u32(FEATURE_VERSION)
    w.u32(data.count)
    w.u32(data.dim)
    w.u32(data.class_count)
    w.f32_array(data.features)
    w.u32_array(data.labels)
    Path(path).write_bytes(w.getvalue())


def load_feature_store(path) -> FeatureDataset:
    r = Reader(Path(path).read_bytes(), "feature store")
    r.expect_magic(FEATURE_MAGIC)
    version = r.u32("version")
    if version != FEATURE_VERSION:
        raise StoreParseError(4, f"unsupported version {version}")
    count = r.u32("example count")
    dim = r.u32("feature dimension")
    class_count = r.u32("class count")
    if count < 1 or dim < 1:
        raise StoreParseError(8, f"bad shape N={count}, d={dim}")
    feats = r.f32_array(count * dim, "features").reshape(count, dim)
    labels_offset = r.offset
    labels = r.u32_array(count, "labels").astype(np.int64)
    r.expect_end()
    if not np.all(np.isfinite(feats)):
        raise StoreParseError(20, "non-finite feature values")
    if labels.size and labels.max() >= class_count:
        bad = int(np.argmax(labels >= class_count))
        raise StoreParseError(
            labels_offset + 4 * bad,
            f"label {int(labels[bad])} >= class_count {class_count}",
        )
    return FeatureDataset(feats, labels, class_count)


def save_split_manifest(split: ClassSplit, path, extra: dict | None = None) -> None:
    doc = {
        "base": list(split.base_ids),
        "novel": list(split.novel_ids),
        "cv_base_1": list(split.cv_base_1),
        "cv_base_2": list(split.cv_base_2),
        "cv_novel_1": list(split.cv_novel_1),
        "cv_novel_2": list(split.cv_novel_2),
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_split_manifest(path) -> ClassSplit:
    doc = json.loads(Path(path).read_text())
    try:
        return ClassSplit(
            base_ids=tuple(doc["base"]),
            novel_ids=tuple(doc["novel"]),
            cv_base_1=tuple(doc["cv_base_1"]),
            cv_base_2=tuple(doc["cv_base_2"]),
            cv_novel_1=tuple(doc["cv_novel_1"]),
            cv_novel_2=tuple(doc["cv_novel_2"]),
        )
    except KeyError as exc:
        raise ValueError(f"split manifest missing key {exc}") from exc
