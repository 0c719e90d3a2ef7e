"""Example hallucination by transformation analogy.

Pipeline: cluster each base class's feature vectors into centroids, mine
quadruplets of centroid pairs whose difference vectors point the same
way across two classes, train a small MLP generator to complete the
analogy, then synthesize extra feature vectors for data-starved novel
classes by applying base-class centroid transformations to their few
real examples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classifier import LinearClassifier
from .dataset import LowShotTrainSet
from .mlp import Mlp
from .numerics import softmax_rows
from .rng import SeededRng, derive_seed

GENERATOR_MAGIC = b"LSG1"

DEFAULT_CLUSTER_CAP = 100


@dataclass(frozen=True)
class KmeansResult:
    centroids: np.ndarray  # (k, d)
    assignment: np.ndarray  # (N,)
    objective: float  # sum of squared distances to assigned centroid


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeans_pp_seed(points: np.ndarray, k: int, rng: SeededRng) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = np.einsum("nd,nd->n", points - centroids[0], points - centroids[0])
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[j] = points[rng.integers(n)]
            continue
        target = rng.uniform() * total
        pick = int(np.searchsorted(np.cumsum(d2), target, side="right"))
        pick = min(pick, n - 1)
        centroids[j] = points[pick]
        d2 = np.minimum(
            d2, np.einsum("nd,nd->n", points - centroids[j], points - centroids[j])
        )
    return centroids


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iters: int):
    n, k = points.shape[0], centroids.shape[0]
    objective = np.inf
    assignment = np.zeros(n, dtype=np.int64)
    for _ in range(max_iters):
        d2 = _squared_distances(points, centroids)
        new_assignment = np.argmin(d2, axis=1)
        new_objective = float(d2[np.arange(n), new_assignment].sum())
        # Lloyd is monotone; allow only float rounding slack.
        assert new_objective <= objective * (1.0 + 1e-12) + 1e-12, (
            "k-means objective increased"
        )
        converged = bool(np.array_equal(new_assignment, assignment))
        assignment = new_assignment
        objective = new_objective
        for j in range(k):
            members = points[assignment == j]
            if members.shape[0] > 0:
                centroids[j] = members.mean(axis=0)
            else:
                # Re-seed an empty cluster from the farthest point.
                dist = _squared_distances(points, centroids)[
                    np.arange(n), assignment
                ]
                far = int(np.argmax(dist))
                centroids[j] = points[far]
        if converged:
            break
    d2 = _squared_distances(points, centroids)
    assignment = np.argmin(d2, axis=1)
    objective = float(d2[np.arange(n), assignment].sum())
    return centroids, assignment, objective


def kmeans(
    points: np.ndarray,
    k: int,
    seed: int,
    max_iters: int = 100,
    restarts: int = 8,
) -> KmeansResult:
    """Lloyd's algorithm with k-means++ seeding; the best of `restarts`
    seeded runs by objective is returned. k is clipped to the number of
    points."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1:
        raise ValueError("points must be a non-empty (N, d) array")
    if k < 1:
        raise ValueError("k must be at least 1")
    k = min(k, points.shape[0])
    best: KmeansResult | None = None
    for restart in range(restarts):
        rng = SeededRng(derive_seed(seed, "kmeans", restart))
        centroids = _kmeans_pp_seed(points, k, rng)
        centroids, assignment, objective = _lloyd(points, centroids, max_iters)
        if best is None or objective < best.objective:
            best = KmeansResult(centroids, assignment, objective)
    return best


@dataclass(frozen=True)
class CentroidSet:
    """Per-class centroid lists over base classes (feature space)."""

    centroids: dict[int, np.ndarray]  # class id -> (k_c, d)
    member_counts: dict[int, np.ndarray]  # class id -> (k_c,)

    def class_ids(self) -> list[int]:
        return sorted(self.centroids)

    def dim(self) -> int:
        first = next(iter(self.centroids.values()))
        return first.shape[1]


def cluster_base_classes(
    features: np.ndarray,
    labels: np.ndarray,
    base_ids,
    cluster_cap: int = DEFAULT_CLUSTER_CAP,
    seed: int = 0,
) -> CentroidSet:
    """k-means per base class with k = min(cap, ceil(n_c / 2))."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    centroids: dict[int, np.ndarray] = {}
    counts: dict[int, np.ndarray] = {}
    for class_id in sorted(base_ids):
        points = features[labels == class_id]
        if points.shape[0] == 0:
            raise ValueError(f"base class {class_id} has no examples")
        k = min(cluster_cap, (points.shape[0] + 1) // 2)
        k = max(k, 1)
        result = kmeans(points, k, derive_seed(seed, "class", class_id))
        centroids[class_id] = result.centroids
        counts[class_id] = np.bincount(
            result.assignment, minlength=result.centroids.shape[0]
        )
    return CentroidSet(centroids, counts)


@dataclass(frozen=True)
class AnalogyQuadruplet:
    class_a: int
    i1: int
    i2: int
    class_b: int
    j1: int
    j2: int
    similarity: float

    def __post_init__(self):
        if self.class_a == self.class_b:
            raise ValueError("quadruplet classes must differ")
        if self.similarity <= 0:
            raise ValueError("quadruplet similarity must be positive")


def _ordered_pair_diffs(cents: np.ndarray):
    """All ordered centroid pairs (i1 != i2) in lexicographic order with
    their difference vectors c_{i1} - c_{i2}."""
    k = cents.shape[0]
    pairs = [(i1, i2) for i1 in range(k) for i2 in range(k) if i1 != i2]
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64), np.zeros((0, cents.shape[1]))
    idx = np.asarray(pairs, dtype=np.int64)
    diffs = cents[idx[:, 0]] - cents[idx[:, 1]]
    return idx, diffs


def _safe_normalize(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    # Near-zero differences get direction 0: they never win a similarity
    # contest and are never retained (cosine against them is 0).
    scale = np.where(norms < 1e-12, 0.0, 1.0 / np.maximum(norms, 1e-300))
    return vectors * scale


def mine_quadruplets(
    centroids: CentroidSet, mode: str = "best"
) -> list[AnalogyQuadruplet]:
    """Collect analogy quadruplets across classes.

    For every ordered centroid pair in a class, all ordered pairs in all
    other classes are scored by cosine similarity of difference vectors.
    mode="best" keeps the single best match (ties to the lowest
    (class, pair) order); mode="all_positive" keeps every match with
    similarity > 0. Either way only strictly positive similarities are
    retained.
    """
    if mode not in ("best", "all_positive"):
        raise ValueError(f"unknown mining mode {mode!r}")
    ids = centroids.class_ids()
    per_class = {c: _ordered_pair_diffs(centroids.centroids[c]) for c in ids}
    normed = {c: _safe_normalize(diffs) for c, (_, diffs) in per_class.items()}
    results: list[AnalogyQuadruplet] = []
    for a in ids:
        idx_a, _ = per_class[a]
        if idx_a.shape[0] == 0:
            continue
        cand_classes = [b for b in ids if b != a and per_class[b][0].shape[0] > 0]
        if not cand_classes:
            continue
        cand_idx = np.concatenate([per_class[b][0] for b in cand_classes])
        cand_norm = np.vstack([normed[b] for b in cand_classes])
        cand_class = np.concatenate(
            [np.full(per_class[b][0].shape[0], b) for b in cand_classes]
        )
        sims = normed[a] @ cand_norm.T  # (pairs_a, candidates)
        if mode == "best":
            # Candidates are ordered by (class, pair-lex); argmax takes
            # the first maximum, which is the required tie-break.
            best = np.argmax(sims, axis=1)
            for row, col in enumerate(best):
                sim = float(sims[row, col])
                if sim > 0.0:
                    results.append(
                        AnalogyQuadruplet(
                            class_a=a,
                            i1=int(idx_a[row, 0]),
                            i2=int(idx_a[row, 1]),
                            class_b=int(cand_class[col]),
                            j1=int(cand_idx[col, 0]),
                            j2=int(cand_idx[col, 1]),
                            similarity=sim,
                        )
                    )
        else:
            rows, cols = np.nonzero(sims > 0.0)
            for row, col in zip(rows, cols):
                results.append(
                    AnalogyQuadruplet(
                        class_a=a,
                        i1=int(idx_a[row, 0]),
                        i2=int(idx_a[row, 1]),
                        class_b=int(cand_class[col]),
                        j1=int(cand_idx[col, 0]),
                        j2=int(cand_idx[col, 1]),
                        similarity=float(sims[row, col]),
                    )
                )
    return results


def save_quadruplets(quads: list[AnalogyQuadruplet], path) -> None:
    doc = [
        {
            "a": q.class_a,
            "i1": q.i1,
            "i2": q.i2,
            "b": q.class_b,
            "j1": q.j1,
            "j2": q.j2,
            "similarity": q.similarity,
        }
        for q in quads
    ]
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_quadruplets(path) -> list[AnalogyQuadruplet]:
    doc = json.loads(Path(path).read_text())
    return [
        AnalogyQuadruplet(
            class_a=rec["a"],
            i1=rec["i1"],
            i2=rec["i2"],
            class_b=rec["b"],
            j1=rec["j1"],
            j2=rec["j2"],
            similarity=rec["similarity"],
        )
        for rec in doc
    ]


@dataclass(frozen=True)
class GeneratorTrainConfig:
    mse_weight: float = 10.0
    learning_rate: float = 0.01
    epochs: int = 150
    batch_size: int = 64
    hidden_width: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.mse_weight < 0:
            raise ValueError("mse_weight must be non-negative")
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("bad generator training parameters")


def build_generator_dataset(
    quads: list[AnalogyQuadruplet],
    centroids: CentroidSet,
    label_map: dict[int, int],
):
    """Arrays (inputs, targets, labels) for generator training.

    Input rows concatenate (c_a_1, c_b_1, c_b_2); the target is c_a_2 and
    the label is class a mapped into the base classifier's index space.
    """
    if not quads:
        raise ValueError("no quadruplets to train on")
    inputs, targets, labels = [], [], []
    for q in quads:
        ca = centroids.centroids[q.class_a]
        cb = centroids.centroids[q.class_b]
        inputs.append(np.concatenate([ca[q.i1], cb[q.j1], cb[q.j2]]))
        targets.append(ca[q.i2])
        labels.append(label_map[q.class_a])
    return (
        np.asarray(inputs, dtype=np.float64),
        np.asarray(targets, dtype=np.float64),
        np.asarray(labels, dtype=np.int64),
    )


@dataclass
class GeneratorTrainResult:
    generator: Mlp
    loss_trace: list[float]


def train_generator(
    inputs: np.ndarray,
    targets: np.ndarray,
    labels: np.ndarray,
    base_classifier: LinearClassifier,
    config: GeneratorTrainConfig,
) -> GeneratorTrainResult:
    """SGD on the generator only; the base classifier stays frozen.

    Per batch the loss is mse_weight * MSE(output, target) plus the log
    loss of the frozen classifier on the output under the source label.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if inputs.shape[0] == 0:
        raise ValueError("empty generator training set")
    feat_dim = targets.shape[1]
    if inputs.shape[1] != 3 * feat_dim:
        raise ValueError("generator input must concatenate three features")
    net = Mlp.init_random(
        [3 * feat_dim, config.hidden_width, config.hidden_width, feat_dim],
        derive_seed(config.seed, "gen-init"),
    )
    w = base_classifier.weights
    rng = SeededRng(derive_seed(config.seed, "gen-train"))
    trace = []
    n = inputs.shape[0]
    for _epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            m = idx.shape[0]
            out, cache = net.forward_cached(inputs[idx])
            diff = out - targets[idx]
            mse = float(np.mean(np.einsum("id,id->i", diff, diff) / feat_dim))
            probs = softmax_rows(out @ w.T)
            picked = probs[np.arange(m), labels[idx]]
            cls = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
            errors = probs
            errors[np.arange(m), labels[idx]] -= 1.0
            grad_out = (
                config.mse_weight * (2.0 / (feat_dim * m)) * diff
                + errors @ w / m
            )
            loss = config.mse_weight * mse + cls
            if not np.isfinite(loss):
                raise FloatingPointError("generator training diverged")
            gw, gb, _ = net.backward(cache, grad_out)
            net.sgd_step(gw, gb, config.learning_rate)
            epoch_losses.append(loss)
        trace.append(float(np.mean(epoch_losses)))
    return GeneratorTrainResult(net, trace)


def hallucinate(
    generator: Mlp,
    seed_feature: np.ndarray,
    centroid_1: np.ndarray,
    centroid_2: np.ndarray,
    label: int,
) -> tuple[np.ndarray, int]:
    """One generated feature vector with its label."""
    x = np.concatenate(
        [
            np.asarray(seed_feature, dtype=np.float64),
            np.asarray(centroid_1, dtype=np.float64),
            np.asarray(centroid_2, dtype=np.float64),
        ]
    )
    return generator.forward(x), label


def augment_low_shot(
    trainset: LowShotTrainSet,
    generator: Mlp,
    centroids: CentroidSet,
    k_min: int,
    seed: int,
) -> LowShotTrainSet:
    """Top novel classes up to k_min examples with hallucinated ones.

    Each synthetic example applies a uniformly drawn ordered centroid
    pair from a uniformly drawn base class to a uniformly drawn real
    seed example of the novel class. Base examples and classes already
    at k_min or more examples are untouched.
    """
    if k_min < 1:
        raise ValueError("k_min must be at least 1")
    usable = [c for c in centroids.class_ids() if centroids.centroids[c].shape[0] >= 2]
    if not usable:
        raise ValueError("no base class has at least two centroids")
    rng = SeededRng(seed)
    feat_parts = [trainset.novel_features]
    label_parts = [trainset.novel_labels]
    real_parts = [trainset.novel_is_real]
    gen_inputs, gen_labels = [], []
    for class_id in sorted(set(int(c) for c in trainset.novel_labels)):
        mask = (trainset.novel_labels == class_id) & trainset.novel_is_real
        real = trainset.novel_features[mask]
        have = int((trainset.novel_labels == class_id).sum())
        for _ in range(max(k_min - have, 0)):
            seed_vec = real[rng.integers(real.shape[0])]
            base_class = usable[rng.integers(len(usable))]
            cents = centroids.centroids[base_class]
            k = cents.shape[0]
            pair = rng.integers(k * (k - 1))
            i1, rem = divmod(pair, k - 1)
            i2 = rem if rem < i1 else rem + 1
            gen_inputs.append(
                np.concatenate([np.asarray(seed_vec, np.float64), cents[i1], cents[i2]])
            )
            gen_labels.append(class_id)
    if gen_inputs:
        outputs = generator.forward(np.asarray(gen_inputs))
        feat_parts.append(outputs.astype(np.float32))
        label_parts.append(np.asarray(gen_labels, dtype=np.int64))
        real_parts.append(np.zeros(len(gen_labels), dtype=bool))
    return LowShotTrainSet(
        base_features=trainset.base_features,
        base_labels=trainset.base_labels,
        novel_features=np.concatenate(feat_parts),
        novel_labels=np.concatenate(label_parts),
        novel_is_real=np.concatenate(real_parts),
        n=trainset.n,
        trial_seed=trainset.trial_seed,
        class_count=trainset.class_count,
    )
