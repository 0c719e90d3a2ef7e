"""Multiclass logistic regression: probabilities, loss, analytic
gradients, SGD training with class-uniform oversampling, full-batch
training to a stationary point, and top-k evaluation.

The classifier is a bare K x d weight matrix W (row k scores class k);
there is no bias term, so the gradient and Hessian formulas used by the
verification suite hold exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import FeatureDataset, class_uniform_batches
from .numerics import softmax_rows, softmax_stable, top_k_rows
from .rng import SeededRng
from .storeio import Reader, StoreParseError, Writer

CLASSIFIER_MAGIC = b"LSW1"

# -log arguments are clamped here so a fully-confident wrong prediction
# yields a large finite loss instead of -inf.
LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class LinearClassifier:
    weights: np.ndarray  # (K, d) float64

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] < 2:
            raise ValueError("weights must be (K, d) with K >= 2")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        object.__setattr__(self, "weights", w)

    @property
    def class_count(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def scores(self, features: np.ndarray) -> np.ndarray:
        feats = np.asarray(features, dtype=np.float64)
        if feats.shape[-1] != self.dim:
            raise ValueError(
                f"feature dim {feats.shape[-1]} != classifier dim {self.dim}"
            )
        return feats @ self.weights.T


@dataclass(frozen=True)
class ClassifierTrainConfig:
    learning_rate: float = 0.5
    iterations: int = 10000
    batch_size: int = 1000
    weight_decay: float = 1e-4
    seed: int = 0
    convergence_grad_tol: float = 0.0  # 0 disables the early-stop check

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


def class_probabilities(clf: LinearClassifier, x: np.ndarray) -> np.ndarray:
    """Softmax class probabilities for a single feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != clf.dim:
        raise ValueError(f"expected a {clf.dim}-vector, got shape {x.shape}")
    return softmax_stable(clf.weights @ x)


def _probs_matrix(clf: LinearClassifier, features: np.ndarray) -> np.ndarray:
    return softmax_rows(clf.scores(features))


def nll_loss(
    clf: LinearClassifier, features: np.ndarray, labels: np.ndarray
) -> float:
    """Mean negative log-likelihood of the true labels."""
    labels = np.asarray(labels, dtype=np.int64)
    probs = _probs_matrix(clf, features)
    if labels.shape[0] != probs.shape[0]:
        raise ValueError("labels must be one per example")
    if labels.min() < 0 or labels.max() >= clf.class_count:
        raise ValueError("label out of range")
    picked = probs[np.arange(labels.shape[0]), labels]
    return float(-np.mean(np.log(np.maximum(picked, LOG_FLOOR))))


def prediction_errors(
    clf: LinearClassifier, features: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    """Per-example p - onehot(y), the shared building block of the
    gradient formulas."""
    labels = np.asarray(labels, dtype=np.int64)
    probs = _probs_matrix(clf, features)
    errors = probs.copy()
    errors[np.arange(labels.shape[0]), labels] -= 1.0
    return errors


def grad_wrt_weights(
    clf: LinearClassifier, features: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    """Gradient of the mean log loss in W: row k is the mean of
    (p_k - [y == k]) * x over the set."""
    feats = np.asarray(features, dtype=np.float64)
    errors = prediction_errors(clf, feats, labels)
    return errors.T @ feats / feats.shape[0]


def grad_wrt_features(
    clf: LinearClassifier, x: np.ndarray, y: int
) -> np.ndarray:
    """Gradient of the single-example log loss in the feature vector:
    W^T (p - onehot(y))."""
    p = class_probabilities(clf, x)
    p[y] -= 1.0
    return clf.weights.T @ p


def alpha_weight(clf: LinearClassifier, x: np.ndarray, y: int) -> float:
    """Misclassification weight sum_k (p_k - [y == k])^2, in [0, 2]."""
    p = class_probabilities(clf, x)
    p[y] -= 1.0
    return float(np.dot(p, p))


def train_classifier(
    features: np.ndarray,
    labels: np.ndarray,
    class_count: int,
    config: ClassifierTrainConfig,
) -> LinearClassifier:
    """SGD from W = 0 with class-uniform minibatches and weight decay.

    The batch size shrinks to len(data) // 10 when the training set is
    smaller than ten nominal batches, keeping the update count fixed.
    """
    feats = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    data = FeatureDataset(feats, labels, class_count)
    batch = min(config.batch_size, max(1, data.count // 10))
    rng = SeededRng(config.seed)
    batches = class_uniform_batches(data, batch, rng)
    w = np.zeros((class_count, feats.shape[1]))
    for iteration in range(config.iterations):
        idx = next(batches)
        bf = feats[idx]
        logits = bf @ w.T
        probs = softmax_rows(logits)
        probs[np.arange(batch), labels[idx]] -= 1.0
        grad = probs.T @ bf / batch
        w -= config.learning_rate * (grad + config.weight_decay * w)
        if not np.all(np.isfinite(w)):
            raise FloatingPointError(
                f"training diverged at iteration {iteration}; "
                "use a smaller learning rate"
            )
        if config.convergence_grad_tol > 0 and (
            np.linalg.norm(grad) <= config.convergence_grad_tol
        ):
            break
    return LinearClassifier(w)


@dataclass(frozen=True)
class OptimumResult:
    classifier: LinearClassifier
    grad_norm: float
    iterations: int
    converged: bool


def train_to_optimum(
    features: np.ndarray,
    labels: np.ndarray,
    class_count: int,
    grad_tol: float = 1e-8,
    max_iterations: int = 200000,
) -> OptimumResult:
    """Full-batch gradient descent with backtracking until the gradient
    Frobenius norm falls below grad_tol.

    The objective is convex, so the returned point approximates the
    global minimizer. Instances where the optimum runs off to infinity
    (separable data) exhaust the budget and come back converged=False.
    """
    feats = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if class_count * feats.shape[1] > 10**4:
        raise ValueError("instance too large for full-batch optimization")
    w = np.zeros((class_count, feats.shape[1]))
    step = 1.0
    loss = _loss_at(w, feats, labels)
    iterations = 0
    grad_norm = np.inf
    while iterations < max_iterations:
        grad = _grad_at(w, feats, labels)
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= grad_tol:
            return OptimumResult(LinearClassifier(w), grad_norm, iterations, True)
        # Backtracking with a slowly growing trial step between iterations.
        step = min(step * 2.0, 1e12)
        sq = grad_norm * grad_norm
        while True:
            candidate = w - step * grad
            cand_loss = _loss_at(candidate, feats, labels)
            if cand_loss <= loss - 0.5 * step * sq or step < 1e-18:
                break
            step *= 0.5
        w = candidate
        loss = cand_loss
        iterations += 1
    return OptimumResult(LinearClassifier(w), grad_norm, iterations, False)


def _loss_at(w: np.ndarray, feats: np.ndarray, labels: np.ndarray) -> float:
    logits = feats @ w.T
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(labels.shape[0]), labels]
    return float(np.mean(logz - picked))


def _grad_at(w: np.ndarray, feats: np.ndarray, labels: np.ndarray) -> np.ndarray:
    probs = softmax_rows(feats @ w.T)
    probs[np.arange(labels.shape[0]), labels] -= 1.0
    return probs.T @ feats / feats.shape[0]


def evaluate_topk(
    clf: LinearClassifier,
    features: np.ndarray,
    labels: np.ndarray,
    k: int,
    class_filter=None,
) -> float:
    """Fraction of (optionally label-filtered) examples whose true label
    is among the k highest scores. Scores always span all K classes."""
    labels = np.asarray(labels, dtype=np.int64)
    scores = clf.scores(features)
    if class_filter is not None:
        keep = np.isin(labels, np.asarray(sorted(class_filter)))
        scores = scores[keep]
        labels = labels[keep]
    if labels.shape[0] == 0:
        raise ValueError("no test examples left after class filtering")
    top = top_k_rows(scores, k)
    hits = (top == labels[:, None]).any(axis=1)
    return float(np.mean(hits))


def save_classifier(clf: LinearClassifier, path) -> None:
    w = Writer()
    w.magic(CLASSIFIER_MAGIC)
    w.u32(clf.class_count)
    w.u32(clf.dim)
    w.f32_array(clf.weights)
    Path(path).write_bytes(w.getvalue())


def load_classifier(path) -> LinearClassifier:
    r = Reader(Path(path).read_bytes(), "classifier checkpoint")
    r.expect_magic(CLASSIFIER_MAGIC)
    k = r.u32("class count")
    d = r.u32("feature dimension")
    if k < 2 or d < 1:
        raise StoreParseError(4, f"bad shape K={k}, d={d}")
    weights = r.f32_array(k * d, "weights").reshape(k, d)
    r.expect_end()
    return LinearClassifier(weights.astype(np.float64))
