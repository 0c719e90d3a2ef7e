"""Feature-extractor training with regularized objectives.

The extractor is a small all-rectifier MLP. Besides the plain
classification objective it supports five regularizers aimed at making
classifiers trained on tiny sets land close to the base classifier:

- ``sgm``: per-example squared gradient magnitude, which reduces to a
  misclassification-weighted L2 penalty on feature activations,
  alpha(W, phi, y) * |phi|^2. The weight alpha is differentiated, not
  treated as a constant.
- ``batch_sgm``: squared norm of the minibatch-averaged loss gradient
  in the classifier weights.
- ``l2_feat`` / ``l1_feat``: plain feature-norm penalties.
- ``triplet``: margin hinge on anchor/positive/negative distances,
  trained in a separate phase after classification pretraining.

All gradients are hand-derived; ``gradient_check`` provides the finite
difference harness used to verify every path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .classifier import LinearClassifier
from .mlp import Mlp
from .numerics import softmax_rows
from .rng import SeededRng, derive_seed

EXTRACTOR_MAGIC = b"LSE1"

REGULARIZER_KINDS = ("none", "sgm", "batch_sgm", "l2_feat", "l1_feat", "triplet")


@dataclass(frozen=True)
class ReprLossConfig:
    regularizer: str = "none"
    reg_weight: float = 0.0
    triplet_margin: float = 1.0
    epochs: int = 90
    triplet_epochs: int = 30
    learning_rate: float = 0.1
    lr_decay_factor: float = 0.1
    lr_decay_period: int = 30
    weight_decay: float = 1e-4
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.regularizer not in REGULARIZER_KINDS:
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be non-negative")
        if self.regularizer == "triplet" and self.triplet_margin <= 0:
            raise ValueError("triplet_margin must be positive")


# ---------------------------------------------------------------------------
# Loss values


def _errors(w: np.ndarray, phi: np.ndarray, labels: np.ndarray):
    """(softmax probs, p - onehot) for a feature batch."""
    probs = softmax_rows(phi @ w.T)
    errors = probs.copy()
    errors[np.arange(labels.shape[0]), labels] -= 1.0
    return probs, errors


def sgm_loss(clf: LinearClassifier, phi: np.ndarray, labels: np.ndarray) -> float:
    """Mean over the batch of alpha(W, phi, y) * |phi|^2."""
    phi = np.asarray(phi, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _, errors = _errors(clf.weights, phi, labels)
    alpha = np.einsum("ik,ik->i", errors, errors)
    sqnorm = np.einsum("id,id->i", phi, phi)
    return float(np.mean(alpha * sqnorm))


def batch_sgm_loss(
    clf: LinearClassifier, phi: np.ndarray, labels: np.ndarray
) -> float:
    """Squared Frobenius norm of the batch-mean loss gradient in W."""
    phi = np.asarray(phi, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _, errors = _errors(clf.weights, phi, labels)
    g = errors.T @ phi / phi.shape[0]
    return float(np.sum(g * g))


def l2_feature_loss(phi: np.ndarray) -> float:
    phi = np.asarray(phi, dtype=np.float64)
    return float(np.mean(np.einsum("id,id->i", phi, phi)))


def l1_feature_loss(phi: np.ndarray) -> float:
    phi = np.asarray(phi, dtype=np.float64)
    return float(np.mean(np.abs(phi).sum(axis=1)))


def triplet_loss(
    anchor: np.ndarray, positive: np.ndarray, negative: np.ndarray, margin: float
) -> float:
    """max(|pos - anchor| - |neg - anchor| + margin, 0), plain norms."""
    anchor = np.asarray(anchor, dtype=np.float64)
    positive = np.asarray(positive, dtype=np.float64)
    negative = np.asarray(negative, dtype=np.float64)
    if anchor.shape != positive.shape or anchor.shape != negative.shape:
        raise ValueError("triplet members must share a shape")
    if margin <= 0:
        raise ValueError("margin must be positive")
    d_pos = np.linalg.norm(positive - anchor)
    d_neg = np.linalg.norm(negative - anchor)
    return float(max(d_pos - d_neg + margin, 0.0))


# ---------------------------------------------------------------------------
# Regularizer gradients (in W and in the feature batch)


def _sgm_grads(w, phi, labels):
    m = phi.shape[0]
    probs, errors = _errors(w, phi, labels)
    alpha = np.einsum("ik,ik->i", errors, errors)
    sqnorm = np.einsum("id,id->i", phi, phi)
    value = float(np.mean(alpha * sqnorm))
    # d alpha / d logits = 2 * (diag(p) - p p^T) e = 2 * (p*e - p (p.e))
    je = probs * errors - probs * np.einsum("ik,ik->i", probs, errors)[:, None]
    q = (2.0 / m) * sqnorm[:, None] * je
    grad_w = q.T @ phi
    grad_phi = q @ w + (2.0 / m) * alpha[:, None] * phi
    return value, grad_w, grad_phi


def _batch_sgm_grads(w, phi, labels):
    m = phi.shape[0]
    probs, errors = _errors(w, phi, labels)
    g = errors.T @ phi / m
    value = float(np.sum(g * g))
    gp = phi @ g.T  # row i: G phi_i
    je = probs * gp - probs * np.einsum("ik,ik->i", probs, gp)[:, None]
    q = (2.0 / m) * je
    grad_w = q.T @ phi
    grad_phi = q @ w + (2.0 / m) * errors @ g
    return value, grad_w, grad_phi


def regularizer_value_and_grads(
    kind: str, w: np.ndarray, phi: np.ndarray, labels: np.ndarray
):
    """(value, dW, dPhi) of the chosen regularizer on a feature batch.

    Triplet is handled by its own training phase, not here.
    """
    m = phi.shape[0]
    if kind == "none":
        return 0.0, np.zeros_like(w), np.zeros_like(phi)
    if kind == "sgm":
        return _sgm_grads(w, phi, labels)
    if kind == "batch_sgm":
        return _batch_sgm_grads(w, phi, labels)
    if kind == "l2_feat":
        value = float(np.mean(np.einsum("id,id->i", phi, phi)))
        return value, np.zeros_like(w), (2.0 / m) * phi
    if kind == "l1_feat":
        value = float(np.mean(np.abs(phi).sum(axis=1)))
        return value, np.zeros_like(w), np.sign(phi) / m
    raise ValueError(f"no batch gradients for regularizer {kind!r}")


def triplet_batch_value_and_grad(
    phi: np.ndarray, triplets: np.ndarray, margin: float
):
    """Mean hinge value over triplet index rows (anchor, pos, neg) into
    phi, and its gradient in phi."""
    grad = np.zeros_like(phi)
    if triplets.shape[0] == 0:
        return 0.0, grad
    total = 0.0
    scale = 1.0 / triplets.shape[0]
    for ai, pi, ni in triplets:
        dp = phi[pi] - phi[ai]
        dn = phi[ni] - phi[ai]
        ndp = np.linalg.norm(dp)
        ndn = np.linalg.norm(dn)
        hinge = ndp - ndn + margin
        if hinge <= 0.0:
            continue
        total += hinge
        up = dp / ndp if ndp > 1e-12 else np.zeros_like(dp)
        un = dn / ndn if ndn > 1e-12 else np.zeros_like(dn)
        grad[pi] += scale * up
        grad[ni] -= scale * un
        grad[ai] += scale * (un - up)
    return total * scale, grad


# ---------------------------------------------------------------------------
# Joint training


@dataclass
class ReprTrainResult:
    extractor: Mlp
    classifier: LinearClassifier
    loss_trace: list[float] = field(default_factory=list)


def _sample_triplets(labels: np.ndarray, rng: SeededRng) -> np.ndarray:
    """Within-batch triplets: one positive and one negative per anchor
    that has both available."""
    m = labels.shape[0]
    rows = []
    for i in range(m):
        same = np.nonzero(labels == labels[i])[0]
        same = same[same != i]
        diff = np.nonzero(labels != labels[i])[0]
        if same.size == 0 or diff.size == 0:
            continue
        pos = same[rng.integers(same.size)]
        neg = diff[rng.integers(diff.size)]
        rows.append((i, int(pos), int(neg)))
    return np.asarray(rows, dtype=np.int64).reshape(-1, 3)


def train_representation(
    raw_features: np.ndarray,
    labels: np.ndarray,
    class_count: int,
    layer_sizes: list[int],
    config: ReprLossConfig,
) -> ReprTrainResult:
    """Joint SGD on extractor and classifier head.

    Labels must already be re-indexed to [0, class_count). For the
    triplet regularizer this runs classification pretraining for
    config.epochs, then a triplet-only phase for config.triplet_epochs
    at 1/100 of the learning rate.
    """
    x = np.asarray(raw_features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] != y.shape[0]:
        raise ValueError("labels must be one per example")
    if y.min() < 0 or y.max() >= class_count:
        raise ValueError("labels must be re-indexed to [0, class_count)")
    if layer_sizes[0] != x.shape[1]:
        raise ValueError("layer_sizes[0] must equal the raw input dim")

    rng = SeededRng(derive_seed(config.seed, "repr-train"))
    net = Mlp.init_random(layer_sizes, derive_seed(config.seed, "repr-init"))
    w = np.zeros((class_count, layer_sizes[-1]))
    trace: list[float] = []

    joint_kind = config.regularizer if config.regularizer != "triplet" else "none"
    lam = config.reg_weight if joint_kind != "none" else 0.0
    step = 0
    for epoch in range(config.epochs):
        lr = config.learning_rate * config.lr_decay_factor ** (
            epoch // config.lr_decay_period
        )
        epoch_losses = []
        for idx in _epoch_batches(x.shape[0], config.batch_size, rng):
            xb, yb = x[idx], y[idx]
            m = idx.shape[0]
            phi, cache = net.forward_cached(xb)
            probs, errors = _errors(w, phi, yb)
            picked = probs[np.arange(m), yb]
            loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
            grad_w = errors.T @ phi / m
            grad_phi = errors @ w / m
            if lam > 0.0:
                reg_value, reg_w, reg_phi = regularizer_value_and_grads(
                    joint_kind, w, phi, yb
                )
                loss += lam * reg_value
                grad_w = grad_w + lam * reg_w
                grad_phi = grad_phi + lam * reg_phi
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite loss at update {step}; lower the learning rate"
                )
            gw, gb, _ = net.backward(cache, grad_phi)
            net.sgd_step(gw, gb, lr, config.weight_decay)
            w -= lr * (grad_w + config.weight_decay * w)
            epoch_losses.append(loss)
            step += 1
        trace.append(float(np.mean(epoch_losses)))

    if config.regularizer == "triplet":
        trip_lr = config.learning_rate / 100.0
        for epoch in range(config.triplet_epochs):
            epoch_losses = []
            for idx in _epoch_batches(x.shape[0], config.batch_size, rng):
                xb, yb = x[idx], y[idx]
                phi, cache = net.forward_cached(xb)
                triplets = _sample_triplets(yb, rng)
                value, grad_phi = triplet_batch_value_and_grad(
                    phi, triplets, config.triplet_margin
                )
                if not np.isfinite(value):
                    raise FloatingPointError(
                        f"non-finite triplet loss at update {step}"
                    )
                gw, gb, _ = net.backward(cache, grad_phi)
                net.sgd_step(gw, gb, trip_lr, config.weight_decay)
                epoch_losses.append(value)
                step += 1
            trace.append(float(np.mean(epoch_losses)))

    return ReprTrainResult(net, LinearClassifier(w), trace)


def _epoch_batches(n: int, batch_size: int, rng: SeededRng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


# ---------------------------------------------------------------------------
# Finite-difference verification harness


def gradient_check(
    value_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    theta: np.ndarray,
    h: float = 1e-6,
) -> float:
    """Max over parameters of |analytic - central difference| relative
    to max(|analytic|, 1e-8)."""
    theta = np.asarray(theta, dtype=np.float64)
    _, analytic = value_and_grad(theta)
    worst = 0.0
    for i in range(theta.size):
        bumped = theta.copy()
        bumped[i] = theta[i] + h
        up, _ = value_and_grad(bumped)
        bumped[i] = theta[i] - h
        down, _ = value_and_grad(bumped)
        numeric = (up - down) / (2.0 * h)
        err = abs(numeric - analytic[i]) / max(abs(analytic[i]), 1e-8)
        worst = max(worst, err)
    return worst


def _split_theta(theta: np.ndarray, net: Mlp, class_count: int):
    n_net = net.flatten_params().size
    net2 = net.copy()
    net2.set_params(theta[:n_net])
    w = theta[n_net:].reshape(class_count, net.output_dim)
    return net2, w


def make_loss_probe(
    kind: str,
    layer_sizes: list[int],
    class_count: int,
    batch: int,
    seed: int,
    reg_weight: float = 1.0,
    triplet_margin: float = 1.0,
    kink_margin: float = 1e-3,
):
    """Random small instance of a loss through the extractor, packaged
    for gradient_check: returns (theta0, value_and_grad).

    theta stacks all extractor parameters followed by the classifier
    weights. Instances are redrawn until every rectifier pre-activation
    and every triplet hinge sits at least kink_margin away from its
    kink, so central differences stay on one smooth branch.
    """
    for attempt in range(200):
        rng = SeededRng(derive_seed(seed, "probe", kind, attempt))
        net = Mlp.init_random(layer_sizes, derive_seed(seed, "net", attempt))
        x = np.abs(rng.normal((batch, layer_sizes[0])))
        labels = rng.integers(class_count, batch)
        w = rng.normal((class_count, layer_sizes[-1]), scale=0.5)
        if kind == "triplet":
            k = batch // 3
            triplets = np.arange(3 * k, dtype=np.int64).reshape(3, k).T.copy()
        else:
            triplets = None

        def value_and_grad(theta, _x=x, _labels=labels, _triplets=triplets):
            net2, w2 = _split_theta(theta, net, class_count)
            phi, cache = net2.forward_cached(_x)
            m = _x.shape[0]
            if kind == "cls":
                probs, errors = _errors(w2, phi, _labels)
                picked = probs[np.arange(m), _labels]
                value = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
                grad_w = errors.T @ phi / m
                grad_phi = errors @ w2 / m
            elif kind == "triplet":
                value, grad_phi = triplet_batch_value_and_grad(
                    phi, _triplets, triplet_margin
                )
                grad_w = np.zeros_like(w2)
            else:
                value, grad_w, grad_phi = regularizer_value_and_grads(
                    kind, w2, phi, _labels
                )
                value, grad_w, grad_phi = (
                    reg_weight * value,
                    reg_weight * grad_w,
                    reg_weight * grad_phi,
                )
            gw, gb, _ = net2.backward(cache, grad_phi)
            flat = np.concatenate(
                [np.concatenate([a.ravel(), b]) for a, b in zip(gw, gb)]
                + [grad_w.ravel()]
            )
            return value, flat

        theta0 = np.concatenate([net.flatten_params(), w.ravel()])
        if _kink_distance(net, x, triplets, triplet_margin) > kink_margin:
            return theta0, value_and_grad
    raise RuntimeError(f"could not find a kink-free probe for {kind!r}")


def _kink_distance(net: Mlp, x: np.ndarray, triplets, margin: float) -> float:
    """Smallest distance of any rectifier pre-activation (or triplet
    hinge argument) from its kink."""
    _, (_, pre) = net.forward_cached(x)
    dist = min(float(np.min(np.abs(z))) for z in pre)
    if triplets is not None and triplets.shape[0]:
        phi = net.forward(x)
        for ai, pi, ni in triplets:
            hinge = (
                np.linalg.norm(phi[pi] - phi[ai])
                - np.linalg.norm(phi[ni] - phi[ai])
                + margin
            )
            dist = min(dist, abs(float(hinge)))
    return dist
