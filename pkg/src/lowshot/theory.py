"""Executable checks of the curvature claims behind the gradient-norm
regularizer.

The multiclass logistic loss has Hessian H = (1/n) sum_i
(diag(p_i) - p_i p_i^T) kron (x_i x_i^T), whose top eigenvalue is at most
(1/n) sum_i |x_i|^2. That Lipschitz constant turns the gradient norm at
any W into a lower bound on the distance to the loss's minimizer. Both
facts are verified numerically on batches of random instances, and the
gradient-norm/distance relationship is measured empirically the same
way it is usually plotted: sample weights around the minimizer and rank-
correlate gradient norm against cosine distance.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .classifier import (
    LinearClassifier,
    class_probabilities,
    grad_wrt_weights,
    train_to_optimum,
)
from .dataset import SyntheticSpec, make_synthetic
from .rng import SeededRng, derive_seed

DENSE_HESSIAN_CAP = 200


def hessian_full(
    clf: LinearClassifier, features: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    """Dense (K*d, K*d) Hessian of the mean log loss at clf.weights.

    Assembled exactly as the average of Kronecker products
    (diag(p_i) - p_i p_i^T) kron (x_i x_i^T); the flattening convention
    stacks weight rows, matching W.ravel().
    """
    feats = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k, d = clf.class_count, clf.dim
    if k * d > DENSE_HESSIAN_CAP:
        raise ValueError(f"K*d = {k * d} exceeds dense cap {DENSE_HESSIAN_CAP}")
    n = feats.shape[0]
    h = np.zeros((k * d, k * d))
    for i in range(n):
        p = class_probabilities(clf, feats[i])
        a = np.diag(p) - np.outer(p, p)
        h += np.kron(a, np.outer(feats[i], feats[i]))
    return h / n


def hessian_upper_bound(features: np.ndarray) -> float:
    """(1/n) sum_i |x_i|^2, the spectral bound on the loss Hessian."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ValueError("features must be a non-empty (n, d) array")
    return float(np.mean(np.einsum("id,id->i", feats, feats)))


@dataclass(frozen=True)
class HessianReport:
    seed: int
    class_count: int
    dim: int
    examples: int
    lambda_max: float
    bound: float
    margin: float  # bound - lambda_max

    @property
    def satisfied(self) -> bool:
        return self.margin >= -1e-9


def verify_lipschitz_bound(
    instances: int,
    max_classes: int = 4,
    max_dim: int = 6,
    max_examples: int = 8,
    seed: int = 0,
) -> list[HessianReport]:
    """Random-instance sweep of lambda_max(H) <= (1/n) sum |x_i|^2.

    lambda_max comes from the dense symmetric eigensolver. Any violation
    raises with the offending instance seed.
    """
    reports = []
    for index in range(instances):
        inst_seed = derive_seed(seed, "lipschitz", index)
        rng = SeededRng(inst_seed)
        k = 2 + rng.integers(max_classes - 1)
        d = 1 + rng.integers(max_dim)
        n = 1 + rng.integers(max_examples)
        feats = rng.normal((n, d), scale=2.0)
        labels = rng.integers(k, n)
        w = rng.normal((k, d))
        clf = LinearClassifier(w)
        h = hessian_full(clf, feats, labels)
        lam = float(np.linalg.eigvalsh(h)[-1])
        bound = hessian_upper_bound(feats)
        report = HessianReport(
            seed=inst_seed,
            class_count=int(k),
            dim=int(d),
            examples=int(n),
            lambda_max=lam,
            bound=bound,
            margin=bound - lam,
        )
        if not report.satisfied:
            raise AssertionError(
                f"Lipschitz bound violated on instance seed {inst_seed}: "
                f"lambda_max={lam} > bound={bound}"
            )
        reports.append(report)
    return reports


def distance_lower_bound(
    clf: LinearClassifier, features: np.ndarray, labels: np.ndarray
) -> float:
    """|grad L(W)|_F / ((1/n) sum |x_i|^2): any minimizer of the loss on
    (features, labels) is at least this far from clf.weights."""
    denom = hessian_upper_bound(features)
    if denom <= 0.0:
        raise ValueError("bound denominator is zero (all-zero features)")
    grad = grad_wrt_weights(clf, features, labels)
    return float(np.linalg.norm(grad)) / denom


@dataclass(frozen=True)
class DistanceBoundReport:
    instance_seed: int
    grad_norm_at_w_star: float
    bound: float
    distance: float
    slack: float
    satisfied: bool


def verify_distance_bound(
    instances: int = 20,
    samples_per_instance: int = 20,
    grad_tol: float = 1e-8,
    seed: int = 0,
) -> tuple[list[DistanceBoundReport], list[int]]:
    """Check |W* - W_B| >= bound on tiny random instances.

    W_B is trained to |grad|_F <= grad_tol; because it is inexact, the
    inequality is asserted with slack grad_tol / bound-denominator.
    Instances whose optimum cannot be reached (separable data pushes it
    to infinity) are skipped and returned in the second list.
    """
    reports: list[DistanceBoundReport] = []
    skipped: list[int] = []
    for index in range(instances):
        inst_seed = derive_seed(seed, "distance", index)
        rng = SeededRng(inst_seed)
        k = 2 + rng.integers(3)
        d = 2 + rng.integers(3)
        n = 4 * k
        feats = rng.normal((n, d))
        labels = np.concatenate(
            [np.arange(k), rng.integers(k, n - k)]
        )  # every class present
        optimum = train_to_optimum(feats, labels, k, grad_tol=grad_tol)
        if not optimum.converged:
            skipped.append(inst_seed)
            continue
        wb = optimum.classifier.weights
        denom = hessian_upper_bound(feats)
        slack = grad_tol / denom
        for sample in range(samples_per_instance):
            radius = 10.0 ** (rng.uniform() * 3.0 - 1.0)
            direction = rng.normal(wb.shape)
            direction /= np.linalg.norm(direction)
            w_star = wb + radius * direction
            clf = LinearClassifier(w_star)
            bound = distance_lower_bound(clf, feats, labels)
            distance = float(np.linalg.norm(w_star - wb))
            ok = distance >= bound * (1.0 - 1e-6) - slack
            report = DistanceBoundReport(
                instance_seed=inst_seed,
                grad_norm_at_w_star=float(
                    np.linalg.norm(grad_wrt_weights(clf, feats, labels))
                ),
                bound=bound,
                distance=distance,
                slack=slack,
                satisfied=ok,
            )
            if not ok:
                raise AssertionError(
                    f"distance bound violated on instance seed {inst_seed} "
                    f"sample {sample}: distance={distance} < bound={bound}"
                )
            reports.append(report)
    return reports, skipped


def spearman_rank_correlation(x: np.ndarray, y: np.ndarray) -> float:
    """Spearman rho: Pearson correlation of average ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("need two equal-length vectors with >= 2 entries")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0.0:
        return 0.0
    return float((rx * ry).sum() / denom)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    ranks[order] = np.arange(1, values.size + 1)
    # Average the ranks of exact ties.
    sorted_vals = values[order]
    start = 0
    for i in range(1, values.size + 1):
        if i == values.size or sorted_vals[i] != sorted_vals[start]:
            if i - start > 1:
                ranks[order[start:i]] = ranks[order[start:i]].mean()
            start = i
    return ranks


# Instance used for the gradient-norm/distance experiment: few classes in
# a low dimension with wide noise, so classes overlap and the small-set
# optimum is finite.
GRADNORM_INSTANCE_SPEC = SyntheticSpec(
    raw_dim=6,
    base_classes=3,
    novel_classes=3,
    mode_count=2,
    class_mean_scale=1.0,
    mode_scale=1.0,
    noise_sigma=1.5,
    examples_per_class=8,
    test_examples_per_class=1,
)


@dataclass(frozen=True)
class GradnormDistanceResult:
    grad_norms: np.ndarray
    cosine_distances: np.ndarray
    spearman: float


def gradnorm_distance_experiment(
    samples: int = 200,
    seed: int = 0,
    grad_tol: float = 1e-8,
) -> GradnormDistanceResult:
    """Sample weights at radii spanning three decades around the trained
    optimum W_B; report gradient norm vs cosine distance to W_B and their
    Spearman rank correlation."""
    data, _ = make_synthetic(GRADNORM_INSTANCE_SPEC, derive_seed(seed, "instance"))
    feats = data.features.astype(np.float64)
    labels = data.labels
    optimum = train_to_optimum(feats, labels, data.class_count, grad_tol=grad_tol)
    if not optimum.converged:
        raise RuntimeError("reference optimum did not converge; adjust the instance")
    wb = optimum.classifier.weights
    wb_flat = wb.ravel()
    wb_norm = np.linalg.norm(wb_flat)
    rng = SeededRng(derive_seed(seed, "samples"))
    radii = 10.0 ** (rng.uniform(samples) * 3.0 - 1.5)
    grad_norms = np.empty(samples)
    cos_dists = np.empty(samples)
    for i in range(samples):
        direction = rng.normal(wb.shape)
        direction /= np.linalg.norm(direction)
        w = wb + radii[i] * direction
        grad = grad_wrt_weights(LinearClassifier(w), feats, labels)
        grad_norms[i] = np.linalg.norm(grad)
        w_flat = w.ravel()
        cos_dists[i] = 1.0 - float(
            w_flat @ wb_flat / (np.linalg.norm(w_flat) * wb_norm)
        )
    rho = spearman_rank_correlation(grad_norms, cos_dists)
    return GradnormDistanceResult(grad_norms, cos_dists, rho)


def write_verification_report(
    path,
    hessian_reports: list[HessianReport],
    distance_reports: list[DistanceBoundReport],
    skipped: list[int],
    gradnorm: GradnormDistanceResult | None = None,
    extra: dict | None = None,
) -> None:
    """Structured-text dump of the verification runs."""
    doc: dict = {
        "lipschitz": {
            "instances": len(hessian_reports),
            "violations": sum(not r.satisfied for r in hessian_reports),
            "worst_margin": min((r.margin for r in hessian_reports), default=None),
            "records": [asdict(r) for r in hessian_reports],
        },
        "distance_bound": {
            "checks": len(distance_reports),
            "violations": sum(not r.satisfied for r in distance_reports),
            "skipped_instances": skipped,
            "records": [asdict(r) for r in distance_reports],
        },
    }
    if gradnorm is not None:
        doc["gradnorm_vs_distance"] = {
            "samples": int(gradnorm.grad_norms.size),
            "spearman": gradnorm.spearman,
            "pairs": [
                [float(g), float(c)]
                for g, c in zip(gradnorm.grad_norms, gradnorm.cosine_distances)
            ],
        }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
