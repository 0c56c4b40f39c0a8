"""Cluster validity metrics, optimal label assignment and K-means."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .latent import box_muller, make_rng


@dataclass
class ClusterReport:
    acc: float
    nmi: float
    ari: float
    assignment: dict[int, int]
    contingency: np.ndarray

    def as_dict(self) -> dict:
        return {"acc": self.acc, "nmi": self.nmi, "ari": self.ari,
                "assignment": {str(k): v for k, v in self.assignment.items()},
                "contingency": self.contingency.tolist()}


@dataclass
class ModeReport:
    mode_accuracy: float
    reconstruction_accuracy: float
    cluster_accuracy: float
    classifier_accuracy: float = float("nan")
    reliable: bool = True
    notes: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def optimal_assignment(cost) -> tuple[np.ndarray, float]:
    """Minimum-cost permutation of a square matrix; among optimal permutations the
    lexicographically smallest is returned."""
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost must be square, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix has non-finite entries")
    k = cost.shape[0]
    if k == 0:
        return np.zeros(0, dtype=int), 0.0
    rows, cols = linear_sum_assignment(cost)
    best = float(cost[rows, cols].sum())
    tol = 1e-9 * max(1.0, np.abs(cost).max() * k)

    perm = np.full(k, -1)
    free_rows, free_cols = list(range(k)), list(range(k))
    fixed = 0.0
    for r in range(k):
        free_rows.remove(r)
        for c in free_cols:
            rest = 0.0
            if free_rows:
                sub = cost[np.ix_(free_rows, [x for x in free_cols if x != c])]
                sr, sc = linear_sum_assignment(sub)
                rest = float(sub[sr, sc].sum())
            if fixed + cost[r, c] + rest <= best + tol:
                perm[r] = c
                fixed += cost[r, c]
                free_cols.remove(c)
                break
    return perm, float(cost[np.arange(k), perm].sum())


def contingency_matrix(pred, truth) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Counts indexed by (predicted cluster, true label) over the labels present."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    p_vals, p_idx = np.unique(pred, return_inverse=True)
    t_vals, t_idx = np.unique(truth, return_inverse=True)
    C = np.zeros((p_vals.size, t_vals.size), dtype=np.int64)
    np.add.at(C, (p_idx, t_idx), 1)
    return C, p_vals, t_vals


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def _comb2(x):
    x = np.asarray(x, dtype=float)
    return x * (x - 1) / 2.0


def clustering_accuracy(C: np.ndarray) -> tuple[float, dict[int, int]]:
    k = max(C.shape)
    padded = np.zeros((k, k), dtype=np.int64)
    padded[:C.shape[0], :C.shape[1]] = C
    perm, _ = optimal_assignment(padded.max() - padded)
    matched = padded[np.arange(k), perm].sum()
    assignment = {int(r): int(perm[r]) for r in range(C.shape[0]) if perm[r] < C.shape[1]}
    return float(matched / C.sum()), assignment


def nmi_from_contingency(C: np.ndarray) -> float:
    n = C.sum()
    hp, ht = _entropy(C.sum(axis=1), n), _entropy(C.sum(axis=0), n)
    if hp == 0.0 or ht == 0.0:
        return 1.0 if hp == ht == 0.0 else 0.0
    if C.shape[0] == C.shape[1] == np.count_nonzero(C):
        return 1.0  # identical partitions up to relabelling; avoids 1 - 2e-16
    pij = C / n
    outer = np.outer(C.sum(axis=1), C.sum(axis=0)) / n**2
    nz = pij > 0
    mi = float((pij[nz] * np.log(pij[nz] / outer[nz])).sum())
    return float(max(0.0, min(1.0, mi / np.sqrt(hp * ht))))


def ari_from_contingency(C: np.ndarray) -> float:
    n = C.sum()
    sum_ij = _comb2(C).sum()
    sum_a = _comb2(C.sum(axis=1)).sum()
    sum_b = _comb2(C.sum(axis=0)).sum()
    total = _comb2(n)
    if total == 0:
        return 1.0
    expected = sum_a * sum_b / total
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def clustering_metrics(pred, truth) -> ClusterReport:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.size == 0:
        raise ValueError("clustering_metrics: empty label vectors")
    if pred.shape != truth.shape:
        raise ValueError(f"clustering_metrics: lengths differ ({pred.size} vs {truth.size})")
    C, p_vals, t_vals = contingency_matrix(pred, truth)
    acc, assign = clustering_accuracy(C)
    assignment = {int(p_vals[r]): int(t_vals[c]) for r, c in assign.items()}
    return ClusterReport(acc, nmi_from_contingency(C), ari_from_contingency(C), assignment, C)


# ------------------------------------------------------------------- K-means

def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centres = [X[rng.integers(n)]]
    d2 = ((X - centres[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else int(np.searchsorted(np.cumsum(d2), rng.random() * total))
        idx = min(idx, n - 1)
        centres.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centres)


def _assign(X: np.ndarray, centres: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = (X * X).sum(axis=1)[:, None] - 2 * X @ centres.T + (centres * centres).sum(axis=1)[None, :]
    labels = d2.argmin(axis=1)
    return labels, np.maximum(d2[np.arange(X.shape[0]), labels], 0.0)


def kmeans(X, k: int, seed: int = 0, n_init: int = 10, max_iter: int = 300
           ) -> tuple[np.ndarray, np.ndarray, float]:
    """Lloyd iterations from k-means++ seeds; best of ``n_init`` by inertia.

    Returns ``(labels, centroids, inertia)``.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"kmeans: need 1 <= k <= n, got k={k}, n={n}")
    rng = make_rng(seed)
    best = None
    for _ in range(n_init):
        centres = _kmeanspp(X, k, rng)
        labels, d2 = _assign(X, centres)
        for _ in range(max_iter):
            for j in range(k):
                members = labels == j
                if members.any():
                    centres[j] = X[members].mean(axis=0)
                else:
                    centres[j] = X[int(d2.argmax())]
            new_labels, d2 = _assign(X, centres)
            if np.array_equal(new_labels, labels):
                break
            labels = new_labels
        inertia = float(d2.sum())
        if best is None or inertia < best[2] - 1e-12:
            best = (labels.copy(), centres.copy(), inertia)
    return best


# --------------------------------------------------------------- mode metrics

def mode_metrics(G, encode, classify, data: np.ndarray, labels: np.ndarray, spec,
                 n_per_mode: int = 200, seed: int = 0, classifier_accuracy: float = float("nan"),
                 accuracy_floor: float = 0.9) -> ModeReport:
    """Mode / reconstruction / cluster accuracy of a generator with an inverse map.

    ``G.predict(z)`` generates from latent rows, ``encode(X) -> (zn, zc)`` maps
    data back (encoder network or backprop decoding) and ``classify(X)`` is a
    supervised reference model. Modes are matched to classes one-to-one.
    """
    rng = make_rng(seed)
    modes = np.repeat(np.arange(spec.k), n_per_mode)
    zn = spec.sigma * box_muller(rng, (modes.size, spec.dn))
    y_hat = np.asarray(classify(G.predict(np.hstack([zn, np.eye(spec.k)[modes]]))))
    mode_acc = clustering_metrics(modes, y_hat).acc

    labels = np.asarray(labels)
    zn_dec, zc_dec = encode(data)
    regen = G.predict(np.hstack([zn_dec, zc_dec]))
    recon_acc = float(np.mean(np.asarray(classify(regen)) == labels))

    decoded_modes = np.asarray(zc_dec).argmax(axis=1)
    consistent = sum(np.bincount(decoded_modes[labels == c]).max() for c in np.unique(labels))
    cluster_acc = float(consistent / labels.size)

    reliable = not classifier_accuracy < accuracy_floor
    notes = [] if reliable else [f"classifier accuracy {classifier_accuracy:.3f} below floor {accuracy_floor}"]
    return ModeReport(mode_acc, recon_acc, cluster_acc, classifier_accuracy, reliable, notes)
