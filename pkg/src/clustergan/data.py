"""Dataset generators and loaders."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .latent import box_muller, derive_seed, make_rng


class DataError(ValueError):
    """Malformed or missing input data."""


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray | None = None
    name: str = "dataset"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2:
            raise DataError(f"X must be 2-D, got shape {self.X.shape}")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=int)
            if self.y.shape != (self.X.shape[0],):
                raise DataError(f"labels shape {self.y.shape} does not match {self.X.shape[0]} rows")
            if (self.y < 0).any():
                raise DataError("labels must be non-negative")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def n_classes(self) -> int:
        return 0 if self.y is None else int(self.y.max()) + 1

    def subset(self, idx: np.ndarray, name: str | None = None) -> "Dataset":
        return Dataset(self.X[idx], None if self.y is None else self.y[idx],
                       name or self.name, dict(self.provenance))


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * a))


@dataclass(frozen=True)
class SyntheticSpec:
    k_true: int = 4
    latent_dim: int = 2
    points_per_component: int = 2500
    sigma_data: float = 1.0
    separation: float = 4.0
    data_dim: int = 100
    hidden_dim: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.points_per_component < 1:
            raise DataError("points_per_component must be >= 1")


def synthetic_means(spec: SyntheticSpec) -> np.ndarray:
    """Component centres on a circle of radius ``separation``; the seed rotates it."""
    rng = make_rng(derive_seed(spec.seed, 1))
    phase = rng.uniform(0, 2 * np.pi)
    angles = phase + 2 * np.pi * np.arange(spec.k_true) / spec.k_true
    means = np.zeros((spec.k_true, spec.latent_dim))
    means[:, 0] = spec.separation * np.cos(angles)
    means[:, 1] = spec.separation * np.sin(angles)
    return means


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> Dataset:
    """2-D Gaussian mixture pushed through x = sigmoid(U sigmoid(W z))."""
    rng = make_rng(derive_seed(spec.seed, 0))
    W = box_muller(rng, (spec.hidden_dim, spec.latent_dim))
    U = box_muller(rng, (spec.data_dim, spec.hidden_dim))
    means = synthetic_means(spec)
    y = np.repeat(np.arange(spec.k_true), spec.points_per_component)
    z = means[y] + spec.sigma_data * box_muller(rng, (y.size, spec.latent_dim))
    perm = rng.permutation(y.size)
    z, y = z[perm], y[perm]
    X = _sigmoid(_sigmoid(z @ W.T) @ U.T)
    return Dataset(X, y, "synthetic", {"generator": "sigmoid(U sigmoid(W z))", "seed": spec.seed,
                                       "k_true": spec.k_true, "sigma_data": spec.sigma_data,
                                       "separation": spec.separation})


def generate_lemma_world(d: int = 100, k: int = 10, mean_range: tuple[float, float] = (-0.3, 0.3),
                         sigma: float = 0.12, n: int = 10000, seed: int = 0,
                         return_means: bool = False):
    """Mixture of k isotropic Gaussians in R^d with uniformly drawn means."""
    if n < k:
        raise DataError(f"n must be >= k, got n={n}, k={k}")
    rng = make_rng(derive_seed(seed, 0))
    means = rng.uniform(mean_range[0], mean_range[1], size=(k, d))
    y = rng.integers(0, k, size=n)
    X = means[y] + sigma * box_muller(rng, (n, d))
    ds = Dataset(X, y, "lemma_world", {"d": d, "k": k, "sigma": sigma, "seed": seed,
                                        "mean_range": list(mean_range)})
    return (ds, means) if return_means else ds


def _read_rows(path: Path) -> list[list[str]]:
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with open(path, newline="") as fh:
        return [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]


def _is_numeric(row: list[str]) -> bool:
    try:
        [float(c) for c in row]
    except ValueError:
        return False
    return True


def read_matrix_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray | None, list[str] | None]:
    """Comma-separated matrix with optional header and optional final ``label`` column."""
    path = Path(path)
    rows = _read_rows(path)
    if not rows:
        raise DataError(f"{path}: empty file")
    header = None if _is_numeric(rows[0]) else [c.strip() for c in rows[0]]
    body = rows[1:] if header else rows
    width = len(header) if header else len(body[0])
    values = []
    for lineno, r in enumerate(body, start=2 if header else 1):
        if len(r) != width:
            raise DataError(f"{path}: line {lineno} has {len(r)} fields, expected {width}")
        try:
            values.append([float(c) for c in r])
        except ValueError as exc:
            raise DataError(f"{path}: line {lineno}: {exc}") from None
    M = np.array(values, dtype=float).reshape(len(values), width)
    if header and header[-1].lower() == "label":
        return M[:, :-1], M[:, -1].astype(int), header[:-1]
    return M, None, header


def write_matrix_csv(path: str | Path, X: np.ndarray, y: np.ndarray | None = None,
                     prefix: str = "x") -> None:
    X = np.atleast_2d(X)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"{prefix}{j}" for j in range(X.shape[1])] + (["label"] if y is not None else []))
        for i, row in enumerate(X):
            w.writerow([repr(float(v)) for v in row] + ([int(y[i])] if y is not None else []))


def load_pointcloud_csv(path: str | Path, coord_range: tuple[float, float] | None = (0.0, 100.0),
                        name: str = "pendigits") -> Dataset:
    """Pen-trajectory features; coordinates are rescaled from ``coord_range`` to [0, 1]."""
    X, y, _ = read_matrix_csv(path)
    if coord_range is not None:
        lo, hi = coord_range
        X = np.clip((X - lo) / (hi - lo), 0.0, 1.0)
    return Dataset(X, y, name, {"path": str(path), "scaling": f"linear from {coord_range} to [0, 1]"})


def normalize_counts(C: np.ndarray, top_genes: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Keep the ``top_genes`` highest raw-variance columns, then log2(1 + c) / max."""
    C = np.asarray(C, dtype=float)
    if (C < 0).any():
        r, c = np.argwhere(C < 0)[0]
        raise DataError(f"negative count {C[r, c]} at row {r}, column {c}")
    if top_genes is not None and top_genes < C.shape[1]:
        var = C.var(axis=0)
        # stable sort on -var: ties keep the lower column index
        keep = np.sort(np.argsort(-var, kind="stable")[:top_genes])
    else:
        keep = np.arange(C.shape[1])
    L = np.log2(1.0 + C[:, keep])
    peak = L.max() if L.size else 0.0
    return L / (peak if peak > 0 else 1.0), keep


def load_counts(path: str | Path, top_genes: int | None = 720, labels_path: str | Path | None = None,
                name: str = "counts") -> Dataset:
    """Counts as dense CSV or as ``row,col,count`` triplets (detected by a 3-column
    header named row/col/count, or by a ``.coo``/``.mtx``-style text file)."""
    path = Path(path)
    rows = _read_rows(path)
    if not rows:
        raise DataError(f"{path}: empty file")
    head = [c.strip().lower() for c in rows[0]]
    y = None
    if head == ["row", "col", "count"] or path.suffix in (".coo", ".triplets"):
        body = rows[1:] if head == ["row", "col", "count"] else rows
        trip = []
        for lineno, r in enumerate(body, start=2 if head == ["row", "col", "count"] else 1):
            if len(r) != 3:
                raise DataError(f"{path}: line {lineno} has {len(r)} fields, expected 3")
            try:
                i, j, c = int(r[0]), int(r[1]), float(r[2])
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            if c < 0:
                raise DataError(f"{path}: line {lineno}: negative count {c} at row {i}, column {j}")
            trip.append((i, j, c))
        n = max(t[0] for t in trip) + 1
        m = max(t[1] for t in trip) + 1
        C = np.zeros((n, m))
        for i, j, c in trip:
            C[i, j] += c
    else:
        C, y, _ = read_matrix_csv(path)
    if labels_path is not None:
        lab, lab_y, _ = read_matrix_csv(labels_path)
        y = lab_y if lab_y is not None else lab[:, -1].astype(int)
    X, keep = normalize_counts(C, top_genes)
    return Dataset(X, y, name, {"path": str(path), "top_genes": top_genes,
                                "gene_ranking": "raw-count variance",
                                "transform": "log2(1+c) / global max", "kept_columns": keep.tolist()})


def split_indices(n: int, seed: int, fractions=(0.70, 0.15, 0.15)) -> tuple[np.ndarray, ...]:
    """Seeded shuffle into disjoint train/validation/test index sets."""
    perm = make_rng(derive_seed(seed, 77)).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]
