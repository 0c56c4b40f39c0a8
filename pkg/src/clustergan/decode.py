"""Backprop latent recovery: one restart per one-hot mode, Adam over z_n, best loss wins.

All (row, mode) restarts are independent, and Adam is elementwise, so they are
optimised together as rows of one matrix; the result equals running each
restart on its own.
"""
from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .latent import LatentCode, LatentSpec, box_muller, derive_seed, make_rng

logger = logging.getLogger(__name__)


class DecodeError(RuntimeError):
    pass


@dataclass(frozen=True)
class DecodeConfig:
    lam: float = 10.0
    tau: int = 5000
    lr: float = 1e-2
    clip_lo: float = -0.6
    clip_hi: float = 0.6
    chunk_rows: int = 256

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        if not self.clip_lo < self.clip_hi:
            raise ValueError(f"clip bounds must satisfy lo < hi, got [{self.clip_lo}, {self.clip_hi}]")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")


@dataclass
class DecodeResult:
    z_star: LatentCode
    loss: float
    per_mode_losses: np.ndarray


@dataclass
class DecodedDataset:
    zn: np.ndarray
    zc: np.ndarray
    modes: np.ndarray
    losses: np.ndarray
    per_mode_losses: np.ndarray
    failures: list[tuple[int, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return self.zn.shape[0]

    def z(self) -> np.ndarray:
        return np.hstack([self.zn, self.zc])

    def codes(self) -> list[LatentCode]:
        return [LatentCode(self.zn[i].copy(), self.zc[i].copy(), int(self.modes[i]))
                for i in range(len(self))]


def reconstruction_loss(G, z: np.ndarray, x: np.ndarray, n_free: int, lam: float) -> np.ndarray:
    """Per-row ||G(z) - x||_1 + lam ||z_free||_2^2 evaluated without a graph."""
    out = G.predict(z)
    return np.abs(out - x).sum(axis=1) + lam * (z[:, :n_free] ** 2).sum(axis=1)


def _optimise(G, targets: np.ndarray, free0: np.ndarray, fixed: np.ndarray, cfg: DecodeConfig,
              adam_betas=(0.9, 0.999)) -> tuple[np.ndarray, np.ndarray]:
    """Minimise the per-row loss over the free block; ``fixed`` columns never change."""
    free = ad.parameter(free0.copy())
    fixed_t = Tensor(fixed)
    opt = Adam([free], lr=cfg.lr, beta1=adam_betas[0], beta2=adam_betas[1])
    for _ in range(cfg.tau):
        z = ad.concat([free, fixed_t], axis=1) if fixed.shape[1] else free
        out = G.forward(z, training=False, frozen=True)
        fit = ad.sum(ad.abs(ad.sub(out, targets)))
        loss = ad.add(fit, ad.scale(ad.sum(ad.square(free)), cfg.lam)) if cfg.lam else fit
        ad.backward(loss)
        opt.step()
        np.clip(free.data, cfg.clip_lo, cfg.clip_hi, out=free.data)
    z = np.hstack([free.data, fixed]) if fixed.shape[1] else free.data
    losses = reconstruction_loss(G, z, targets, free.shape[1], cfg.lam)
    return free.data, losses


def _optimise_guarded(G, targets, free0, fixed, cfg) -> tuple[np.ndarray, np.ndarray]:
    try:
        return _optimise(G, targets, free0, fixed, cfg)
    except FloatingPointError:
        if targets.shape[0] == 1:
            return free0.copy(), np.array([np.inf])
    # a non-finite value somewhere in the block: isolate it restart by restart
    free, losses = np.empty_like(free0), np.empty(targets.shape[0])
    for r in range(targets.shape[0]):
        free[r:r + 1], losses[r:r + 1] = _optimise_guarded(G, targets[r:r + 1], free0[r:r + 1],
                                                          fixed[r:r + 1], cfg)
    return free, losses


def _decode_rows(G, X: np.ndarray, spec: LatentSpec, cfg: DecodeConfig, init: np.ndarray
                 ) -> tuple[np.ndarray, np.ndarray]:
    """``init`` has shape (n, K, dn); returns final z_n (n, K, dn) and losses (n, K)."""
    n, k = X.shape[0], spec.k
    targets = np.repeat(X, k, axis=0)
    fixed = np.tile(np.eye(k), (n, 1))
    free, losses = _optimise_guarded(G, targets, init.reshape(n * k, spec.dn), fixed, cfg)
    losses = np.where(np.isfinite(losses), losses, np.inf)
    return free.reshape(n, k, spec.dn), losses.reshape(n, k)


def initial_codes(spec: LatentSpec, rng: np.random.Generator) -> np.ndarray:
    return spec.sigma * box_muller(rng, (spec.k, spec.dn))


def decode_latent(G, x, spec: LatentSpec, cfg: DecodeConfig, rng: np.random.Generator) -> DecodeResult:
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if not np.isfinite(x).all():
        raise ValueError("decode_latent: x has non-finite entries")
    if x.shape[1] != G.output_dim:
        raise ValueError(f"decode_latent: x has {x.shape[1]} entries, generator emits {G.output_dim}")
    zn, losses = _decode_rows(G, x, spec, cfg, initial_codes(spec, rng)[None])
    return _select(zn[0], losses[0], spec, row=None)


def _select(zn: np.ndarray, losses: np.ndarray, spec: LatentSpec, row) -> DecodeResult:
    bad = ~np.isfinite(losses)
    if bad.all():
        raise DecodeError(f"all {spec.k} restarts were non-finite" + (f" for row {row}" if row is not None else ""))
    if bad.any():
        warnings.warn(f"discarded non-finite restarts {np.flatnonzero(bad).tolist()}"
                      + (f" for row {row}" if row is not None else ""), RuntimeWarning, stacklevel=3)
    k = int(np.argmin(losses))  # first minimum: ties go to the lowest mode
    return DecodeResult(LatentCode(zn[k].copy(), np.eye(spec.k)[k], k), float(losses[k]), losses.copy())


def decode_dataset(G, X, spec: LatentSpec, cfg: DecodeConfig, seed: int = 0, workers: int = 1
                   ) -> DecodedDataset:
    """Decode every row. Row i starts from seed ``derive_seed(seed, i)`` whatever the
    chunking or worker count; results come back in row order."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != G.output_dim:
        raise ValueError(f"decode_dataset: expected (n, {G.output_dim}) data, got {X.shape}")
    n = X.shape[0]
    init = np.stack([initial_codes(spec, make_rng(derive_seed(seed, i))) for i in range(n)]) if n else \
        np.zeros((0, spec.k, spec.dn))
    finite_rows = np.isfinite(X).all(axis=1)
    chunks = [np.arange(i, min(n, i + cfg.chunk_rows)) for i in range(0, n, cfg.chunk_rows)]

    def run(idx):
        ok = idx[finite_rows[idx]]
        zn = np.zeros((idx.size, spec.k, spec.dn))
        losses = np.full((idx.size, spec.k), np.inf)
        if ok.size:
            pos = np.searchsorted(idx, ok)
            zn[pos], losses[pos] = _decode_rows(G, X[ok], spec, cfg, init[ok])
        return zn, losses

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    all_zn = np.concatenate([p[0] for p in parts]) if parts else np.zeros((0, spec.k, spec.dn))
    per_mode = np.concatenate([p[1] for p in parts]) if parts else np.zeros((0, spec.k))

    out_zn = np.zeros((n, spec.dn))
    out_zc = np.zeros((n, spec.k))
    modes = np.full(n, -1)
    losses = np.full(n, np.inf)
    failures = []
    for i in range(n):
        if not finite_rows[i]:
            failures.append((i, "non-finite input row"))
            continue
        if not np.isfinite(per_mode[i]).any():
            failures.append((i, "all restarts non-finite"))
            continue
        k = int(np.argmin(per_mode[i]))
        out_zn[i], out_zc[i, k], modes[i], losses[i] = all_zn[i, k], 1.0, k, per_mode[i, k]
    if failures:
        logger.warning("decode_dataset: %d of %d rows failed", len(failures), n)
    return DecodedDataset(out_zn, out_zc, modes, losses, per_mode, failures)


def decode_continuous(G, X, dim: int, cfg: DecodeConfig, init_scale: float = 1.0, restarts: int = 1,
                      seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Backprop decoding for a purely continuous latent: ``restarts`` random starts
    per row, all coordinates free and regularised. Returns (z, loss) per row."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    init = np.stack([init_scale * box_muller(make_rng(derive_seed(seed, i)), (restarts, dim))
                     for i in range(n)])
    best_z, best_loss = np.zeros((n, dim)), np.full(n, np.inf)
    for lo in range(0, n, cfg.chunk_rows):
        idx = np.arange(lo, min(n, lo + cfg.chunk_rows))
        targets = np.repeat(X[idx], restarts, axis=0)
        free, losses = _optimise_guarded(G, targets, init[idx].reshape(-1, dim),
                                         np.zeros((targets.shape[0], 0)), cfg)
        free = free.reshape(idx.size, restarts, dim)
        losses = np.where(np.isfinite(losses), losses, np.inf).reshape(idx.size, restarts)
        pick = losses.argmin(axis=1)
        best_z[idx] = free[np.arange(idx.size), pick]
        best_loss[idx] = losses[np.arange(idx.size), pick]
    return best_z, best_loss
