"""Discrete-continuous latent prior: z = (z_n, z_c), z_n ~ N(0, sigma^2 I), z_c one-hot."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MIXED = "mixed"


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; identical streams on every platform."""
    return np.random.Generator(np.random.Philox(seed))


def derive_seed(seed: int, *keys: int) -> int:
    """Hash ``(seed, *keys)`` into a fresh 64-bit seed."""
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), *(int(k) for k in keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def box_muller(rng: np.random.Generator, size) -> np.ndarray:
    n = int(np.prod(size))
    half = (n + 1) // 2
    u1 = 1.0 - rng.random(half)  # (0, 1], keeps log finite
    u2 = rng.random(half)
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
    return out.reshape(size)


@dataclass(frozen=True)
class LatentSpec:
    dn: int
    k: int
    sigma: float = 0.10

    def __post_init__(self):
        if self.dn < 1:
            raise ValueError(f"dn must be >= 1, got {self.dn}")
        if self.k < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")

    @property
    def dim(self) -> int:
        return self.dn + self.k


@dataclass
class LatentCode:
    zn: np.ndarray
    zc: np.ndarray
    mode: int | str

    def vector(self) -> np.ndarray:
        return np.concatenate([self.zn, self.zc])


@dataclass
class LatentBatch:
    """Row-stacked codes; what the training loop actually consumes."""

    zn: np.ndarray
    zc: np.ndarray
    modes: np.ndarray

    def matrix(self) -> np.ndarray:
        return np.hstack([self.zn, self.zc])

    def codes(self) -> list[LatentCode]:
        return [LatentCode(zn.copy(), zc.copy(), int(m)) for zn, zc, m in zip(self.zn, self.zc, self.modes)]


def sample_batch(spec: LatentSpec, n: int, rng: np.random.Generator) -> LatentBatch:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    modes = rng.integers(0, spec.k, size=n)
    zn = spec.sigma * box_muller(rng, (n, spec.dn))
    zc = np.eye(spec.k)[modes]
    return LatentBatch(zn, zc, modes)


def sample(spec: LatentSpec, n: int, rng: np.random.Generator) -> list[LatentCode]:
    return sample_batch(spec, n, rng).codes()


def one_hot_codes(spec: LatentSpec, modes: Sequence[int], rng: np.random.Generator) -> LatentBatch:
    """Codes with prescribed modes and fresh z_n."""
    modes = np.asarray(modes, dtype=int)
    zn = spec.sigma * box_muller(rng, (len(modes), spec.dn))
    return LatentBatch(zn, np.eye(spec.k)[modes], modes)


def interpolate(a: LatentCode, b: LatentCode, mu: float) -> LatentCode:
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"mu must lie in [0, 1], got {mu}")
    if not np.array_equal(a.zn, b.zn):
        raise ValueError("interpolate: both codes must share z_n")
    if mu == 1.0:
        return LatentCode(a.zn.copy(), a.zc.copy(), a.mode)
    if mu == 0.0:
        return LatentCode(b.zn.copy(), b.zc.copy(), b.mode)
    return LatentCode(a.zn.copy(), mu * a.zc + (1.0 - mu) * b.zc, MIXED)


def clip_zn(code: LatentCode, lo: float = -0.6, hi: float = 0.6) -> LatentCode:
    if not lo < hi:
        raise ValueError(f"clip bounds must satisfy lo < hi, got [{lo}, {hi}]")
    return LatentCode(np.clip(code.zn, lo, hi), code.zc, code.mode)


def write_latent_csv(path: str | Path, zn: np.ndarray, zc: np.ndarray, modes,
                     extra: dict[str, Sequence] | None = None) -> None:
    """Latent dump: zn_0.., zc_0.., mode, then any extra columns."""
    zn, zc = np.atleast_2d(zn), np.atleast_2d(zc)
    extra = extra or {}
    header = ([f"zn_{j}" for j in range(zn.shape[1])] + [f"zc_{j}" for j in range(zc.shape[1])]
              + ["mode"] + list(extra))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(zn.shape[0]):
            row = [repr(float(v)) for v in zn[i]] + [repr(float(v)) for v in zc[i]] + [modes[i]]
            row += [extra[key][i] for key in extra]
            w.writerow(row)


def read_latent_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray, list]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    zn_idx = [i for i, h in enumerate(header) if h.startswith("zn_")]
    zc_idx = [i for i, h in enumerate(header) if h.startswith("zc_")]
    mode_idx = header.index("mode")
    zn = np.array([[float(r[i]) for i in zn_idx] for r in body]).reshape(len(body), len(zn_idx))
    zc = np.array([[float(r[i]) for i in zc_idx] for r in body]).reshape(len(body), len(zc_idx))
    modes = [int(r[mode_idx]) if r[mode_idx] != MIXED else MIXED for r in body]
    return zn, zc, modes
