"""Adversarial training with the jointly trained encoder and its cycle losses."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .latent import LatentSpec, derive_seed, make_rng, sample_batch
from .networks import build_stack, grad_wrt_input, save_checkpoint

logger = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """A loss went non-finite; ``record`` says where."""

    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


@dataclass
class TrainConfig:
    quality_fn: str = "wasserstein"
    beta_n: float = 10.0
    beta_c: float = 10.0
    gp_coeff: float = 10.0
    d_steps_per_g: int = 5
    batch_size: int = 64
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    epochs: int = 30
    seed: int = 0
    sigma: float = 0.10
    dn: int = 6
    k: int = 4
    batchnorm: bool = False
    preset: str = "synthetic"
    hidden_width: int = 256
    depth: int = 2
    leak: float = 0.2
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.quality_fn not in ("wasserstein", "log"):
            raise ValueError(f"quality_fn must be 'wasserstein' or 'log', got {self.quality_fn!r}")
        if self.beta_n < 0 or self.beta_c < 0:
            raise ValueError("beta_n and beta_c must be non-negative")
        if self.d_steps_per_g < 1:
            raise ValueError("d_steps_per_g must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    @property
    def latent(self) -> LatentSpec:
        return LatentSpec(self.dn, self.k, self.sigma)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        defaults = cls()
        kw = {}
        for key, raw in values.items():
            kind = type(getattr(defaults, key))
            if kind is bool and isinstance(raw, str):
                kw[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            else:
                try:
                    kw[key] = kind(raw)
                except (TypeError, ValueError):
                    raise ValueError(f"training key {key} = {raw!r} is not a valid {kind.__name__}") from None
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    COLUMNS = ("iteration", "d_loss", "g_loss", "cycle_zn", "cycle_zc", "wall_clock")

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def deterministic_view(self) -> list[tuple]:
        """Records without wall-clock times, for reproducibility comparisons."""
        return [tuple(r[c] for c in self.COLUMNS if c != "wall_clock") for r in self.records]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            w.writeheader()
            for r in self.records:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


class DiscreteContinuousPrior:
    """z = (z_n, z_c); the only prior the encoder's cycle losses are defined for."""

    categorical = True

    def __init__(self, spec: LatentSpec):
        self.spec = spec
        self.dim = spec.dim

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return sample_batch(self.spec, n, rng).matrix()


@dataclass
class Optimizers:
    G: Adam
    D: Adam
    E: Adam | None = None


def make_optimizers(G, D, E, cfg: TrainConfig) -> Optimizers:
    def adam(net):
        return Adam(net.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    return Optimizers(adam(G), adam(D), adam(E) if E is not None else None)


def _check(value: float, what: str, iteration: int) -> None:
    if not np.isfinite(value):
        raise TrainingAborted(f"non-finite {what} at iteration {iteration}",
                              {"iteration": iteration, "component": what, "value": value})


def gradient_penalty(D, x_real: np.ndarray, x_fake: np.ndarray, rng: np.random.Generator
                     ) -> tuple[Tensor, np.ndarray]:
    """mean((||grad_x D(x_hat)|| - 1)^2) at uniform points on real-fake segments."""
    eps = rng.random((x_real.shape[0], 1))
    x_hat = eps * x_real + (1.0 - eps) * x_fake
    g = grad_wrt_input(D, Tensor(x_hat))
    pen = ad.mean(ad.square(ad.sub(ad.l2_norm_rows(g), 1.0)))
    return pen, x_hat


def discriminator_loss(G, D, real: np.ndarray, cfg: TrainConfig, rng: np.random.Generator,
                       prior) -> Tensor:
    z = prior.sample(real.shape[0], rng)
    fake = G.forward(z, frozen=True).data
    d_real = D.forward(real)
    d_fake = D.forward(fake)
    if cfg.quality_fn == "wasserstein":
        loss = ad.sub(ad.mean(d_fake), ad.mean(d_real))
        if cfg.gp_coeff > 0:
            pen, _ = gradient_penalty(D, real, fake, rng)
            loss = ad.add(loss, ad.scale(pen, cfg.gp_coeff))
        return loss
    return ad.sub(ad.scale(ad.mean(ad.log_sigmoid(d_real)), -1.0),
                  ad.mean(ad.log_sigmoid(ad.scale(d_fake, -1.0))))


def discriminator_step(G, D, real_batch: np.ndarray, cfg: TrainConfig, rng: np.random.Generator,
                       opt: Adam, prior=None, iteration: int = 0) -> float:
    if real_batch.shape[0] == 0:
        raise ValueError("discriminator_step: empty real batch")
    prior = prior or DiscreteContinuousPrior(cfg.latent)
    D.zero_grad()
    try:
        loss = discriminator_loss(G, D, real_batch, cfg, rng, prior)
    except FloatingPointError as exc:
        raise TrainingAborted(f"discriminator step failed at iteration {iteration}: {exc}",
                              {"iteration": iteration, "component": "d_loss"}) from exc
    _check(loss.item(), "d_loss", iteration)
    ad.backward(loss)
    opt.step()
    return loss.item()


def cycle_losses(E, x_gen: Tensor, zn: np.ndarray, zc: np.ndarray) -> tuple[Tensor, Tensor]:
    """Mean squared z_n recovery error and mean cross-entropy H(z_c, E(G(z))_c)."""
    dn = zn.shape[1]
    out = E.forward(x_gen, logits=True)
    zn_hat = out[:, :dn]
    log_zc_hat = ad.log_softmax_rows(out[:, dn:])
    cyc_n = ad.mean(ad.sum(ad.square(ad.sub(zn_hat, zn)), axis=1))
    cyc_c = ad.scale(ad.mean(ad.sum(ad.mul(log_zc_hat, zc), axis=1)), -1.0)
    return cyc_n, cyc_c


def generator_encoder_step(G, E, D, cfg: TrainConfig, rng: np.random.Generator, opts: Optimizers,
                           prior=None, iteration: int = 0) -> tuple[float, float, float]:
    """One generator (and encoder) update; returns (g_loss, cycle_zn, cycle_zc).

    The adversarial term does not depend on the encoder, so a single backward
    pass of the full loss gives the generator its full gradient and the encoder
    exactly the gradient of the two cycle terms.
    """
    prior = prior or DiscreteContinuousPrior(cfg.latent)
    m = cfg.batch_size
    G.zero_grad()
    D.zero_grad()
    if E is not None:
        E.zero_grad()
    try:
        z = prior.sample(m, rng)
        x_gen = G.forward(z)
        d_fake = D.forward(x_gen, training=False)
        if cfg.quality_fn == "wasserstein":
            adv = ad.scale(ad.mean(d_fake), -1.0)
        else:
            adv = ad.scale(ad.mean(ad.log_sigmoid(d_fake)), -1.0)
        loss = adv
        cyc_n_val = cyc_c_val = float("nan")
        if E is not None:
            dn = prior.spec.dn
            cyc_n, cyc_c = cycle_losses(E, x_gen, z[:, :dn], z[:, dn:])
            loss = ad.add(loss, ad.add(ad.scale(cyc_n, cfg.beta_n), ad.scale(cyc_c, cfg.beta_c)))
            cyc_n_val, cyc_c_val = cyc_n.item(), cyc_c.item()
    except FloatingPointError as exc:
        raise TrainingAborted(f"generator step failed at iteration {iteration}: {exc}",
                              {"iteration": iteration, "component": "g_loss"}) from exc
    _check(loss.item(), "g_loss", iteration)
    ad.backward(loss)
    D.zero_grad()
    opts.G.step()
    if E is not None:
        opts.E.step()
    return loss.item(), cyc_n_val, cyc_c_val


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield perm[i:i + batch_size]


def train(data, cfg: TrainConfig, nets: tuple | None = None, prior=None, with_encoder: bool = True,
          out_dir: str | Path | None = None, progress_every: int = 0, callback=None):
    """Alternate ``d_steps_per_g`` critic updates with one generator/encoder update.

    Runs ``epochs * (n // batch_size)`` generator updates. Returns ``(G, E, D, log)``.
    """
    X = np.asarray(getattr(data, "X", data), dtype=float)
    prior = prior or DiscreteContinuousPrior(cfg.latent)
    if nets is None:
        G, E, D = build_stack(cfg.preset, cfg.latent, data_dim=X.shape[1], hidden_width=cfg.hidden_width,
                              depth=cfg.depth, batchnorm=cfg.batchnorm, leak=cfg.leak,
                              critic=cfg.quality_fn == "wasserstein", seed=derive_seed(cfg.seed, 100))
    else:
        G, E, D = nets
    if not with_encoder:
        E = None
    if G.output_dim != X.shape[1]:
        raise ValueError(f"data has {X.shape[1]} columns but generator emits {G.output_dim}")
    opts = make_optimizers(G, D, E, cfg)
    rng = make_rng(derive_seed(cfg.seed, 200))
    batch_size = min(cfg.batch_size, X.shape[0])
    per_epoch = max(1, X.shape[0] // batch_size)
    total = cfg.epochs * per_epoch
    batches = _batches(X.shape[0], batch_size, rng)
    log = TrainLog()
    out = Path(out_dir) if out_dir else None
    start = time.perf_counter()
    for it in range(total):
        for _ in range(cfg.d_steps_per_g):
            d_loss = discriminator_step(G, D, X[next(batches)], cfg, rng, opts.D, prior, it)
        g_loss, cyc_n, cyc_c = generator_encoder_step(G, E, D, cfg, rng, opts, prior, it)
        log.records.append({"iteration": it, "d_loss": d_loss, "g_loss": g_loss, "cycle_zn": cyc_n,
                            "cycle_zc": cyc_c, "wall_clock": time.perf_counter() - start})
        if progress_every and it % progress_every == 0:
            logger.info("iter %d/%d d=%.4f g=%.4f cyc_n=%.4f cyc_c=%.4f", it, total, d_loss, g_loss,
                        cyc_n, cyc_c)
        epoch_done = (it + 1) % per_epoch == 0
        if callback is not None and epoch_done:
            callback((it + 1) // per_epoch, G, E, D)
        if out is not None and epoch_done and cfg.checkpoint_every:
            epoch = (it + 1) // per_epoch
            if epoch % cfg.checkpoint_every == 0:
                write_checkpoint(out / f"checkpoint_epoch{epoch:05d}.npz", G, E, D, cfg)
    if out is not None:
        write_checkpoint(out / "checkpoint_final.npz", G, E, D, cfg)
    return G, E, D, log


def write_checkpoint(path: Path, G, E, D, cfg: TrainConfig) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    nets = {"G": G, "D": D}
    if E is not None:
        nets["E"] = E
    save_checkpoint(path, nets, cfg.to_dict())


def encode(E, X: np.ndarray, dn: int) -> tuple[np.ndarray, np.ndarray]:
    """Encoder output split into (z_n_hat, z_c_hat); cluster labels are argmax z_c_hat."""
    out = E.predict(X)
    return out[:, :dn], out[:, dn:]
