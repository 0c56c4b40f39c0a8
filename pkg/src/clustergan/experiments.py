"""Desk-scale studies: method comparison with validation selection, K sweeps,
interpolation export, prior comparison and the linear-world check."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Dataset, split_indices
from .decode import DecodeConfig, decode_continuous, decode_dataset
from .latent import LatentCode, LatentSpec, box_muller, derive_seed, interpolate, make_rng
from .metrics import ClusterReport, _assign, clustering_metrics, kmeans
from .networks import Layer, LinearGenerator, MlpNetwork
from .training import DiscreteContinuousPrior, TrainConfig, TrainingAborted, TrainLog, encode, train

logger = logging.getLogger(__name__)

METHODS = ("clustergan", "gan_bp", "gan_disc_phi", "linear_lemma", "kmeans_raw")
SPLITS = ("train", "validation", "test")
PRIORS = ("uniform", "normal", "gauss_mixture", "discrete_continuous")


@dataclass
class ExperimentPlan:
    """One method on one dataset, repeated ``runs`` times.

    Run ``r`` trains with seed ``train.seed + r``. ``vary`` names one TrainConfig
    key plus a list of values cycled across runs. ``eval_rows`` caps how many
    rows of each split are decoded or clustered (decoding is the costly part).
    """
    name: str
    dataset: Dataset
    method: str
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    runs: int = 1
    k_override: int | None = None
    vary: tuple[str, list] | None = None
    eval_rows: int | None = None
    split_seed: int = 0

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError(f"runs must be >= 1, got {self.runs}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.dataset.y is None:
            raise ValueError("experiment plans need a labelled dataset")
        if self.k_override is not None and self.k_override < 2:
            raise ValueError(f"k must be >= 2, got {self.k_override}")
        if self.vary is not None and not self.vary[1]:
            raise ValueError("vary needs at least one value")

    @property
    def k(self) -> int:
        return self.k_override if self.k_override is not None else self.train.k

    def run_config(self, r: int) -> TrainConfig:
        cfg = replace(self.train, seed=self.train.seed + r, k=self.k)
        if self.vary is not None:
            key, values = self.vary
            cfg = TrainConfig.from_mapping({**cfg.to_dict(), key: values[r % len(values)]})
        return cfg


@dataclass
class RunResult:
    seed: int
    reports: dict[str, ClusterReport]
    log: TrainLog | None = None
    nets: dict = field(default_factory=dict)


@dataclass
class RunSummary:
    name: str
    method: str
    k: int
    runs: list[RunResult]
    selected_run: int

    @property
    def test_report(self) -> ClusterReport:
        return self.runs[self.selected_run].reports["test"]

    def as_dict(self) -> dict:
        def short(rep):
            return {"acc": rep.acc, "nmi": rep.nmi, "ari": rep.ari}
        return {"name": self.name, "method": self.method, "k": self.k, "selected_run": self.selected_run,
                "test": short(self.test_report),
                "runs": [{"seed": r.seed, **{s: short(rep) for s, rep in r.reports.items()}}
                         for r in self.runs]}


def select_run(val_accs) -> int:
    """Index of the best validation accuracy; ties go to the lowest index."""
    return int(np.argmax(np.asarray(val_accs, dtype=float)))


def _cap(idx: np.ndarray, cap: int | None, seed: int) -> np.ndarray:
    if cap is None or idx.size <= cap:
        return idx
    keep = make_rng(derive_seed(seed, 5)).choice(idx.size, cap, replace=False)
    return idx[np.sort(keep)]


def _cluster_features(feats: dict[str, np.ndarray], k: int, seed: int) -> dict[str, np.ndarray]:
    """K-means fit on the training features; other splits go to the nearest centroid."""
    _, centres, _ = kmeans(feats["train"], k, seed=seed)
    return {s: _assign(f, centres)[0] for s, f in feats.items()}


def _train_run(plan: ExperimentPlan, cfg: TrainConfig, X: np.ndarray, r: int, with_encoder: bool, nets=None):
    try:
        return train(X, cfg, nets=nets, with_encoder=with_encoder)
    except TrainingAborted as exc:
        raise TrainingAborted(f"{plan.name} run {r}: {exc}", exc.record) from exc


def _execute(plan: ExperimentPlan, r: int, split_idx: dict[str, np.ndarray]) -> RunResult:
    cfg = plan.run_config(r)
    X, y = plan.dataset.X, plan.dataset.y
    eval_idx = {s: _cap(i, plan.eval_rows, derive_seed(plan.split_seed, r, j))
                for j, (s, i) in enumerate(split_idx.items())}
    Xtr = X[split_idx["train"]]
    log, nets = None, {}
    if plan.method == "kmeans_raw":
        labels = _cluster_features({s: X[i] for s, i in eval_idx.items()}, plan.k, cfg.seed)
    elif plan.method == "clustergan":
        G, E, D, log = _train_run(plan, cfg, Xtr, r, with_encoder=True)
        nets = {"G": G, "E": E, "D": D}
        labels = {s: encode(E, X[i], cfg.dn)[1].argmax(axis=1) for s, i in eval_idx.items()}
    elif plan.method == "gan_disc_phi":
        G, _, D, log = _train_run(plan, cfg, Xtr, r, with_encoder=False)
        nets = {"G": G, "D": D}
        labels = _cluster_features({s: D.features(X[i]) for s, i in eval_idx.items()}, plan.k, cfg.seed)
    else:  # gan_bp, linear_lemma: decode every row, then k-means over z
        pre = None
        if plan.method == "linear_lemma":
            G0 = LinearGenerator(0.01 * box_muller(make_rng(derive_seed(cfg.seed, 300)), (X.shape[1], cfg.k)))
            pre = (G0, None, lemma_critic(X.shape[1], cfg))
        G, _, D, log = _train_run(plan, cfg, Xtr, r, with_encoder=False, nets=pre)
        nets = {"G": G, "D": D}
        feats = {s: decode_dataset(G, X[i], cfg.latent, plan.decode, seed=derive_seed(cfg.seed, 400 + j)).z()
                 for j, (s, i) in enumerate(eval_idx.items())}
        labels = _cluster_features(feats, plan.k, cfg.seed)
    reports = {s: clustering_metrics(labels[s], y[eval_idx[s]]) for s in SPLITS}
    logger.info("%s run %d (seed %d): val acc %.4f test acc %.4f", plan.name, r, cfg.seed,
                reports["validation"].acc, reports["test"].acc)
    return RunResult(cfg.seed, reports, log, nets)


def run_plan(plan: ExperimentPlan) -> RunSummary:
    """Split 70/15/15, execute the method ``plan.runs`` times, select by validation ACC."""
    parts = split_indices(len(plan.dataset), plan.split_seed)
    split_idx = dict(zip(SPLITS, parts))
    runs = [_execute(plan, r, split_idx) for r in range(plan.runs)]
    best = select_run([run.reports["validation"].acc for run in runs])
    return RunSummary(plan.name, plan.method, plan.k, runs, best)


def run_k_sweep(plan: ExperimentPlan, ks) -> dict[int, RunSummary]:
    out = {}
    for k in ks:
        if k < 2:
            raise ValueError(f"each K must be >= 2, got {k}")
        out[int(k)] = run_plan(replace(plan, name=f"{plan.name}_k{k}", k_override=int(k)))
    return out


# -------------------------------------------------------------- interpolation

def interpolation_grid(G, spec: LatentSpec, pairs, steps: int = 10, seed: int = 0):
    """Rows G(mu a + (1 - mu) b) where a, b share z_n and differ in the one-hot part.

    Returns ``(meta, X)``: meta rows are (pair index, mode_a, mode_b, mu).
    """
    if steps < 2:
        raise ValueError(f"steps must be >= 2, got {steps}")
    meta, codes = [], []
    mus = np.linspace(0.0, 1.0, steps)
    for p, (ma, mb) in enumerate(pairs):
        if not (0 <= ma < spec.k and 0 <= mb < spec.k):
            raise ValueError(f"modes must lie in [0, {spec.k}), got ({ma}, {mb})")
        zn = spec.sigma * box_muller(make_rng(derive_seed(seed, p)), spec.dn)
        a = LatentCode(zn, np.eye(spec.k)[ma], int(ma))
        b = LatentCode(zn.copy(), np.eye(spec.k)[mb], int(mb))
        for mu in mus:
            codes.append(interpolate(a, b, float(mu)).vector())
            meta.append((p, int(ma), int(mb), float(mu)))
    Z = np.array(codes).reshape(len(codes), spec.dim)
    return np.array(meta, dtype=float).reshape(-1, 4), G.predict(Z)


def export_interpolation(G, spec: LatentSpec, pairs, steps: int = 10, path: str | Path | None = None,
                         seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    meta, X = interpolation_grid(G, spec, pairs, steps, seed)
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pair", "mode_a", "mode_b", "mu"] + [f"x_{j}" for j in range(X.shape[1])])
            for m, row in zip(meta, X):
                w.writerow([int(m[0]), int(m[1]), int(m[2]), repr(m[3])] + [repr(float(v)) for v in row])
    return meta, X


# ------------------------------------------------------------ prior studies

class NormalPrior:
    def __init__(self, dim: int, scale: float = 1.0):
        self.dim, self.scale = dim, scale

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.scale * box_muller(rng, (n, self.dim))


class UniformPrior:
    def __init__(self, dim: int, half_width: float = 1.0):
        self.dim, self.half_width = dim, half_width
        self.scale = half_width / np.sqrt(3.0)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-self.half_width, self.half_width, (n, self.dim))


class GaussMixturePrior:
    """K isotropic components, means drawn from U(-0.3, 0.3)^dim like the linear world."""

    def __init__(self, dim: int, k: int, sigma: float = 0.10, seed: int = 0):
        self.dim, self.k, self.scale = dim, k, sigma
        self.means = make_rng(derive_seed(seed, 600)).uniform(-0.3, 0.3, (k, dim))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.integers(0, self.k, n)
        return self.means[comp] + self.scale * box_muller(rng, (n, self.dim))


def make_prior(name: str, spec: LatentSpec, seed: int = 0, dim: int | None = None):
    """Continuous priors default to the width of the discrete-continuous code."""
    dim = dim or spec.dim
    if name == "discrete_continuous":
        return DiscreteContinuousPrior(spec)
    if name == "normal":
        return NormalPrior(dim)
    if name == "uniform":
        return UniformPrior(dim)
    if name == "gauss_mixture":
        return GaussMixturePrior(dim, spec.k, seed=seed)
    raise ValueError(f"unknown prior {name!r}; choose from {PRIORS}")


def lemma_critic(data_dim: int, cfg: TrainConfig) -> MlpNetwork:
    layers = []
    for _ in range(cfg.depth):
        layers += [Layer("linear", cfg.hidden_width), Layer("leaky_relu", alpha=cfg.leak)]
    return MlpNetwork(data_dim, layers + [Layer("linear", 1)], seed=derive_seed(cfg.seed, 102), name="D",
                      double_backprop=True)


def plain_generator(in_dim: int, data_dim: int, cfg: TrainConfig, output: str) -> MlpNetwork:
    layers = []
    for _ in range(cfg.depth):
        layers += [Layer("linear", cfg.hidden_width), Layer("leaky_relu", alpha=cfg.leak)]
    layers.append(Layer("linear", data_dim))
    if output == "sigmoid":
        layers.append(Layer("sigmoid"))
    return MlpNetwork(in_dim, layers, seed=derive_seed(cfg.seed, 101), name="G")


def decode_for_prior(G, X: np.ndarray, prior, cfg: DecodeConfig, restarts: int = 1, seed: int = 0
                     ) -> np.ndarray:
    """Per-mode restart decoding for the discrete-continuous prior; random-restart backprop otherwise.

    Continuous priors are clipped at six prior scales and their regulariser is
    rescaled so that it matches the z_n term relative to its own variance.
    """
    if isinstance(prior, DiscreteContinuousPrior):
        return decode_dataset(G, X, prior.spec, cfg, seed=seed).z()
    if isinstance(prior, UniformPrior):
        lo, hi, lam = -prior.half_width, prior.half_width, 0.0
    elif isinstance(prior, GaussMixturePrior):
        reach = np.abs(prior.means).max() + 6 * prior.scale
        lo, hi, lam = -reach, reach, 0.0
    else:
        lo, hi = -6 * prior.scale, 6 * prior.scale
        lam = cfg.lam * (0.10 / prior.scale) ** 2
    c = replace(cfg, clip_lo=lo, clip_hi=hi, lam=lam)
    z, _ = decode_continuous(G, X, prior.dim, c, init_scale=prior.scale, restarts=restarts, seed=seed)
    return z


@dataclass
class PriorResult:
    prior: str
    report: ClusterReport
    z: np.ndarray
    labels: np.ndarray
    log: TrainLog


def run_prior_study(dataset: Dataset, prior_name: str, cfg: TrainConfig, decode_cfg: DecodeConfig,
                    generator: str = "mlp", output: str = "sigmoid", restarts: int = 1,
                    eval_rows: int | None = 500, out_dir: str | Path | None = None,
                    prior_dim: int | None = None) -> PriorResult:
    """Train a plain GAN (no encoder) under one prior, decode, k-means the latents."""
    spec = cfg.latent
    prior = make_prior(prior_name, spec, seed=cfg.seed, dim=prior_dim)
    if generator == "linear":
        if prior_name != "discrete_continuous":
            raise ValueError("the linear generator is only defined for the discrete-continuous prior")
        if cfg.dn != dataset.dim:
            raise ValueError(f"linear generator needs dn == data dim ({dataset.dim}), got {cfg.dn}")
        G = LinearGenerator(0.01 * box_muller(make_rng(derive_seed(cfg.seed, 300)), (dataset.dim, cfg.k)))
    else:
        G = plain_generator(prior.dim, dataset.dim, cfg, output)
    D = lemma_critic(dataset.dim, cfg)
    try:
        G, _, D, log = train(dataset.X, cfg, nets=(G, None, D), prior=prior, with_encoder=False,
                             out_dir=out_dir)
    except TrainingAborted as exc:
        raise TrainingAborted(f"prior {prior_name}: {exc}", exc.record) from exc
    idx = _cap(np.arange(len(dataset)), eval_rows, cfg.seed)
    z = decode_for_prior(G, dataset.X[idx], prior, decode_cfg, restarts=restarts, seed=derive_seed(cfg.seed, 500))
    labels, _, _ = kmeans(z, spec.k, seed=cfg.seed)
    report = clustering_metrics(labels, dataset.y[idx])
    logger.info("prior %s: acc %.4f nmi %.4f ari %.4f", prior_name, report.acc, report.nmi, report.ari)
    return PriorResult(prior_name, report, z, labels, log)


def run_prior_comparison(dataset: Dataset, cfg: TrainConfig, decode_cfg: DecodeConfig, priors=PRIORS,
                         output: str = "sigmoid", restarts: int = 1, eval_rows: int | None = 500
                         ) -> dict[str, PriorResult]:
    if dataset.y is None:
        raise ValueError("prior comparison needs a labelled dataset")
    return {p: run_prior_study(dataset, p, cfg, decode_cfg, output=output, restarts=restarts,
                               eval_rows=eval_rows) for p in priors}


# --------------------------------------------------------------- linear world

def lemma_train_config(seed: int = 0, epochs: int = 80, **kw) -> TrainConfig:
    """Training settings for the 10-Gaussian world: z_n matches the data width and
    the noise level sigma = 0.12."""
    return TrainConfig(**{"dn": 100, "k": 10, "sigma": 0.12, "epochs": epochs, "seed": seed, **kw})


def lemma_check(n: int = 3000, seed: int = 0, epochs: int = 80, eval_rows: int = 500, tau: int = 300,
                constructed: bool = False, nonlinear: bool = False, nonlinear_epochs: int | None = None,
                restarts: int = 10) -> dict[str, ClusterReport]:
    """Linear generator with the discrete-continuous prior on the 10-Gaussian world.

    ``constructed`` skips training and uses the exact generator whose columns are
    the component means. ``nonlinear`` adds the contrast run: an MLP generator
    with a standard normal 10-d prior, decoded with ``restarts`` random starts.
    """
    from .data import generate_lemma_world
    ds, means = generate_lemma_world(n=n, seed=seed, return_means=True)
    dcfg = DecodeConfig(tau=tau)
    out = {}
    cfg = lemma_train_config(seed=seed, epochs=epochs)
    if constructed:
        G = LinearGenerator(means.T)
        idx = _cap(np.arange(n), eval_rows, seed)
        z = decode_dataset(G, ds.X[idx], cfg.latent, dcfg, seed=seed).z()
        labels, _, _ = kmeans(z, cfg.k, seed=seed)
        out["linear_discrete_continuous"] = clustering_metrics(labels, ds.y[idx])
    else:
        out["linear_discrete_continuous"] = run_prior_study(
            ds, "discrete_continuous", cfg, dcfg, generator="linear", eval_rows=eval_rows).report
    if nonlinear:
        ncfg = lemma_train_config(seed=seed, epochs=nonlinear_epochs or epochs)
        out["nonlinear_normal"] = run_prior_study(ds, "normal", ncfg, dcfg, output="linear", restarts=restarts,
                                                  eval_rows=eval_rows, prior_dim=10).report
    return out
