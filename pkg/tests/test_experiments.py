import numpy as np
import pytest

from clustergan.data import Dataset, SyntheticSpec, generate_synthetic
from clustergan.decode import DecodeConfig
from clustergan.experiments import (ExperimentPlan, GaussMixturePrior, NormalPrior, UniformPrior, decode_for_prior,
                                    export_interpolation, interpolation_grid, lemma_check, make_prior, run_k_sweep,
                                    run_plan, run_prior_comparison, select_run)
from clustergan.latent import LatentSpec, make_rng
from clustergan.networks import LinearGenerator, build_stack
from clustergan.training import TrainConfig, TrainingAborted

TINY = TrainConfig(epochs=1, hidden_width=16, batch_size=32)


@pytest.fixture(scope="module")
def small_synthetic():
    return generate_synthetic(SyntheticSpec(points_per_component=60, seed=2))


@pytest.fixture(scope="module")
def synthetic():
    return generate_synthetic(SyntheticSpec(seed=0))


def test_plan_validation(small_synthetic):
    with pytest.raises(ValueError, match="runs"):
        ExperimentPlan("p", small_synthetic, "kmeans_raw", runs=0)
    with pytest.raises(ValueError, match="unknown method"):
        ExperimentPlan("p", small_synthetic, "infogan")
    with pytest.raises(ValueError, match="labelled"):
        ExperimentPlan("p", Dataset(small_synthetic.X), "kmeans_raw")


def test_select_run_prefers_lowest_index_on_ties():
    assert select_run([0.5, 0.9, 0.9, 0.1]) == 1
    assert select_run([0.7]) == 0


def test_run_config_varies_seed_and_declared_key(small_synthetic):
    plan = ExperimentPlan("p", small_synthetic, "clustergan", TINY, runs=3, vary=("lr", [1e-4, 2e-4]))
    cfgs = [plan.run_config(r) for r in range(3)]
    assert [c.seed for c in cfgs] == [0, 1, 2]
    assert [c.lr for c in cfgs] == [1e-4, 2e-4, 1e-4]


def test_kmeans_raw_on_synthetic(synthetic):
    summary = run_plan(ExperimentPlan("raw", synthetic, "kmeans_raw", runs=1))
    assert summary.selected_run == 0
    assert summary.test_report.acc >= 0.95
    assert summary.test_report.contingency.sum() == 1500


def test_k_two_obeys_pigeonhole(synthetic):
    sweep = run_k_sweep(ExperimentPlan("raw", synthetic, "kmeans_raw"), [2])
    # two clusters can match at most two of four equal-size classes
    assert sweep[2].test_report.acc <= 0.5 + 0.05


def test_k_sweep_rejects_small_k(small_synthetic):
    with pytest.raises(ValueError):
        run_k_sweep(ExperimentPlan("raw", small_synthetic, "kmeans_raw"), [1])


@pytest.mark.parametrize("method", ["clustergan", "gan_bp", "gan_disc_phi"])
def test_methods_run_and_are_reproducible(method, small_synthetic):
    plan = ExperimentPlan("p", small_synthetic, method, TINY, DecodeConfig(tau=10), runs=2, eval_rows=20)
    a, b = run_plan(plan), run_plan(plan)
    assert a.as_dict() == b.as_dict()
    assert len(a.runs) == 2 and a.selected_run in (0, 1)
    for run in a.runs:
        assert set(run.reports) == {"train", "validation", "test"}
        assert run.reports["test"].contingency.sum() == 20


def test_linear_lemma_method_runs(small_synthetic):
    cfg = TrainConfig(epochs=1, hidden_width=16, batch_size=32, dn=100, k=4)
    plan = ExperimentPlan("lin", small_synthetic, "linear_lemma", cfg, DecodeConfig(tau=5), eval_rows=12)
    assert run_plan(plan).runs[0].nets["G"].A.shape == (100, 4)


def test_training_abort_names_the_run(small_synthetic):
    X = small_synthetic.X.copy()
    X[:, 0] = np.nan
    ds = Dataset(X, small_synthetic.y)
    with pytest.raises(TrainingAborted, match="bad run 0"):
        run_plan(ExperimentPlan("bad", ds, "clustergan", TINY))


def test_interpolation_endpoints_and_linearity():
    means = make_rng(0).uniform(-0.3, 0.3, (6, 3))
    G = LinearGenerator(means)
    spec = LatentSpec(6, 3)
    meta, X = interpolation_grid(G, spec, [(0, 2), (1, 0)], steps=5, seed=4)
    assert X.shape == (10, 6)
    np.testing.assert_array_equal(meta[:5, 3], np.linspace(0, 1, 5))
    zn = X[4] - means[:, 0]  # mu = 1 is the mode-a endpoint
    for row, (_, a, b, mu) in zip(X[:5], meta[:5]):
        np.testing.assert_allclose(row, zn + mu * means[:, int(a)] + (1 - mu) * means[:, int(b)], atol=1e-15)
    with pytest.raises(ValueError, match="steps"):
        interpolation_grid(G, spec, [(0, 1)], steps=1)
    with pytest.raises(ValueError, match="modes"):
        interpolation_grid(G, spec, [(0, 3)])


def test_interpolation_endpoints_match_generator_exactly():
    spec = LatentSpec(6, 4)
    G, _, _ = build_stack("synthetic", spec, 12, hidden_width=8, seed=3)
    meta, X = interpolation_grid(G, spec, [(1, 3)], steps=4, seed=9)
    from clustergan.latent import box_muller, derive_seed
    zn = spec.sigma * box_muller(make_rng(derive_seed(9, 0)), spec.dn)
    za = np.concatenate([zn, np.eye(4)[1]])[None]
    zb = np.concatenate([zn, np.eye(4)[3]])[None]
    np.testing.assert_array_equal(X[-1], G.predict(za)[0])
    np.testing.assert_array_equal(X[0], G.predict(zb)[0])


def test_export_interpolation_csv(tmp_path):
    G = LinearGenerator(np.eye(3))
    export_interpolation(G, LatentSpec(3, 3), [(0, 1)], steps=10, path=tmp_path / "i.csv")
    lines = (tmp_path / "i.csv").read_text().splitlines()
    assert lines[0] == "pair,mode_a,mode_b,mu,x_0,x_1,x_2"
    assert len(lines) == 11


def test_priors():
    spec = LatentSpec(6, 4)
    rng = make_rng(0)
    assert make_prior("normal", spec).sample(5, rng).shape == (5, 10)
    assert np.abs(make_prior("uniform", spec).sample(500, rng)).max() <= 1.0
    gm = make_prior("gauss_mixture", spec, seed=1)
    assert isinstance(gm, GaussMixturePrior) and gm.means.shape == (4, 10)
    assert np.abs(gm.means).max() <= 0.3
    dc = make_prior("discrete_continuous", spec).sample(5, rng)
    np.testing.assert_array_equal(dc[:, 6:].sum(axis=1), 1.0)
    assert make_prior("normal", spec, dim=3).dim == 3
    with pytest.raises(ValueError):
        make_prior("beta", spec)


def test_continuous_decoding_respects_prior_bounds():
    class Identity:
        output_dim = 3

        def forward(self, z, **kw):
            return z

        def predict(self, z):
            return z

    x = np.array([[5.0, -9.0, 0.2]])
    z = decode_for_prior(Identity(), x, UniformPrior(3), DecodeConfig(tau=300, lr=0.1))
    assert z.max() <= 1.0 and z.min() >= -1.0
    z = decode_for_prior(Identity(), x, NormalPrior(3), DecodeConfig(tau=300, lr=0.1))
    assert z.min() >= -6.0


def test_prior_comparison_runs(small_synthetic):
    res = run_prior_comparison(small_synthetic, TINY, DecodeConfig(tau=5), eval_rows=16)
    assert set(res) == {"uniform", "normal", "gauss_mixture", "discrete_continuous"}
    assert res["discrete_continuous"].z.shape == (16, 10)
    assert res["normal"].z.shape == (16, 10)


def test_lemma_check_with_exact_generator():
    res = lemma_check(n=600, eval_rows=200, tau=200, constructed=True)
    rep = res["linear_discrete_continuous"]
    assert (rep.acc, rep.nmi, rep.ari) == (1.0, 1.0, 1.0)
