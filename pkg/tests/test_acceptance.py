"""Acceptance suite: one or more checks per criterion, summarised by conftest.

Shared fits are session fixtures so each expensive run happens once.
"""

import subprocess
import sys
import time

import numpy as np
import pytest
from scipy.integrate import trapezoid

from icnlm import diagnostics, predictive
from icnlm.copula_model import LogPosterior, PriorSpec, conditional_beta_posterior
from icnlm.data_io import SyntheticSpec, generate_synthetic, generate_well_specified
from icnlm.hmc import HmcSettings, sample
from icnlm.marginal import fit_kde
from icnlm.model import ViSettings, diagnose, fit_model

pytestmark = pytest.mark.slow

RIDGE = PriorSpec.ridge()
HORSESHOE = PriorSpec.horseshoe()
PRIORS = {"ridge": RIDGE, "horseshoe": HORSESHOE}
N_TRAIN = N_VALID = 2000
P = 10


def criterion(number, title):
    return pytest.mark.criterion(number, title)


@pytest.fixture(scope="session")
def splits():
    # identity basis; the first seed whose realised pseudo responses look N(0, 1)
    out = {}
    for name, spec in PRIORS.items():
        data, truth, seed = generate_well_specified(
            SyntheticSpec(n=N_TRAIN + N_VALID, p=P, prior=spec, basis_kind="identity", seed=0))
        out[name] = (data.subset(np.arange(N_TRAIN)), data.subset(np.arange(N_TRAIN, N_TRAIN + N_VALID)), seed)
    return out


@pytest.fixture(scope="session")
def fits(splits):
    # (prior, method) -> FittedModel
    out = {}
    for name, spec in PRIORS.items():
        train = splits[name][0]
        out[name, "vi"] = fit_model(train, spec, "vi", ViSettings(k=3, M=50, seed=1)).model
        out[name, "hmc"] = fit_model(train, spec, "hmc", HmcSettings(seed=1)).model
    return out


@pytest.fixture(scope="session")
def reports(fits, splits):
    return {key: diagnose(model, splits[key[0]][1]) for key, model in fits.items()}


@criterion(1, "conjugate-oracle posterior (HMC, ridge, frozen hyperparameters)")
def test_conjugate_oracle(record_property):
    data, _ = generate_synthetic(SyntheticSpec(n=500, p=P, prior=RIDGE, basis_kind="identity", seed=0))
    z = fit_kde(data.responses).to_pseudo(data.responses)
    mean, cov = conditional_beta_posterior(z, data.basis, RIDGE, [0.0])
    start = time.perf_counter()
    draws = sample(z, data.basis, RIDGE, HmcSettings(seed=0), fixed_hyper=[0.0])
    elapsed = time.perf_counter() - start
    z_scores = np.abs(draws.mean() - mean) / draws.mcse()
    sd_rel = np.abs(draws.sd() / np.sqrt(np.diag(cov)) - 1)
    record_property("measured", f"max |mean err|/MCSE {z_scores.max():.2f}, max SD rel err {sd_rel.max():.3f}, "
                                f"{elapsed:.0f}s")
    assert np.all(z_scores <= 3)
    assert np.all(sd_rel <= 0.10)
    assert elapsed <= 120


@criterion(2, "VI-vs-HMC agreement of posterior means")
@pytest.mark.parametrize("prior", ["ridge", "horseshoe"])
def test_vi_hmc_agreement(fits, prior, record_property):
    vi_mean = fits[prior, "vi"].fit.mean()
    hmc_fit = fits[prior, "hmc"].fit
    hmc_mean = hmc_fit.mean()
    corr = np.corrcoef(vi_mean, hmc_mean)[0, 1]
    dev = np.abs(vi_mean - hmc_mean)
    sd_ratio = fits[prior, "vi"].fit.sd() / hmc_fit.sd()
    record_property("measured", f"{prior}: corr {corr:.5f}, max dev {dev.max():.3f} "
                                f"(beta only {dev[:P].max():.3f}), VI/HMC SD ratio "
                                f"{sd_ratio.min():.2f}-{sd_ratio.max():.2f}, HMC min ESS {hmc_fit.ess.min():.0f}")
    assert corr >= 0.99
    assert dev.max() <= 0.1


@criterion(3, "in-sample marginal calibration at n = 1000")
@pytest.mark.parametrize("prior", ["ridge", "horseshoe"])
def test_in_sample_marginal(splits, prior, record_property):
    train = splits[prior][0].subset(np.arange(1000))
    model = fit_model(train, PRIORS[prior], "vi", ViSettings(seed=2)).model
    gap = diagnostics.sup_gap(diagnose(model, train).marginal_curve)
    record_property("measured", f"{prior}: sup gap {gap:.4f}")
    assert gap <= 0.05


@criterion(4, "probabilistic calibration (validation KS <= 1.36/sqrt(n))")
@pytest.mark.parametrize("method", ["vi", "hmc"])
@pytest.mark.parametrize("prior", ["ridge", "horseshoe"])
def test_pit_ks(reports, prior, method, record_property):
    s = reports[prior, method].summary()
    record_property("measured", f"{prior}/{method}: KS {s['ks_statistic']:.4f} vs {s['ks_critical_5pct']:.4f}")
    assert s["n"] == N_VALID
    assert s["ks_statistic"] <= 1.36 / np.sqrt(N_VALID)


@criterion(5, "90% interval coverage within 3 points")
@pytest.mark.parametrize("method", ["vi", "hmc"])
@pytest.mark.parametrize("prior", ["ridge", "horseshoe"])
def test_coverage(fits, splits, prior, method, record_property):
    valid = splits[prior][1]
    pp = fits[prior, method].posterior_at(valid.basis)
    lower, upper = predictive.interval(pp, 0.1)
    observed = diagnostics.coverage(lower, upper, valid.responses, [0.9])["observed"][0]
    record_property("measured", f"{prior}/{method}: {observed:.4f}")
    assert abs(observed - 0.9) <= 0.03


@criterion(6, "gradient matches central differences")
@pytest.mark.parametrize("prior", ["ridge", "horseshoe"])
def test_gradient(prior, record_property):
    spec = PRIORS[prior]
    data, _ = generate_synthetic(SyntheticSpec(n=500, p=P, prior=spec, basis_kind="identity", seed=0))
    target = LogPosterior(fit_kde(data.responses).to_pseudo(data.responses), data.basis, spec)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        theta = rng.standard_normal(target.dim)
        grad = target.logp_and_grad(theta)[1]
        fd = np.empty_like(theta)
        for j in range(theta.size):
            e = np.zeros_like(theta)
            e[j] = 1e-5 * max(1.0, abs(theta[j]))
            fd[j] = (target.logp(theta + e) - target.logp(theta - e)) / (2 * e[j])
        worst = max(worst, np.linalg.norm(grad - fd) / np.linalg.norm(grad))
    record_property("measured", f"{prior}: worst relative error {worst:.1e}")
    assert worst <= 1e-5


@criterion(7, "predictive densities integrate to one")
@pytest.mark.parametrize("key", [("ridge", "hmc"), ("horseshoe", "vi")], ids=["ridge-hmc", "horseshoe-vi"])
def test_normalization(fits, splits, key, record_property):
    model = fits[key]
    valid = splits[key[0]][1]
    rows = np.random.default_rng(3).choice(valid.n, 50, replace=False)
    pp = model.posterior_at(valid.basis[rows])
    grid = predictive.density_grid(model.margin)
    integrals = trapezoid(predictive.density(pp, grid), grid, axis=-1)
    err = np.abs(integrals - 1)
    record_property("measured", f"{'/'.join(key)}: max |integral - 1| {err.max():.1e}")
    assert integrals.shape == (50,)
    assert np.all(err <= 1e-3)


@criterion(8, "ELBO rises, plateaus and converges within max_iter")
@pytest.mark.parametrize("prior", ["ridge", "horseshoe"])
def test_elbo_behaviour(fits, prior, record_property):
    fit = fits[prior, "vi"].fit
    trace = fit.elbo_trace
    smooth = np.convolve(trace, np.ones(100) / 100, mode="valid")
    start = int(0.1 * trace.size)
    tail = smooth[start:]
    floor = 2 * np.std(smooth[-max(2, int(0.1 * smooth.size)):], ddof=1)
    drawdown = float(np.max(np.maximum.accumulate(tail) - tail))
    record_property("measured", f"{prior}: {fit.iterations_run} iterations, converged={fit.converged}, "
                                f"drawdown {drawdown:.3f} vs floor {floor:.3f}")
    assert fit.converged
    assert drawdown <= floor


@criterion(9, "point-metric fixtures")
def test_metrics(record_property):
    m = diagnostics.point_metrics([0.0, 1.0, 5.0], [0.0, 1.0, 2.0])
    assert (m.mae, m.mse, m.accuracy_I, m.accuracy_II) == (1.0, 3.0, 1.0, 2 / 3)
    m = diagnostics.point_metrics([1.0, 5.0, 7.0], [0.0, 0.0, 0.0])
    assert (m.accuracy_I, m.accuracy_II) == (2 / 3, 1 / 3)
    assert diagnostics.point_metrics([6.0], [0.0]).accuracy_I == 0.0
    assert diagnostics.point_metrics([2.0], [0.0]).accuracy_II == 1.0
    record_property("measured", "exact")


def run_pipeline(root, method):
    def cli(*args):
        proc = subprocess.run([sys.executable, "-m", "icnlm.cli", *args], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        return proc.stdout

    data = root / "data"
    cli("simulate", "--n", "400", "--n-valid", "200", "--p", "5", "--prior", "horseshoe",
        "--margin", "skewed_mixture", "--seed", "7", "--out", str(data))
    fit_args = ["--max-iter", "2000"] if method == "vi" else ["--burnin", "200", "--keep", "300", "--leapfrog", "10"]
    cli("fit", "--features", str(data / "features.csv"), "--responses", str(data / "responses.csv"),
        "--prior", "horseshoe", "--method", method, "--seed", "11", "--out", str(root / "model.icnlm"), *fit_args)
    cli("predict", "--model", str(root / "model.icnlm"), "--features", str(data / "features_valid.csv"),
        "--alpha", "0.1", "--out", str(root / "pred.tsv"))
    cli("diagnose", "--model", str(root / "model.icnlm"), "--features", str(data / "features_valid.csv"),
        "--responses", str(data / "responses_valid.csv"), "--out", str(root / "report"))
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@criterion(10, "seeded pipelines are byte-identical")
@pytest.mark.parametrize("method", ["vi", "hmc"])
def test_determinism(tmp_path, method, record_property):
    a = run_pipeline(tmp_path / "a", method)
    b = run_pipeline(tmp_path / "b", method)
    record_property("measured", f"{method}: {len(a)} files compared")
    assert len(a) >= 12
    assert a.keys() == b.keys()
    for name in a:
        assert a[name] == b[name], f"{name} differs between runs"
