"""Text ingestion, synthetic generation and the model container."""

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp
from scipy import stats

from icnlm.copula_model import PriorSpec
from icnlm.data_io import (
    AnalyticMargin,
    Dataset,
    SyntheticSpec,
    generate_synthetic,
    generate_well_specified,
    load_dataset,
    load_features,
    load_fit,
    read_container,
    save_fit,
    save_truth,
    write_container,
    write_features,
    write_responses,
)
from icnlm.errors import (
    ChecksumMismatch,
    NonFiniteValue,
    ParseError,
    ShapeError,
    SpecMismatch,
    ValidationError,
    VersionMismatch,
    ZeroColumn,
)
from icnlm.hmc import PosteriorDraws
from icnlm.marginal import fit_kde
from icnlm.predictive import FittedModel
from icnlm.vi import VariationalFit, VariationalParams

RIDGE = PriorSpec.ridge()
HORSESHOE = PriorSpec.horseshoe()


def write(path, text):
    path.write_text(text)
    return path


class TestIngestion:
    def test_small_dataset(self, tmp_path):
        f = write(tmp_path / "x.csv", "a,b\n1,2\n3,4\n5,6\n")
        r = write(tmp_path / "y.csv", "y\n1\n2\n3\n")
        data = load_dataset(f, r)
        assert data.n == 3 and data.p == 2 and data.ids is None
        np.testing.assert_array_equal(data.basis, [[1, 2], [3, 4], [5, 6]])

    def test_ids(self, tmp_path):
        f = write(tmp_path / "x.csv", "id,a\nr1,1\nr2,2\n")
        basis, ids = load_features(f)
        assert ids == ["r1", "r2"] and basis.shape == (2, 1)

    def test_row_count_mismatch(self, tmp_path):
        f = write(tmp_path / "x.csv", "a\n" + "1\n" * 5)
        r = write(tmp_path / "y.csv", "y\n" + "1\n" * 4)
        with pytest.raises(ShapeError):
            load_dataset(f, r)

    def test_nan_location(self, tmp_path):
        f = write(tmp_path / "x.csv", "a,b\n1,2\n3,NaN\n")
        with pytest.raises(NonFiniteValue) as err:
            load_features(f)
        assert err.value.line == 3 and err.value.column == 2

    def test_parse_error_location(self, tmp_path):
        f = write(tmp_path / "x.csv", "id,a,b\nr1,1,2\nr2,oops,4\n")
        with pytest.raises(ParseError) as err:
            load_features(f)
        assert err.value.line == 3 and err.value.column == 2
        assert "oops" in str(err.value)

    def test_ragged_row(self, tmp_path):
        f = write(tmp_path / "x.csv", "a,b\n1,2\n3\n")
        with pytest.raises(ParseError) as err:
            load_features(f)
        assert err.value.line == 3

    def test_zero_column(self, tmp_path):
        f = write(tmp_path / "x.csv", "a,b\n1,0\n2,0\n")
        with pytest.raises(ZeroColumn):
            load_features(f)

    def test_empty_files(self, tmp_path):
        with pytest.raises(ParseError):
            load_features(write(tmp_path / "x.csv", ""))
        with pytest.raises(ShapeError):
            load_features(write(tmp_path / "x2.csv", "a\n"))

    def test_response_errors(self, tmp_path):
        f = write(tmp_path / "x.csv", "a\n1\n2\n")
        with pytest.raises(ParseError) as err:
            load_dataset(f, write(tmp_path / "y.csv", "y\n1\n2,3\n"))
        assert err.value.line == 3
        with pytest.raises(NonFiniteValue):
            load_dataset(f, write(tmp_path / "y2.csv", "y\n1\ninf\n"))

    def test_text_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        basis, y = rng.standard_normal((7, 3)), rng.standard_normal(7)
        write_features(tmp_path / "x.csv", basis, ids=[f"q{i}" for i in range(7)])
        write_responses(tmp_path / "y.csv", y)
        data = load_dataset(tmp_path / "x.csv", tmp_path / "y.csv")
        np.testing.assert_array_equal(data.basis, basis)
        np.testing.assert_array_equal(data.responses, y)
        assert data.ids[3] == "q3"

    def test_dataset_validation(self):
        with pytest.raises(ShapeError):
            Dataset(np.ones((3, 2)), np.zeros(2))
        with pytest.raises(NonFiniteValue):
            Dataset(np.ones((2, 1)), [0.0, np.nan])


class TestSynthetic:
    def test_null_model_iid_margin(self):
        # zero weights and vanishing prior variance give s_i = 1, so z_i ~ N(0, 1) i.i.d.
        spec = SyntheticSpec(n=4000, p=3, prior=RIDGE, margin_kind="skewed_mixture",
                             basis_kind="identity", seed=1, beta=(0.0, 0.0, 0.0), hyper=(-700.0,))
        data, truth = generate_synthetic(spec)
        margin = AnalyticMargin.named("skewed_mixture")
        assert stats.kstest(data.responses, margin.cdf).pvalue > 0.01

    def test_deterministic(self):
        spec = SyntheticSpec(n=50, p=4, prior=HORSESHOE, seed=9)
        a, ta = generate_synthetic(spec)
        b, tb = generate_synthetic(spec)
        np.testing.assert_array_equal(a.basis, b.basis)
        np.testing.assert_array_equal(a.responses, b.responses)
        np.testing.assert_array_equal(ta.z, tb.z)

    def test_pooled_standardization(self):
        # the N(0, 1) margin of z holds after integrating over beta, so pool many draws
        z = np.concatenate([
            generate_synthetic(SyntheticSpec(n=100, p=3, prior=RIDGE, basis_kind="identity", seed=s))[1].z
            for s in range(1000)
        ])
        assert z.size == 100_000
        assert abs(z.std() - 1) <= 0.02

    @pytest.mark.parametrize("prior", [RIDGE, HORSESHOE], ids=["ridge", "horseshoe"])
    def test_truncation(self, prior):
        for seed in range(20):
            _, truth = generate_synthetic(SyntheticSpec(n=100, p=5, prior=prior, seed=seed))
            assert truth.scaling.min() >= 0.05
            if prior is HORSESHOE:
                assert np.all(np.exp(truth.hyper / np.r_[2 * np.ones(5), 1.0]) <= 10)

    def test_true_pit_uniform(self):
        # each seed rejects at 5% with probability 0.05; more than 3 of 20 has probability 0.016
        rejections = 0
        for seed in range(20):
            _, truth = generate_synthetic(SyntheticSpec(n=5000, p=5, prior=RIDGE, margin_kind="bimodal_mixture",
                                                        basis_kind="polynomial", seed=seed))
            rejections += stats.kstest(truth.pit(), "uniform").statistic > 1.36 / np.sqrt(5000)
        assert rejections <= 3

    def test_margin_roundtrip(self):
        for kind in ("gaussian", "skewed_mixture", "bimodal_mixture"):
            m = AnalyticMargin.named(kind)
            u = np.array([1e-6, 0.1, 0.5, 0.93])
            np.testing.assert_allclose(m.cdf(m.ppf(u)), u, rtol=1e-9)

    @pytest.mark.parametrize("basis_kind", ["random_relu", "polynomial", "identity"])
    def test_basis_kinds(self, basis_kind):
        data, _ = generate_synthetic(SyntheticSpec(n=30, p=4, basis_kind=basis_kind, raw_dim=2, seed=0))
        assert data.basis.shape == (30, 4)
        assert np.all(np.any(data.basis != 0, axis=0))

    def test_pinned_truth(self):
        _, truth = generate_synthetic(SyntheticSpec(n=20, p=2, prior=RIDGE, beta=(1.0, -1.0), hyper=(0.5,)))
        np.testing.assert_array_equal(truth.beta, [1.0, -1.0])
        np.testing.assert_array_equal(truth.hyper, [0.5])

    def test_well_specified_scan(self):
        spec = SyntheticSpec(n=500, p=3, prior=RIDGE, basis_kind="identity", seed=0)
        data, truth, seed = generate_well_specified(spec)
        assert seed >= 0
        assert stats.kstest(truth.z, "norm").pvalue >= 0.05

    @pytest.mark.parametrize("kwargs", [{"n": 5}, {"p": 0}, {"margin_kind": "cauchy"}, {"basis_kind": "rbf"},
                                        {"beta": (1.0,)}, {"hyper": (0.0, 0.0)}])
    def test_spec_validation(self, kwargs):
        base = {"n": 20, "p": 2}
        with pytest.raises(ValidationError):
            SyntheticSpec(**{**base, **kwargs})

    def test_truth_json(self, tmp_path):
        _, truth = generate_synthetic(SyntheticSpec(n=12, p=2, seed=4))
        save_truth(tmp_path / "t.json", truth)
        doc = json.loads((tmp_path / "t.json").read_text())
        assert doc["prior"]["kind"] == "ridge" and len(doc["z"]) == 12


class TestContainer:
    def vi_fit(self, rng, dim=5, k=2):
        params = VariationalParams(rng.standard_normal(dim), np.tril(rng.standard_normal((dim, k))),
                                   rng.standard_normal(dim))
        return VariationalFit(params, rng.standard_normal(40), 40, True)

    def test_vi_roundtrip(self, tmp_path):
        fit = self.vi_fit(np.random.default_rng(0))
        save_fit(tmp_path / "f.icnlm", fit, spec=RIDGE)
        back = load_fit(tmp_path / "f.icnlm")
        for name in ("mu", "factor", "diag"):
            np.testing.assert_array_equal(getattr(back.params, name), getattr(fit.params, name))
        np.testing.assert_array_equal(back.elbo_trace, fit.elbo_trace)
        assert back.converged and back.iterations_run == 40

    def test_draws_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        draws = PosteriorDraws(rng.standard_normal((30, 3)), 0.71, rng.random(3) * 30, 0.0123, 4,
                               {"mean_accept_prob": 0.1 + 1e-17})
        save_fit(tmp_path / "d.icnlm", draws)
        back = load_fit(tmp_path / "d.icnlm")
        np.testing.assert_array_equal(back.draws, draws.draws)
        np.testing.assert_array_equal(back.ess, draws.ess)
        assert (back.accept_rate, back.step_size, back.n_divergent) == (0.71, 0.0123, 4)
        assert back.diagnostics == draws.diagnostics

    def test_margin_roundtrip(self, tmp_path):
        m = fit_kde(np.random.default_rng(2).gamma(2.0, size=50))
        save_fit(tmp_path / "m.icnlm", m)
        back = load_fit(tmp_path / "m.icnlm")
        np.testing.assert_array_equal(back.sample, m.sample)
        assert back.bandwidth == m.bandwidth

    def test_model_roundtrip(self, tmp_path):
        rng = np.random.default_rng(3)
        model = FittedModel(fit_kde(rng.standard_normal(40)), HORSESHOE, self.vi_fit(rng, dim=7), 3, seed=11)
        save_fit(tmp_path / "model.icnlm", model)
        back = load_fit(tmp_path / "model.icnlm", expect_prior=HORSESHOE)
        assert back.p == 3 and back.seed == 11 and back.spec.kind is HORSESHOE.kind
        x = rng.standard_normal((5, 3))
        np.testing.assert_array_equal(back.posterior_at(x).m_hat, model.posterior_at(x).m_hat)

    def test_fixed_hyper_roundtrip(self, tmp_path):
        rng = np.random.default_rng(4)
        model = FittedModel(fit_kde(rng.standard_normal(40)), RIDGE, self.vi_fit(rng, dim=3), 3,
                            fixed_hyper=np.array([0.25]))
        save_fit(tmp_path / "fh.icnlm", model)
        np.testing.assert_array_equal(load_fit(tmp_path / "fh.icnlm").fixed_hyper, [0.25])

    @settings(max_examples=30, deadline=None)
    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=2, max_side=6),
                      elements=st.floats(allow_nan=False, allow_infinity=False, width=64)))
    def test_bitwise_arrays(self, arr):
        import tempfile
        from pathlib import Path

        with tempfile.TemporaryDirectory() as td:
            path = Path(td) / "a.icnlm"
            write_container(path, "raw", {"note": "x"}, {"a": arr})
            kind, meta, arrays = read_container(path)
        assert kind == "raw" and meta == {"note": "x"}
        assert arrays["a"].shape == arr.shape
        assert arrays["a"].tobytes() == arr.tobytes()

    def test_truncated(self, tmp_path):
        path = tmp_path / "t.icnlm"
        save_fit(path, self.vi_fit(np.random.default_rng(5)))
        raw = path.read_bytes()
        for cut in (len(raw) // 2, len(raw) - 5):
            path.write_bytes(raw[:cut])
            with pytest.raises(ChecksumMismatch):
                load_fit(path)

    def test_tampered(self, tmp_path):
        path = tmp_path / "t.icnlm"
        save_fit(path, self.vi_fit(np.random.default_rng(6)))
        text = path.read_text().replace("kind variational_fit", "kind variational_fiT")
        path.write_text(text)
        with pytest.raises(ChecksumMismatch):
            load_fit(path)

    def test_version(self, tmp_path):
        path = tmp_path / "v.icnlm"
        write_container(path, "raw", {}, {})
        text = path.read_text().splitlines()
        body = "\n".join(["ICNLM-FORMAT 2"] + text[1:-1]) + "\n"
        import hashlib

        path.write_text(body + f"sha256 {hashlib.sha256(body.encode()).hexdigest()}\n")
        with pytest.raises(VersionMismatch):
            read_container(path)

    def test_spec_mismatch(self, tmp_path):
        path = tmp_path / "r.icnlm"
        save_fit(path, self.vi_fit(np.random.default_rng(7)), spec=RIDGE)
        with pytest.raises(SpecMismatch):
            load_fit(path, expect_prior=HORSESHOE)
        assert isinstance(load_fit(path, expect_prior=RIDGE), VariationalFit)

    def test_unknown_record(self, tmp_path):
        import hashlib

        body = "ICNLM-FORMAT 1\nkind raw\nbogus line\n"
        path = tmp_path / "u.icnlm"
        path.write_text(body + f"sha256 {hashlib.sha256(body.encode()).hexdigest()}\n")
        with pytest.raises(ParseError) as err:
            read_container(path)
        assert err.value.line == 3

    def test_unsupported_artifact(self, tmp_path):
        with pytest.raises(ValidationError):
            save_fit(tmp_path / "x.icnlm", {"not": "a fit"})
