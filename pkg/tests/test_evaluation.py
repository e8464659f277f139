import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anigan.errors import NumericalError, ValidationError
from anigan.evaluation import (
    FeatureSet,
    FidReport,
    GaussianMoments,
    GeneratorSampler,
    ReplaySampler,
    export_features,
    fid_protocol,
    fit_moments,
    force_label,
    frechet_details,
    frechet_distance,
    label_precision,
    parse_condition,
    sample_grid,
    self_distance_trials,
    tile,
)
from anigan.nets import GeneratorSpec, build_generator
from anigan.synthetic import DiscColorJudge, DiscFeatureExtractor, disc_colors, make_disc_dataset
from anigan.tagspace import LabelPrior, default_taxonomy

TAX = default_taxonomy()
TINY_G = GeneratorSpec(noise_dim=8, cond_dim=34, base_channels=4, base_spatial=4, n_resblocks=1,
                       n_upscales=1, output_size=8)


def mp_frechet(mu_a, cov_a, mu_b, cov_b, dps=50):
    """Frechet distance with the non-symmetric product square root at high precision."""
    with mpmath.workdps(dps):
        A, B = mpmath.matrix(cov_a.tolist()), mpmath.matrix(cov_b.tolist())
        root = mpmath.sqrtm(A * B)
        diff = mpmath.matrix((mu_a - mu_b).tolist())
        tr = sum(A[i, i] + B[i, i] - 2 * root[i, i] for i in range(A.rows))
        return float(sum(d * d for d in diff) + mpmath.re(tr))


def random_moments(rng, d):
    x = rng.standard_normal((d + 5, d))
    return GaussianMoments(rng.standard_normal(d), x.T @ x / (d + 4))


class TestFitMoments:
    def test_two_points(self):
        m = fit_moments(np.array([[0.0], [2.0]]))
        assert m.mean.tolist() == [1.0] and m.covariance.tolist() == [[2.0]]

    def test_identical_points(self):
        m = fit_moments(np.ones((5, 3)))
        assert np.all(m.covariance == 0)

    def test_loop_oracle(self):
        x = np.random.default_rng(0).standard_normal((100, 5))
        mu = [sum(x[i, j] for i in range(100)) / 100 for j in range(5)]
        cov = [[sum((x[i, a] - mu[a]) * (x[i, b] - mu[b]) for i in range(100)) / 99 for b in range(5)]
               for a in range(5)]
        m = fit_moments(FeatureSet(x, "t"))
        np.testing.assert_allclose(m.mean, mu, atol=1e-10)
        np.testing.assert_allclose(m.covariance, cov, atol=1e-10)

    def test_too_few(self):
        with pytest.raises(ValidationError):
            fit_moments(np.zeros((1, 3)))

    def test_feature_set_rejects_nan(self):
        with pytest.raises(ValidationError):
            FeatureSet(np.array([[np.nan, 1.0]]), "t")

    def test_asymmetric_covariance_rejected(self):
        with pytest.raises(ValidationError):
            GaussianMoments(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))


class TestFrechet:
    def test_identity(self):
        m = random_moments(np.random.default_rng(0), 6)
        assert frechet_distance(m, m) == pytest.approx(0.0, abs=1e-6)

    def test_mean_shift(self):
        a = GaussianMoments([0.0], [[1.0]])
        b = GaussianMoments([2.0], [[1.0]])
        assert frechet_distance(a, b) == pytest.approx(4.0, abs=1e-9)

    def test_variance_change(self):
        a = GaussianMoments([0.0], [[1.0]])
        b = GaussianMoments([0.0], [[4.0]])
        assert frechet_distance(a, b) == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_extended_precision_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_moments(rng, 3), random_moments(rng, 3)
        expected = mp_frechet(a.mean, a.covariance, b.mean, b.covariance)
        assert frechet_distance(a, b) == pytest.approx(expected, abs=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2**31 - 1))
    def test_symmetric_and_nonnegative(self, d, seed):
        rng = np.random.default_rng(seed)
        a, b = random_moments(rng, d), random_moments(rng, d)
        ab, ba = frechet_distance(a, b), frechet_distance(b, a)
        assert ab >= 0
        assert ab == pytest.approx(ba, abs=1e-6 * max(1.0, ab))

    def test_rank_deficient_is_fine(self):
        x = np.random.default_rng(1).standard_normal((3, 10))  # rank-2 covariance in 10-D
        m = fit_moments(x)
        d = frechet_details(m, m)
        assert d.distance == pytest.approx(0.0, abs=1e-6)
        assert d.clipped <= 1e-3 * d.scale + 1e-12

    def test_indefinite_input_is_rejected(self):
        a = GaussianMoments(np.zeros(2), np.eye(2))
        b = GaussianMoments(np.zeros(2), np.diag([1.0, -0.5]))
        with pytest.raises(NumericalError, match="cond"):
            frechet_distance(a, b)

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            frechet_distance(GaussianMoments([0.0], [[1.0]]), GaussianMoments([0.0, 0.0], np.eye(2)))


@pytest.fixture(scope="module")
def discs():
    images, tags, _ = make_disc_dataset(400, size=16, seed=0)
    return images, tags


class TestFidProtocol:
    def test_replay_reports_five_trials(self, discs):
        report = fid_protocol(discs, ReplaySampler(*discs), DiscFeatureExtractor(), n=200, trials=5, seed=0)
        assert len(report.trials) == 5
        assert report.spread >= 0
        assert report.average == pytest.approx(np.mean(report.trials))
        assert report.extractor_id == "disc-pool4-palette-v1"

    def test_lowered_n_warns(self, discs, caplog):
        report = fid_protocol(discs, ReplaySampler(*discs), DiscFeatureExtractor(), n=10_000, trials=1)
        assert report.n == 400 and "lowering n" in caplog.text

    def test_failing_trial_is_isolated(self, discs):
        calls = []

        def flaky(images):
            calls.append(1)
            if len(calls) == 1:
                raise RuntimeError("extractor crashed")
            return DiscFeatureExtractor()(images)

        report = fid_protocol(discs, ReplaySampler(*discs), flaky, n=100, trials=3)
        assert len(report.trials) == 2

    def test_report_table(self):
        r = FidReport([3.0, 1.0, 2.0], "x", 10)
        assert (r.average, r.spread) == (2.0, 2.0)
        assert "MaxFID-MinFID" in r.table() and r.to_dict()["trials"] == [3.0, 1.0, 2.0]

    def test_self_distance_trials(self, discs):
        feats = DiscFeatureExtractor()(discs[0])
        vals = self_distance_trials(feats, 200, 4, seed=0)
        assert vals.shape == (4,) and np.all(vals >= 0)


class TestLabelPrecision:
    def test_replay_with_exact_judge_is_exact(self):
        images, tags, _ = make_disc_dataset(160, size=16, seed=1)
        prior = LabelPrior.from_tags(tags)
        report = label_precision(ReplaySampler(images, tags), DiscColorJudge(), per_label_samples=20,
                                 labels=disc_colors(), prior=prior)
        # the judge is exact on clean discs, so every replayed image carries its label
        assert all(v == 1.0 for v in report.precision.values())

    def test_untrained_generator_is_at_base_rate(self):
        G = build_generator(TINY_G, 0)
        judge = DiscColorJudge()
        z_rng = np.random.default_rng(7)
        base = judge.classify(GeneratorSampler(G)(np.zeros((200, 34)), z_rng))
        report = label_precision(GeneratorSampler(G), judge, per_label_samples=50, labels=disc_colors())
        for name, p in report.precision.items():
            rate = base.count(name) / len(base)
            # binomial standard error with n = 50, 4-sigma band
            assert abs(p - rate) <= 4 * np.sqrt(max(rate * (1 - rate), 1 / 50) / 50) + 0.02

    def test_values_in_unit_interval(self):
        report = label_precision(GeneratorSampler(build_generator(TINY_G, 0)), DiscColorJudge(), per_label_samples=3)
        assert set(report.precision) == set(TAX.names)
        assert all(0 <= v <= 1 for v in report.precision.values())
        assert "blonde hair" in report.table()

    def test_force_label_clears_group(self):
        tags = np.zeros((2, 34))
        tags[:, TAX.index("red hair")] = 1
        out = force_label(tags, "blonde hair")
        assert np.all(out[:, TAX.hair_index].sum(1) == 1) and np.all(out[:, TAX.index("blonde hair")] == 1)
        out = force_label(tags, "hat")
        assert np.all(out[:, TAX.index("red hair")] == 1) and np.all(out[:, TAX.index("hat")] == 1)


class TestGrids:
    G = build_generator(TINY_G, 0)

    def single(self, z, c):
        return GeneratorSampler(self.G, batch_size=1).images(z[None].astype(np.float32), c[None])[0]

    def test_fixed_noise_shares_z(self):
        grid = sample_grid(self.G, "fixed_noise_random_cond", n=2, seed=1)
        assert np.array_equal(grid.z[0], grid.z[1])
        assert grid.images.shape == (2, 8, 8, 3)

    def test_fixed_condition(self):
        grid = sample_grid(self.G, "fixed_cond_random_noise", n=3, condition="blonde hair, smile, red eyes")
        assert np.all(grid.conditions == parse_condition("blonde hair,smile,red eyes").values)

    def test_invalid_condition_lists_names(self):
        with pytest.raises(ValidationError, match="valid names"):
            sample_grid(self.G, "fixed_cond_random_noise", condition="blonde hair,purple skin")

    def test_interpolation_endpoints_exact(self):
        a = (np.random.default_rng(0).standard_normal(8), TAX.encode(["blonde hair", "blue eyes"]))
        b = (np.random.default_rng(1).standard_normal(8), TAX.encode(["red hair", "green eyes", "hat"]))
        grid = sample_grid(self.G, "interpolation", endpoints=(a, b), t_values=[0, 0.5, 1])
        assert np.array_equal(grid.images[0], self.single(a[0], a[1].values))
        assert np.array_equal(grid.images[2], self.single(b[0], b[1].values))
        assert np.allclose(grid.conditions[1], 0.5 * (a[1].values + b[1].values))

    def test_interpolation_toggles(self):
        grid = sample_grid(self.G, "interpolation", n=3, interpolate_noise=False, seed=2)
        assert np.array_equal(grid.z[0], grid.z[2])
        grid = sample_grid(self.G, "interpolation", n=3, interpolate_condition=False, seed=2)
        assert np.array_equal(grid.conditions[0], grid.conditions[2])

    def test_deterministic(self):
        a = sample_grid(self.G, "fixed_noise_random_cond", n=4, seed=3)
        b = sample_grid(self.G, "fixed_noise_random_cond", n=4, seed=3)
        assert np.array_equal(a.images, b.images)

    def test_unknown_mode(self):
        with pytest.raises(ValidationError):
            sample_grid(self.G, "mosaic")

    def test_tile(self):
        sheet = tile(np.zeros((3, 4, 4, 3), np.uint8), ncols=2, pad=1)
        assert sheet.shape == (11, 11, 3)

    def test_figure_condition_set_is_valid(self):
        vec = parse_condition("blonde hair,twintails,blush,smile,ribbon,red eyes")
        assert vec.is_hard() and len(vec.active_names()) == 6


class TestExportFeatures:
    def setup_method(self):
        images, tags, _ = make_disc_dataset(30, size=16, seed=2)
        self.real = (images, tags)

    def test_zero_samples_skip_projector(self):
        def projector(_):
            raise AssertionError("projector must not be called")

        feats, coords = export_features(self.real, DiscFeatureExtractor(), 0, projector=projector)
        assert len(feats) == 0 and coords is None

    def test_identity_projector(self, tmp_path):
        feats, coords = export_features(self.real, DiscFeatureExtractor(), 20, projector=lambda v: v[:, :2],
                                        out_path=tmp_path / "f.npz")
        assert np.array_equal(coords, feats.vectors[:, :2])
        saved = np.load(tmp_path / "f.npz")
        assert np.array_equal(saved["vectors"], feats.vectors) and np.array_equal(saved["coords"], coords)

    def test_bad_projector_shape(self):
        with pytest.raises(ValidationError):
            export_features(self.real, DiscFeatureExtractor(), 5, projector=lambda v: v[:, :3])
