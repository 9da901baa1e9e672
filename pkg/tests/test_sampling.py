import math

import numpy as np
import pytest
from scipy import stats

from switchssa.kernels import (
    Gamma,
    GridScheme,
    ImportanceScheme,
    MovementKernelSpec,
    UniformStepsScheme,
    VonMises,
)
from switchssa.landscape import Raster
from switchssa.sampling import (
    CaseControlData,
    SchemaError,
    fit_proposal,
    generate_choice_sets,
    read_case_control,
    uniform_scheme,
    write_case_control,
)
from switchssa.simulate import MarkovChainSpec, StateModel, Track, simulate_track

KERNEL = MovementKernelSpec("gamma", "vonmises")


def flat_raster(size=4000.0, value=0.0):
    return Raster(np.full((2, 2), value), x0=-size / 2, y0=-size / 2, cell_size=size / 2)


@pytest.fixture(scope="module")
def sim_track():
    raster = flat_raster()
    chain = MarkovChainSpec(tpm=np.eye(1))
    model = StateModel(Gamma(2.5, 0.29), VonMises(1.0), np.zeros(1))
    track, _ = simulate_track(chain, [model], raster, 3000, (0.0, 0.0), np.random.default_rng(100))
    return track, raster


class TestFitProposal:
    def test_recovers_single_state_kernel(self, sim_track):
        track, _ = sim_track
        scheme = fit_proposal(track, KERNEL)
        assert scheme.step_proposal.shape == pytest.approx(2.5, rel=0.05)
        assert scheme.step_proposal.rate == pytest.approx(0.29, rel=0.05)
        assert scheme.turn_proposal is None

    def test_turn_proposal_flag(self, sim_track):
        track, _ = sim_track
        scheme = fit_proposal(track, KERNEL, use_turn_proposal=True)
        assert isinstance(scheme.turn_proposal, VonMises)
        assert scheme.turn_proposal.concentration == pytest.approx(1.0, rel=0.15)

    def test_pooled_proposal_between_state_kernels(self):
        raster = flat_raster()
        chain = MarkovChainSpec(tpm=np.array([[0.9, 0.1], [0.1, 0.9]]))
        models = [
            StateModel(Gamma(1.2, 1.25), VonMises(0.3), np.zeros(1)),
            StateModel(Gamma(2.5, 0.29), VonMises(1.0), np.zeros(1)),
        ]
        track, _ = simulate_track(chain, models, raster, 2000, (0.0, 0.0), np.random.default_rng(5))
        scheme = fit_proposal(track, KERNEL)
        mean = scheme.step_proposal.mean()
        assert 1.2 / 1.25 < mean < 2.5 / 0.29


class TestGenerateChoiceSets:
    def test_case_is_observed_step(self, sim_track):
        track, raster = sim_track
        scheme = fit_proposal(track, KERNEL)
        data = generate_choice_sets(track, raster, scheme, 20, np.random.default_rng(0), KERNEL)
        geoms = track.steps()[0]
        assert data.n_strata == track.n_locations - 2
        assert data.n_alternatives == 21
        np.testing.assert_allclose(data.length[:, 0], geoms["lengths"][1:], atol=1e-12)
        np.testing.assert_allclose(data.angle[:, 0], geoms["angles"], atol=1e-12)
        # endpoints of the case alternative are the actual next locations
        np.testing.assert_allclose(data.x[:, 0], track.x[2:], atol=1e-12)

    def test_exactly_one_case_per_stratum(self, sim_track):
        track, raster = sim_track
        scheme = fit_proposal(track, KERNEL)
        data = generate_choice_sets(track, raster, scheme, 5, np.random.default_rng(1), KERNEL)
        assert data.move_cov.shape == (data.n_strata, 6, 3)

    def test_uniform_scheme_bounds(self, sim_track):
        track, raster = sim_track
        scheme = uniform_scheme(track, KERNEL)
        data = generate_choice_sets(track, raster, scheme, 10, np.random.default_rng(2), KERNEL)
        controls_l = data.length[:, 1:]
        controls_a = data.angle[:, 1:]
        assert np.all(controls_l > 0.0) and np.all(controls_l <= scheme.max_length)
        assert np.all(controls_a > -math.pi) and np.all(controls_a <= math.pi)
        # cap defaults to the 99.9% quantile of the fitted proposal
        proposal = fit_proposal(track, KERNEL).step_proposal
        assert scheme.max_length == pytest.approx(proposal.quantile(0.999), rel=1e-9)

    def test_importance_controls_match_used_distribution(self, sim_track):
        # with no selection, used steps are proposal draws in distribution
        track, raster = sim_track
        scheme = fit_proposal(track, KERNEL)
        data = generate_choice_sets(track, raster, scheme, 1, np.random.default_rng(3), KERNEL)
        ks = stats.ks_2samp(data.length[:, 0], data.length[:, 1])
        assert ks.pvalue > 0.01

    def test_deterministic(self, sim_track):
        track, raster = sim_track
        scheme = fit_proposal(track, KERNEL)
        d1 = generate_choice_sets(track, raster, scheme, 5, np.random.default_rng(9), KERNEL)
        d2 = generate_choice_sets(track, raster, scheme, 5, np.random.default_rng(9), KERNEL)
        np.testing.assert_array_equal(d1.length, d2.length)
        np.testing.assert_array_equal(d1.habitat_cov, d2.habitat_cov)

    def test_grid_enumeration_count(self):
        rng = np.random.default_rng(4)
        raster = flat_raster(size=100.0)
        track = Track(
            x=np.array([0.0, 1.0, 1.5, 2.5]),
            y=np.array([0.0, 0.0, 1.0, 1.0]),
            burst=np.zeros(4, dtype=int),
            t=np.arange(4),
        )
        scheme = GridScheme(resolution=1.0, radius=5.0)
        data = generate_choice_sets(track, raster, scheme, 0, rng, KERNEL)
        # counting oracle: integer lattice points with 0 < i^2 + j^2 <= 25
        count = sum(
            1
            for i in range(-5, 6)
            for j in range(-5, 6)
            if 0 < i * i + j * j <= 25
        )
        assert data.n_alternatives == count + 1
        assert count == 80

    def test_grid_offset_only_for_exponential(self):
        rng = np.random.default_rng(4)
        raster = flat_raster(size=100.0)
        track = Track(
            x=np.array([0.0, 1.0, 1.5, 2.5]),
            y=np.array([0.0, 0.0, 1.0, 1.0]),
            burst=np.zeros(4, dtype=int),
            t=np.arange(4),
        )
        scheme = GridScheme(resolution=1.0, radius=5.0)
        gamma_data = generate_choice_sets(track, raster, scheme, 0, rng, KERNEL)
        assert np.all(gamma_data.offset == 0.0)
        expo = MovementKernelSpec("exponential", "uniform")
        expo_data = generate_choice_sets(track, raster, scheme, 0, rng, expo)
        np.testing.assert_allclose(expo_data.offset, -np.log(expo_data.length), atol=1e-12)

    def test_zero_length_step_drops_and_splits(self, caplog):
        raster = flat_raster(size=100.0)
        x = np.array([0.0, 1.0, 2.0, 2.0, 3.0, 4.0, 5.0])
        y = np.zeros(7)
        track = Track(x=x, y=y, burst=np.zeros(7, dtype=int), t=np.arange(7))
        scheme = UniformStepsScheme(5.0)
        with caplog.at_level("WARNING"):
            data = generate_choice_sets(track, raster, scheme, 3, np.random.default_rng(7), KERNEL)
        # steps 2 (length 0) and 3 (undefined previous bearing) are dropped
        assert "dropped" in caplog.text
        assert data.n_strata == 3
        assert len(np.unique(data.burst)) == 2


class TestCaseControlIO:
    def make_data(self, sim_track, m=2, n=40):
        track, raster = sim_track
        scheme = fit_proposal(track, KERNEL)
        data = generate_choice_sets(track, raster, scheme, m, np.random.default_rng(11), KERNEL)
        return data.strata_subset(np.arange(n))

    def test_round_trip(self, sim_track, tmp_path):
        data = self.make_data(sim_track)
        path = tmp_path / "cc.csv"
        write_case_control(data, path)
        back = read_case_control(path)
        np.testing.assert_allclose(back.move_cov, data.move_cov, rtol=1e-9)
        np.testing.assert_allclose(back.habitat_cov, data.habitat_cov, rtol=1e-9)
        np.testing.assert_allclose(back.length, data.length, rtol=1e-9)
        assert back.scheme == data.scheme
        assert back.kernel == data.kernel
        assert back.habitat_names == data.habitat_names

    def test_two_case_rows_rejected(self, sim_track, tmp_path):
        import pandas as pd

        data = self.make_data(sim_track)
        path = tmp_path / "cc.csv"
        write_case_control(data, path)
        df = pd.read_csv(path)
        df.loc[1, "case"] = 1
        df.to_csv(path, index=False)
        with pytest.raises(SchemaError, match="case"):
            read_case_control(path)

    def test_missing_stratum_rejected(self, sim_track, tmp_path):
        import pandas as pd

        track, raster = sim_track
        scheme = fit_proposal(track, KERNEL)
        data = generate_choice_sets(track, raster, scheme, 2, np.random.default_rng(12), KERNEL)
        path = tmp_path / "cc.csv"
        write_case_control(data, path)
        df = pd.read_csv(path)
        df = df[df["t"] != 5]
        df.to_csv(path, index=False)
        with pytest.raises(SchemaError, match="contiguous"):
            read_case_control(path)

    def test_missing_column_rejected(self, sim_track, tmp_path):
        import pandas as pd

        data = self.make_data(sim_track)
        path = tmp_path / "cc.csv"
        write_case_control(data, path)
        df = pd.read_csv(path).drop(columns=["alpha"])
        df.to_csv(path, index=False)
        with pytest.raises(SchemaError, match="alpha"):
            read_case_control(path)

    def test_missing_sidecar_rejected(self, sim_track, tmp_path):
        data = self.make_data(sim_track)
        path = tmp_path / "cc.csv"
        write_case_control(data, path)
        (tmp_path / "cc.csv.meta.json").unlink()
        with pytest.raises(SchemaError, match="sidecar"):
            read_case_control(path)
