import math

import numpy as np
import pytest
from scipy import stats

from switchssa.kernels import Exponential, Gamma, UniformTurn, VonMises
from switchssa.landscape import GrfSpec, Raster, simulate_grf
from switchssa.simulate import (
    MarkovChainSpec,
    StateModel,
    Track,
    sample_step_endpoint,
    selection_log_bound,
    simulate_states,
    simulate_track,
)


def big_flat_raster(value=0.0, size=4000.0):
    return Raster(np.full((2, 2), value), x0=-size / 2, y0=-size / 2, cell_size=size / 2)


class TestSimulateStates:
    def test_absorbing_identity(self):
        chain = MarkovChainSpec(tpm=np.eye(2), initial=np.array([1.0, 0.0]))
        states = simulate_states(chain, 500, np.random.default_rng(0))
        assert np.all(states == 0)

    def test_stay_frequency(self):
        chain = MarkovChainSpec(tpm=np.array([[0.9, 0.1], [0.1, 0.9]]))
        states = simulate_states(chain, 100_000, np.random.default_rng(1))
        stay = np.mean(states[1:] == states[:-1])
        assert stay == pytest.approx(0.9, abs=0.01)

    def test_longrun_occupancy(self):
        chain = MarkovChainSpec(tpm=np.array([[0.9, 0.1], [0.1, 0.9]]))
        states = simulate_states(chain, 100_000, np.random.default_rng(2))
        assert np.mean(states == 0) == pytest.approx(0.5, abs=0.02)

    def test_validation(self):
        with pytest.raises(ValueError, match="sum to 1"):
            MarkovChainSpec(tpm=np.array([[0.9, 0.2], [0.1, 0.9]]))
        with pytest.raises(ValueError, match="probability vector"):
            MarkovChainSpec(tpm=np.eye(2), initial=np.array([0.7, 0.7]))


class TestSampleStepEndpoint:
    def test_zero_selection_accepts_first_proposal(self):
        raster = big_flat_raster()
        state = StateModel(Gamma(2.5, 0.29), VonMises(1.0), np.zeros(1))
        assert selection_log_bound(raster, state.sel_coef) == 0.0

    def test_zero_selection_marginals_match_kernel(self):
        raster = big_flat_raster()
        state = StateModel(Gamma(2.5, 0.29), VonMises(1.0), np.zeros(1))
        rng = np.random.default_rng(3)
        prev, cur = (0.0, 0.0), (1.0, 0.0)
        n = 100_000
        xs = np.empty(n)
        ys = np.empty(n)
        for i in range(n):
            xs[i], ys[i] = sample_step_endpoint(prev, cur, state, raster, rng, log_bound=0.0)
        lengths = np.hypot(xs - 1.0, ys)
        angles = np.arctan2(ys, xs - 1.0)  # heading is 0, so direction = angle
        ks_l = stats.kstest(lengths, stats.gamma(a=2.5, scale=1 / 0.29).cdf)
        ks_a = stats.kstest(angles, stats.vonmises(kappa=1.0).cdf)
        assert ks_l.pvalue > 0.01
        assert ks_a.pvalue > 0.01

    def test_attraction_shifts_endpoint_covariate(self):
        spec = GrfSpec(sill=1.0, range_=10.0, n_rows=120, n_cols=120)
        raster = simulate_grf(spec, np.random.default_rng(8))
        state = StateModel(Gamma(2.5, 0.29), VonMises(1.0), np.array([2.0]))
        free = StateModel(Gamma(2.5, 0.29), VonMises(1.0), np.zeros(1))
        rng = np.random.default_rng(9)
        prev, cur = (59.0, 60.0), (60.0, 60.0)
        z_sel = []
        z_free = []
        for _ in range(3000):
            x, y = sample_step_endpoint(prev, cur, state, raster, rng)
            z_sel.append(raster.value_at(x, y))
            x, y = sample_step_endpoint(prev, cur, free, raster, rng)
            z_free.append(raster.value_at(x, y))
        assert np.mean(z_sel) > np.mean(z_free) + 0.2

    def _polar_oracle(self, raster, state, prev, cur, region_fn, n_l=600, n_a=600):
        """Quadrature mass of each region under the step-selection density."""
        heading = math.atan2(cur[1] - prev[1], cur[0] - prev[0])
        lo, hi = state.step.quantile(1e-6), state.step.quantile(1 - 1e-6)
        ls = np.linspace(lo, hi, n_l)
        aa = np.linspace(-math.pi + 1e-9, math.pi, n_a)
        L, A = np.meshgrid(ls, aa, indexing="ij")
        xs = cur[0] + L * np.cos(heading + A)
        ys = cur[1] + L * np.sin(heading + A)
        inside = raster.contains(xs, ys)
        w = np.zeros_like(L)
        w[inside] = np.exp(
            state.step.logpdf(L[inside])
            + state.turn.logpdf(A[inside])
            + state.sel_coef[0] * raster.values_at(xs[inside], ys[inside])
        )
        mass = np.zeros(region_fn(xs, ys).max() + 1)
        regions = region_fn(xs, ys)
        for r in range(mass.size):
            mass[r] = w[regions == r].sum()
        return mass / mass.sum()

    def test_exact_against_polar_quadrature(self):
        # binary landscape, constant in y; bilinear ramp only on x in [1.5, 2.5]
        values = np.tile(np.array([0.0, 0.0, 1.0, 1.0]), (4, 1))
        raster = Raster(values, x0=0.0, y0=0.0, cell_size=1.0)
        state = StateModel(Exponential(2.0), UniformTurn(), np.array([math.log(2.0)]))
        prev, cur = (1.9, 2.0), (2.0, 2.0)

        def region_fn(xs, ys):
            # 0: plateau Z=0 (x <= 1.5), 1: ramp, 2: plateau Z=1 (x >= 2.5)
            return np.where(xs <= 1.5, 0, np.where(xs >= 2.5, 2, 1))

        expected = self._polar_oracle(raster, state, prev, cur, region_fn)
        rng = np.random.default_rng(10)
        n = 100_000
        counts = np.zeros(3)
        log_bound = selection_log_bound(raster, state.sel_coef)
        for _ in range(n):
            x, y = sample_step_endpoint(prev, cur, state, raster, rng, log_bound=log_bound)
            counts[region_fn(np.asarray(x), np.asarray(y))] += 1
        empirical = counts / n
        assert 0.5 * np.abs(empirical - expected).sum() < 0.02

        # odds of landing on the Z=1 plateau versus the Z=0 plateau are
        # boosted by exp(beta) = 2 relative to the selection-free kernel
        free = StateModel(Exponential(2.0), UniformTurn(), np.zeros(1))
        kernel_mass = self._polar_oracle(raster, free, prev, cur, region_fn)
        model_odds = expected[2] / expected[0]
        kernel_odds = kernel_mass[2] / kernel_mass[0]
        assert model_odds / kernel_odds == pytest.approx(2.0, rel=1e-3)
        empirical_odds = empirical[2] / empirical[0]
        assert empirical_odds / kernel_odds == pytest.approx(2.0, rel=0.05)


class TestSimulateTrack:
    def make_models(self):
        s1 = StateModel(Gamma(1.2, 1.25), VonMises(0.3), np.zeros(1))
        s2 = StateModel(Gamma(2.5, 0.29), VonMises(1.0), np.zeros(1))
        return [s1, s2]

    def test_all_steps_from_state_two(self):
        raster = big_flat_raster()
        chain = MarkovChainSpec(tpm=np.eye(2), initial=np.array([0.0, 1.0]))
        track, states = simulate_track(
            chain, self.make_models(), raster, 200, (0.0, 0.0), np.random.default_rng(4)
        )
        assert np.all(states == 1)
        assert track.n_locations == 200

    def test_bitwise_reproducible(self):
        raster = big_flat_raster()
        chain = MarkovChainSpec(tpm=np.array([[0.9, 0.1], [0.1, 0.9]]))
        t1, s1 = simulate_track(
            chain, self.make_models(), raster, 300, (0.0, 0.0), np.random.default_rng(5)
        )
        t2, s2 = simulate_track(
            chain, self.make_models(), raster, 300, (0.0, 0.0), np.random.default_rng(5)
        )
        np.testing.assert_array_equal(t1.x, t2.x)
        np.testing.assert_array_equal(t1.y, t2.y)
        np.testing.assert_array_equal(s1, s2)

    def test_single_state_self_consistency(self):
        raster = big_flat_raster(size=40_000.0)
        chain = MarkovChainSpec(tpm=np.eye(1))
        model = StateModel(Gamma(2.5, 0.29), VonMises(1.0), np.zeros(1))
        track, _ = simulate_track(
            chain, [model], raster, 10_000, (0.0, 0.0), np.random.default_rng(6)
        )
        lengths, angles = track.observed_steps()
        fit = Gamma.fit(lengths)
        assert fit.shape == pytest.approx(2.5, rel=0.05)
        assert fit.rate == pytest.approx(0.29, rel=0.05)
        kappa = VonMises.fit(angles).concentration
        assert kappa == pytest.approx(1.0, rel=0.1)

    def test_needs_three_locations(self):
        raster = big_flat_raster()
        chain = MarkovChainSpec(tpm=np.eye(1))
        with pytest.raises(ValueError, match="3 locations"):
            simulate_track(chain, [self.make_models()[0]], raster, 2, (0.0, 0.0), np.random.default_rng(0))

    def test_start_out_of_bounds(self):
        raster = Raster(np.zeros((4, 4)), x0=0.0, y0=0.0, cell_size=1.0)
        chain = MarkovChainSpec(tpm=np.eye(1))
        with pytest.raises(ValueError, match="outside"):
            simulate_track(chain, [self.make_models()[0]], raster, 10, (9.0, 1.0), np.random.default_rng(0))


class TestTrack:
    def test_step_geometry(self):
        track = Track(
            x=np.array([0.0, 1.0, 1.0]),
            y=np.array([0.0, 0.0, 1.0]),
            burst=np.zeros(3, dtype=int),
            t=np.arange(3),
        )
        geom = track.steps()[0]
        np.testing.assert_allclose(geom["lengths"], [1.0, 1.0])
        np.testing.assert_allclose(geom["angles"], [math.pi / 2])

    def test_rejects_nonconsecutive(self):
        with pytest.raises(ValueError, match="consecutive"):
            Track(
                x=np.zeros(3),
                y=np.zeros(3),
                burst=np.zeros(3, dtype=int),
                t=np.array([0, 1, 3]),
            )

    def test_rejects_short_burst(self):
        with pytest.raises(ValueError, match="fewer than 3"):
            Track(
                x=np.zeros(5),
                y=np.zeros(5),
                burst=np.array([0, 0, 0, 1, 1]),
                t=np.array([0, 1, 2, 0, 1]),
            )
