import itertools

import numpy as np
import pytest

from switchssa.hmm import (
    HmmParams,
    StepObservations,
    _hmm_emissions,
    hmm_brute_force_loglik,
    hmm_forward_loglik,
    maximize_hmm,
    step_observations,
    viterbi_hmm,
)
from switchssa.kernels import Gamma, MovementKernelSpec, UniformTurn, VonMises
from switchssa.landscape import Raster
from switchssa.simulate import MarkovChainSpec, StateModel, Track, simulate_track

KERNEL = MovementKernelSpec("gamma", "vonmises")


def random_obs(rng, n=8, n_bursts=2):
    lengths = rng.gamma(2.0, 3.0, size=n)
    angles = np.pi * (1 - 2 * rng.random(n))
    sizes = np.full(n_bursts, n // n_bursts)
    sizes[: n - sizes.sum()] += 1
    burst = np.repeat(np.arange(n_bursts), sizes)
    t = np.concatenate([np.arange(s) for s in sizes])
    return StepObservations(lengths=lengths, angles=angles, burst=burst, t=t)


def random_hmm_params(rng, n_states=2):
    tpm = rng.uniform(0.05, 1.0, size=(n_states, n_states))
    tpm /= tpm.sum(axis=1, keepdims=True)
    states = [
        (Gamma(rng.uniform(0.6, 3.0), rng.uniform(0.2, 2.0)), VonMises(rng.uniform(0.0, 2.0)))
        for _ in range(n_states)
    ]
    return HmmParams(kernel=KERNEL, tpm=tpm, states=states)


class TestEmissions:
    def test_linear_features_equal_direct_logpdfs(self):
        rng = np.random.default_rng(0)
        obs = random_obs(rng, n=20)
        params = random_hmm_params(rng)
        logp = _hmm_emissions(params, obs)
        for i, (step, turn) in enumerate(params.states):
            direct = step.logpdf(obs.lengths) + turn.logpdf(obs.angles)
            np.testing.assert_allclose(logp[:, i], direct, atol=1e-12)

    def test_uniform_turn_kernel(self):
        rng = np.random.default_rng(1)
        obs = random_obs(rng, n=15)
        kernel = MovementKernelSpec("gamma", "uniform")
        params = HmmParams(
            kernel=kernel,
            tpm=np.array([[0.8, 0.2], [0.3, 0.7]]),
            states=[(Gamma(1.5, 0.5), UniformTurn()), (Gamma(2.5, 0.3), UniformTurn())],
        )
        logp = _hmm_emissions(params, obs)
        for i, (step, turn) in enumerate(params.states):
            direct = step.logpdf(obs.lengths) + turn.logpdf(obs.angles)
            np.testing.assert_allclose(logp[:, i], direct, atol=1e-12)


class TestOracles:
    @pytest.mark.parametrize("seed", range(6))
    def test_forward_matches_enumeration(self, seed):
        rng = np.random.default_rng(50 + seed)
        obs = random_obs(rng, n=int(rng.integers(4, 9)), n_bursts=int(rng.integers(1, 3)))
        params = random_hmm_params(rng, n_states=int(rng.integers(2, 4)))
        assert hmm_forward_loglik(params, obs) == pytest.approx(
            hmm_brute_force_loglik(params, obs), abs=1e-8
        )

    @pytest.mark.parametrize("seed", range(4))
    def test_viterbi_matches_enumeration(self, seed):
        rng = np.random.default_rng(80 + seed)
        obs = random_obs(rng, n=7, n_bursts=1)
        params = random_hmm_params(rng)
        logp = _hmm_emissions(params, obs)
        log_tpm = np.log(params.tpm)
        log_delta = np.log(params.initial_distribution())
        best, best_seq = -np.inf, None
        for seq in itertools.product(range(2), repeat=obs.n):
            ll = log_delta[seq[0]] + logp[0, seq[0]]
            for t in range(1, obs.n):
                ll += log_tpm[seq[t - 1], seq[t]] + logp[t, seq[t]]
            if ll > best:
                best, best_seq = ll, seq
        np.testing.assert_array_equal(viterbi_hmm(params, obs), best_seq)


class TestStepObservations:
    def test_zero_length_steps_split_bursts(self):
        x = np.array([0.0, 1.0, 2.0, 2.0, 3.0, 4.0, 5.0])
        track = Track(x=x, y=np.zeros(7), burst=np.zeros(7, dtype=int), t=np.arange(7))
        obs = step_observations(track)
        # steps at s=2 (zero length) and s=3 (zero-length previous bearing) drop
        assert obs.n == 3
        assert len(np.unique(obs.burst)) == 2

    def test_alignment_with_track_geometry(self):
        rng = np.random.default_rng(2)
        x = np.cumsum(rng.uniform(0.5, 2.0, size=12) * np.cos(rng.uniform(-1, 1, size=12)))
        y = np.cumsum(rng.uniform(0.5, 2.0, size=12) * np.sin(rng.uniform(-1, 1, size=12)))
        track = Track(x=x, y=y, burst=np.zeros(12, dtype=int), t=np.arange(12))
        obs = step_observations(track)
        geom = track.steps()[0]
        np.testing.assert_allclose(obs.lengths, geom["lengths"][1:], atol=1e-12)
        np.testing.assert_allclose(obs.angles, geom["angles"], atol=1e-12)


class TestFit:
    def test_two_state_recovery_within_ten_percent(self):
        raster = Raster(np.zeros((2, 2)), x0=-20000, y0=-20000, cell_size=20000)
        chain = MarkovChainSpec(tpm=np.array([[0.9, 0.1], [0.1, 0.9]]))
        models = [
            StateModel(Gamma(1.2, 1.25), VonMises(0.3), np.zeros(1)),
            StateModel(Gamma(2.5, 0.29), VonMises(1.0), np.zeros(1)),
        ]
        track, _ = simulate_track(chain, models, raster, 1200, (0.0, 0.0), np.random.default_rng(5))
        obs = step_observations(track)
        from switchssa.models import MovementHMM

        hmm = MovementHMM(n_states=2, kernel=KERNEL, n_starts=10, seed=0).fit(obs)
        (s1, t1), (s2, t2) = hmm.params_.states
        assert s1.shape == pytest.approx(1.2, rel=0.10)
        assert s1.rate == pytest.approx(1.25, rel=0.10)
        assert s2.shape == pytest.approx(2.5, rel=0.10)
        assert s2.rate == pytest.approx(0.29, rel=0.10)
        assert t1.concentration == pytest.approx(0.3, rel=0.10)
        assert t2.concentration == pytest.approx(1.0, rel=0.10)
        assert np.diag(hmm.params_.tpm) == pytest.approx([0.9, 0.9], abs=0.05)

    def test_single_start_improves_and_converges(self):
        rng = np.random.default_rng(4)
        obs = random_obs(rng, n=300, n_bursts=1)
        start = random_hmm_params(rng)
        res = maximize_hmm(obs, start)
        assert res.loglik >= hmm_forward_loglik(start, obs) - 1e-9
        assert np.isfinite(res.loglik)


class TestSerialization:
    def test_round_trip(self):
        rng = np.random.default_rng(5)
        params = random_hmm_params(rng)
        back = HmmParams.from_dict(params.to_dict())
        np.testing.assert_allclose(back.tpm, params.tpm, rtol=1e-12)
        assert back.states[0][0] == params.states[0][0]
        assert back.states[1][1] == params.states[1][1]
