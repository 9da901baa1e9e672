"""Model suite: Markov-switching, single-state, selection-free and two-step fits.

Estimators follow the scikit-learn convention: hyperparameters in __init__,
``fit`` returns self and exposes fitted attributes with trailing underscores,
``predict_states`` decodes with the fitted model.  ``get_params`` /
``set_params`` come from BaseEstimator so the models compose with generic
tooling.
"""

from __future__ import annotations

import logging
import math
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from switchssa._rng import substream
from switchssa.hmm import (
    HmmFitResult,
    HmmParams,
    StepObservations,
    maximize_hmm,
    step_observations,
    viterbi_hmm,
)
from switchssa.kernels import (
    Exponential,
    Gamma,
    ImportanceScheme,
    LogNormal,
    MovementKernelSpec,
    SamplingScheme,
    UniformTurn,
    VonMises,
    natural_to_coef,
)
from switchssa.likelihood import (
    FitResult,
    MsParams,
    NumericError,
    compute_diagnostics,
    forward_loglik,
    maximize,
    viterbi,
    wald_inference,
)
from switchssa.sampling import CaseControlData, generate_choice_sets
from switchssa.simulate import Track

logger = logging.getLogger(__name__)

SELECTION_START_CHOICES = (-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0)


# ---------------------------------------------------------------------------
# starting values
# ---------------------------------------------------------------------------


def _step_distribution_from_moments(family: str, mean: float, sd: float):
    var = sd * sd
    if family == "gamma":
        return Gamma(shape=mean**2 / var, rate=mean / var)
    if family == "exponential":
        return Exponential(rate=1.0 / mean)
    log_var = math.log1p(var / mean**2)
    return LogNormal(log_mean=math.log(mean) - log_var / 2.0, log_var=log_var)


def _draw_movement_states(lengths, kernel, n_states, rng) -> list:
    """State-dependent kernels from partitioned step-length quantiles.

    Mean step lengths are drawn between consecutive quantiles of the observed
    lengths (10% to 90%), keeping the state means ordered; standard deviations
    between a quarter of and twice the mean; von Mises concentrations between
    0.2 and 2.
    """
    probs = np.linspace(0.1, 0.9, n_states + 1)
    qs = np.quantile(lengths, probs)
    states = []
    for i in range(n_states):
        mean = rng.uniform(qs[i], qs[i + 1])
        sd = rng.uniform(mean / 4.0, 2.0 * mean)
        step = _step_distribution_from_moments(kernel.step_family, mean, sd)
        if kernel.turn_family == "vonmises":
            turn = VonMises(concentration=rng.uniform(0.2, 2.0))
        else:
            turn = UniformTurn()
        states.append((step, turn))
    return states


def _draw_tpm(n_states, rng) -> np.ndarray:
    tpm = np.empty((n_states, n_states))
    diag = rng.uniform(0.80, 0.95, size=n_states)
    for i in range(n_states):
        tpm[i] = (1.0 - diag[i]) / max(n_states - 1, 1)
        tpm[i, i] = diag[i] if n_states > 1 else 1.0
    return tpm


def generate_starting_values(
    data: CaseControlData,
    n_states: int,
    n_sets: int,
    rng: np.random.Generator,
    delta_mode: str = "uniform",
    include_selection: bool = True,
) -> list:
    """Random starting parameter sets for the Markov-switching fit."""
    if n_sets < 1:
        raise ValueError("need at least one starting set")
    lengths = data.length[:, 0]
    if lengths.size < n_states + 1:
        raise ValueError("fewer observed steps than starting-value quantiles")
    starts = []
    q = data.n_habitat_covariates
    for _ in range(n_sets):
        tpm = _draw_tpm(n_states, rng)
        states = _draw_movement_states(lengths, data.kernel, n_states, rng)
        move = np.stack(
            [natural_to_coef(data.kernel, data.scheme, s, t) for s, t in states]
        )
        if include_selection and q:
            sel = rng.choice(SELECTION_START_CHOICES, size=(n_states, q))
        else:
            sel = np.zeros((n_states, q))
        starts.append(
            MsParams(
                kernel=data.kernel,
                scheme=data.scheme,
                tpm=tpm,
                move_coef=move,
                sel_coef=sel,
                delta_mode=delta_mode,
                habitat_names=data.habitat_names,
            )
        )
    return starts


def generate_hmm_starting_values(
    obs: StepObservations,
    kernel: MovementKernelSpec,
    n_states: int,
    n_sets: int,
    rng: np.random.Generator,
    delta_mode: str = "uniform",
) -> list:
    """Random starting parameter sets for the raw-step movement model."""
    starts = []
    for _ in range(n_sets):
        tpm = _draw_tpm(n_states, rng)
        states = _draw_movement_states(obs.lengths, kernel, n_states, rng)
        starts.append(HmmParams(kernel=kernel, tpm=tpm, states=states, delta_mode=delta_mode))
    return starts


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


class MarkovSwitchingSSA(BaseEstimator):
    """Markov-switching integrated step-selection analysis.

    ``n_states=1`` is the plain integrated step-selection analysis;
    ``include_selection=False`` freezes all selection coefficients at zero,
    which is the selection-free model fitted to the same case-control data.
    Fitted states are reported in order of increasing mean step length.
    """

    def __init__(
        self,
        n_states: int = 2,
        include_selection: bool = True,
        n_starts: int = 50,
        delta_mode: str = "uniform",
        max_iter: int = 500,
        grad_tol: float = 1e-6,
        ll_tol: float = 1e-10,
        seed: int = 0,
        start_params=None,
        order_states: bool = True,
        compute_inference: bool = True,
    ):
        self.n_states = n_states
        self.include_selection = include_selection
        self.n_starts = n_starts
        self.delta_mode = delta_mode
        self.max_iter = max_iter
        self.grad_tol = grad_tol
        self.ll_tol = ll_tol
        self.seed = seed
        self.start_params = start_params
        self.order_states = order_states
        self.compute_inference = compute_inference

    def _starts(self, data) -> list:
        if self.start_params is not None:
            given = self.start_params
            return list(given) if isinstance(given, (list, tuple)) else [given]
        rng = substream(self.seed, "msissa-starts", self.n_states, self.include_selection)
        return generate_starting_values(
            data,
            self.n_states,
            self.n_starts,
            rng,
            delta_mode=self.delta_mode,
            include_selection=self.include_selection,
        )

    def fit(self, data: CaseControlData) -> "MarkovSwitchingSSA":
        starts = self._starts(data)
        results = []
        lls = []
        for idx, start in enumerate(starts):
            try:
                res = maximize(
                    data,
                    start,
                    fix_selection=not self.include_selection,
                    max_iter=self.max_iter,
                    grad_tol=self.grad_tol,
                    ll_tol=self.ll_tol,
                )
            except NumericError:
                res = None
            results.append(res)
            lls.append(-np.inf if res is None else res.loglik)
        best_idx = int(np.argmax(lls))
        best = results[best_idx]
        if best is None:
            raise NumericError("no starting set produced a finite log-likelihood")
        best.start_index = best_idx
        best.ll_per_start = [float(v) for v in lls]
        if not any(r is not None and r.converged for r in results):
            logger.warning("no starting set converged; reporting the best point found")
        if self.order_states and self.n_states > 1:
            best.params = best.params.reorder(best.params.state_order())
        if self.compute_inference:
            best = wald_inference(best, data, fix_selection=not self.include_selection)
        self.states_ = viterbi(best.params, data)
        best.diagnostics = compute_diagnostics(best, self.states_)
        self.result_ = best
        self.params_ = best.params
        self.loglik_ = best.loglik
        self.aic_ = best.aic
        self.bic_ = best.bic
        self.converged_ = best.converged
        self.ll_per_start_ = best.ll_per_start
        self.diagnostics_ = best.diagnostics
        self._train_data = data
        return self

    def predict_states(self, data: Optional[CaseControlData] = None) -> np.ndarray:
        """Viterbi decoding (0-based states) on new or training data."""
        self._check_fitted()
        target = self._train_data if data is None else data
        if data is None:
            return self.states_.copy()
        return viterbi(self.params_, target)

    def score(self, data: Optional[CaseControlData] = None) -> float:
        self._check_fitted()
        return forward_loglik(self.params_, self._train_data if data is None else data)

    def _check_fitted(self):
        if not hasattr(self, "result_"):
            raise RuntimeError("estimator is not fitted")


class CaseControlHMM(MarkovSwitchingSSA):
    """Selection-free Markov-switching model on the same case-control data."""

    def __init__(
        self,
        n_states: int = 2,
        n_starts: int = 50,
        delta_mode: str = "uniform",
        max_iter: int = 500,
        grad_tol: float = 1e-6,
        ll_tol: float = 1e-10,
        seed: int = 0,
        start_params=None,
        order_states: bool = True,
        compute_inference: bool = False,
    ):
        super().__init__(
            n_states=n_states,
            include_selection=False,
            n_starts=n_starts,
            delta_mode=delta_mode,
            max_iter=max_iter,
            grad_tol=grad_tol,
            ll_tol=ll_tol,
            seed=seed,
            start_params=start_params,
            order_states=order_states,
            compute_inference=compute_inference,
        )

    def get_params(self, deep=True):
        params = super().get_params(deep=deep)
        params.pop("include_selection", None)
        return params


class MovementHMM(BaseEstimator):
    """Hidden Markov model on raw step lengths and turning angles."""

    def __init__(
        self,
        n_states: int = 2,
        kernel: MovementKernelSpec = MovementKernelSpec(),
        n_starts: int = 50,
        delta_mode: str = "uniform",
        max_iter: int = 500,
        grad_tol: float = 1e-6,
        ll_tol: float = 1e-10,
        seed: int = 0,
        start_params=None,
        order_states: bool = True,
    ):
        self.n_states = n_states
        self.kernel = kernel
        self.n_starts = n_starts
        self.delta_mode = delta_mode
        self.max_iter = max_iter
        self.grad_tol = grad_tol
        self.ll_tol = ll_tol
        self.seed = seed
        self.start_params = start_params
        self.order_states = order_states

    def fit(self, track) -> "MovementHMM":
        obs = track if isinstance(track, StepObservations) else step_observations(track)
        if self.start_params is not None:
            given = self.start_params
            starts = list(given) if isinstance(given, (list, tuple)) else [given]
        else:
            rng = substream(self.seed, "hmm-starts", self.n_states)
            starts = generate_hmm_starting_values(
                obs, self.kernel, self.n_states, self.n_starts, rng, self.delta_mode
            )
        results = []
        lls = []
        for start in starts:
            try:
                res = maximize_hmm(
                    obs,
                    start,
                    max_iter=self.max_iter,
                    grad_tol=self.grad_tol,
                    ll_tol=self.ll_tol,
                )
            except FloatingPointError:
                res = None
            results.append(res)
            lls.append(-np.inf if res is None else res.loglik)
        best_idx = int(np.argmax(lls))
        best = results[best_idx]
        if best is None:
            raise FloatingPointError("no starting set produced a finite log-likelihood")
        best.start_index = best_idx
        best.ll_per_start = [float(v) for v in lls]
        if self.order_states and self.n_states > 1:
            best.params = best.params.reorder(best.params.state_order())
        self.result_ = best
        self.params_ = best.params
        self.loglik_ = best.loglik
        self.converged_ = best.converged
        self.states_ = viterbi_hmm(best.params, obs)
        self._train_obs = obs
        return self

    def predict_states(self, track=None) -> np.ndarray:
        if not hasattr(self, "result_"):
            raise RuntimeError("estimator is not fitted")
        if track is None:
            return self.states_.copy()
        obs = track if isinstance(track, StepObservations) else step_observations(track)
        return viterbi_hmm(self.params_, obs)


class TwoStepSSA(BaseEstimator):
    """Two-step analysis: movement-model classification, then per-state fits.

    Steps are classified by the raw-step model's Viterbi sequence; for each
    state, control steps are sampled from that state's fitted step and angle
    distributions and a single-state conditional fit is run on the state's
    strata.  States with fewer strata than ``min_state_steps`` are skipped.
    """

    def __init__(
        self,
        n_states: int = 2,
        m_controls: int = 20,
        kernel: MovementKernelSpec = MovementKernelSpec(),
        n_starts: int = 50,
        regression_starts: int = 3,
        min_state_steps: int = 30,
        max_iter: int = 500,
        seed: int = 0,
    ):
        self.n_states = n_states
        self.m_controls = m_controls
        self.kernel = kernel
        self.n_starts = n_starts
        self.regression_starts = regression_starts
        self.min_state_steps = min_state_steps
        self.max_iter = max_iter
        self.seed = seed

    def fit(self, track: Track, rasters) -> "TwoStepSSA":
        hmm = MovementHMM(
            n_states=self.n_states,
            kernel=self.kernel,
            n_starts=self.n_starts,
            max_iter=self.max_iter,
            seed=self.seed,
        ).fit(track)
        decoded = hmm.states_
        obs = hmm._train_obs
        state_results = []
        state_schemes = []
        for i in range(self.n_states):
            idx = np.flatnonzero(decoded == i)
            step_dist, turn_dist = hmm.params_.states[i]
            scheme = ImportanceScheme(
                step_proposal=step_dist,
                turn_proposal=turn_dist if isinstance(turn_dist, VonMises) else None,
            )
            state_schemes.append(scheme)
            if idx.size < self.min_state_steps:
                logger.warning(
                    "state %d has only %d steps; skipping its regression", i + 1, idx.size
                )
                state_results.append(None)
                continue
            rng = substream(self.seed, "tsissa-controls", i)
            data = generate_choice_sets(
                track, rasters, scheme, self.m_controls, rng, kernel=self.kernel
            )
            if data.n_strata != obs.n or not np.allclose(
                data.length[:, 0], obs.lengths, atol=1e-9
            ):
                raise RuntimeError("choice-set strata do not align with the step observations")
            subset = data.strata_subset(idx)
            model = MarkovSwitchingSSA(
                n_states=1,
                n_starts=self.regression_starts,
                max_iter=self.max_iter,
                seed=self.seed + i,
            ).fit(subset)
            state_results.append(model.result_)
        self.hmm_ = hmm
        self.states_ = decoded
        self.state_results_ = state_results
        self.state_schemes_ = state_schemes
        self._train_obs = obs
        return self

    def predict_states(self, track=None) -> np.ndarray:
        if not hasattr(self, "hmm_"):
            raise RuntimeError("estimator is not fitted")
        return self.hmm_.predict_states(track)


# ---------------------------------------------------------------------------
# dispatch and model selection
# ---------------------------------------------------------------------------

MODEL_KINDS = ("msissa", "issa", "cchmm", "hmm", "tsissa")


def fit_model(
    kind: str,
    data: Optional[CaseControlData] = None,
    track: Optional[Track] = None,
    rasters=None,
    n_states: int = 2,
    **options,
):
    """Fit one of the named model kinds and return the fitted estimator."""
    kind = kind.lower()
    if kind == "msissa":
        if data is None:
            raise ValueError("msissa requires case-control data")
        return MarkovSwitchingSSA(n_states=n_states, **options).fit(data)
    if kind == "issa":
        if data is None:
            raise ValueError("issa requires case-control data")
        return MarkovSwitchingSSA(n_states=1, **options).fit(data)
    if kind == "cchmm":
        if data is None:
            raise ValueError("cchmm requires case-control data")
        return CaseControlHMM(n_states=n_states, **options).fit(data)
    if kind == "hmm":
        if track is None:
            raise ValueError("the raw-step model requires a track")
        kernel = data.kernel if data is not None else options.pop("kernel", MovementKernelSpec())
        options.pop("kernel", None)
        return MovementHMM(n_states=n_states, kernel=kernel, **options).fit(track)
    if kind == "tsissa":
        if track is None or rasters is None:
            raise ValueError("the two-step analysis requires a track and rasters")
        kernel = data.kernel if data is not None else options.pop("kernel", MovementKernelSpec())
        options.pop("kernel", None)
        return TwoStepSSA(n_states=n_states, kernel=kernel, **options).fit(track, rasters)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def select_model(fits: dict) -> dict:
    """Rank comparable fits by AIC and BIC with deltas against the best.

    All fits must be case-control likelihoods on the same choice sets;
    raw-step fits have no comparable likelihood and are rejected.
    """
    if not fits:
        raise ValueError("no fits to compare")
    results = {}
    for name, fit in fits.items():
        res = getattr(fit, "result_", fit)
        if isinstance(res, HmmFitResult) or getattr(res, "data_kind", None) != "case_control":
            raise ValueError(
                f"fit {name!r} is not a case-control likelihood; its information "
                "criteria are not comparable"
            )
        results[name] = res
    prints = {name: res.fingerprint for name, res in results.items()}
    if len(set(prints.values())) > 1:
        raise ValueError(f"fits were computed on different data sets: {prints}")
    out = {}
    for criterion in ("aic", "bic"):
        values = {name: getattr(res, criterion) for name, res in results.items()}
        best = min(values.values())
        ranking = sorted(values, key=lambda name: (values[name], name))
        out[criterion] = {
            "ranking": ranking,
            "values": values,
            "delta": {name: values[name] - best for name in values},
            "best": ranking[0],
        }
    return out
