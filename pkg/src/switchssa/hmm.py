"""Hidden Markov model on raw steps: state-dependent length/angle densities.

This is the selection-free movement model used for prior state classification
in the two-step pipeline.  For the supported families the log-density of an
observation is linear in precomputed features (log length, length, cos angle)
plus a per-state normalising constant, so likelihood evaluations reduce to a
tiny matrix product feeding the shared forward recursion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize, special

from switchssa.kernels import (
    MovementKernelSpec,
    UniformStepsScheme,
    UniformTurn,
    VonMises,
    dist_from_dict,
    dist_to_dict,
    movement_covariates,
    natural_to_coef,
)
from switchssa.likelihood import (
    GRAD_STEP,
    _forward,
    _MovementBlock,
    _validate_tpm,
    _viterbi,
    stationary_distribution,
)
from switchssa.simulate import Track

# movement coefficients under uniform sampling equal the density's linear
# weights on the movement covariates; only the constant term is extra
_COEF_SCHEME = UniformStepsScheme(max_length=1.0)


def logpdf_constant(step_dist, turn_dist) -> float:
    """Additive constant of the joint step/turn log-density."""
    fam = step_dist.family
    if fam == "exponential":
        c = math.log(step_dist.rate)
    elif fam == "gamma":
        c = step_dist.shape * math.log(step_dist.rate) - float(special.gammaln(step_dist.shape))
    else:
        c = -step_dist.log_mean**2 / (2.0 * step_dist.log_var) - 0.5 * math.log(
            2.0 * math.pi * step_dist.log_var
        )
    if isinstance(turn_dist, VonMises):
        kappa = turn_dist.concentration
        c -= math.log(2.0 * math.pi) + math.log(float(special.i0e(kappa))) + kappa
    else:
        c -= math.log(2.0 * math.pi)
    return c


@dataclass
class HmmParams:
    """Parameters of the raw-step movement model."""

    kernel: MovementKernelSpec
    tpm: np.ndarray
    states: list
    delta_mode: str = "uniform"
    delta: Optional[np.ndarray] = None

    def __post_init__(self):
        self.tpm = _validate_tpm(self.tpm)
        if len(self.states) != self.tpm.shape[0]:
            raise ValueError("one (step, turn) distribution pair per state required")
        if self.delta_mode not in ("uniform", "stationary", "estimated"):
            raise ValueError(f"unknown delta mode {self.delta_mode!r}")
        if self.delta_mode == "estimated" and self.delta is None:
            self.delta = np.full(self.n_states, 1.0 / self.n_states)

    @property
    def n_states(self) -> int:
        return self.tpm.shape[0]

    def initial_distribution(self) -> np.ndarray:
        if self.delta_mode == "uniform":
            return np.full(self.n_states, 1.0 / self.n_states)
        if self.delta_mode == "stationary":
            return stationary_distribution(self.tpm)
        return np.asarray(self.delta, dtype=float)

    def state_order(self) -> np.ndarray:
        means = [(round(s.mean(), 10), i) for i, (s, _) in enumerate(self.states)]
        return np.asarray([i for _, i in sorted(means)], dtype=np.int64)

    def reorder(self, perm) -> "HmmParams":
        perm = np.asarray(perm, dtype=np.int64)
        return HmmParams(
            kernel=self.kernel,
            tpm=self.tpm[np.ix_(perm, perm)],
            states=[self.states[i] for i in perm],
            delta_mode=self.delta_mode,
            delta=None if self.delta is None else self.delta[perm],
        )

    def to_dict(self) -> dict:
        return {
            "N": self.n_states,
            "Gamma": [float(v) for v in self.tpm.ravel()],
            "delta_mode": self.delta_mode,
            "delta": None if self.delta is None else [float(v) for v in self.delta],
            "kernel": self.kernel.to_dict(),
            "states": [
                {"step": dist_to_dict(s), "turn": dist_to_dict(t)} for s, t in self.states
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HmmParams":
        n = int(d["N"])
        return cls(
            kernel=MovementKernelSpec.from_dict(d["kernel"]),
            tpm=np.asarray(d["Gamma"], dtype=float).reshape(n, n),
            states=[(dist_from_dict(s["step"]), dist_from_dict(s["turn"])) for s in d["states"]],
            delta_mode=d.get("delta_mode", "uniform"),
            delta=None if d.get("delta") is None else np.asarray(d["delta"], dtype=float),
        )


@dataclass
class StepObservations:
    """Per-stratum step observations aligned with choice-set strata."""

    lengths: np.ndarray
    angles: np.ndarray
    burst: np.ndarray
    t: np.ndarray

    @property
    def n(self) -> int:
        return self.lengths.size

    def burst_pointers(self) -> np.ndarray:
        change = np.flatnonzero(np.diff(self.burst) != 0) + 1
        return np.concatenate([[0], change, [self.n]]).astype(np.int64)


def step_observations(track: Track) -> StepObservations:
    """Interior steps (those with a defined incoming bearing) per burst.

    Zero-length steps are dropped and split the burst, mirroring the rule
    used when building case-control data, so HMM strata and choice-set
    strata stay aligned.
    """
    lengths = []
    angles = []
    bursts = []
    ts = []
    new_burst = -1
    geoms = track.steps()
    for b in track.burst_ids():
        sl = track.burst_slice(b)
        nb = sl.stop - sl.start
        geom = geoms[int(b)]
        open_run = False
        for s in range(1, nb - 1):
            if geom["lengths"][s] <= 0.0 or geom["lengths"][s - 1] <= 0.0:
                open_run = False
                continue
            if not open_run:
                new_burst += 1
                open_run = True
            lengths.append(geom["lengths"][s])
            angles.append(geom["angles"][s - 1])
            bursts.append(new_burst)
            ts.append(int(track.t[sl.start + s]))
    if not lengths:
        raise ValueError("track yields no usable steps")
    return StepObservations(
        lengths=np.asarray(lengths),
        angles=np.asarray(angles),
        burst=np.asarray(bursts, dtype=np.int64),
        t=np.asarray(ts, dtype=np.int64),
    )


class HmmTransform:
    """Working-parameter transform for the raw-step model."""

    def __init__(self, kernel: MovementKernelSpec, n_states: int, delta_mode: str = "uniform"):
        self.kernel = kernel
        self.n_states = n_states
        self.delta_mode = delta_mode
        self.block = _MovementBlock(kernel)
        self._state_size = self.block.size
        self.n_free = (
            n_states * self.block.size
            + n_states * (n_states - 1)
            + (n_states - 1 if delta_mode == "estimated" else 0)
        )

    def pack(self, params: HmmParams) -> np.ndarray:
        w = [self.block.pack(s, t) for s, t in params.states]
        for i in range(self.n_states):
            row = params.tpm[i]
            diag = max(row[i], 1e-12)
            w.append(
                [math.log(max(row[j], 1e-12) / diag) for j in range(self.n_states) if j != i]
            )
        if self.delta_mode == "estimated":
            delta = np.clip(params.initial_distribution(), 1e-12, None)
            w.append(np.log(delta[1:] / delta[0]))
        return np.concatenate([np.atleast_1d(np.asarray(x, dtype=float)) for x in w])

    def states_from(self, w) -> list:
        return [
            self.block.unpack(w[i * self._state_size : (i + 1) * self._state_size])
            for i in range(self.n_states)
        ]

    def chain_terms(self, w) -> tuple:
        n = self.n_states
        pos = n * self._state_size
        tpm = np.empty((n, n))
        for i in range(n):
            logits = w[pos + i * (n - 1) : pos + (i + 1) * (n - 1)]
            mx = max(0.0, logits.max(initial=-np.inf))
            ex = np.exp(logits - mx)
            scale = math.exp(-mx)
            denom = scale + ex.sum()
            tpm[i, i] = scale / denom
            tpm[i, [j for j in range(n) if j != i]] = ex / denom
        pos += n * (n - 1)
        if self.delta_mode == "uniform":
            delta = np.full(n, 1.0 / n)
        elif self.delta_mode == "stationary":
            delta = stationary_distribution(tpm)
        else:
            logits = np.concatenate([[0.0], w[pos : pos + n - 1]])
            ex = np.exp(logits - logits.max())
            delta = ex / ex.sum()
        return tpm, delta

    def unpack(self, w) -> HmmParams:
        tpm, delta = self.chain_terms(w)
        return HmmParams(
            kernel=self.kernel,
            tpm=tpm,
            states=self.states_from(w),
            delta_mode=self.delta_mode,
            delta=delta if self.delta_mode == "estimated" else None,
        )


class HmmObjective:
    """Negative log-likelihood of the raw-step movement model."""

    def __init__(self, obs: StepObservations, transform: HmmTransform):
        self.obs = obs
        self.transform = transform
        kernel = transform.kernel
        self.features = np.ascontiguousarray(
            movement_covariates(
                kernel,
                obs.lengths,
                obs.angles if kernel.turn_family == "vonmises" else None,
            )
        )
        self.burst_ptr = obs.burst_pointers()
        self._logp = np.empty((obs.n, transform.n_states))

    def emissions(self, w, out=None) -> np.ndarray:
        out = self._logp if out is None else out
        for i, (step_dist, turn_dist) in enumerate(self.transform.states_from(w)):
            theta = natural_to_coef(self.transform.kernel, _COEF_SCHEME, step_dist, turn_dist)
            np.matmul(self.features, theta, out=out[:, i])
            out[:, i] += logpdf_constant(step_dist, turn_dist)
        return out

    def value(self, w) -> float:
        logp = self.emissions(w)
        if not np.all(np.isfinite(logp)):
            return np.inf
        tpm, delta = self.transform.chain_terms(w)
        with np.errstate(divide="ignore"):
            log_delta = np.log(delta)
        return -_forward(logp, tpm, log_delta, self.burst_ptr)

    def value_and_grad(self, w) -> tuple:
        w = np.asarray(w, dtype=float).copy()
        f0 = self.value(w)
        if not np.isfinite(f0):
            return np.inf, np.zeros_like(w)
        grad = np.empty_like(w)
        for j in range(w.size):
            h = GRAD_STEP * max(1.0, abs(w[j]))
            wj = w[j]
            w[j] = wj + h
            f_plus = self.value(w)
            w[j] = wj - h
            f_minus = self.value(w)
            w[j] = wj
            grad[j] = (f_plus - f_minus) / (2.0 * h)
        return f0, grad


@dataclass
class HmmFitResult:
    """Raw-step HMM fit; no comparable information criteria with choice models."""

    params: HmmParams
    loglik: float
    converged: bool
    grad_norm: float
    n_iter: int
    n_obs: int
    n_free: int
    aic: float
    bic: float
    data_kind: str = "track"
    start_index: int = 0
    ll_per_start: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = self.params.to_dict()
        d.update(
            loglik=self.loglik,
            aic=self.aic,
            bic=self.bic,
            converged=bool(self.converged),
            n_obs=self.n_obs,
            n_free=self.n_free,
            start_index=self.start_index,
            ll_per_start=[float(v) for v in self.ll_per_start],
            data_kind=self.data_kind,
        )
        return d


def maximize_hmm(
    obs: StepObservations,
    start: HmmParams,
    max_iter: int = 500,
    grad_tol: float = 1e-6,
    ll_tol: float = 1e-10,
) -> HmmFitResult:
    """Single-start quasi-Newton fit of the raw-step model."""
    transform = HmmTransform(start.kernel, start.n_states, start.delta_mode)
    objective = HmmObjective(obs, transform)
    w0 = transform.pack(start)
    f0 = objective.value(w0)
    if not np.isfinite(f0):
        raise FloatingPointError("log-likelihood not finite at the starting values")
    res = optimize.minimize(
        objective.value_and_grad,
        w0,
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iter, "ftol": ll_tol, "gtol": grad_tol, "maxcor": 20},
    )
    w_best = res.x if res.fun <= f0 else w0
    f_best = min(float(res.fun), f0)
    _, grad = objective.value_and_grad(w_best)
    grad_norm = float(np.max(np.abs(grad))) if np.all(np.isfinite(grad)) else np.inf
    ll = -f_best
    return HmmFitResult(
        params=transform.unpack(w_best),
        loglik=ll,
        converged=bool(res.status == 0 or grad_norm < grad_tol),
        grad_norm=grad_norm,
        n_iter=int(res.nit),
        n_obs=obs.n,
        n_free=transform.n_free,
        aic=-2.0 * ll + 2.0 * transform.n_free,
        bic=-2.0 * ll + transform.n_free * math.log(obs.n),
    )


def _hmm_emissions(params: HmmParams, obs: StepObservations) -> np.ndarray:
    kernel = params.kernel
    features = movement_covariates(
        kernel, obs.lengths, obs.angles if kernel.turn_family == "vonmises" else None
    )
    logp = np.empty((obs.n, params.n_states))
    for i, (step_dist, turn_dist) in enumerate(params.states):
        theta = natural_to_coef(kernel, _COEF_SCHEME, step_dist, turn_dist)
        np.matmul(features, theta, out=logp[:, i])
        logp[:, i] += logpdf_constant(step_dist, turn_dist)
    return logp


def viterbi_hmm(params: HmmParams, obs: StepObservations) -> np.ndarray:
    """Most likely state sequence for the raw-step model (0-based)."""
    logp = _hmm_emissions(params, obs)
    with np.errstate(divide="ignore"):
        log_tpm = np.log(np.clip(params.tpm, 0.0, None))
        log_delta = np.log(params.initial_distribution())
    out = np.empty(obs.n, dtype=np.int64)
    _viterbi(logp, log_tpm, log_delta, obs.burst_pointers(), out)
    return out


def hmm_forward_loglik(params: HmmParams, obs: StepObservations) -> float:
    """Log-likelihood of the raw-step model via the forward recursion."""
    logp = _hmm_emissions(params, obs)
    with np.errstate(divide="ignore"):
        log_delta = np.log(params.initial_distribution())
    return float(_forward(logp, params.tpm, log_delta, obs.burst_pointers()))


def hmm_brute_force_loglik(params: HmmParams, obs: StepObservations) -> float:
    """Enumeration oracle for the raw-step model likelihood (tests only)."""
    from itertools import product

    logp = _hmm_emissions(params, obs)
    ptr = obs.burst_pointers()
    with np.errstate(divide="ignore"):
        log_tpm = np.log(np.clip(params.tpm, 0.0, None))
        log_delta = np.log(params.initial_distribution())
    total = 0.0
    for b in range(ptr.size - 1):
        length = ptr[b + 1] - ptr[b]
        if params.n_states**length > 1_000_000:
            raise ValueError("instance too large for brute-force enumeration")
        terms = []
        for seq in product(range(params.n_states), repeat=length):
            ll = log_delta[seq[0]] + logp[ptr[b], seq[0]]
            for t in range(1, length):
                ll += log_tpm[seq[t - 1], seq[t]] + logp[ptr[b] + t, seq[t]]
            terms.append(ll)
        total += float(special.logsumexp(np.asarray(terms)))
    return total
