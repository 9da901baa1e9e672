"""Markov-switching conditional logistic regression: likelihood, MLE, decoding.

The state-dependent probability of the observed alternative in a choice set is
a softmax over alternatives of the linear predictor (movement covariates times
movement coefficients plus habitat covariates times selection coefficients
plus offset).  Plugging these probabilities into the hidden-Markov forward
recursion gives the likelihood, evaluated per burst with the initial
distribution applied at each burst start.

Estimation maximises the log-likelihood over an unconstrained working vector:
positive natural movement parameters enter through log transforms, transition
matrix rows through multinomial logits against the diagonal, so every finite
working vector maps to valid model parameters.  Gradients are central finite
differences; perturbing one state's coordinates only refreshes that state's
emission column, and chain coordinates only re-run the forward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product
from typing import Optional

import numpy as np
from numba import njit
from scipy import optimize, special, stats

from switchssa.kernels import (
    Exponential,
    Gamma,
    LogNormal,
    MovementKernelSpec,
    SamplingScheme,
    UniformTurn,
    VonMises,
    coef_to_natural,
    natural_to_coef,
    scheme_from_dict,
    scheme_to_dict,
)
from switchssa.sampling import CaseControlData

_EPS = np.finfo(float).eps
GRAD_STEP = _EPS ** (1.0 / 3.0)  # central-difference step scale
HESS_STEP = _EPS**0.25

LL_MATCH_TOL = 1e-4  # two starts "reach the same maximum" within this band


class NumericError(FloatingPointError):
    """Likelihood evaluation produced a non-finite choice probability."""


# ---------------------------------------------------------------------------
# jitted kernels
# ---------------------------------------------------------------------------


class _EmissionWorkspace:
    """Preallocated buffers for softmax case log-probabilities.

    The per-alternative linear predictor is a matrix product on a contiguous
    (n * n_alt, n_cov) design, followed by a row-shifted exp (vectorised), so
    the evaluation stays numerically stable for predictors up to ~700.
    """

    def __init__(self, move_cov, habitat_cov, offset):
        design = np.concatenate([move_cov, habitat_cov], axis=2)
        self.n, self.n_alt, self.n_cov = design.shape
        self.design = np.ascontiguousarray(design.reshape(self.n * self.n_alt, self.n_cov))
        offset = np.asarray(offset, dtype=float)
        self.offset = np.ascontiguousarray(offset) if np.any(offset != 0.0) else None
        self._eta_flat = np.empty(self.n * self.n_alt)
        self._eta = self._eta_flat.reshape(self.n, self.n_alt)
        self._mx = np.empty(self.n)
        self._case = np.empty(self.n)

    def case_logprob(self, coef, out) -> None:
        """Write log p(case) per stratum for one state's coefficients into out.

        Non-finite predictors propagate into the output, where callers check.
        """
        with np.errstate(over="ignore", invalid="ignore"):
            np.matmul(self.design, coef, out=self._eta_flat)
            if self.offset is not None:
                self._eta_flat += self.offset.ravel()
            eta = self._eta
            np.amax(eta, axis=1, out=self._mx)
            np.copyto(self._case, eta[:, 0])
            eta -= self._mx[:, None]
            np.exp(eta, out=eta)
            denom = eta.sum(axis=1)
            np.subtract(self._case, self._mx, out=out)
            out -= np.log(denom)


@njit(cache=True)
def _forward(logp, tpm, log_delta, burst_ptr):
    n_states = logp.shape[1]
    total = 0.0
    v = np.empty(n_states)
    u = np.empty(n_states)
    for b in range(burst_ptr.size - 1):
        s0 = burst_ptr[b]
        s1 = burst_ptr[b + 1]
        mx = -np.inf
        for j in range(n_states):
            u[j] = log_delta[j] + logp[s0, j]
            if u[j] > mx:
                mx = u[j]
        if not np.isfinite(mx):
            return -np.inf
        acc = 0.0
        for j in range(n_states):
            v[j] = np.exp(u[j] - mx)
            acc += v[j]
        total += mx + np.log(acc)
        for j in range(n_states):
            v[j] /= acc
        for t in range(s0 + 1, s1):
            mx = -np.inf
            for j in range(n_states):
                if logp[t, j] > mx:
                    mx = logp[t, j]
            if not np.isfinite(mx):
                return -np.inf
            acc = 0.0
            for j in range(n_states):
                trans = 0.0
                for i in range(n_states):
                    trans += v[i] * tpm[i, j]
                u[j] = trans * np.exp(logp[t, j] - mx)
                acc += u[j]
            if not (acc > 0.0) or not np.isfinite(acc):
                return -np.inf
            total += mx + np.log(acc)
            for j in range(n_states):
                v[j] = u[j] / acc
    return total


@njit(cache=True)
def _viterbi(logp, log_tpm, log_delta, burst_ptr, out):
    n, n_states = logp.shape
    back = np.zeros((n, n_states), dtype=np.int64)
    score = np.empty(n_states)
    new = np.empty(n_states)
    for b in range(burst_ptr.size - 1):
        s0 = burst_ptr[b]
        s1 = burst_ptr[b + 1]
        for j in range(n_states):
            score[j] = log_delta[j] + logp[s0, j]
        for t in range(s0 + 1, s1):
            for j in range(n_states):
                best = -np.inf
                arg = 0
                for i in range(n_states):
                    cand = score[i] + log_tpm[i, j]
                    if cand > best:
                        best = cand
                        arg = i
                new[j] = best + logp[t, j]
                back[t, j] = arg
            for j in range(n_states):
                score[j] = new[j]
        best = -np.inf
        arg = 0
        for j in range(n_states):
            if score[j] > best:
                best = score[j]
                arg = j
        out[s1 - 1] = arg
        for t in range(s1 - 1, s0, -1):
            out[t - 1] = back[t, out[t]]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _validate_tpm(tpm, tol=1e-10):
    tpm = np.asarray(tpm, dtype=float)
    if tpm.ndim != 2 or tpm.shape[0] != tpm.shape[1]:
        raise ValueError("transition matrix must be square")
    if np.any(tpm < -tol) or np.any(np.abs(tpm.sum(axis=1) - 1.0) > tol):
        raise ValueError("transition matrix must be row-stochastic")
    return np.clip(tpm, 0.0, 1.0)


@dataclass
class MsParams:
    """Parameter bundle of the Markov-switching conditional logit model.

    Movement coefficients are on the regression scale; the sampling scheme and
    kernel spec they were estimated under are carried along so that natural
    distribution parameters can always be recovered.
    """

    kernel: MovementKernelSpec
    scheme: SamplingScheme
    tpm: np.ndarray
    move_coef: np.ndarray
    sel_coef: np.ndarray
    delta_mode: str = "uniform"
    delta: Optional[np.ndarray] = None
    habitat_names: tuple = ()

    def __post_init__(self):
        self.tpm = _validate_tpm(self.tpm)
        self.move_coef = np.atleast_2d(np.asarray(self.move_coef, dtype=float))
        self.sel_coef = np.asarray(self.sel_coef, dtype=float)
        if self.sel_coef.ndim == 1:
            self.sel_coef = self.sel_coef.reshape(self.n_states, -1)
        if self.move_coef.shape != (self.n_states, self.kernel.n_covariates):
            raise ValueError("movement coefficient matrix has the wrong shape")
        if self.sel_coef.shape[0] != self.n_states:
            raise ValueError("one selection coefficient row per state required")
        if self.delta_mode not in ("uniform", "stationary", "estimated"):
            raise ValueError(f"unknown delta mode {self.delta_mode!r}")
        if self.delta_mode == "estimated":
            if self.delta is None:
                self.delta = np.full(self.n_states, 1.0 / self.n_states)
            self.delta = np.asarray(self.delta, dtype=float)
        self.habitat_names = tuple(self.habitat_names)

    @property
    def n_states(self) -> int:
        return self.tpm.shape[0]

    @property
    def n_habitat(self) -> int:
        return self.sel_coef.shape[1]

    def initial_distribution(self) -> np.ndarray:
        if self.delta_mode == "uniform":
            return np.full(self.n_states, 1.0 / self.n_states)
        if self.delta_mode == "stationary":
            return stationary_distribution(self.tpm)
        return self.delta

    def natural_states(self) -> list:
        """Per-state (step distribution, turn distribution) in natural form."""
        return [
            coef_to_natural(self.kernel, self.scheme, self.move_coef[i])
            for i in range(self.n_states)
        ]

    def state_order(self) -> np.ndarray:
        """Permutation sorting states by mean step length, then first selection coef."""
        means = []
        for i, (step_dist, _) in enumerate(self.natural_states()):
            beta0 = self.sel_coef[i, 0] if self.n_habitat else 0.0
            means.append((round(step_dist.mean(), 10), beta0, i))
        return np.asarray([i for _, _, i in sorted(means)], dtype=np.int64)

    def reorder(self, perm) -> "MsParams":
        perm = np.asarray(perm, dtype=np.int64)
        delta = None if self.delta is None else self.delta[perm]
        return MsParams(
            kernel=self.kernel,
            scheme=self.scheme,
            tpm=self.tpm[np.ix_(perm, perm)],
            move_coef=self.move_coef[perm],
            sel_coef=self.sel_coef[perm],
            delta_mode=self.delta_mode,
            delta=delta,
            habitat_names=self.habitat_names,
        )

    def to_dict(self) -> dict:
        naturals = []
        for step_dist, turn_dist in self.natural_states():
            from switchssa.kernels import dist_to_dict

            naturals.append({"step": dist_to_dict(step_dist), "turn": dist_to_dict(turn_dist)})
        return {
            "N": self.n_states,
            "Gamma": [float(v) for v in self.tpm.ravel()],
            "delta_mode": self.delta_mode,
            "delta": None if self.delta is None else [float(v) for v in self.delta],
            "kernel": self.kernel.to_dict(),
            "scheme": scheme_to_dict(self.scheme),
            "states": [
                {
                    "theta": {
                        name: float(v)
                        for name, v in zip(self.kernel.covariate_names, self.move_coef[i])
                    },
                    "beta": {
                        name: float(v) for name, v in zip(self.habitat_names, self.sel_coef[i])
                    },
                    "natural": naturals[i],
                }
                for i in range(self.n_states)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MsParams":
        kernel = MovementKernelSpec.from_dict(d["kernel"])
        scheme = scheme_from_dict(d["scheme"])
        n = int(d["N"])
        habitat_names = tuple(d["states"][0]["beta"].keys()) if d["states"] else ()
        move = np.array(
            [[s["theta"][name] for name in kernel.covariate_names] for s in d["states"]]
        )
        sel = np.array([[s["beta"][name] for name in habitat_names] for s in d["states"]])
        return cls(
            kernel=kernel,
            scheme=scheme,
            tpm=np.asarray(d["Gamma"], dtype=float).reshape(n, n),
            move_coef=move,
            sel_coef=sel.reshape(n, len(habitat_names)),
            delta_mode=d.get("delta_mode", "uniform"),
            delta=None if d.get("delta") is None else np.asarray(d["delta"], dtype=float),
            habitat_names=habitat_names,
        )


def stationary_distribution(tpm) -> np.ndarray:
    """Solve delta @ tpm = delta with delta summing to one."""
    tpm = _validate_tpm(tpm)
    n = tpm.shape[0]
    system = np.vstack([tpm.T - np.eye(n), np.ones((1, n))])
    if np.linalg.matrix_rank(system, tol=1e-10) < n:
        raise ValueError("transition matrix is reducible; stationary distribution not unique")
    rhs = np.concatenate([np.zeros(n), [1.0]])
    delta, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    if np.any(delta < -1e-10):
        raise ValueError("stationary distribution has negative entries")
    delta = np.clip(delta, 0.0, None)
    return delta / delta.sum()


# ---------------------------------------------------------------------------
# working-parameter transform
# ---------------------------------------------------------------------------

_MIN_CONCENTRATION = 1e-8  # packing floor; the working scale is log-concentration


class _MovementBlock:
    """Packs one state's natural movement parameters into log space."""

    def __init__(self, kernel: MovementKernelSpec):
        self.kernel = kernel
        self.names = {
            "exponential": ("rate",),
            "gamma": ("shape", "rate"),
            "lognormal": ("log_mean", "log_var"),
        }[kernel.step_family]
        if kernel.turn_family == "vonmises":
            self.names = self.names + ("concentration",)
        self.size = len(self.names)

    def pack(self, step_dist, turn_dist) -> np.ndarray:
        fam = self.kernel.step_family
        if fam == "exponential":
            w = [math.log(step_dist.rate)]
        elif fam == "gamma":
            w = [math.log(step_dist.shape), math.log(step_dist.rate)]
        else:
            w = [step_dist.log_mean, math.log(step_dist.log_var)]
        if self.kernel.turn_family == "vonmises":
            w.append(math.log(max(turn_dist.concentration, _MIN_CONCENTRATION)))
        return np.asarray(w, dtype=float)

    def unpack(self, w) -> tuple:
        fam = self.kernel.step_family
        if fam == "exponential":
            step = Exponential(rate=math.exp(w[0]))
        elif fam == "gamma":
            step = Gamma(shape=math.exp(w[0]), rate=math.exp(w[1]))
        else:
            step = LogNormal(log_mean=float(w[0]), log_var=math.exp(w[1]))
        if self.kernel.turn_family == "vonmises":
            turn = VonMises(concentration=math.exp(w[-1]))
        else:
            turn = UniformTurn()
        return step, turn

    def natural_values(self, step_dist, turn_dist) -> dict:
        fam = self.kernel.step_family
        if fam == "exponential":
            vals = {"rate": step_dist.rate}
        elif fam == "gamma":
            vals = {"shape": step_dist.shape, "rate": step_dist.rate}
        else:
            vals = {"log_mean": step_dist.log_mean, "log_var": step_dist.log_var}
        if self.kernel.turn_family == "vonmises":
            vals["concentration"] = turn_dist.concentration
        return vals

    def boundary_distance(self, step_dist, turn_dist) -> float:
        """Distance of the closest positive-domain parameter to its boundary."""
        fam = self.kernel.step_family
        if fam == "exponential":
            d = step_dist.rate
        elif fam == "gamma":
            d = min(step_dist.shape, step_dist.rate)
        else:
            d = step_dist.log_var
        if self.kernel.turn_family == "vonmises":
            d = min(d, turn_dist.concentration)
        return float(d)


class WorkingTransform:
    """Bijection between MsParams and the unconstrained working vector."""

    def __init__(
        self,
        kernel: MovementKernelSpec,
        scheme: SamplingScheme,
        n_states: int,
        n_habitat: int,
        delta_mode: str = "uniform",
        fix_selection: bool = False,
        habitat_names: tuple = (),
    ):
        self.kernel = kernel
        self.scheme = scheme
        self.n_states = n_states
        self.n_habitat = n_habitat
        self.delta_mode = delta_mode
        self.fix_selection = fix_selection
        self.habitat_names = tuple(habitat_names) or tuple(
            f"z{j + 1}" for j in range(n_habitat)
        )
        self.block = _MovementBlock(kernel)
        per_state = self.block.size + (0 if fix_selection else n_habitat)
        self._state_size = per_state
        self.n_free = (
            n_states * per_state
            + n_states * (n_states - 1)
            + (n_states - 1 if delta_mode == "estimated" else 0)
        )
        kinds = []
        for i in range(n_states):
            kinds.extend([("state", i)] * per_state)
        kinds.extend([("chain", -1)] * (n_states * (n_states - 1)))
        if delta_mode == "estimated":
            kinds.extend([("chain", -1)] * (n_states - 1))
        self.coord_kinds = kinds
        from switchssa.kernels import _step_shifts, _turn_shift

        self._shifts = np.asarray(_step_shifts(kernel, scheme), dtype=float)
        self._turn_shift_value = _turn_shift(kernel, scheme)

    # -- packing ------------------------------------------------------------

    def pack(self, params: MsParams) -> np.ndarray:
        if params.n_states != self.n_states:
            raise ValueError("state count mismatch")
        w = []
        naturals = params.natural_states()
        for i in range(self.n_states):
            w.append(self.block.pack(*naturals[i]))
            if not self.fix_selection:
                w.append(params.sel_coef[i])
        for i in range(self.n_states):
            row = params.tpm[i]
            diag = max(row[i], 1e-12)
            w.append([math.log(max(row[j], 1e-12) / diag) for j in range(self.n_states) if j != i])
        if self.delta_mode == "estimated":
            delta = np.clip(params.initial_distribution(), 1e-12, None)
            w.append(np.log(delta[1:] / delta[0]))
        return np.concatenate([np.atleast_1d(np.asarray(x, dtype=float)) for x in w])

    def unpack(self, w) -> MsParams:
        w = np.asarray(w, dtype=float)
        if w.shape != (self.n_free,):
            raise ValueError(f"expected working vector of length {self.n_free}")
        move = np.empty((self.n_states, self.kernel.n_covariates))
        sel = np.zeros((self.n_states, self.n_habitat))
        pos = 0
        for i in range(self.n_states):
            step_dist, turn_dist = self.block.unpack(w[pos : pos + self.block.size])
            move[i] = natural_to_coef(self.kernel, self.scheme, step_dist, turn_dist)
            pos += self.block.size
            if not self.fix_selection:
                sel[i] = w[pos : pos + self.n_habitat]
                pos += self.n_habitat
        tpm = self._tpm_from(w, pos)
        pos += self.n_states * (self.n_states - 1)
        delta = None
        if self.delta_mode == "estimated":
            delta = self._delta_from(w, pos)
        return MsParams(
            kernel=self.kernel,
            scheme=self.scheme,
            tpm=tpm,
            move_coef=move,
            sel_coef=sel,
            delta_mode=self.delta_mode,
            delta=delta,
            habitat_names=self.habitat_names,
        )

    def _tpm_from(self, w, pos) -> np.ndarray:
        n = self.n_states
        tpm = np.empty((n, n))
        for i in range(n):
            logits = w[pos + i * (n - 1) : pos + (i + 1) * (n - 1)]
            ex = np.exp(logits - max(0.0, logits.max(initial=-np.inf)))
            scale = math.exp(-max(0.0, logits.max(initial=-np.inf)))
            denom = scale + ex.sum()
            row = np.empty(n)
            row[i] = scale / denom
            row[[j for j in range(n) if j != i]] = ex / denom
            tpm[i] = row
        return tpm

    def _delta_from(self, w, pos) -> np.ndarray:
        logits = np.concatenate([[0.0], w[pos : pos + self.n_states - 1]])
        ex = np.exp(logits - logits.max())
        return ex / ex.sum()

    # -- evaluation helpers ---------------------------------------------------

    def coef_matrix(self, w) -> np.ndarray:
        """Per-state rows [movement coefficients | selection coefficients]."""
        n_cov = self.kernel.n_covariates
        out = np.zeros((self.n_states, n_cov + self.n_habitat))
        for i in range(self.n_states):
            out[i] = self.coef_row(w, i)
        return out

    def coef_row(self, w, i, out=None) -> np.ndarray:
        """Coefficient row of state i: natural parameters mapped through the
        scheme's shift columns without constructing distribution objects."""
        if out is None:
            out = np.empty(self.kernel.n_covariates + self.n_habitat)
        base = i * self._state_size
        fam = self.kernel.step_family
        sh = self._shifts
        if fam == "exponential":
            out[0] = math.exp(w[base]) - sh[0]
        elif fam == "gamma":
            out[0] = math.exp(w[base]) - sh[0]
            out[1] = math.exp(w[base + 1]) - sh[1]
        else:
            log_var = math.exp(w[base + 1])
            out[0] = w[base] / log_var - sh[0]
            out[1] = 0.5 / log_var - sh[1]
        p = self.kernel.n_covariates
        if self.kernel.turn_family == "vonmises":
            out[p - 1] = math.exp(w[base + self.block.size - 1]) - self._turn_shift_value
        if self.fix_selection:
            out[p:] = 0.0
        else:
            out[p:] = w[base + self.block.size : base + self._state_size]
        return out

    def chain_terms(self, w) -> tuple:
        pos = self.n_states * self._state_size
        tpm = self._tpm_from(w, pos)
        pos += self.n_states * (self.n_states - 1)
        if self.delta_mode == "uniform":
            delta = np.full(self.n_states, 1.0 / self.n_states)
        elif self.delta_mode == "stationary":
            delta = stationary_distribution(tpm)
        else:
            delta = self._delta_from(w, pos)
        return tpm, delta

    def natural_report(self, w) -> list:
        """Per-state dict of natural movement parameters."""
        out = []
        for i in range(self.n_states):
            base = i * self._state_size
            step_dist, turn_dist = self.block.unpack(w[base : base + self.block.size])
            out.append(self.block.natural_values(step_dist, turn_dist))
        return out

    def coef_report(self, w) -> np.ndarray:
        """Flat reporting vector: per state movement then selection coefficients."""
        rows = [self.coef_row(w, i) for i in range(self.n_states)]
        return np.concatenate(rows)


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


class ClogitObjective:
    """Negative log-likelihood of the Markov-switching conditional logit.

    The finite-difference gradient exploits the model structure: a
    perturbation of state s's coordinates changes only state s's emission
    column, and all of one state's perturbed linear predictors are evaluated
    as a single rank-update matrix product followed by one large vectorised
    exp (identical arithmetic up to float associativity, with an exact
    per-coordinate fallback if the batch under/overflows).
    """

    def __init__(self, data: CaseControlData, transform: WorkingTransform):
        if data.n_habitat_covariates != transform.n_habitat:
            raise ValueError("habitat covariate count mismatch")
        if data.kernel != transform.kernel:
            raise ValueError("movement kernel mismatch between data and transform")
        self.data = data
        self.transform = transform
        self.workspace = _EmissionWorkspace(data.move_cov, data.habitat_cov, data.offset)
        self.burst_ptr = data.burst_pointers()
        self.n = data.n_strata
        self.n_alt = data.n_alternatives
        n_states = transform.n_states
        self._logp = np.empty((self.n, n_states))
        self._col = np.empty(self.n)
        self._save = np.empty(self.n)
        # per-state shifted linear predictors (eta - row max), cached by the
        # base evaluation for the batched gradient
        self._eta_shifted = np.empty((n_states, self.n * self.n_alt))
        self._scratch = np.empty(self.n * self.n_alt)
        self._eta_tmp = np.empty(self.n * self.n_alt)
        self._coef = np.empty(transform.kernel.n_covariates + transform.n_habitat)
        self._coef_base = np.empty_like(self._coef)
        state_size = transform._state_size
        self._batch_eta = np.empty((self.n * self.n_alt, 2 * state_size))
        self._state_slices = [
            slice(i * state_size, (i + 1) * state_size) for i in range(n_states)
        ]

    # -- emission passes ------------------------------------------------------

    def _emission_state(self, coef, eta_shifted_out, logp_out) -> None:
        ws = self.workspace
        with np.errstate(over="ignore", invalid="ignore"):
            np.matmul(ws.design, coef, out=eta_shifted_out)
            if ws.offset is not None:
                eta_shifted_out += ws.offset.ravel()
            eta = eta_shifted_out.reshape(self.n, self.n_alt)
            np.amax(eta, axis=1, out=ws._mx)
            eta -= ws._mx[:, None]
            scratch = self._scratch
            np.exp(eta_shifted_out, out=scratch)
            denom = scratch.reshape(self.n, self.n_alt).sum(axis=1)
            np.subtract(eta[:, 0], np.log(denom), out=logp_out)

    def emissions(self, w, out=None) -> np.ndarray:
        out = self._logp if out is None else out
        for s in range(self.transform.n_states):
            self.transform.coef_row(w, s, out=self._coef)
            self._emission_state(self._coef, self._eta_shifted[s], out[:, s])
        return out

    def _forward_with(self, logp, tpm, log_delta) -> float:
        return _forward(logp, tpm, log_delta, self.burst_ptr)

    def _chain(self, w) -> tuple:
        tpm, delta = self.transform.chain_terms(w)
        with np.errstate(divide="ignore"):
            log_delta = np.log(delta)
        return tpm, log_delta

    def value(self, w) -> float:
        logp = self.emissions(w)
        if not np.all(np.isfinite(logp)):
            return np.inf
        tpm, log_delta = self._chain(w)
        return -self._forward_with(logp, tpm, log_delta)

    def _grad_state_batched(self, w, state, logp, tpm, log_delta, grad, hs) -> bool:
        """Gradient entries of one state's coordinates; False if it must fall back."""
        transform = self.transform
        coords = list(range(*self._state_slices[state].indices(transform.n_free)))
        k = 2 * len(coords)
        n_cov = self._coef.size
        deltas = np.zeros((n_cov, k))
        transform.coef_row(w, state, out=self._coef_base)
        for c, j in enumerate(coords):
            wj = w[j]
            w[j] = wj + hs[j]
            transform.coef_row(w, state, out=self._coef)
            deltas[:, 2 * c] = self._coef - self._coef_base
            w[j] = wj - hs[j]
            transform.coef_row(w, state, out=self._coef)
            deltas[:, 2 * c + 1] = self._coef - self._coef_base
            w[j] = wj
        eta = self._batch_eta[:, :k]
        np.matmul(self.workspace.design, deltas, out=eta)
        eta += self._eta_shifted[state][:, None]
        eta3 = eta.reshape(self.n, self.n_alt, k)
        case = eta3[:, 0, :].copy()
        with np.errstate(over="ignore"):
            np.exp(eta, out=eta)
        denom = eta3.sum(axis=1)
        if not np.all(np.isfinite(denom)) or np.any(denom <= 0.0):
            return False
        logp_pert = case - np.log(denom)
        self._save[:] = logp[:, state]
        for c, j in enumerate(coords):
            logp[:, state] = logp_pert[:, 2 * c]
            f_plus = -self._forward_with(logp, tpm, log_delta)
            logp[:, state] = logp_pert[:, 2 * c + 1]
            f_minus = -self._forward_with(logp, tpm, log_delta)
            grad[j] = (f_plus - f_minus) / (2.0 * hs[j])
        logp[:, state] = self._save
        return True

    def _grad_state_exact(self, w, state, logp, tpm, log_delta, grad, hs) -> None:
        transform = self.transform
        coords = range(*self._state_slices[state].indices(transform.n_free))
        self._save[:] = logp[:, state]
        scratch_eta = self._eta_tmp
        for j in coords:
            wj = w[j]
            w[j] = wj + hs[j]
            transform.coef_row(w, state, out=self._coef)
            self._emission_state(self._coef, scratch_eta, self._col)
            logp[:, state] = self._col
            f_plus = -self._forward_with(logp, tpm, log_delta)
            w[j] = wj - hs[j]
            transform.coef_row(w, state, out=self._coef)
            self._emission_state(self._coef, scratch_eta, self._col)
            logp[:, state] = self._col
            f_minus = -self._forward_with(logp, tpm, log_delta)
            w[j] = wj
            grad[j] = (f_plus - f_minus) / (2.0 * hs[j])
        logp[:, state] = self._save

    def value_and_grad(self, w) -> tuple:
        w = np.asarray(w, dtype=float).copy()
        logp = self.emissions(w)
        if not np.all(np.isfinite(logp)):
            return np.inf, np.zeros_like(w)
        tpm0, log_delta0 = self._chain(w)
        f0 = -self._forward_with(logp, tpm0, log_delta0)
        grad = np.empty_like(w)
        hs = GRAD_STEP * np.maximum(1.0, np.abs(w))
        for state in range(self.transform.n_states):
            if not self._grad_state_batched(w, state, logp, tpm0, log_delta0, grad, hs):
                self._grad_state_exact(w, state, logp, tpm0, log_delta0, grad, hs)
        first_chain = self.transform.n_states * self.transform._state_size
        for j in range(first_chain, self.transform.n_free):
            wj = w[j]
            w[j] = wj + hs[j]
            tpm, log_delta = self._chain(w)
            f_plus = -self._forward_with(logp, tpm, log_delta)
            w[j] = wj - hs[j]
            tpm, log_delta = self._chain(w)
            f_minus = -self._forward_with(logp, tpm, log_delta)
            w[j] = wj
            grad[j] = (f_plus - f_minus) / (2.0 * hs[j])
        return f0, grad


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def choice_logprobs(params: MsParams, state: int, move_cov, habitat_cov=None, offset=None):
    """Log choice probabilities over one choice set under one state.

    ``move_cov`` has shape (n_alternatives, p); alternative 0 is the case.
    """
    move_cov = np.atleast_2d(np.asarray(move_cov, dtype=float))
    eta = move_cov @ params.move_coef[state]
    if habitat_cov is not None and params.n_habitat:
        eta = eta + np.atleast_2d(np.asarray(habitat_cov, dtype=float)) @ params.sel_coef[state]
    if offset is not None:
        eta = eta + np.asarray(offset, dtype=float)
    return eta - special.logsumexp(eta)


def _emission_matrix(params: MsParams, data: CaseControlData) -> np.ndarray:
    workspace = _EmissionWorkspace(data.move_cov, data.habitat_cov, data.offset)
    coefs = np.concatenate([params.move_coef, params.sel_coef], axis=1)
    out = np.empty((data.n_strata, params.n_states))
    for s in range(params.n_states):
        workspace.case_logprob(np.ascontiguousarray(coefs[s]), out[:, s])
    if not np.all(np.isfinite(out)):
        bad = np.flatnonzero(~np.isfinite(out).all(axis=1))[0]
        raise NumericError(f"non-finite choice probability at stratum {bad}")
    return out


def forward_loglik(params: MsParams, data: CaseControlData) -> float:
    """Log-likelihood over all bursts via the scaled forward recursion."""
    _check_dims(params, data)
    logp = _emission_matrix(params, data)
    with np.errstate(divide="ignore"):
        log_delta = np.log(params.initial_distribution())
    return float(_forward(logp, params.tpm, log_delta, data.burst_pointers()))


def viterbi(params: MsParams, data: CaseControlData) -> np.ndarray:
    """Most likely state sequence per burst (0-based states, ties to lower index)."""
    _check_dims(params, data)
    logp = _emission_matrix(params, data)
    with np.errstate(divide="ignore"):
        log_tpm = np.log(np.clip(params.tpm, 0.0, None))
        log_delta = np.log(params.initial_distribution())
    out = np.empty(data.n_strata, dtype=np.int64)
    _viterbi(logp, log_tpm, log_delta, data.burst_pointers(), out)
    return out


def _check_dims(params: MsParams, data: CaseControlData):
    if params.kernel != data.kernel:
        raise ValueError("movement kernel of params and data differ")
    if data.n_move_covariates != params.move_coef.shape[1]:
        raise ValueError("movement covariate dimension mismatch")
    if data.n_habitat_covariates != params.n_habitat:
        raise ValueError("habitat covariate dimension mismatch")


def brute_force_loglik(params: MsParams, data: CaseControlData) -> float:
    """Exact likelihood by enumerating all state sequences (test oracle)."""
    logp = _emission_matrix(params, data)
    ptr = data.burst_pointers()
    n_states = params.n_states
    with np.errstate(divide="ignore"):
        log_tpm = np.log(np.clip(params.tpm, 0.0, None))
        log_delta = np.log(params.initial_distribution())
    total = 0.0
    for b in range(ptr.size - 1):
        length = ptr[b + 1] - ptr[b]
        if n_states**length > 1_000_000:
            raise ValueError("instance too large for brute-force enumeration")
        terms = []
        for seq in product(range(n_states), repeat=length):
            ll = log_delta[seq[0]] + logp[ptr[b], seq[0]]
            for t in range(1, length):
                ll += log_tpm[seq[t - 1], seq[t]] + logp[ptr[b] + t, seq[t]]
            terms.append(ll)
        total += special.logsumexp(np.asarray(terms))
    return float(total)


def brute_force_viterbi(params: MsParams, data: CaseControlData) -> np.ndarray:
    """Exact most likely sequence by enumeration (test oracle)."""
    logp = _emission_matrix(params, data)
    ptr = data.burst_pointers()
    n_states = params.n_states
    with np.errstate(divide="ignore"):
        log_tpm = np.log(np.clip(params.tpm, 0.0, None))
        log_delta = np.log(params.initial_distribution())
    out = np.empty(data.n_strata, dtype=np.int64)
    for b in range(ptr.size - 1):
        length = ptr[b + 1] - ptr[b]
        if n_states**length > 1_000_000:
            raise ValueError("instance too large for brute-force enumeration")
        best = -np.inf
        best_seq = None
        for seq in product(range(n_states), repeat=length):
            ll = log_delta[seq[0]] + logp[ptr[b], seq[0]]
            for t in range(1, length):
                ll += log_tpm[seq[t - 1], seq[t]] + logp[ptr[b] + t, seq[t]]
            if ll > best:
                best = ll
                best_seq = seq
        out[ptr[b] : ptr[b + 1]] = best_seq
    return out


# ---------------------------------------------------------------------------
# maximisation and inference
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    """Maximum-likelihood fit with inference and bookkeeping."""

    params: MsParams
    loglik: float
    converged: bool
    grad_norm: float
    n_iter: int
    n_obs: int
    n_free: int
    aic: float
    bic: float
    data_kind: str = "case_control"
    fingerprint: tuple = ()
    start_index: int = 0
    ll_per_start: list = field(default_factory=list)
    se_coef: Optional[np.ndarray] = None
    p_values: Optional[np.ndarray] = None
    se_natural: Optional[list] = None
    natural: Optional[list] = None
    hessian_ok: bool = True
    diagnostics: dict = field(default_factory=dict)

    def coef_names(self) -> list:
        names = []
        for i in range(self.params.n_states):
            for c in self.params.kernel.covariate_names:
                names.append(f"state{i + 1}:{c}")
            for z in self.params.habitat_names:
                names.append(f"state{i + 1}:beta_{z}")
        return names

    def coef_vector(self) -> np.ndarray:
        rows = [
            np.concatenate([self.params.move_coef[i], self.params.sel_coef[i]])
            for i in range(self.params.n_states)
        ]
        return np.concatenate(rows)

    def sel_pvalues(self) -> np.ndarray:
        """Wald p-values of the selection coefficients, shape (N, q)."""
        if self.p_values is None:
            return np.full((self.params.n_states, self.params.n_habitat), np.nan)
        p = self.p_values.reshape(self.params.n_states, -1)
        return p[:, self.params.kernel.n_covariates :]

    def to_dict(self) -> dict:
        d = self.params.to_dict()
        d.update(
            loglik=self.loglik,
            aic=self.aic,
            bic=self.bic,
            converged=bool(self.converged),
            grad_norm=self.grad_norm,
            n_iter=self.n_iter,
            n_obs=self.n_obs,
            n_free=self.n_free,
            start_index=self.start_index,
            ll_per_start=[float(v) for v in self.ll_per_start],
            coef_names=self.coef_names(),
            coef=[float(v) for v in self.coef_vector()],
            se=None if self.se_coef is None else [float(v) for v in self.se_coef],
            p_values=None if self.p_values is None else [float(v) for v in self.p_values],
            natural=self.natural,
            se_natural=self.se_natural,
            hessian_ok=bool(self.hessian_ok),
            diagnostics={k: bool(v) for k, v in self.diagnostics.items()},
            data_kind=self.data_kind,
        )
        return d


def _transform_for(params: MsParams, fix_selection: bool) -> WorkingTransform:
    return WorkingTransform(
        params.kernel,
        params.scheme,
        params.n_states,
        params.n_habitat,
        delta_mode=params.delta_mode,
        fix_selection=fix_selection,
        habitat_names=params.habitat_names,
    )


def maximize(
    data: CaseControlData,
    start: MsParams,
    fix_selection: bool = False,
    max_iter: int = 500,
    grad_tol: float = 1e-6,
    ll_tol: float = 1e-10,
) -> FitResult:
    """Single-start quasi-Newton maximisation of the forward log-likelihood.

    Runs L-BFGS-B on the working parameters with central-difference gradients;
    converged means the gradient sup-norm fell below ``grad_tol`` or the
    relative log-likelihood change below ``ll_tol``.  Never raises on slow
    convergence: the best point found is returned with ``converged=False``.
    """
    _check_dims(start, data)
    transform = _transform_for(start, fix_selection)
    objective = ClogitObjective(data, transform)
    w0 = transform.pack(start)
    f0 = objective.value(w0)
    if not np.isfinite(f0):
        raise NumericError("log-likelihood is not finite at the starting values")
    res = optimize.minimize(
        objective.value_and_grad,
        w0,
        jac=True,
        method="L-BFGS-B",
        options={
            "maxiter": max_iter,
            "ftol": ll_tol,
            "gtol": grad_tol,
            "maxcor": 20,
        },
    )
    w_best = res.x if res.fun <= f0 else w0
    f_best = min(float(res.fun), f0)
    _, grad = objective.value_and_grad(w_best)
    grad_norm = float(np.max(np.abs(grad))) if np.all(np.isfinite(grad)) else np.inf
    converged = bool(res.status in (0,) or grad_norm < grad_tol)
    params = transform.unpack(w_best)
    n_obs = data.n_strata
    n_free = transform.n_free
    ll = -f_best
    return FitResult(
        params=params,
        loglik=ll,
        converged=converged,
        grad_norm=grad_norm,
        n_iter=int(res.nit),
        n_obs=n_obs,
        n_free=n_free,
        aic=-2.0 * ll + 2.0 * n_free,
        bic=-2.0 * ll + n_free * math.log(n_obs),
        fingerprint=data.fingerprint(),
    )


def fd_gradient(fun, w, stencil: str = "central", step_scale: float = GRAD_STEP) -> np.ndarray:
    """Finite-difference gradient with the central or five-point stencil."""
    w = np.asarray(w, dtype=float)
    grad = np.empty_like(w)
    for j in range(w.size):
        h = step_scale * max(1.0, abs(w[j]))
        wj = w[j]

        def at(delta):
            w[j] = wj + delta
            val = fun(w)
            w[j] = wj
            return val

        if stencil == "central":
            grad[j] = (at(h) - at(-h)) / (2.0 * h)
        elif stencil == "five_point":
            grad[j] = (at(-2 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2 * h)) / (12.0 * h)
        else:
            raise ValueError(f"unknown stencil {stencil!r}")
    return grad


def _fd_hessian(fun, w) -> np.ndarray:
    w = np.asarray(w, dtype=float).copy()
    d = w.size
    h = HESS_STEP * np.maximum(1.0, np.abs(w))
    hess = np.empty((d, d))
    f0 = fun(w)

    def at(deltas):
        w_mod = w.copy()
        for j, dj in deltas:
            w_mod[j] += dj
        return fun(w_mod)

    for i in range(d):
        hess[i, i] = (at([(i, h[i])]) - 2.0 * f0 + at([(i, -h[i])])) / h[i] ** 2
        for j in range(i + 1, d):
            val = (
                at([(i, h[i]), (j, h[j])])
                - at([(i, h[i]), (j, -h[j])])
                - at([(i, -h[i]), (j, h[j])])
                + at([(i, -h[i]), (j, -h[j])])
            ) / (4.0 * h[i] * h[j])
            hess[i, j] = val
            hess[j, i] = val
    return hess


def wald_inference(result: FitResult, data: CaseControlData, fix_selection: bool = False) -> FitResult:
    """Attach observed-information standard errors and Wald p-values.

    The Hessian of the negative log-likelihood is taken in working
    coordinates; reported coefficient and natural-parameter standard errors
    follow by the delta method through the working transform.  A Hessian that
    is not positive definite yields NaN standard errors and hessian_ok=False.
    """
    transform = _transform_for(result.params, fix_selection)
    objective = ClogitObjective(data, transform)
    w_hat = transform.pack(result.params)
    hess = _fd_hessian(objective.value, w_hat)
    result.natural = transform.natural_report(w_hat)

    n_coef = result.coef_vector().size
    try:
        chol = np.linalg.cholesky(hess)
        identity = np.eye(transform.n_free)
        cov = np.linalg.solve(chol.T, np.linalg.solve(chol, identity))
    except np.linalg.LinAlgError:
        result.hessian_ok = False
        result.se_coef = np.full(n_coef, np.nan)
        result.p_values = np.full(n_coef, np.nan)
        result.se_natural = [
            {k: math.nan for k in nat} for nat in result.natural
        ]
        return result

    # delta method for the reporting vector (theta | beta per state)
    jac = _fd_jacobian(transform.coef_report, w_hat)
    cov_coef = jac @ cov @ jac.T
    se = np.sqrt(np.clip(np.diag(cov_coef), 0.0, None))
    coef = result.coef_vector()
    with np.errstate(invalid="ignore", divide="ignore"):
        z = np.where(se > 0, coef / se, np.nan)
    result.se_coef = se
    result.p_values = 2.0 * stats.norm.sf(np.abs(z))

    def natural_vector(w):
        vals = []
        for nat in transform.natural_report(w):
            vals.extend(nat.values())
        return np.asarray(vals)

    jac_nat = _fd_jacobian(natural_vector, w_hat)
    cov_nat = jac_nat @ cov @ jac_nat.T
    se_nat = np.sqrt(np.clip(np.diag(cov_nat), 0.0, None))
    result.se_natural = []
    pos = 0
    for nat in result.natural:
        result.se_natural.append({k: float(se_nat[pos + i]) for i, k in enumerate(nat)})
        pos += len(nat)
    result.hessian_ok = True
    return result


def _fd_jacobian(fun, w) -> np.ndarray:
    w = np.asarray(w, dtype=float).copy()
    base = np.asarray(fun(w), dtype=float)
    jac = np.empty((base.size, w.size))
    for j in range(w.size):
        h = GRAD_STEP * max(1.0, abs(w[j]))
        wj = w[j]
        w[j] = wj + h
        f_plus = np.asarray(fun(w), dtype=float)
        w[j] = wj - h
        f_minus = np.asarray(fun(w), dtype=float)
        w[j] = wj
        jac[:, j] = (f_plus - f_minus) / (2.0 * h)
    return jac


# ---------------------------------------------------------------------------
# degeneracy diagnostics
# ---------------------------------------------------------------------------


def compute_diagnostics(result: FitResult, decoded: Optional[np.ndarray] = None) -> dict:
    """Degeneracy flags emitted with every Markov-switching fit.

    multistart_fragile: only one start reached the best log-likelihood;
    near_empty_state: Viterbi occupancy below 1% in some state;
    boundary_movement: a natural movement parameter within 1e-4 of its boundary;
    low_step_variance: implied step-length variance below 0.1 in some state;
    low_persistence: all diagonal transition probabilities below 0.2.
    """
    params = result.params
    block = _MovementBlock(params.kernel)
    naturals = params.natural_states()
    boundary = any(block.boundary_distance(s, t) < 1e-4 for s, t in naturals)
    low_var = any(s.var() < 0.1 for s, _ in naturals)
    low_persist = params.n_states > 1 and bool(np.all(np.diag(params.tpm) < 0.2))
    near_empty = False
    if decoded is not None and params.n_states > 1:
        occupancy = np.bincount(decoded, minlength=params.n_states) / decoded.size
        near_empty = bool(occupancy.min() < 0.01)
    fragile = False
    if len(result.ll_per_start) > 1:
        best = max(result.ll_per_start)
        fragile = sum(1 for ll in result.ll_per_start if ll >= best - LL_MATCH_TOL) == 1
    flags = {
        "multistart_fragile": fragile,
        "near_empty_state": near_empty,
        "boundary_movement": boundary,
        "low_step_variance": low_var,
        "low_persistence": low_persist,
    }
    flags["any"] = any(flags.values())
    return flags
