"""Shared builders and independent solvers used as test oracles."""

import numpy as np

from switchssa.kernels import (
    Gamma,
    ImportanceScheme,
    MovementKernelSpec,
    UniformStepsScheme,
    VonMises,
    movement_covariates,
    natural_to_coef,
)
from switchssa.likelihood import MsParams
from switchssa.sampling import CaseControlData

KERNEL = MovementKernelSpec("gamma", "vonmises")
SCHEME = UniformStepsScheme(max_length=40.0)


def random_case_control(
    rng,
    n_strata=8,
    n_alts=4,
    n_habitat=1,
    n_bursts=2,
    kernel=KERNEL,
    scheme=SCHEME,
    offset=False,
):
    """Synthetic choice sets with random covariates (no geometry needed)."""
    lengths = rng.gamma(2.0, 3.0, size=(n_strata, n_alts)) + 1e-3
    angles = np.pi * (1.0 - 2.0 * rng.random((n_strata, n_alts)))
    move = movement_covariates(kernel, lengths, angles)
    habitat = rng.normal(size=(n_strata, n_alts, n_habitat))
    off = rng.normal(scale=0.5, size=(n_strata, n_alts)) if offset else np.zeros((n_strata, n_alts))
    sizes = np.full(n_bursts, n_strata // n_bursts)
    sizes[: n_strata - sizes.sum()] += 1
    burst = np.repeat(np.arange(n_bursts), sizes)
    t = np.concatenate([np.arange(s) for s in sizes])
    return CaseControlData(
        move_cov=move,
        habitat_cov=habitat,
        offset=off,
        burst=burst,
        t=t,
        x=np.zeros((n_strata, n_alts)),
        y=np.zeros((n_strata, n_alts)),
        length=lengths,
        angle=angles,
        kernel=kernel,
        scheme=scheme,
        habitat_names=tuple(f"z{j+1}" for j in range(n_habitat)),
    )


def random_ms_params(rng, n_states=2, n_habitat=1, kernel=KERNEL, scheme=SCHEME):
    move = np.stack(
        [
            natural_to_coef(
                kernel,
                scheme,
                Gamma(shape=rng.uniform(0.6, 3.0), rate=rng.uniform(0.2, 2.0)),
                VonMises(concentration=rng.uniform(0.0, 2.0)),
            )
            for _ in range(n_states)
        ]
    )
    sel = rng.normal(scale=1.0, size=(n_states, n_habitat))
    tpm = rng.uniform(0.05, 1.0, size=(n_states, n_states))
    tpm /= tpm.sum(axis=1, keepdims=True)
    return MsParams(
        kernel=kernel,
        scheme=scheme,
        tpm=tpm,
        move_coef=move,
        sel_coef=sel,
        habitat_names=tuple(f"z{j+1}" for j in range(n_habitat)),
    )


def synthetic_choice_data(rng, params, n_strata=200, n_alts=8, n_bursts=1):
    """Case-control data generated exactly from the switching conditional logit.

    Covariates are drawn freely; the chosen alternative per stratum is the
    Gumbel-max of the state's linear predictor and is swapped into slot 0.
    Returns (data, true_states).
    """
    data = random_case_control(
        rng,
        n_strata=n_strata,
        n_alts=n_alts,
        n_habitat=params.n_habitat,
        n_bursts=n_bursts,
        kernel=params.kernel,
        scheme=params.scheme,
    )
    delta = params.initial_distribution()
    states = np.empty(n_strata, dtype=np.int64)
    ptr = data.burst_pointers()
    for b in range(ptr.size - 1):
        for i in range(ptr[b], ptr[b + 1]):
            probs = delta if i == ptr[b] else params.tpm[states[i - 1]]
            states[i] = rng.choice(params.n_states, p=probs)
    for i in range(n_strata):
        s = states[i]
        eta = (
            data.move_cov[i] @ params.move_coef[s]
            + data.habitat_cov[i] @ params.sel_coef[s]
            + data.offset[i]
        )
        pick = int(np.argmax(eta + rng.gumbel(size=eta.shape)))
        if pick != 0:
            for arr in (data.move_cov, data.habitat_cov, data.offset, data.x,
                        data.y, data.length, data.angle):
                arr[i, [0, pick]] = arr[i, [pick, 0]]
    return data, states


def newton_conditional_logit(data, tol=1e-12, max_iter=200):
    """Independent single-state conditional-logit solver (analytic derivatives).

    Maximises the softmax likelihood directly in coefficient space, which is
    concave; used as the oracle for the single-state nesting checks.
    """
    design = np.concatenate([data.move_cov, data.habitat_cov], axis=2)
    offset = data.offset
    n, n_alts, p = design.shape
    coef = np.zeros(p)
    for _ in range(max_iter):
        eta = design @ coef + offset
        eta -= eta.max(axis=1, keepdims=True)
        w = np.exp(eta)
        w /= w.sum(axis=1, keepdims=True)
        xbar = np.einsum("na,nap->np", w, design)
        grad = (design[:, 0, :] - xbar).sum(axis=0)
        cov = np.einsum("na,nap,naq->pq", w, design, design) - np.einsum(
            "np,nq->pq", xbar, xbar
        )
        step = np.linalg.solve(cov, grad)
        coef = coef + step
        if np.max(np.abs(step)) < tol:
            break
    eta = design @ coef + offset
    eta -= eta.max(axis=1, keepdims=True)
    loglik = float(
        np.sum(eta[:, 0] - np.log(np.exp(eta).sum(axis=1)))
    )
    return coef, loglik


def importance_scheme_like(step_dist=None, turn_dist=None):
    return ImportanceScheme(
        step_proposal=step_dist or Gamma(2.5, 0.29), turn_proposal=turn_dist
    )
