"""Track generation from the Markov-switching step-selection model.

A hidden state sequence is drawn from a homogeneous Markov chain; each step is
then an exact draw from the state's step-selection density via rejection
sampling: propose (length, angle) from the selection-free movement kernel and
accept with probability proportional to the habitat-selection weight at the
proposed endpoint.  Proposals falling outside the raster are redrawn, which
truncates availability at the fence; because case-control sampling redraws
out-of-bounds controls the same way, the truncation cancels from the
conditional-logit likelihood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from switchssa.kernels import StepDistribution, TurnDistribution, wrap_angle
from switchssa.landscape import Raster

_PROPOSAL_BATCH = 64  # fixed so the seeded stream is consumed reproducibly


class SamplerStuckError(RuntimeError):
    """Rejection sampler acceptance rate collapsed (selection too extreme)."""


@dataclass
class MarkovChainSpec:
    """Hidden-state chain: transition matrix and initial distribution."""

    tpm: np.ndarray
    initial: Union[np.ndarray, str, None] = None  # vector, "stationary", or None=uniform

    def __post_init__(self):
        self.tpm = np.asarray(self.tpm, dtype=float)
        if self.tpm.ndim != 2 or self.tpm.shape[0] != self.tpm.shape[1]:
            raise ValueError("transition matrix must be square")
        if np.any(self.tpm < 0.0) or np.any(self.tpm > 1.0):
            raise ValueError("transition probabilities must lie in [0, 1]")
        if np.any(np.abs(self.tpm.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("transition matrix rows must sum to 1")
        if isinstance(self.initial, str):
            if self.initial != "stationary":
                raise ValueError(f"unknown initial distribution {self.initial!r}")
        elif self.initial is None:
            self.initial = np.full(self.n_states, 1.0 / self.n_states)
        else:
            self.initial = np.asarray(self.initial, dtype=float)
            if self.initial.shape != (self.n_states,):
                raise ValueError("initial distribution length must match the state count")
            if np.any(self.initial < 0.0) or abs(self.initial.sum() - 1.0) > 1e-12:
                raise ValueError("initial distribution must be a probability vector")

    @property
    def n_states(self) -> int:
        return self.tpm.shape[0]

    def initial_distribution(self) -> np.ndarray:
        if isinstance(self.initial, str):
            from switchssa.likelihood import stationary_distribution

            return stationary_distribution(self.tpm)
        return self.initial


@dataclass
class StateModel:
    """Movement kernel (natural parameters) and selection coefficients of one state."""

    step: StepDistribution
    turn: TurnDistribution
    sel_coef: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self):
        self.sel_coef = np.atleast_1d(np.asarray(self.sel_coef, dtype=float))


@dataclass
class Track:
    """Ordered planar locations with burst structure and integer time index."""

    x: np.ndarray
    y: np.ndarray
    burst: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.burst = np.asarray(self.burst, dtype=np.int64)
        self.t = np.asarray(self.t, dtype=np.int64)
        n = self.x.size
        if not (self.y.size == self.burst.size == self.t.size == n):
            raise ValueError("track columns must have equal length")
        order = np.lexsort((self.t, self.burst))
        if not np.array_equal(order, np.arange(n)):
            raise ValueError("track must be sorted by (burst, t)")
        for b in np.unique(self.burst):
            tb = self.t[self.burst == b]
            if tb.size < 3:
                raise ValueError(f"burst {b} has fewer than 3 locations")
            if np.any(np.diff(tb) != 1):
                raise ValueError(f"burst {b} time indices are not consecutive")

    @property
    def n_locations(self) -> int:
        return self.x.size

    def burst_ids(self) -> np.ndarray:
        return np.unique(self.burst)

    def burst_slice(self, burst_id) -> slice:
        idx = np.flatnonzero(self.burst == burst_id)
        return slice(idx[0], idx[-1] + 1)

    def steps(self) -> dict:
        """Per-burst geometry: lengths, headings, and turning angles.

        For a burst of n locations there are n-1 steps; turning angles exist
        from the second step on (index s aligns with ``lengths[s]``).
        """
        out = {}
        for b in self.burst_ids():
            sl = self.burst_slice(b)
            dx = np.diff(self.x[sl])
            dy = np.diff(self.y[sl])
            lengths = np.hypot(dx, dy)
            headings = np.arctan2(dy, dx)
            angles = wrap_angle(np.diff(headings))
            out[int(b)] = {"lengths": lengths, "headings": headings, "angles": angles}
        return out

    def observed_steps(self) -> tuple:
        """All step lengths and all defined turning angles, pooled over bursts."""
        lengths = []
        angles = []
        for geom in self.steps().values():
            lengths.append(geom["lengths"])
            angles.append(geom["angles"])
        return np.concatenate(lengths), np.concatenate(angles)


def _as_raster_list(rasters) -> list:
    if isinstance(rasters, Raster):
        return [rasters]
    rasters = list(rasters)
    if not rasters or not all(isinstance(r, Raster) for r in rasters):
        raise TypeError("expected a Raster or a non-empty sequence of Rasters")
    return rasters


def write_track(track: Track, path) -> None:
    """Write a track as CSV with columns burst,t,x,y."""
    with open(path, "w") as fh:
        fh.write("burst,t,x,y\n")
        for b, t, x, y in zip(track.burst, track.t, track.x, track.y):
            fh.write(f"{b},{t},{x:.10g},{y:.10g}\n")


def read_track(path) -> Track:
    """Read a burst,t,x,y CSV; rows are sorted by (burst, t) on load."""
    import pandas as pd

    df = pd.read_csv(path)
    missing = [c for c in ("burst", "t", "x", "y") if c not in df.columns]
    if missing:
        raise ValueError(f"track file missing columns: {missing}")
    df = df.sort_values(["burst", "t"], kind="mergesort").reset_index(drop=True)
    return Track(
        x=df["x"].to_numpy(dtype=float),
        y=df["y"].to_numpy(dtype=float),
        burst=df["burst"].to_numpy(dtype=np.int64),
        t=df["t"].to_numpy(dtype=np.int64),
    )


def simulate_states(chain: MarkovChainSpec, n_steps: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a state sequence of length ``n_steps`` from the chain."""
    if n_steps < 1:
        raise ValueError("need at least one step")
    cum = np.cumsum(chain.tpm, axis=1)
    states = np.empty(n_steps, dtype=np.int64)
    u = rng.random(n_steps)
    states[0] = np.searchsorted(np.cumsum(chain.initial_distribution()), u[0], side="right")
    for i in range(1, n_steps):
        states[i] = np.searchsorted(cum[states[i - 1]], u[i], side="right")
    return states


def selection_log_bound(rasters, sel_coef) -> float:
    """Upper bound for log selection weights: sum of positive-part cell maxima."""
    rasters = _as_raster_list(rasters)
    sel_coef = np.atleast_1d(np.asarray(sel_coef, dtype=float))
    if sel_coef.size != len(rasters):
        raise ValueError("one selection coefficient per covariate raster required")
    bound = 0.0
    for coef, raster in zip(sel_coef, rasters):
        values = raster.values[raster.values != raster.nodata]
        term = coef * (values.max() if coef >= 0 else values.min())
        bound += max(0.0, term)
    return bound


class _AcceptanceMonitor:
    """Tracks rejection-sampler throughput to detect collapsed acceptance."""

    def __init__(self, min_rate: float = 1e-4, window: int = 1_000_000):
        self.min_rate = min_rate
        self.window = window
        self.proposals = 0
        self.accepted = 0

    def update(self, proposals: int, accepted: int):
        self.proposals += proposals
        self.accepted += accepted
        if self.proposals >= self.window:
            rate = self.accepted / self.proposals
            if rate < self.min_rate:
                raise SamplerStuckError(
                    f"acceptance rate {rate:.2e} below {self.min_rate:.0e} after "
                    f"{self.proposals} proposals: selection coefficients too extreme "
                    "for this landscape"
                )
            self.proposals = 0
            self.accepted = 0


def sample_step_endpoint(
    prev,
    cur,
    state: StateModel,
    rasters,
    rng: np.random.Generator,
    log_bound: Optional[float] = None,
    monitor: Optional[_AcceptanceMonitor] = None,
) -> tuple:
    """Exact draw of the next location from the state's step-selection density.

    Returns (x, y).  ``log_bound`` may be precomputed via
    :func:`selection_log_bound` when sampling many steps for one state.
    """
    rasters = _as_raster_list(rasters)
    px, py = float(prev[0]), float(prev[1])
    cx, cy = float(cur[0]), float(cur[1])
    if px == cx and py == cy:
        raise ValueError("previous and current location coincide: heading undefined")
    if log_bound is None:
        log_bound = selection_log_bound(rasters, state.sel_coef)
    if monitor is None:
        monitor = _AcceptanceMonitor()
    heading = math.atan2(cy - py, cx - px)
    sel_coef = state.sel_coef
    out_of_bounds_rounds = 0
    while True:
        lengths = state.step.sample(rng, size=_PROPOSAL_BATCH)
        angles = state.turn.sample(rng, size=_PROPOSAL_BATCH)
        direction = heading + angles
        xs = cx + lengths * np.cos(direction)
        ys = cy + lengths * np.sin(direction)
        inside = rasters[0].contains(xs, ys)
        for raster in rasters[1:]:
            inside &= raster.contains(xs, ys)
        n_inside = int(inside.sum())
        if n_inside == 0:
            out_of_bounds_rounds += 1
            if out_of_bounds_rounds > 10_000:
                raise SamplerStuckError("no in-bounds proposals after 10000 batches")
            continue
        xs_in = xs[inside]
        ys_in = ys[inside]
        log_w = np.zeros(n_inside)
        for coef, raster in zip(sel_coef, rasters):
            log_w += coef * raster.values_at(xs_in, ys_in)
        accept = rng.random(_PROPOSAL_BATCH)[inside] < np.exp(log_w - log_bound)
        hits = np.flatnonzero(accept)
        monitor.update(n_inside, int(accept.sum()))
        if hits.size:
            first = hits[0]
            return float(xs_in[first]), float(ys_in[first])


def simulate_track(
    chain: MarkovChainSpec,
    states_models: Sequence[StateModel],
    rasters,
    n_locations: int,
    start,
    rng: np.random.Generator,
) -> tuple:
    """Simulate a track of ``n_locations`` and return (Track, true state sequence).

    ``states[j]`` generated the step from location j to j+1.  The first step
    has no defined turning angle, so it is drawn from the state's kernel with
    a uniform heading; the likelihood's index range skips it.
    """
    rasters = _as_raster_list(rasters)
    if n_locations < 3:
        raise ValueError("a track needs at least 3 locations")
    if len(states_models) != chain.n_states:
        raise ValueError("one StateModel per chain state required")
    sx, sy = float(start[0]), float(start[1])
    if not bool(np.all([r.contains(sx, sy) for r in rasters])):
        raise ValueError("start location outside raster bounds")
    states = simulate_states(chain, n_locations, rng)
    bounds = [selection_log_bound(rasters, m.sel_coef) for m in states_models]
    monitor = _AcceptanceMonitor()
    x = np.empty(n_locations)
    y = np.empty(n_locations)
    x[0], y[0] = sx, sy
    first = states_models[states[0]]
    while True:
        length = float(first.step.sample(rng))
        heading = math.pi * (1.0 - 2.0 * rng.random())
        x1 = sx + length * math.cos(heading)
        y1 = sy + length * math.sin(heading)
        if bool(np.all([r.contains(x1, y1) for r in rasters])):
            break
    x[1], y[1] = x1, y1
    for j in range(1, n_locations - 1):
        model = states_models[states[j]]
        x[j + 1], y[j + 1] = sample_step_endpoint(
            (x[j - 1], y[j - 1]),
            (x[j], y[j]),
            model,
            rasters,
            rng,
            log_bound=bounds[states[j]],
            monitor=monitor,
        )
    track = Track(
        x=x, y=y, burst=np.zeros(n_locations, dtype=np.int64), t=np.arange(n_locations)
    )
    return track, states
