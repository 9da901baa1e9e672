"""Case-control data construction: control steps and covariate extraction.

For each interior step of a track (the step's start must have an incoming
bearing, so the first step of every burst is skipped) a choice set is built
from the observed step plus M control steps drawn under a sampling scheme.
Alternative 0 is always the observed step.  Steps of zero length have no
defined log-length covariate and are dropped with a warning; a dropped
stratum splits its burst so that choice sets stay consecutive and the hidden
chain is never bridged across a gap.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from switchssa.kernels import (
    GridScheme,
    ImportanceScheme,
    MovementKernelSpec,
    SamplingScheme,
    UniformStepsScheme,
    fit_step_distribution,
    fit_turn_distribution,
    movement_covariates,
    scheme_from_dict,
    scheme_to_dict,
    wrap_angle,
)
from switchssa.landscape import Raster
from switchssa.simulate import Track, _as_raster_list

logger = logging.getLogger(__name__)

_REDRAW_ROUNDS = 1000


class SchemaError(ValueError):
    """Case-control file violates the expected schema."""


@dataclass
class CaseControlData:
    """Choice sets with movement and habitat covariates, case at alternative 0.

    Arrays are stratum-major: shape (n_strata, n_alternatives, ...) with
    strata sorted by (burst, t) and consecutive t within each burst.
    """

    move_cov: np.ndarray
    habitat_cov: np.ndarray
    offset: np.ndarray
    burst: np.ndarray
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    length: np.ndarray
    angle: np.ndarray
    kernel: MovementKernelSpec
    scheme: SamplingScheme
    habitat_names: tuple

    def __post_init__(self):
        self.move_cov = np.ascontiguousarray(self.move_cov, dtype=float)
        self.habitat_cov = np.ascontiguousarray(self.habitat_cov, dtype=float)
        self.offset = np.ascontiguousarray(self.offset, dtype=float)
        self.burst = np.asarray(self.burst, dtype=np.int64)
        self.t = np.asarray(self.t, dtype=np.int64)
        n, a = self.move_cov.shape[:2]
        if self.move_cov.ndim != 3 or n == 0 or a < 2:
            raise SchemaError("need at least one stratum with one control alternative")
        if self.move_cov.shape[2] != self.kernel.n_covariates:
            raise SchemaError(
                f"movement covariate dimension {self.move_cov.shape[2]} does not match "
                f"kernel spec ({self.kernel.n_covariates})"
            )
        if self.habitat_cov.shape[:2] != (n, a) or self.habitat_cov.shape[2] != len(
            self.habitat_names
        ):
            raise SchemaError("habitat covariate array shape mismatch")
        for arr, name in ((self.offset, "offset"), (self.x, "x"), (self.y, "y"),
                          (self.length, "length"), (self.angle, "angle")):
            if np.asarray(arr).shape != (n, a):
                raise SchemaError(f"{name} array shape mismatch")
        if self.burst.shape != (n,) or self.t.shape != (n,):
            raise SchemaError("burst/t index shape mismatch")
        order = np.lexsort((self.t, self.burst))
        if not np.array_equal(order, np.arange(n)):
            raise SchemaError("strata must be sorted by (burst, t)")
        for b in np.unique(self.burst):
            tb = self.t[self.burst == b]
            if np.any(np.diff(tb) != 1):
                raise SchemaError(f"non-contiguous step index in burst {b}")
        self.habitat_names = tuple(self.habitat_names)

    @property
    def n_strata(self) -> int:
        return self.move_cov.shape[0]

    @property
    def n_alternatives(self) -> int:
        return self.move_cov.shape[1]

    @property
    def n_controls(self) -> int:
        return self.n_alternatives - 1

    @property
    def n_move_covariates(self) -> int:
        return self.move_cov.shape[2]

    @property
    def n_habitat_covariates(self) -> int:
        return self.habitat_cov.shape[2]

    def burst_pointers(self) -> np.ndarray:
        """Start offsets of each burst in stratum order, with final sentinel."""
        change = np.flatnonzero(np.diff(self.burst) != 0) + 1
        return np.concatenate([[0], change, [self.n_strata]]).astype(np.int64)

    def fingerprint(self) -> tuple:
        return (
            self.n_strata,
            self.n_alternatives,
            self.n_move_covariates,
            self.n_habitat_covariates,
            round(float(self.move_cov.sum()), 6),
            round(float(self.habitat_cov.sum()), 6),
        )

    def strata_subset(self, indices) -> "CaseControlData":
        """Subset of strata re-labelled as independent single-stratum bursts.

        Used for per-stratum conditional fits (no hidden chain across strata).
        """
        idx = np.asarray(indices, dtype=np.int64)
        return CaseControlData(
            move_cov=self.move_cov[idx],
            habitat_cov=self.habitat_cov[idx],
            offset=self.offset[idx],
            burst=np.arange(idx.size, dtype=np.int64),
            t=np.zeros(idx.size, dtype=np.int64),
            x=self.x[idx],
            y=self.y[idx],
            length=self.length[idx],
            angle=self.angle[idx],
            kernel=self.kernel,
            scheme=self.scheme,
            habitat_names=self.habitat_names,
        )


# ---------------------------------------------------------------------------
# proposal fitting
# ---------------------------------------------------------------------------


def fit_proposal(
    track: Track,
    kernel: MovementKernelSpec,
    method: str = "mle",
    use_turn_proposal: bool = False,
) -> ImportanceScheme:
    """Fit pooled proposal distributions to the observed steps.

    Control angles are drawn uniformly unless ``use_turn_proposal`` is set, in
    which case a zero-mean von Mises proposal is fitted as well (the cos-angle
    coefficient then takes its importance-sampling interpretation).
    """
    lengths, angles = track.observed_steps()
    lengths = lengths[lengths > 0.0]
    step_proposal = fit_step_distribution(lengths, kernel.step_family, method=method)
    turn_proposal = None
    if use_turn_proposal:
        if kernel.turn_family != "vonmises":
            raise ValueError("turn proposal requires a von Mises kernel")
        turn_proposal = fit_turn_distribution(angles, "vonmises")
    return ImportanceScheme(step_proposal=step_proposal, turn_proposal=turn_proposal)


def uniform_scheme(
    track: Track, kernel: MovementKernelSpec, quantile: float = 0.999, max_length=None
) -> UniformStepsScheme:
    """Uniform-sampling scheme; default cap is the fitted proposal's 99.9% quantile."""
    if max_length is not None:
        return UniformStepsScheme(max_length=float(max_length))
    proposal = fit_proposal(track, kernel).step_proposal
    return UniformStepsScheme.from_proposal(proposal, quantile=quantile)


# ---------------------------------------------------------------------------
# choice-set generation
# ---------------------------------------------------------------------------


def _grid_offsets(scheme: GridScheme) -> tuple:
    span = int(math.floor(scheme.radius / scheme.resolution + 1e-12))
    ii, jj = np.meshgrid(np.arange(-span, span + 1), np.arange(-span, span + 1), indexing="ij")
    dx = jj.ravel() * scheme.resolution
    dy = ii.ravel() * scheme.resolution
    dist = np.hypot(dx, dy)
    keep = (dist > 0.0) & (dist <= scheme.radius + 1e-12)
    if not np.any(keep):
        raise ValueError("grid radius produces no candidate cell centres")
    return dx[keep], dy[keep], dist[keep]


def _draw_controls(scheme, m, rng) -> tuple:
    """Control (length, angle) draws for one stratum under a random scheme."""
    if isinstance(scheme, ImportanceScheme):
        lengths = scheme.step_proposal.sample(rng, size=m)
        if scheme.turn_proposal is not None:
            angles = scheme.turn_proposal.sample(rng, size=m)
        else:
            angles = np.pi * (1.0 - 2.0 * rng.random(m))
        return lengths, angles
    if isinstance(scheme, UniformStepsScheme):
        lengths = scheme.max_length * (1.0 - rng.random(m))
        angles = np.pi * (1.0 - 2.0 * rng.random(m))
        return lengths, angles
    raise TypeError(f"cannot draw controls under scheme {scheme!r}")


def generate_choice_sets(
    track: Track,
    rasters,
    scheme: SamplingScheme,
    m_controls: int,
    rng: np.random.Generator,
    kernel: MovementKernelSpec = MovementKernelSpec(),
    habitat_names=None,
) -> CaseControlData:
    """Build the case-control data set for every interior step of the track.

    Under the grid scheme the cell centres within the radius are enumerated
    instead of sampled (``m_controls`` is ignored) and the -log(length)
    Cartesian offset is recorded for exponential step kernels.
    """
    rasters = _as_raster_list(rasters)
    if habitat_names is None:
        habitat_names = tuple(
            r.name if r.name != "covariate" else f"z{j + 1}" for j, r in enumerate(rasters)
        )
    grid = isinstance(scheme, GridScheme)
    if grid:
        gdx, gdy, glen = _grid_offsets(scheme)
        n_alts = glen.size + 1
    else:
        if m_controls < 1:
            raise ValueError("need at least one control alternative")
        n_alts = m_controls + 1

    # one child stream per candidate stratum so dropped strata do not shift
    # the draws of later ones
    geoms = track.steps()
    candidates = []
    for b in track.burst_ids():
        sl = track.burst_slice(b)
        nb = sl.stop - sl.start
        for s in range(1, nb - 1):
            candidates.append((int(b), sl.start, s))
    streams = rng.bit_generator.seed_seq.spawn(len(candidates))

    rows = {k: [] for k in ("burst", "t", "x", "y", "length", "angle")}
    new_burst_id = -1
    prev_key = None
    n_dropped = 0
    for (b, start, s), seq in zip(candidates, streams):
        geom = geoms[b]
        used_l = geom["lengths"][s]
        heading_ref = geom["headings"][s - 1]
        used_angle = geom["angles"][s - 1]
        prev_l = geom["lengths"][s - 1]
        if used_l <= 0.0 or prev_l <= 0.0:
            n_dropped += 1
            prev_key = None  # split the burst at the gap
            continue
        x0 = track.x[start + s]
        y0 = track.y[start + s]
        child = np.random.default_rng(seq)
        if grid:
            xs = x0 + gdx
            ys = y0 + gdy
            inside = np.ones(glen.size, dtype=bool)
            for raster in rasters:
                inside &= raster.contains(xs, ys)
            if not np.all(inside):
                n_dropped += 1
                prev_key = None
                continue
            lengths = glen.copy()
            angles = wrap_angle(np.arctan2(gdy, gdx) - heading_ref)
        else:
            lengths = np.empty(n_alts - 1)
            angles = np.empty(n_alts - 1)
            pending = np.arange(n_alts - 1)
            ok = False
            for _ in range(_REDRAW_ROUNDS):
                new_l, new_a = _draw_controls(scheme, pending.size, child)
                lengths[pending] = new_l
                angles[pending] = new_a
                direction = heading_ref + angles[pending]
                xs_p = x0 + lengths[pending] * np.cos(direction)
                ys_p = y0 + lengths[pending] * np.sin(direction)
                inside = np.ones(pending.size, dtype=bool)
                for raster in rasters:
                    inside &= raster.contains(xs_p, ys_p)
                pending = pending[~inside]
                if pending.size == 0:
                    ok = True
                    break
            if not ok:
                raise RuntimeError(
                    f"control endpoint redraw budget exhausted at burst {b}, step {s}"
                )
            direction = heading_ref + angles
            xs = x0 + lengths * np.cos(direction)
            ys = y0 + lengths * np.sin(direction)

        key = (b, s)
        if prev_key is None or prev_key != (b, s - 1):
            new_burst_id += 1
        prev_key = key
        rows["burst"].append(new_burst_id)
        rows["t"].append(int(track.t[start + s]))
        rows["x"].append(np.concatenate([[track.x[start + s + 1]], xs]))
        rows["y"].append(np.concatenate([[track.y[start + s + 1]], ys]))
        rows["length"].append(np.concatenate([[used_l], lengths]))
        rows["angle"].append(np.concatenate([[used_angle], wrap_angle(angles)]))

    if n_dropped:
        logger.warning(
            "dropped %d strata (zero-length step or grid spilling off the raster); "
            "bursts were split at the gaps",
            n_dropped,
        )
    if not rows["burst"]:
        raise ValueError("track yields no usable choice sets")

    length = np.stack(rows["length"])
    angle = np.stack(rows["angle"])
    x = np.stack(rows["x"])
    y = np.stack(rows["y"])
    move = movement_covariates(kernel, length, angle if kernel.turn_family == "vonmises" else None)
    habitat = np.stack(
        [raster.values_at(x.ravel(), y.ravel()).reshape(x.shape) for raster in rasters], axis=-1
    )
    offset = np.zeros_like(length)
    if grid and kernel.step_family == "exponential":
        offset = -np.log(length)
    return CaseControlData(
        move_cov=move,
        habitat_cov=habitat,
        offset=offset,
        burst=np.asarray(rows["burst"]),
        t=np.asarray(rows["t"]),
        x=x,
        y=y,
        length=length,
        angle=angle,
        kernel=kernel,
        scheme=scheme,
        habitat_names=tuple(habitat_names),
    )


# ---------------------------------------------------------------------------
# CSV + sidecar I/O
# ---------------------------------------------------------------------------


def _meta_path(path) -> Path:
    return Path(str(path) + ".meta.json")


def write_case_control(data: CaseControlData, path, meta_path=None) -> None:
    """Write the choice sets as CSV plus a sidecar JSON with scheme metadata."""
    n, a = data.n_strata, data.n_alternatives
    p, q = data.n_move_covariates, data.n_habitat_covariates
    frame = {
        "burst": np.repeat(data.burst, a),
        "t": np.repeat(data.t, a),
        "alt": np.tile(np.arange(a), n),
        "case": np.tile((np.arange(a) == 0).astype(int), n),
        "x": data.x.ravel(),
        "y": data.y.ravel(),
        "l": data.length.ravel(),
        "alpha": data.angle.ravel(),
    }
    for j in range(p):
        frame[f"C_{j + 1}"] = data.move_cov[:, :, j].ravel()
    for j in range(q):
        frame[f"Z_{j + 1}"] = data.habitat_cov[:, :, j].ravel()
    frame["offset"] = data.offset.ravel()
    pd.DataFrame(frame).to_csv(path, index=False, float_format="%.10g")
    meta = {
        "kernel": data.kernel.to_dict(),
        "scheme": scheme_to_dict(data.scheme),
        "habitat_names": list(data.habitat_names),
        "move_covariates": list(data.kernel.covariate_names),
    }
    with open(meta_path or _meta_path(path), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def read_case_control(path, meta_path=None) -> CaseControlData:
    meta_file = Path(meta_path) if meta_path else _meta_path(path)
    if not meta_file.exists():
        raise SchemaError(
            f"missing sampling-scheme sidecar {meta_file}; it is written alongside the "
            "CSV and is required to interpret the movement coefficients"
        )
    with open(meta_file) as fh:
        meta = json.load(fh)
    kernel = MovementKernelSpec.from_dict(meta["kernel"])
    scheme = scheme_from_dict(meta["scheme"])
    habitat_names = tuple(meta["habitat_names"])

    df = pd.read_csv(path)
    base_cols = ["burst", "t", "alt", "case", "x", "y", "l", "alpha", "offset"]
    p = kernel.n_covariates
    q = len(habitat_names)
    move_cols = [f"C_{j + 1}" for j in range(p)]
    hab_cols = [f"Z_{j + 1}" for j in range(q)]
    missing = [c for c in base_cols + move_cols + hab_cols if c not in df.columns]
    if missing:
        raise SchemaError(f"missing columns: {missing}")

    df = df.sort_values(["burst", "t", "alt"], kind="mergesort").reset_index(drop=True)
    strata = df.groupby(["burst", "t"], sort=True)
    sizes = strata.size().to_numpy()
    if sizes.size == 0:
        raise SchemaError("empty case-control file")
    if np.any(sizes != sizes[0]):
        raise SchemaError("all choice sets must have the same number of alternatives")
    a = int(sizes[0])
    n = sizes.size

    alt = df["alt"].to_numpy().reshape(n, a)
    if not np.array_equal(alt, np.tile(np.arange(a), (n, 1))):
        raise SchemaError("alternatives must be numbered 0..M within each stratum")
    case = df["case"].to_numpy().reshape(n, a)
    if not (np.all(case[:, 0] == 1) and np.all(case[:, 1:] == 0)):
        bad = np.flatnonzero(case.sum(axis=1) != 1)
        if bad.size:
            raise SchemaError(f"stratum {bad[0]} must contain exactly one case row")
        raise SchemaError("the case row must be alternative 0")

    def grid(col):
        return df[col].to_numpy(dtype=float).reshape(n, a)

    burst = df["burst"].to_numpy(dtype=np.int64).reshape(n, a)[:, 0]
    t = df["t"].to_numpy(dtype=np.int64).reshape(n, a)[:, 0]
    move = np.stack([grid(c) for c in move_cols], axis=-1) if p else np.zeros((n, a, 0))
    habitat = np.stack([grid(c) for c in hab_cols], axis=-1) if q else np.zeros((n, a, 0))
    return CaseControlData(
        move_cov=move,
        habitat_cov=habitat,
        offset=grid("offset"),
        burst=burst,
        t=t,
        x=grid("x"),
        y=grid("y"),
        length=grid("l"),
        angle=grid("alpha"),
        kernel=kernel,
        scheme=scheme,
        habitat_names=habitat_names,
    )
