"""Raster covariate storage, lookup, and Gaussian-random-field simulation.

Rasters follow the ESRI ASCII grid convention: row 0 is the northernmost row,
``(x0, y0)`` is the corner of the south-west cell, and values live at cell
centres.  Covariate lookup interpolates bilinearly between the four
surrounding cell centres, so the selection surface is continuous; inside the
half-cell margin along the edges the interpolation coordinates are clamped to
the centre grid.

Field simulation uses circulant embedding of the exponential covariance
C(d) = sigma2 * exp(-d / range) on an enlarged torus, which is exact: the
covariance between any two cells of the returned grid equals C at their
centre distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import fft as sp_fft

_NODATA_DEFAULT = -9999.0
_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


class RasterFormatError(ValueError):
    """Malformed ESRI ASCII grid content."""


@dataclass
class Raster:
    """Gridded covariate map with header metadata.

    ``values`` has shape (n_rows, n_cols) with row 0 the northernmost row.
    """

    values: np.ndarray
    x0: float = 0.0
    y0: float = 0.0
    cell_size: float = 1.0
    nodata: float = _NODATA_DEFAULT
    name: str = "covariate"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.size == 0:
            raise ValueError("raster values must be a non-empty 2-d array")
        if not (np.isfinite(self.cell_size) and self.cell_size > 0.0):
            raise ValueError("cell_size must be > 0")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    @property
    def x_max(self) -> float:
        return self.x0 + self.n_cols * self.cell_size

    @property
    def y_max(self) -> float:
        return self.y0 + self.n_rows * self.cell_size

    def contains(self, x, y):
        """Vectorised bounds test over the full raster rectangle."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return (x >= self.x0) & (x <= self.x_max) & (y >= self.y0) & (y <= self.y_max)

    def cell_center(self, row: int, col: int) -> tuple:
        cx = self.x0 + (col + 0.5) * self.cell_size
        cy = self.y0 + (self.n_rows - 1 - row + 0.5) * self.cell_size
        return cx, cy

    def value_at(self, x: float, y: float) -> float:
        """Bilinear interpolation of the four surrounding cell-centre values."""
        out = self.values_at(np.asarray([x]), np.asarray([y]))
        return float(out[0])

    def values_at(self, x, y) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        inside = self.contains(x, y)
        if not np.all(inside):
            bad = np.flatnonzero(~inside)[0]
            raise ValueError(
                f"location ({x[bad]}, {y[bad]}) outside raster bounds "
                f"[{self.x0}, {self.x_max}] x [{self.y0}, {self.y_max}]"
            )
        # continuous column / row-from-south coordinates of the query in
        # cell-centre space, clamped to the centre grid at the margins
        u = np.clip((x - self.x0) / self.cell_size - 0.5, 0.0, self.n_cols - 1.0)
        v = np.clip((y - self.y0) / self.cell_size - 0.5, 0.0, self.n_rows - 1.0)
        j0 = np.minimum(u.astype(np.int64), self.n_cols - 2) if self.n_cols > 1 else np.zeros_like(u, dtype=np.int64)
        i0 = np.minimum(v.astype(np.int64), self.n_rows - 2) if self.n_rows > 1 else np.zeros_like(v, dtype=np.int64)
        fu = u - j0
        fv = v - i0
        south = self.n_rows - 1 - i0
        j1 = np.minimum(j0 + 1, self.n_cols - 1)
        north = np.maximum(south - 1, 0)
        q00 = self.values[south, j0]
        q01 = self.values[south, j1]
        q10 = self.values[north, j0]
        q11 = self.values[north, j1]
        quad = np.stack([q00, q01, q10, q11])
        if np.any(quad == self.nodata) or np.any(~np.isfinite(quad)):
            raise ValueError("nodata value in the interpolation neighbourhood")
        return (
            q00 * (1 - fu) * (1 - fv)
            + q01 * fu * (1 - fv)
            + q10 * (1 - fu) * fv
            + q11 * fu * fv
        )

    def standardized(self) -> "Raster":
        """Copy with z-scored values (nodata cells are not supported)."""
        v = self.values
        if np.any(v == self.nodata):
            raise ValueError("cannot standardize a raster containing nodata cells")
        sd = v.std()
        if sd == 0.0:
            raise ValueError("constant raster cannot be standardized")
        return Raster((v - v.mean()) / sd, self.x0, self.y0, self.cell_size, self.nodata, self.name)


# ---------------------------------------------------------------------------
# Gaussian random field
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GrfSpec:
    """Exponential-covariance Gaussian random field on a regular grid.

    Covariance between cells at distance d is sill * exp(-d / range_).
    """

    sill: float = 1.0
    range_: float = 10.0
    n_rows: int = 200
    n_cols: int = 200
    cell_size: float = 1.0
    x0: float = 0.0
    y0: float = 0.0

    def __post_init__(self):
        if not (self.sill > 0.0 and self.range_ > 0.0):
            raise ValueError("sill and range must be > 0")
        if self.n_rows < 2 or self.n_cols < 2:
            raise ValueError("grid must be at least 2x2")


def _embedding_eigenvalues(spec: GrfSpec, m_rows: int, m_cols: int) -> np.ndarray:
    rows = np.arange(m_rows)
    cols = np.arange(m_cols)
    dr = np.minimum(rows, m_rows - rows) * spec.cell_size
    dc = np.minimum(cols, m_cols - cols) * spec.cell_size
    dist = np.hypot(dr[:, None], dc[None, :])
    base = spec.sill * np.exp(-dist / spec.range_)
    return sp_fft.fft2(base).real


def simulate_grf(spec: GrfSpec, rng: np.random.Generator, method: str = "auto") -> Raster:
    """Draw one zero-mean field realisation as a raster.

    ``method``: "fft" forces circulant embedding, "cholesky" the dense
    factorisation (refused above 128x128), "auto" tries the embedding first.
    """
    if method not in ("auto", "fft", "cholesky"):
        raise ValueError(f"unknown method {method!r}")
    if method == "cholesky":
        return _simulate_grf_cholesky(spec, rng)
    m_rows = sp_fft.next_fast_len(2 * spec.n_rows)
    m_cols = sp_fft.next_fast_len(2 * spec.n_cols)
    lam = None
    for _ in range(4):
        lam = _embedding_eigenvalues(spec, m_rows, m_cols)
        min_lam = lam.min()
        if min_lam >= -1e-9 * lam.max():
            lam = np.clip(lam, 0.0, None)
            break
        m_rows = sp_fft.next_fast_len(2 * m_rows)
        m_cols = sp_fft.next_fast_len(2 * m_cols)
        lam = None
    if lam is None:
        if method == "auto" and spec.n_rows * spec.n_cols <= 128 * 128:
            return _simulate_grf_cholesky(spec, rng)
        raise RuntimeError(
            "circulant embedding not positive semidefinite after maximum padding; "
            "retry with method='cholesky' (grids up to 128x128)"
        )
    noise = rng.standard_normal((m_rows, m_cols)) + 1j * rng.standard_normal((m_rows, m_cols))
    field = np.real(sp_fft.fft2(np.sqrt(lam) * noise)) / math.sqrt(m_rows * m_cols)
    values = field[: spec.n_rows, : spec.n_cols].copy()
    return Raster(values, x0=spec.x0, y0=spec.y0, cell_size=spec.cell_size)


def _simulate_grf_cholesky(spec: GrfSpec, rng: np.random.Generator) -> Raster:
    n_cells = spec.n_rows * spec.n_cols
    if n_cells > 128 * 128:
        raise ValueError("dense Cholesky fallback is limited to grids of at most 128x128")
    rows, cols = np.indices((spec.n_rows, spec.n_cols))
    xy = np.column_stack([cols.ravel() * spec.cell_size, rows.ravel() * spec.cell_size])
    dist = np.hypot(
        xy[:, 0][:, None] - xy[:, 0][None, :], xy[:, 1][:, None] - xy[:, 1][None, :]
    )
    cov = spec.sill * np.exp(-dist / spec.range_)
    cov[np.diag_indices_from(cov)] += 1e-10 * spec.sill
    chol = np.linalg.cholesky(cov)
    values = (chol @ rng.standard_normal(n_cells)).reshape(spec.n_rows, spec.n_cols)
    return Raster(values, x0=spec.x0, y0=spec.y0, cell_size=spec.cell_size)


def lag1_correlation(raster: Raster) -> float:
    """Mean empirical correlation between horizontally/vertically adjacent cells."""
    v = raster.values - raster.values.mean()
    denom = (v**2).mean()
    horiz = (v[:, 1:] * v[:, :-1]).mean()
    vert = (v[1:, :] * v[:-1, :]).mean()
    return float(0.5 * (horiz + vert) / denom)


# ---------------------------------------------------------------------------
# ESRI ASCII grid I/O
# ---------------------------------------------------------------------------


def write_raster(raster: Raster, path) -> None:
    """Serialize to ESRI ASCII grid with 10+ significant digits."""
    with open(path, "w") as fh:
        fh.write(f"ncols {raster.n_cols}\n")
        fh.write(f"nrows {raster.n_rows}\n")
        fh.write(f"xllcorner {raster.x0:.10g}\n")
        fh.write(f"yllcorner {raster.y0:.10g}\n")
        fh.write(f"cellsize {raster.cell_size:.10g}\n")
        fh.write(f"NODATA_value {raster.nodata:.10g}\n")
        for row in raster.values:
            fh.write(" ".join(f"{v:.12g}" for v in row) + "\n")


def read_raster(path) -> Raster:
    header = {}
    rows = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            key = parts[0].lower()
            if len(parts) == 2 and key in _HEADER_KEYS and len(rows) == 0:
                try:
                    header[key] = float(parts[1])
                except ValueError as err:
                    raise RasterFormatError(f"bad header line {line!r}") from err
            else:
                try:
                    rows.append([float(p) for p in parts])
                except ValueError as err:
                    raise RasterFormatError(f"non-numeric grid line {line!r}") from err
    for key in ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize"):
        if key not in header:
            raise RasterFormatError(f"missing header field {key!r}")
    n_cols = int(header["ncols"])
    n_rows = int(header["nrows"])
    if n_cols <= 0 or n_rows <= 0:
        raise RasterFormatError("ncols and nrows must be positive")
    if header["cellsize"] <= 0:
        raise RasterFormatError("cellsize must be > 0")
    if len(rows) != n_rows:
        raise RasterFormatError(f"expected {n_rows} data rows, found {len(rows)}")
    for i, row in enumerate(rows):
        if len(row) != n_cols:
            raise RasterFormatError(f"row {i} has {len(row)} values, expected {n_cols}")
    return Raster(
        np.asarray(rows, dtype=float),
        x0=header["xllcorner"],
        y0=header["yllcorner"],
        cell_size=header["cellsize"],
        nodata=header.get("nodata_value", _NODATA_DEFAULT),
    )
