"""Step-length and turning-angle distribution families for movement kernels.

Provides densities, exact samplers and maximum-likelihood fits for the
supported families (exponential / gamma / log-normal step lengths, uniform /
zero-mean von Mises turning angles), the movement covariate vector used by the
conditional-logit models, and the bidirectional mapping between natural
distribution parameters and regression-scale movement coefficients.  The
mapping depends on how control steps were sampled, so every transform takes a
sampling-scheme record.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import optimize, special

TWO_PI = 2.0 * math.pi

STEP_FAMILIES = ("exponential", "gamma", "lognormal")
TURN_FAMILIES = ("uniform", "vonmises")


class InvalidParameterError(ValueError):
    """A natural parameter fell outside its domain."""

    def __init__(self, param: str, value: float, constraint: str):
        self.param = param
        self.value = value
        super().__init__(f"invalid parameter {param}={value!r}: requires {constraint}")


class DegenerateDataError(ValueError):
    """Data carry no information for the requested fit (e.g. zero variance)."""


def wrap_angle(alpha):
    """Wrap angles into (-pi, pi]."""
    a = np.asarray(alpha, dtype=float)
    wrapped = -(((-a + math.pi) % TWO_PI) - math.pi)
    return wrapped if wrapped.ndim else float(wrapped)


def _check_lengths(length):
    l = np.asarray(length, dtype=float)
    if np.any(~np.isfinite(l)) or np.any(l <= 0.0):
        raise ValueError("step lengths must be finite and > 0")
    return l


def _check_angles(angle):
    a = np.asarray(angle, dtype=float)
    if np.any(~np.isfinite(a)) or np.any(a <= -math.pi) or np.any(a > math.pi):
        raise ValueError("turning angles must lie in (-pi, pi]")
    return a


# ---------------------------------------------------------------------------
# step-length families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Exponential:
    """Exponential step-length distribution with rate > 0."""

    rate: float
    family = "exponential"

    def __post_init__(self):
        if not (np.isfinite(self.rate) and self.rate > 0.0):
            raise InvalidParameterError("rate", self.rate, "> 0")

    def logpdf(self, length):
        l = _check_lengths(length)
        return math.log(self.rate) - self.rate * l

    def sample(self, rng: np.random.Generator, size=None):
        return rng.exponential(1.0 / self.rate, size=size)

    def mean(self) -> float:
        return 1.0 / self.rate

    def var(self) -> float:
        return 1.0 / self.rate**2

    def quantile(self, p: float) -> float:
        return -math.log1p(-p) / self.rate

    @classmethod
    def fit(cls, lengths, method: str = "mle") -> "Exponential":
        l = _require_fit_data(lengths)
        # MLE and moment matching coincide for the exponential family
        return cls(rate=1.0 / float(np.mean(l)))


@dataclass(frozen=True)
class Gamma:
    """Gamma step-length distribution, shape/rate parameterisation."""

    shape: float
    rate: float
    family = "gamma"

    def __post_init__(self):
        if not (np.isfinite(self.shape) and self.shape > 0.0):
            raise InvalidParameterError("shape", self.shape, "> 0")
        if not (np.isfinite(self.rate) and self.rate > 0.0):
            raise InvalidParameterError("rate", self.rate, "> 0")

    def logpdf(self, length):
        l = _check_lengths(length)
        return (
            self.shape * math.log(self.rate)
            - special.gammaln(self.shape)
            + (self.shape - 1.0) * np.log(l)
            - self.rate * l
        )

    def sample(self, rng: np.random.Generator, size=None):
        return rng.gamma(self.shape, 1.0 / self.rate, size=size)

    def mean(self) -> float:
        return self.shape / self.rate

    def var(self) -> float:
        return self.shape / self.rate**2

    def quantile(self, p: float) -> float:
        return float(special.gammaincinv(self.shape, p)) / self.rate

    @classmethod
    def fit(cls, lengths, method: str = "mle") -> "Gamma":
        l = _require_fit_data(lengths)
        mean = float(np.mean(l))
        var = float(np.var(l))
        if var <= 0.0 or var / mean**2 < 1e-12:
            raise DegenerateDataError("zero-variance step lengths admit no gamma fit")
        if method == "moments":
            return cls(shape=mean**2 / var, rate=mean / var)
        if method != "mle":
            raise ValueError(f"unknown fit method {method!r}")
        # Newton iteration on the profile likelihood in the shape parameter:
        # log k - digamma(k) = log(mean) - mean(log).
        s = math.log(mean) - float(np.mean(np.log(l)))
        if s <= 1e-12:
            raise DegenerateDataError("zero-variance step lengths admit no gamma fit")
        k = (3.0 - s + math.sqrt((s - 3.0) ** 2 + 24.0 * s)) / (12.0 * s)
        for _ in range(60):
            step = (math.log(k) - special.digamma(k) - s) / (1.0 / k - special.polygamma(1, k))
            k_new = k - step
            if k_new <= 0.0:
                k_new = k / 2.0
            if abs(k_new - k) < 1e-12 * k:
                k = k_new
                break
            k = k_new
        return cls(shape=k, rate=k / mean)


@dataclass(frozen=True)
class LogNormal:
    """Log-normal step lengths; parameters are the mean and variance of log(l)."""

    log_mean: float
    log_var: float
    family = "lognormal"

    def __post_init__(self):
        if not np.isfinite(self.log_mean):
            raise InvalidParameterError("log_mean", self.log_mean, "finite")
        if not (np.isfinite(self.log_var) and self.log_var > 0.0):
            raise InvalidParameterError("log_var", self.log_var, "> 0")

    def logpdf(self, length):
        l = _check_lengths(length)
        log_l = np.log(l)
        return (
            -log_l
            - 0.5 * math.log(TWO_PI * self.log_var)
            - (log_l - self.log_mean) ** 2 / (2.0 * self.log_var)
        )

    def sample(self, rng: np.random.Generator, size=None):
        return np.exp(rng.normal(self.log_mean, math.sqrt(self.log_var), size=size))

    def mean(self) -> float:
        return math.exp(self.log_mean + self.log_var / 2.0)

    def var(self) -> float:
        return math.expm1(self.log_var) * math.exp(2.0 * self.log_mean + self.log_var)

    def quantile(self, p: float) -> float:
        return math.exp(self.log_mean + math.sqrt(self.log_var) * special.ndtri(p))

    @classmethod
    def fit(cls, lengths, method: str = "mle") -> "LogNormal":
        l = _require_fit_data(lengths)
        if method == "moments":
            mean = float(np.mean(l))
            var = float(np.var(l))
            if var <= 0.0:
                raise DegenerateDataError("zero-variance step lengths admit no log-normal fit")
            log_var = math.log1p(var / mean**2)
            return cls(log_mean=math.log(mean) - log_var / 2.0, log_var=log_var)
        if method != "mle":
            raise ValueError(f"unknown fit method {method!r}")
        log_l = np.log(l)
        log_var = float(np.var(log_l))
        if log_var <= 1e-15:
            raise DegenerateDataError("zero-variance step lengths admit no log-normal fit")
        return cls(log_mean=float(np.mean(log_l)), log_var=log_var)


# ---------------------------------------------------------------------------
# turning-angle families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UniformTurn:
    """Uniform turning angles on (-pi, pi]."""

    family = "uniform"

    def logpdf(self, angle):
        a = _check_angles(angle)
        out = np.full_like(a, -math.log(TWO_PI))
        return out if out.ndim else float(out)

    def sample(self, rng: np.random.Generator, size=None):
        return np.pi * (1.0 - 2.0 * rng.random(size))

    def mean_cos(self) -> float:
        return 0.0

    @classmethod
    def fit(cls, angles) -> "UniformTurn":
        _check_angles(angles)
        return cls()


@dataclass(frozen=True)
class VonMises:
    """Zero-mean von Mises turning angles with concentration >= 0.

    Concentration 0 reduces to the uniform distribution on the circle.
    """

    concentration: float
    family = "vonmises"

    def __post_init__(self):
        if not (np.isfinite(self.concentration) and self.concentration >= 0.0):
            raise InvalidParameterError("concentration", self.concentration, ">= 0")

    def logpdf(self, angle):
        a = _check_angles(angle)
        kappa = self.concentration
        # log I0 computed from the exponentially scaled Bessel for stability
        log_norm = math.log(TWO_PI) + math.log(float(special.i0e(kappa))) + kappa
        return kappa * np.cos(a) - log_norm

    def sample(self, rng: np.random.Generator, size=None):
        if self.concentration == 0.0:
            return UniformTurn().sample(rng, size)
        return wrap_angle(rng.vonmises(0.0, self.concentration, size=size))

    def mean_cos(self) -> float:
        kappa = self.concentration
        if kappa == 0.0:
            return 0.0
        return float(special.i1e(kappa) / special.i0e(kappa))

    @classmethod
    def fit(cls, angles) -> "VonMises":
        a = _require_fit_data(_check_angles(angles), positive=False)
        r = float(np.mean(np.cos(a)))
        if r <= 0.0:
            return cls(concentration=0.0)
        if r >= 1.0 - 1e-12:
            raise DegenerateDataError("all turning angles at zero admit no von Mises fit")
        f = lambda k: float(special.i1e(k) / special.i0e(k)) - r
        hi = 2.0
        while f(hi) < 0.0:
            hi *= 4.0
            if hi > 1e12:
                raise DegenerateDataError("resultant length too close to 1")
        return cls(concentration=float(optimize.brentq(f, 0.0, hi, xtol=1e-12, rtol=1e-12)))


StepDistribution = Union[Exponential, Gamma, LogNormal]
TurnDistribution = Union[UniformTurn, VonMises]

_STEP_CLASSES = {"exponential": Exponential, "gamma": Gamma, "lognormal": LogNormal}
_TURN_CLASSES = {"uniform": UniformTurn, "vonmises": VonMises}


def _require_fit_data(values, positive=True):
    v = np.asarray(values, dtype=float)
    if v.ndim != 1 or v.size < 10:
        raise ValueError("need at least 10 observations to fit a distribution")
    if np.any(~np.isfinite(v)):
        raise ValueError("observations must be finite")
    if positive and np.any(v <= 0.0):
        raise ValueError("step lengths must be > 0")
    return v


def fit_step_distribution(lengths, family: str, method: str = "mle") -> StepDistribution:
    if family not in _STEP_CLASSES:
        raise ValueError(f"unsupported step family {family!r}")
    return _STEP_CLASSES[family].fit(lengths, method=method)


def fit_turn_distribution(angles, family: str) -> TurnDistribution:
    if family not in _TURN_CLASSES:
        raise ValueError(f"unsupported turn family {family!r}")
    return _TURN_CLASSES[family].fit(angles)


# ---------------------------------------------------------------------------
# kernel specification and movement covariates
# ---------------------------------------------------------------------------

_STEP_COVARIATES = {
    "exponential": ("neg_length",),
    "gamma": ("log_length", "neg_length"),
    "lognormal": ("log_length", "neg_log_length_sq"),
}


@dataclass(frozen=True)
class MovementKernelSpec:
    """Which step-length and turning-angle families form the movement kernel.

    Determines the length and ordering of the movement covariate vector and of
    the movement coefficient vector.
    """

    step_family: str = "gamma"
    turn_family: str = "vonmises"

    def __post_init__(self):
        if self.step_family not in STEP_FAMILIES:
            raise ValueError(f"unsupported step family {self.step_family!r}")
        if self.turn_family not in TURN_FAMILIES:
            raise ValueError(f"unsupported turn family {self.turn_family!r}")

    @property
    def covariate_names(self) -> tuple:
        names = _STEP_COVARIATES[self.step_family]
        if self.turn_family == "vonmises":
            names = names + ("cos_angle",)
        return names

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)

    def to_dict(self) -> dict:
        return {"step_family": self.step_family, "turn_family": self.turn_family}

    @classmethod
    def from_dict(cls, d: dict) -> "MovementKernelSpec":
        return cls(step_family=d["step_family"], turn_family=d["turn_family"])


def movement_covariates(spec: MovementKernelSpec, length, angle=None) -> np.ndarray:
    """Movement covariate vector(s) for steps (length, angle).

    Broadcasts over array input; the trailing axis indexes the covariates in
    the order given by ``spec.covariate_names``.  The -log(length) Cartesian
    correction is not part of the covariates; under the grid sampling scheme
    it enters as an offset (exponential steps) or is absorbed by the
    log-length coefficient (gamma / log-normal steps).
    """
    l = _check_lengths(length)
    cols = []
    if spec.step_family == "exponential":
        cols.append(-l)
    elif spec.step_family == "gamma":
        cols.append(np.log(l))
        cols.append(-l)
    else:  # lognormal
        log_l = np.log(l)
        cols.append(log_l)
        cols.append(-(log_l**2))
    if spec.turn_family == "vonmises":
        if angle is None:
            raise ValueError("turning angle required for a von Mises kernel")
        cols.append(np.cos(_check_angles(angle)))
    return np.stack(np.broadcast_arrays(*cols), axis=-1)


# ---------------------------------------------------------------------------
# control-step sampling schemes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ImportanceScheme:
    """Control steps drawn from fitted proposal distributions.

    ``turn_proposal`` is None when control angles are drawn uniformly (the
    default protocol); the cos-angle coefficient then keeps its
    uniform-sampling interpretation.
    """

    step_proposal: StepDistribution
    turn_proposal: Optional[VonMises] = None

    name = "importance"


@dataclass(frozen=True)
class UniformStepsScheme:
    """Control lengths uniform on (0, max_length], angles uniform on (-pi, pi]."""

    max_length: float

    name = "uniform"

    def __post_init__(self):
        if not (np.isfinite(self.max_length) and self.max_length > 0.0):
            raise InvalidParameterError("max_length", self.max_length, "> 0")

    @classmethod
    def from_proposal(cls, proposal: StepDistribution, quantile: float = 0.999):
        return cls(max_length=proposal.quantile(quantile))


@dataclass(frozen=True)
class GridScheme:
    """Control endpoints on cell centres of a grid around the step's start."""

    resolution: float
    radius: float

    name = "grid"

    def __post_init__(self):
        if not (np.isfinite(self.resolution) and self.resolution > 0.0):
            raise InvalidParameterError("resolution", self.resolution, "> 0")
        if not (np.isfinite(self.radius) and self.radius > 0.0):
            raise InvalidParameterError("radius", self.radius, "> 0")


SamplingScheme = Union[ImportanceScheme, UniformStepsScheme, GridScheme]


def scheme_to_dict(scheme: SamplingScheme) -> dict:
    if isinstance(scheme, ImportanceScheme):
        d = {"name": "importance", "step_proposal": dist_to_dict(scheme.step_proposal)}
        if scheme.turn_proposal is not None:
            d["turn_proposal"] = dist_to_dict(scheme.turn_proposal)
        return d
    if isinstance(scheme, UniformStepsScheme):
        return {"name": "uniform", "max_length": scheme.max_length}
    return {"name": "grid", "resolution": scheme.resolution, "radius": scheme.radius}


def scheme_from_dict(d: dict) -> SamplingScheme:
    name = d["name"]
    if name == "importance":
        turn = d.get("turn_proposal")
        return ImportanceScheme(
            step_proposal=dist_from_dict(d["step_proposal"]),
            turn_proposal=None if turn is None else dist_from_dict(turn),
        )
    if name == "uniform":
        return UniformStepsScheme(max_length=d["max_length"])
    if name == "grid":
        return GridScheme(resolution=d["resolution"], radius=d["radius"])
    raise ValueError(f"unknown sampling scheme {name!r}")


def dist_to_dict(dist) -> dict:
    d = {"family": dist.family}
    if isinstance(dist, Exponential):
        d["rate"] = dist.rate
    elif isinstance(dist, Gamma):
        d.update(shape=dist.shape, rate=dist.rate)
    elif isinstance(dist, LogNormal):
        d.update(log_mean=dist.log_mean, log_var=dist.log_var)
    elif isinstance(dist, VonMises):
        d["concentration"] = dist.concentration
    elif isinstance(dist, UniformTurn):
        pass
    else:
        raise TypeError(f"unknown distribution {dist!r}")
    return d


def dist_from_dict(d: dict):
    family = d["family"]
    if family == "exponential":
        return Exponential(rate=d["rate"])
    if family == "gamma":
        return Gamma(shape=d["shape"], rate=d["rate"])
    if family == "lognormal":
        return LogNormal(log_mean=d["log_mean"], log_var=d["log_var"])
    if family == "vonmises":
        return VonMises(concentration=d["concentration"])
    if family == "uniform":
        return UniformTurn()
    raise ValueError(f"unknown distribution family {family!r}")


# ---------------------------------------------------------------------------
# coefficient <-> natural parameter maps
# ---------------------------------------------------------------------------


def _scheme_kind(scheme: SamplingScheme) -> str:
    if isinstance(scheme, ImportanceScheme):
        return "importance"
    if isinstance(scheme, UniformStepsScheme):
        return "uniform"
    if isinstance(scheme, GridScheme):
        return "grid"
    raise TypeError(f"unknown sampling scheme {scheme!r}")


def _step_shifts(spec: MovementKernelSpec, scheme: SamplingScheme) -> tuple:
    """Per-covariate shifts between natural parameters and coefficients.

    Returns the amounts subtracted from the natural-scale quantities to obtain
    the regression coefficients (the scheme columns of the parameter tables).
    """
    kind = _scheme_kind(scheme)
    if kind == "importance":
        prop = scheme.step_proposal
        if prop.family != spec.step_family:
            raise ValueError(
                "importance proposal family must match the kernel's step family "
                f"({prop.family!r} != {spec.step_family!r})"
            )
        if spec.step_family == "exponential":
            return (prop.rate,)
        if spec.step_family == "gamma":
            return (prop.shape, prop.rate)
        return (prop.log_mean / prop.log_var, 1.0 / (2.0 * prop.log_var))
    base = 1.0 if kind == "uniform" else 2.0
    if spec.step_family == "exponential":
        return (0.0,)
    if spec.step_family == "gamma":
        return (base, 0.0)
    return (base, 0.0)


def _turn_shift(spec: MovementKernelSpec, scheme: SamplingScheme) -> float:
    if (
        isinstance(scheme, ImportanceScheme)
        and scheme.turn_proposal is not None
        and spec.turn_family == "vonmises"
    ):
        return scheme.turn_proposal.concentration
    return 0.0


def natural_to_coef(
    spec: MovementKernelSpec,
    scheme: SamplingScheme,
    step_dist: StepDistribution,
    turn_dist: Optional[TurnDistribution] = None,
) -> np.ndarray:
    """Regression-scale movement coefficients implied by natural parameters."""
    if step_dist.family != spec.step_family:
        raise ValueError(f"step distribution family {step_dist.family!r} does not match spec")
    shifts = _step_shifts(spec, scheme)
    if spec.step_family == "exponential":
        theta = [step_dist.rate - shifts[0]]
    elif spec.step_family == "gamma":
        theta = [step_dist.shape - shifts[0], step_dist.rate - shifts[1]]
    else:
        theta = [
            step_dist.log_mean / step_dist.log_var - shifts[0],
            1.0 / (2.0 * step_dist.log_var) - shifts[1],
        ]
    if spec.turn_family == "vonmises":
        if not isinstance(turn_dist, VonMises):
            raise ValueError("a von Mises turn distribution is required by the kernel spec")
        theta.append(turn_dist.concentration - _turn_shift(spec, scheme))
    return np.asarray(theta, dtype=float)


def coef_to_natural(
    spec: MovementKernelSpec, scheme: SamplingScheme, theta
) -> tuple:
    """Natural distribution parameters recovered from movement coefficients.

    Exact inverse of :func:`natural_to_coef`; raises InvalidParameterError
    when the implied natural parameter leaves its domain.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (spec.n_covariates,):
        raise ValueError(
            f"expected {spec.n_covariates} movement coefficients, got {theta.shape}"
        )
    shifts = _step_shifts(spec, scheme)
    if spec.step_family == "exponential":
        step = Exponential(rate=theta[0] + shifts[0])
    elif spec.step_family == "gamma":
        step = Gamma(shape=theta[0] + shifts[0], rate=theta[1] + shifts[1])
    else:
        b = theta[1] + shifts[1]
        if not (np.isfinite(b) and b > 0.0):
            raise InvalidParameterError("log_var", b, "> 0 after back-transform")
        log_var = 1.0 / (2.0 * b)
        step = LogNormal(log_mean=(theta[0] + shifts[0]) * log_var, log_var=log_var)
    if spec.turn_family == "vonmises":
        turn = VonMises(concentration=theta[-1] + _turn_shift(spec, scheme))
    else:
        turn = UniformTurn()
    return step, turn
