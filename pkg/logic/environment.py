"""Stationary Markov environments modulating the service rate.

Two models are provided: a finite continuous-time Markov chain and an
Ornstein-Uhlenbeck process. Both can be sampled stationarily, followed forward
along a path at increasing query times, and expose analytic correlation kernels
r(u) = E_nu[f(X(0)) g(X(u))] together with their first and second time integrals.
"""
from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from numpy.polynomial import hermite_e
from scipy import integrate, stats
from scipy.sparse import csgraph
from typing_extensions import TypeAlias

from config.config import QuadratureConfig
from .errors import DomainError, GeneratorError, ValidationError
from .random_stream import RandomStream

logger = logging.getLogger(__name__)

State: TypeAlias = float

_EVAL_CHUNK = 1024


# -- state functions ----------------------------------------------------------

class StateFunction(ABC):
    """Function of the environment state; vectorized over numpy arrays"""

    @abstractmethod
    def __call__(self, x): ...

    def describe(self) -> dict:
        return {"kind": type(self).__name__}


@dataclass(frozen=True)
class TableFunction(StateFunction):
    """Values indexed by the states of a finite chain"""
    values: tuple

    def __call__(self, x):
        table = np.asarray(self.values, dtype=float)
        return table[np.asarray(x, dtype=int)]

    def describe(self) -> dict:
        return {"kind": "table", "values": list(self.values)}


@dataclass(frozen=True)
class AffineClipFunction(StateFunction):
    """x -> intercept + slope * x, optionally clipped to [-clip, clip]"""
    slope: float
    intercept: float = 0.0
    clip: Optional[float] = None

    def __call__(self, x):
        value = self.intercept + self.slope * np.asarray(x, dtype=float)
        if self.clip is not None:
            value = np.clip(value, -self.clip, self.clip)
        return value

    def describe(self) -> dict:
        return {"kind": "affine", "slope": self.slope, "intercept": self.intercept, "clip": self.clip}


@dataclass(frozen=True)
class PositivePart(StateFunction):
    base: StateFunction

    def __call__(self, x):
        return np.maximum(self.base(x), 0.0)


@dataclass(frozen=True)
class NegativePart(StateFunction):
    base: StateFunction

    def __call__(self, x):
        return np.maximum(-self.base(x), 0.0)


# -- correlation kernels ------------------------------------------------------

class CorrelationKernel(ABC):
    """r(u), R(T) = int_0^T r and W(T) = int_0^T (T - v) r(v) dv, vectorized"""

    @abstractmethod
    def at(self, u): ...

    def integral(self, horizon):
        return self._quad(horizon, weighted=False)

    def weighted_integral(self, horizon):
        return self._quad(horizon, weighted=True)

    @property
    def limit(self) -> float:
        """r(u) as u grows"""
        return float(self.at(1e9))

    def _quad(self, horizon, weighted: bool, quad: QuadratureConfig = QuadratureConfig()):
        horizon = np.asarray(horizon, dtype=float)
        out = np.empty(horizon.shape)
        for idx, t in np.ndenumerate(horizon):
            if t <= 0:
                out[idx] = 0.0
                continue
            fn = (lambda v: (t - v) * float(self.at(v))) if weighted else (lambda v: float(self.at(v)))
            out[idx], _ = integrate.quad(fn, 0.0, t, epsabs=quad.quad_epsabs, limit=quad.quad_limit)
        return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ConstantKernel(CorrelationKernel):
    value: float

    def at(self, u):
        return self.value * np.ones_like(np.asarray(u, dtype=float)) if np.ndim(u) else self.value

    def integral(self, horizon):
        return self.value * np.asarray(horizon, dtype=float) if np.ndim(horizon) else self.value * horizon

    def weighted_integral(self, horizon):
        h = np.asarray(horizon, dtype=float)
        value = self.value * h * h / 2.0
        return float(value) if value.ndim == 0 else value

    @property
    def limit(self) -> float:
        return self.value


@dataclass(frozen=True, eq=False)
class ExponentialSumKernel(CorrelationKernel):
    """r(u) = constant + sum_n amplitude_n exp(-rate_n u)"""
    constant: float
    amplitudes: np.ndarray
    rates: np.ndarray

    def at(self, u):
        u = np.asarray(u, dtype=float)
        value = self.constant + np.exp(-np.multiply.outer(u, self.rates)) @ self.amplitudes
        return float(value) if value.ndim == 0 else value

    def integral(self, horizon):
        t = np.asarray(horizon, dtype=float)
        x = np.multiply.outer(t, self.rates)
        value = self.constant * t + (-np.expm1(-x) / self.rates) @ self.amplitudes
        return float(value) if value.ndim == 0 else value

    def weighted_integral(self, horizon):
        t = np.asarray(horizon, dtype=float)
        x = np.multiply.outer(t, self.rates)
        value = self.constant * t * t / 2.0 + ((x + np.expm1(-x)) / self.rates ** 2) @ self.amplitudes
        return float(value) if value.ndim == 0 else value

    @property
    def limit(self) -> float:
        return self.constant

    @classmethod
    def exponential(cls, amplitude: float, rate: float, constant: float = 0.0) -> ExponentialSumKernel:
        if rate <= 0:
            raise DomainError("decay rate must be positive")
        return cls(constant, np.array([amplitude], dtype=float), np.array([rate], dtype=float))


@dataclass(frozen=True)
class CenteredKernel(CorrelationKernel):
    """base kernel minus a constant, e.g. the autocovariance C_p from r_pp"""
    base: CorrelationKernel
    shift: float

    def at(self, u):
        return self.base.at(u) - self.shift

    def integral(self, horizon):
        return self.base.integral(horizon) - self.shift * np.asarray(horizon, dtype=float)

    def weighted_integral(self, horizon):
        h = np.asarray(horizon, dtype=float)
        return self.base.weighted_integral(horizon) - self.shift * h * h / 2.0

    @property
    def limit(self) -> float:
        return self.base.limit - self.shift


@dataclass(frozen=True, eq=False)
class UniformizedKernel(CorrelationKernel):
    """CTMC kernel written as a Poisson mixture of the uniformized chain.

    With c_k = (nu * f)^T P^k g converging to c_inf = E_nu[f] E_nu[g], every
    quantity is c_inf times a polynomial in u plus a finite Poisson series in the
    differences c_k - c_inf, integrated term by term.
    """
    coefficients: np.ndarray     # c_k - c_inf, k < K
    c_inf: float
    rate: float                  # uniformization rate times the time scale

    def _series(self, x, fn):
        x = np.asarray(x, dtype=float).ravel()
        out = np.empty(x.shape)
        k = np.arange(len(self.coefficients))
        for start in range(0, len(x), _EVAL_CHUNK):
            block = x[start:start + _EVAL_CHUNK]
            out[start:start + _EVAL_CHUNK] = fn(k[None, :], block[:, None]) @ self.coefficients
        return out

    def at(self, u):
        scalar = np.ndim(u) == 0
        x = self.rate * np.asarray(u, dtype=float)
        value = self.c_inf + self._series(x, lambda k, y: stats.poisson.pmf(k, y))
        return float(value[0]) if scalar else value.reshape(np.shape(u))

    def integral(self, horizon):
        scalar = np.ndim(horizon) == 0
        t = np.atleast_1d(np.asarray(horizon, dtype=float))
        x = self.rate * t
        value = self.c_inf * t + self._series(x, lambda k, y: stats.poisson.sf(k, y)) / self.rate
        return float(value[0]) if scalar else value.reshape(np.shape(horizon))

    def weighted_integral(self, horizon):
        scalar = np.ndim(horizon) == 0
        t = np.atleast_1d(np.asarray(horizon, dtype=float))
        x = self.rate * t

        def term(k, y):
            return y * stats.poisson.sf(k, y) - (k + 1) * stats.poisson.sf(k + 1, y)

        value = self.c_inf * t * t / 2.0 + self._series(x, term) / self.rate ** 2
        return float(value[0]) if scalar else value.reshape(np.shape(horizon))

    @property
    def limit(self) -> float:
        return self.c_inf


# -- path sessions -------------------------------------------------------------

class PathSession(ABC):
    """Forward evaluation of one environment path at non-decreasing times"""

    def __init__(self, x0):
        self.x0 = x0
        self._last_t = 0.0

    def _advance_check(self, t: float):
        if t < self._last_t:
            raise DomainError(f"path queried backwards in time ({t} < {self._last_t})")
        self._last_t = t

    @abstractmethod
    def value_at(self, t: float): ...


class CtmcPath(PathSession):

    def __init__(self, env: FiniteCtmcEnvironment, stream: RandomStream, x0: int):
        super().__init__(int(x0))
        self.env = env
        self.stream = stream
        self.state = int(x0)
        self._clock = 0.0             # internal (scaled) time of the current state entry
        self._next_jump = stream.exponential(env.exit_rates[self.state])
        self.jumps = 0

    def _jump(self):
        self._clock = self._next_jump
        self.state = self.stream.pick(self.env.jump_cdf[self.state])
        self._next_jump = self._clock + self.stream.exponential(self.env.exit_rates[self.state])
        self.jumps += 1

    def value_at(self, t: float) -> int:
        self._advance_check(t)
        tau = self.env.alpha * t
        while self._next_jump <= tau:
            self._jump()
        return self.state

    def integral(self, f: StateFunction, horizon: float) -> float:
        """Exact integral of f along the path over [current time, horizon]"""
        t = self._last_t
        state = self.value_at(t)
        tau_end = self.env.alpha * horizon
        total = 0.0
        while self._next_jump <= tau_end:
            jump_t = self._next_jump / self.env.alpha
            total += float(f(state)) * (jump_t - t)
            t = jump_t
            self._jump()
            state = self.state
        total += float(f(state)) * (horizon - t)
        self._advance_check(horizon)
        return total


class OuPath(PathSession):

    def __init__(self, env: OuEnvironment, stream: RandomStream, x0: float):
        super().__init__(float(x0))
        self.env = env
        self.stream = stream
        self.state = float(x0)

    def value_at(self, t: float) -> float:
        dt = t - self._last_t
        self._advance_check(t)
        if dt > 0:
            env = self.env
            decay = math.exp(-env.theta * env.alpha * dt)
            sd = math.sqrt(env.stationary_variance * (1.0 - decay * decay))
            self.state = env.mean + (self.state - env.mean) * decay + sd * self.stream.normal()
        return self.state

    def integral(self, f: StateFunction, horizon: float, step: Optional[float] = None) -> float:
        """Trapezoid rule on exactly sampled grid values"""
        step = step or 0.01 / (self.env.theta * self.env.alpha)
        start = self._last_t
        if horizon <= start:
            return 0.0
        n = max(int(math.ceil((horizon - start) / step)), 1)
        grid = np.linspace(start, horizon, n + 1)
        values = np.array([float(f(self.value_at(t))) for t in grid])
        return float(integrate.trapezoid(values, grid))


# -- models --------------------------------------------------------------------

class EnvironmentModel(ABC):
    """Stationary ergodic Markov environment with time scale alpha"""
    alpha: float

    @abstractmethod
    def sample_stationary(self, stream: RandomStream): ...

    @abstractmethod
    def path_session(self, stream: RandomStream, x0) -> PathSession: ...

    @abstractmethod
    def kernel(self, f: StateFunction, g: StateFunction) -> CorrelationKernel: ...

    @abstractmethod
    def expectation(self, f: StateFunction) -> float: ...

    @abstractmethod
    def spectral_gap(self) -> float: ...

    @abstractmethod
    def support_grid(self) -> np.ndarray:
        """States on which boundedness of a state function is checked"""

    @abstractmethod
    def describe(self) -> dict: ...

    def correlation_fg(self, f: StateFunction, g: StateFunction, u):
        return self.kernel(f, g).at(u)

    def variance(self, f: StateFunction) -> float:
        return float(self.kernel(f, f).at(0.0) - self.expectation(f) ** 2)

    def covariance_kernel(self, f: StateFunction) -> CorrelationKernel:
        """C_f(u) = E_nu[f(X(0)) f(X(u))] - E_nu[f]^2"""
        return CenteredKernel(self.kernel(f, f), self.expectation(f) ** 2)

    def time_scale(self, alpha: float) -> EnvironmentModel:
        """The accelerated environment X(alpha t)"""
        if not alpha > 0:
            raise DomainError(f"time scale must be positive, got {alpha}")
        return replace(self, alpha=self.alpha * alpha)

    def path_integral(self, f: StateFunction, horizon: float, stream: RandomStream, x0=None) -> float:
        x0 = self.sample_stationary(stream) if x0 is None else x0
        session = self.path_session(stream, x0)
        session.value_at(0.0)
        return session.integral(f, horizon)


@dataclass(frozen=True, eq=False)
class FiniteCtmcEnvironment(EnvironmentModel):
    generator: np.ndarray
    alpha: float = 1.0
    tol: float = QuadratureConfig.uniformization_tol
    stationary: np.ndarray = field(init=False, repr=False)
    exit_rates: np.ndarray = field(init=False, repr=False)
    jump_cdf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        q = np.array(self.generator, dtype=float)
        if q.ndim != 2 or q.shape[0] != q.shape[1] or q.shape[0] == 0:
            raise GeneratorError(f"generator must be a non-empty square matrix, got shape {q.shape}")
        n = q.shape[0]
        off = q - np.diag(np.diag(q))
        if np.any(off < 0):
            raise GeneratorError("off-diagonal rates must be non-negative")
        scale = max(float(np.abs(q).max()), 1.0)
        if np.any(np.abs(q.sum(axis=1)) > 1e-9 * scale):
            raise GeneratorError(f"generator rows must sum to zero, got {q.sum(axis=1).tolist()}")
        if n > 1:
            n_comp, _ = csgraph.connected_components(off > 0, directed=True, connection="strong")
            if n_comp != 1:
                raise GeneratorError("generator is not irreducible")
        if not self.alpha > 0:
            raise DomainError("time scale must be positive")

        system = np.vstack([q.T, np.ones(n)])
        rhs = np.zeros(n + 1)
        rhs[-1] = 1.0
        nu, *_ = np.linalg.lstsq(system, rhs, rcond=None)
        nu = np.clip(nu, 0.0, None)
        nu /= nu.sum()
        residual = float(np.abs(nu @ q).max())
        if residual > 1e-10 * scale:
            raise GeneratorError(f"stationary vector residual {residual:.2e} too large")

        exit_rates = -np.diag(q)
        with np.errstate(divide="ignore", invalid="ignore"):
            jumps = np.where(exit_rates[:, None] > 0, off / exit_rates[:, None], 0.0)
        object.__setattr__(self, "generator", q)
        object.__setattr__(self, "stationary", nu)
        object.__setattr__(self, "exit_rates", exit_rates)
        object.__setattr__(self, "jump_cdf", np.cumsum(jumps, axis=1))

    @classmethod
    def two_state(cls, rate_01: float, rate_10: Optional[float] = None, alpha: float = 1.0) -> FiniteCtmcEnvironment:
        rate_10 = rate_01 if rate_10 is None else rate_10
        return cls(np.array([[-rate_01, rate_01], [rate_10, -rate_10]]), alpha=alpha)

    @property
    def n_states(self) -> int:
        return self.generator.shape[0]

    @property
    def uniformization_rate(self) -> float:
        # slack above the largest exit rate keeps the uniformized chain aperiodic
        top = float(self.exit_rates.max())
        return 1.25 * top if top > 0 else 1.0

    def sample_stationary(self, stream: RandomStream) -> int:
        return stream.pick(np.cumsum(self.stationary))

    def path_session(self, stream: RandomStream, x0) -> CtmcPath:
        return CtmcPath(self, stream, int(x0))

    def _values(self, f: StateFunction) -> np.ndarray:
        return np.asarray(f(np.arange(self.n_states)), dtype=float)

    def expectation(self, f: StateFunction) -> float:
        return float(self.stationary @ self._values(f))

    def kernel(self, f: StateFunction, g: StateFunction, max_terms: int = 200_000) -> UniformizedKernel:
        fv, gv = self._values(f), self._values(g)
        q = self.uniformization_rate
        p_hat = np.eye(self.n_states) + self.generator / q
        weights = self.stationary * fv
        g_inf = float(self.stationary @ gv)
        c_inf = float(weights.sum() * g_inf)
        bound = float(np.abs(weights).sum())
        v = gv.copy()
        coeffs = []
        # sup |P^k g - E g| is non-increasing, so stopping at tol bounds every later term
        while len(coeffs) < max_terms:
            coeffs.append(float(weights @ v) - c_inf)
            if bound * float(np.abs(v - g_inf).max()) <= self.tol:
                break
            v = p_hat @ v
        else:
            logger.warning(f"uniformization series stopped at {max_terms} terms above tolerance")
        return UniformizedKernel(np.asarray(coeffs), c_inf, q * self.alpha)

    def transition_matrix(self, u: float) -> np.ndarray:
        """exp(alpha Q u) by uniformization"""
        q = self.uniformization_rate
        x = q * self.alpha * u
        p_hat = np.eye(self.n_states) + self.generator / q
        k_max = int(stats.poisson.isf(self.tol, x)) + 1 if x > 0 else 0
        out = np.zeros_like(p_hat)
        term = np.eye(self.n_states)
        for k in range(k_max + 1):
            out += stats.poisson.pmf(k, x) * term
            term = term @ p_hat
        return out

    def spectral_gap(self) -> float:
        eig = np.linalg.eigvals(self.generator)
        nonzero = eig[np.abs(eig) > 1e-12]
        if len(nonzero) == 0:
            return float("inf")
        return float(self.alpha * np.min(-nonzero.real))

    def support_grid(self) -> np.ndarray:
        return np.arange(self.n_states)

    def describe(self) -> dict:
        return {"kind": "ctmc", "generator": self.generator.tolist(), "time_scale": self.alpha,
                "stationary": self.stationary.tolist()}


@dataclass(frozen=True)
class OuEnvironment(EnvironmentModel):
    theta: float
    mean: float = 0.0
    stationary_variance: float = 1.0
    alpha: float = 1.0
    hermite_order: int = QuadratureConfig.hermite_order
    support_sigmas: float = 8.0

    def __post_init__(self):
        if not self.theta > 0:
            raise ValidationError("OU reversion rate must be positive")
        if not self.stationary_variance > 0:
            raise ValidationError("OU stationary variance must be positive")
        if not self.alpha > 0:
            raise DomainError("time scale must be positive")

    @property
    def sd(self) -> float:
        return math.sqrt(self.stationary_variance)

    def sample_stationary(self, stream: RandomStream) -> float:
        return self.mean + self.sd * stream.normal()

    def path_session(self, stream: RandomStream, x0) -> OuPath:
        return OuPath(self, stream, float(x0))

    def _hermite_coefficients(self, f: StateFunction) -> np.ndarray:
        """Coefficients of f(m + sd Z) on the orthonormal Hermite basis"""
        nodes, weights = hermite_e.hermegauss(2 * self.hermite_order)
        weights = weights / math.sqrt(2.0 * math.pi)
        values = np.asarray(f(self.mean + self.sd * nodes), dtype=float)
        basis = np.empty((self.hermite_order + 1, len(nodes)))
        basis[0] = 1.0
        if self.hermite_order > 0:
            basis[1] = nodes
        for n in range(1, self.hermite_order):
            basis[n + 1] = (nodes * basis[n] - math.sqrt(n) * basis[n - 1]) / math.sqrt(n + 1)
        return basis @ (weights * values)

    def kernel(self, f: StateFunction, g: StateFunction) -> ExponentialSumKernel:
        """Mehler expansion: r(u) = sum_n a_n b_n exp(-n theta alpha u)"""
        a, b = self._hermite_coefficients(f), self._hermite_coefficients(g)
        n = np.arange(1, len(a))
        return ExponentialSumKernel(
            constant=float(a[0] * b[0]),
            amplitudes=a[1:] * b[1:],
            rates=n * self.theta * self.alpha,
        )

    def expectation(self, f: StateFunction) -> float:
        return float(self._hermite_coefficients(f)[0])

    def spectral_gap(self) -> float:
        return self.theta * self.alpha

    def support_grid(self) -> np.ndarray:
        half = self.support_sigmas * self.sd
        return np.linspace(self.mean - half, self.mean + half, 4001)

    def describe(self) -> dict:
        return {"kind": "ou", "theta": self.theta, "mean": self.mean, "variance": self.stationary_variance,
                "time_scale": self.alpha}


def time_scale(env: EnvironmentModel, alpha: float) -> EnvironmentModel:
    return env.time_scale(alpha)
