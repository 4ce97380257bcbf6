"""Perturbation p of the service rate and its validated decomposition p = p+ - p-."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .environment import (
    AffineClipFunction,
    CorrelationKernel,
    EnvironmentModel,
    NegativePart,
    OuEnvironment,
    PositivePart,
    StateFunction,
    TableFunction,
)
from .errors import H1ViolationError, H2ViolationError, InstabilityError, SignPatternError
from .state.models import QueueParams

logger = logging.getLogger(__name__)

_FAR_SIGMAS = 80.0


@dataclass(frozen=True)
class Clipped(StateFunction):
    """base clipped to [-level, level]"""
    base: StateFunction
    level: float

    def __call__(self, x):
        return np.clip(self.base(x), -self.level, self.level)

    def describe(self) -> dict:
        return {**self.base.describe(), "clip": self.level}


@dataclass(frozen=True)
class ValidationReport:
    mu0: float          # mu - eps sup p-
    K: float            # 1 / (mu0 - lambda)
    eps_bound: float    # eps sup |p|


@dataclass(frozen=True)
class PerturbationSpec:
    p: StateFunction
    p_plus: StateFunction
    p_minus: StateFunction
    bound_M: float
    mean_p: float
    mean_p_plus: float
    mean_p_minus: float
    var_p: float
    sup_plus: float
    sup_minus: float
    soft_h1: bool = False

    @classmethod
    def build(cls, p: StateFunction, env: EnvironmentModel, bound_M: Optional[float] = None,
              soft_h1: bool = False) -> PerturbationSpec:
        """Check H1 on the reachable support of ``env`` and precompute moments"""
        values = np.asarray(p(env.support_grid()), dtype=float)
        if not np.all(np.isfinite(values)):
            raise H1ViolationError("perturbation is not finite on the environment support")
        sup_abs = float(np.abs(values).max())

        if isinstance(env, OuEnvironment) and _grows_beyond_support(p, env, sup_abs):
            if not soft_h1:
                raise H1ViolationError(
                    "perturbation is unbounded on the OU state space; clip it or enable soft_h1"
                )
            logger.warning(
                f"soft-H1 mode: perturbation validated on +/-{env.support_sigmas:g} sd only "
                f"and clipped at {sup_abs:.6g} beyond"
            )
            p = Clipped(p, sup_abs)

        if bound_M is not None:
            if sup_abs > bound_M * (1.0 + 1e-12):
                raise H1ViolationError(f"sup |p| = {sup_abs:.6g} exceeds the declared bound M = {bound_M:.6g}")
            m = float(bound_M)
        else:
            m = sup_abs
        if m == 0.0:
            m = 1.0                     # p vanishes; any positive dominating rate works

        p_plus, p_minus = PositivePart(p), NegativePart(p)
        return cls(
            p=p,
            p_plus=p_plus,
            p_minus=p_minus,
            bound_M=m,
            mean_p=env.expectation(p),
            mean_p_plus=env.expectation(p_plus),
            mean_p_minus=env.expectation(p_minus),
            var_p=max(env.variance(p), 0.0),
            sup_plus=max(float(values.max()), 0.0),
            sup_minus=max(float(-values.min()), 0.0),
            soft_h1=soft_h1,
        )

    @classmethod
    def table(cls, values, env: EnvironmentModel, bound_M: Optional[float] = None) -> PerturbationSpec:
        return cls.build(TableFunction(tuple(float(v) for v in values)), env, bound_M)

    @property
    def sign_pattern(self) -> str:
        if self.sup_minus == 0.0:
            return "nonneg"
        if self.sup_plus == 0.0:
            return "nonpos"
        return "mixed"

    @property
    def is_zero(self) -> bool:
        return self.sup_plus == 0.0 and self.sup_minus == 0.0

    @property
    def is_constant(self) -> bool:
        return self.var_p <= 1e-14 * max(self.mean_p ** 2, 1.0)

    def require_sign(self, side: str) -> None:
        if side not in ("nonneg", "nonpos"):
            raise SignPatternError(f"unknown sign side {side!r}")
        if self.is_zero:
            return
        if self.sign_pattern != side:
            raise SignPatternError(f"perturbation is {self.sign_pattern}, formula needs {side}")

    def describe(self) -> dict:
        return {
            "p": self.p.describe(), "bound_M": self.bound_M, "mean_p": self.mean_p,
            "mean_p_plus": self.mean_p_plus, "mean_p_minus": self.mean_p_minus,
            "var_p": self.var_p, "soft_h1": self.soft_h1,
        }


def _grows_beyond_support(p: StateFunction, env: OuEnvironment, sup_abs: float) -> bool:
    far = env.mean + np.array([-1.0, 1.0]) * _FAR_SIGMAS * env.sd
    return bool(np.any(np.abs(np.asarray(p(far), dtype=float)) > sup_abs * (1.0 + 1e-9) + 1e-12))


@dataclass(frozen=True)
class PerturbationKernels:
    """Analytic correlation kernels of p+/p- (and C_p) under one environment"""
    pp: CorrelationKernel       # E[p+(X0) p+(Xu)]
    pm: CorrelationKernel       # E[p+(X0) p-(Xu)]
    mp: CorrelationKernel       # E[p-(X0) p+(Xu)]
    mm: CorrelationKernel       # E[p-(X0) p-(Xu)]
    cov: CorrelationKernel      # C_p(u)

    @classmethod
    def build(cls, spec: PerturbationSpec, env: EnvironmentModel) -> PerturbationKernels:
        return cls(
            pp=env.kernel(spec.p_plus, spec.p_plus),
            pm=env.kernel(spec.p_plus, spec.p_minus),
            mp=env.kernel(spec.p_minus, spec.p_plus),
            mm=env.kernel(spec.p_minus, spec.p_minus),
            cov=env.covariance_kernel(spec.p),
        )


def validate(spec: PerturbationSpec, params: QueueParams, env: Optional[EnvironmentModel] = None) -> ValidationReport:
    """Check H2 and the reduced-capacity stability; returns mu0 and the bound K"""
    if env is not None:
        values = np.abs(np.asarray(spec.p(env.support_grid()), dtype=float))
        if values.max() > spec.bound_M * (1.0 + 1e-12):
            raise H1ViolationError("perturbation exceeds its bound on this environment")
    eps_bound = params.epsilon * max(spec.sup_plus, spec.sup_minus)
    if eps_bound >= params.mu:
        raise H2ViolationError(f"eps * sup|p| = {eps_bound:.6g} must be below mu = {params.mu:.6g}")
    mu0 = params.mu - params.epsilon * spec.sup_minus
    if mu0 <= params.lam:
        raise InstabilityError(f"reduced service rate mu0 = {mu0:.6g} does not exceed lambda = {params.lam:.6g}")
    return ValidationReport(mu0=mu0, K=1.0 / (mu0 - params.lam), eps_bound=eps_bound)


def constant_perturbation(value: float, env: EnvironmentModel) -> PerturbationSpec:
    """p = value on every state"""
    if isinstance(env, OuEnvironment):
        return PerturbationSpec.build(AffineClipFunction(0.0, value), env)
    return PerturbationSpec.table([value] * env.n_states, env)
