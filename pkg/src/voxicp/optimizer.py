"""Newton refinement of a rigid pose over a fixed set of Gaussian pairs.

The objective is the sum over correspondences of a weighted quadratic point
term plus, for the richest cost kind, an unsquared shape residual. Robust
weights and metric matrices are re-evaluated once per outer iteration and
then held constant while the step is computed, so each iteration solves

    delta = -(H + eps I)^{-1} g,     pose <- exp(delta) o pose

with exact second derivatives of the frozen cost. There is no line search
and no trust region; the only damping is the fixed Hessian floor eps, which
escalates tenfold only when Cholesky factorization fails outright.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from . import _kernels
from .metrics import Correspondence, CostKind, CostParams
from .se3 import Pose, exp_map

_KIND_CODES = {
    CostKind.STANDARD_ICP: 0,
    CostKind.NDT: 1,
    CostKind.GICP: 2,
    CostKind.LITAMIN: 3,
    CostKind.LITAMIN2_ICP: 4,
    CostKind.LITAMIN2_ICP_COV: 5,
}

_MAX_ESCALATIONS = 32


class FactorizationError(RuntimeError):
    """Hessian could not be factorized even after regularization escalation."""


@dataclass(frozen=True)
class NewtonConfig:
    max_iterations: int = 30
    step_norm_tolerance: float = 1e-6
    hessian_regularization: float = 1e-9
    max_step_norm: float = 1.0

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        for name in ("step_norm_tolerance", "hessian_regularization", "max_step_norm"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")


@dataclass
class OptResult:
    pose: Pose
    iterations: int
    final_cost: float
    cost_trace: list[float] = field(default_factory=list)
    converged: bool = False


@dataclass(frozen=True)
class DerivativeReport:
    """Maximum relative deviation of analytic derivatives from finite differences."""

    kind: str
    n_correspondences: int
    fd_step: float
    grad_deviation: float
    hess_deviation: float


class Objective:
    """Correspondence arrays plus everything pose-independent, precomputed.

    Rows are stored in a canonical order (lexicographic on source then target
    means) so that the accumulated cost, gradient, and Hessian are bitwise
    identical regardless of the order correspondences were supplied in.
    """

    def __init__(self, correspondences: Sequence[Correspondence], params: CostParams):
        if len(correspondences) == 0:
            raise ValueError("objective needs at least one correspondence")
        mu_p = np.stack([c.source.mean for c in correspondences])
        cov_p = np.stack([c.source.cov for c in correspondences])
        mu_q = np.stack([c.target.mean for c in correspondences])
        cov_q = np.stack([c.target.cov for c in correspondences])
        self._setup(mu_p, cov_p, mu_q, cov_q, params)

    @classmethod
    def from_arrays(
        cls,
        source_means: np.ndarray,
        source_covs: np.ndarray,
        target_means: np.ndarray,
        target_covs: np.ndarray,
        params: CostParams,
    ) -> "Objective":
        obj = cls.__new__(cls)
        obj._setup(source_means, source_covs, target_means, target_covs, params)
        return obj

    def _setup(self, mu_p, cov_p, mu_q, cov_q, params: CostParams) -> None:
        mu_p = np.asarray(mu_p, dtype=np.float64)
        cov_p = np.asarray(cov_p, dtype=np.float64)
        mu_q = np.asarray(mu_q, dtype=np.float64)
        cov_q = np.asarray(cov_q, dtype=np.float64)
        n = mu_p.shape[0]
        if n == 0:
            raise ValueError("objective needs at least one correspondence")
        if mu_p.shape != (n, 3) or mu_q.shape != (n, 3):
            raise ValueError("means must have shape (n, 3)")
        if cov_p.shape != (n, 3, 3) or cov_q.shape != (n, 3, 3):
            raise ValueError("covariances must have shape (n, 3, 3)")
        for arr in (mu_p, cov_p, mu_q, cov_q):
            if not np.all(np.isfinite(arr)):
                raise ValueError("correspondence arrays contain non-finite values")

        order = np.lexsort(
            (mu_q[:, 2], mu_q[:, 1], mu_q[:, 0], mu_p[:, 2], mu_p[:, 1], mu_p[:, 0])
        )
        self.source_means = np.ascontiguousarray(mu_p[order])
        self.target_means = np.ascontiguousarray(mu_q[order])
        cov_p = np.ascontiguousarray(cov_p[order])
        cov_q = np.ascontiguousarray(cov_q[order])
        self.source_covs = 0.5 * (cov_p + cov_p.transpose(0, 2, 1))
        self.target_covs = 0.5 * (cov_q + cov_q.transpose(0, 2, 1))

        self.params = params
        self.kind_code = _KIND_CODES[params.kind]

        self._cov_p_reg = np.empty((n, 3, 3))
        self._cov_q_reg = np.empty((n, 3, 3))
        self._inv_p_reg = np.empty((n, 3, 3))
        self._inv_q_reg = np.empty((n, 3, 3))
        self._litamin_metric = np.empty((n, 3, 3))
        ok = _kernels.prepare_tables(
            self.kind_code,
            params.lam,
            self.source_covs,
            self.target_covs,
            self._cov_p_reg,
            self._cov_q_reg,
            self._inv_p_reg,
            self._inv_q_reg,
            self._litamin_metric,
        )
        if not ok:
            raise ValueError("singular covariance after regularization")

        self._metric = np.empty((n, 3, 3))
        self._w = np.empty(n)
        self._v = np.empty(n)

    @property
    def n_correspondences(self) -> int:
        return self.source_means.shape[0]

    def _freeze(self, pose: Pose) -> float:
        cost, ok = _kernels.freeze_coefficients(
            self.kind_code,
            self.params.lam,
            self.params.sigma_icp**2,
            self.params.sigma_cov**2,
            self.source_means,
            self.source_covs,
            self.target_means,
            self.target_covs,
            self._inv_p_reg,
            self._cov_p_reg,
            self._inv_q_reg,
            self._cov_q_reg,
            self._litamin_metric,
            pose.rotation,
            pose.translation,
            self._metric,
            self._w,
            self._v,
        )
        if not ok:
            raise ValueError(
                "degenerate correspondence: non-finite cost or non-positive "
                "pooled covariance determinant"
            )
        return float(cost)

    def _frozen_grad_hess(self, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
        grad = np.empty(6)
        hess = np.empty((6, 6))
        ok = _kernels.frozen_grad_hess(
            self.source_means,
            self.target_means,
            self._metric,
            self._w,
            self._v,
            self._inv_p_reg,
            self._cov_p_reg,
            self._cov_q_reg,
            self._inv_q_reg,
            pose.rotation,
            pose.translation,
            grad,
            hess,
        )
        if not ok:
            raise ValueError("non-finite derivatives")
        return grad, hess

    def _frozen_eval(self, pose: Pose) -> tuple[float, np.ndarray, np.ndarray]:
        """Freeze coefficients at `pose` and differentiate there, in one sweep.

        Bit-identical to _freeze followed by _frozen_grad_hess at the same
        pose; this is the per-iteration path of the Newton loop.
        """
        grad = np.empty(6)
        hess = np.empty((6, 6))
        cost, ok = _kernels.freeze_and_derivatives(
            self.kind_code,
            self.params.lam,
            self.params.sigma_icp**2,
            self.params.sigma_cov**2,
            self.source_means,
            self.source_covs,
            self.target_means,
            self.target_covs,
            self._inv_p_reg,
            self._cov_p_reg,
            self._inv_q_reg,
            self._cov_q_reg,
            self._litamin_metric,
            pose.rotation,
            pose.translation,
            self._metric,
            self._w,
            self._v,
            grad,
            hess,
        )
        if not ok:
            raise ValueError(
                "degenerate correspondence: non-finite cost or derivatives, "
                "or non-positive pooled covariance determinant"
            )
        return float(cost), grad, hess

    def _frozen_cost_at(self, pose: Pose) -> float:
        """Cost at `pose` with coefficients left as last frozen."""
        return float(
            _kernels.frozen_cost(
                self.source_means,
                self.target_means,
                self._metric,
                self._w,
                self._v,
                self._inv_p_reg,
                self._cov_p_reg,
                self._cov_q_reg,
                self._inv_q_reg,
                pose.rotation,
                pose.translation,
            )
        )


def total_cost(objective: Objective, pose: Pose) -> float:
    """Reweighted total cost at `pose` (coefficients evaluated there)."""
    return objective._freeze(pose)


def gradient_hessian(objective: Objective, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Gradient (6,) and Hessian (6, 6) at `pose`, coefficients frozen at `pose`.

    Twist order is [omega, nu]. The Hessian is exactly symmetric by
    construction. Raises ValueError when any correspondence produces
    non-finite derivatives.
    """
    objective._freeze(pose)
    return objective._frozen_grad_hess(pose)


def _solve_step(hess: np.ndarray, grad: np.ndarray, config: NewtonConfig) -> np.ndarray:
    eps = config.hessian_regularization
    eye = np.eye(6)
    for _ in range(_MAX_ESCALATIONS):
        try:
            factor = scipy.linalg.cho_factor(
                hess + eps * eye, lower=True, check_finite=False
            )
        except np.linalg.LinAlgError:
            eps *= 10.0
            continue
        return scipy.linalg.cho_solve(factor, -grad, check_finite=False)
    raise FactorizationError(
        f"Hessian factorization failed up to regularization {eps:.3e}"
    )


def newton_solve(
    objective: Objective, initial_pose: Pose, config: NewtonConfig | None = None
) -> OptResult:
    """Iterate full Newton steps from `initial_pose` until the step stalls.

    Each iteration re-freezes robust weights and metrics at the current pose,
    computes exact derivatives of the frozen cost, and applies the
    left-multiplied increment exp(delta). Steps longer than
    `config.max_step_norm` are scaled back; convergence is declared when the
    unclamped step norm drops below `config.step_norm_tolerance`.
    """
    cfg = config if config is not None else NewtonConfig()
    pose = initial_pose
    cost, grad, hess = objective._frozen_eval(pose)
    trace = [cost]
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iterations + 1):
        delta = _solve_step(hess, grad, cfg)
        step_norm = float(np.linalg.norm(delta))
        if step_norm > cfg.max_step_norm:
            delta = delta * (cfg.max_step_norm / step_norm)
        pose = (exp_map(delta) @ pose).orthonormalized()
        cost, grad, hess = objective._frozen_eval(pose)
        trace.append(cost)
        if step_norm < cfg.step_norm_tolerance:
            converged = True
            break
    return OptResult(
        pose=pose,
        iterations=iterations,
        final_cost=trace[-1],
        cost_trace=trace,
        converged=converged,
    )


def check_derivatives(
    objective: Objective, pose: Pose, fd_step: float = 1e-6
) -> DerivativeReport:
    """Compare analytic derivatives at `pose` against central differences.

    The gradient check differences the frozen cost directly. The Hessian
    check differences the analytic gradient of the frozen cost and
    symmetrizes the result: the raw difference picks up a commutator term
    from the curvature of the exponential coordinates, which symmetrization
    cancels exactly. Deterministic; no randomness involved.
    """
    if fd_step <= 0.0:
        raise ValueError("fd_step must be positive")
    objective._freeze(pose)
    grad, hess = objective._frozen_grad_hess(pose)

    def displaced(delta: np.ndarray) -> Pose:
        return exp_map(delta) @ pose

    grad_fd = np.empty(6)
    for i in range(6):
        step = np.zeros(6)
        step[i] = fd_step
        f_plus = objective._frozen_cost_at(displaced(step))
        f_minus = objective._frozen_cost_at(displaced(-step))
        grad_fd[i] = (f_plus - f_minus) / (2.0 * fd_step)

    # one order coarser than the gradient step keeps roundoff subdominant
    h = max(fd_step, 1e-6) * 10.0
    hess_fd = np.empty((6, 6))
    for i in range(6):
        step = np.zeros(6)
        step[i] = h
        g_plus, _ = objective._frozen_grad_hess(displaced(step))
        g_minus, _ = objective._frozen_grad_hess(displaced(-step))
        hess_fd[i] = (g_plus - g_minus) / (2.0 * h)
    hess_fd = 0.5 * (hess_fd + hess_fd.T)

    grad_dev = float(
        np.max(np.abs(grad - grad_fd)) / max(1.0, np.max(np.abs(grad_fd)))
    )
    hess_dev = float(
        np.max(np.abs(hess - hess_fd)) / max(1.0, np.max(np.abs(hess_fd)))
    )
    return DerivativeReport(
        kind=objective.params.kind.value,
        n_correspondences=objective.n_correspondences,
        fd_step=fd_step,
        grad_deviation=grad_dev,
        hess_deviation=hess_dev,
    )
