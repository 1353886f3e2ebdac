"""Per-correspondence registration costs over Gaussian voxels.

Implements a family of distribution-to-distribution metrics: plain ICP, NDT,
GICP, a Frobenius-normalized single-covariance metric (litamin), and the
symmetric-KL-derived pair metric with an optional covariance-shape term
(litamin2-icp, litamin2-icp-cov). The shape term is the trace residual
s = Tr(R Cp^-1 R^T Cq) + Tr(Cq^-1 R Cp R^T) - 6, which vanishes exactly when
the two covariances differ by the rotation alone.

These are scalar reference implementations; the optimizer evaluates the same
quantities batched in voxicp._kernels.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from voxicp.se3 import Pose
from voxicp.voxel import GaussianVoxel

_EYE3 = np.eye(3)


class SingularCovarianceError(ValueError):
    """A covariance failed Cholesky factorization (after any regularization)."""


class CostKind(enum.Enum):
    """Selectable per-correspondence cost formula."""

    STANDARD_ICP = "icp"
    NDT = "ndt"
    GICP = "gicp"
    LITAMIN = "litamin"
    LITAMIN2_ICP = "litamin2-icp"
    LITAMIN2_ICP_COV = "litamin2-icp-cov"

    @classmethod
    def from_string(cls, name: str) -> "CostKind":
        for kind in cls:
            if kind.value == name:
                return kind
        valid = ", ".join(k.value for k in cls)
        raise ValueError(f"unknown cost kind {name!r} (choose from: {valid})")


@dataclass(frozen=True)
class CostParams:
    """Cost configuration: regularizer and robust-weight scales."""

    kind: CostKind = CostKind.LITAMIN2_ICP_COV
    lam: float = 1e-6
    sigma_icp: float = 0.5
    sigma_cov: float = 3.0

    def __post_init__(self) -> None:
        if self.lam <= 0.0:
            raise ValueError("lam must be > 0")
        if self.sigma_icp <= 0.0 or self.sigma_cov <= 0.0:
            raise ValueError("sigma_icp and sigma_cov must be > 0")


@dataclass(frozen=True)
class Correspondence:
    """A matched (source, target) voxel pair; source is moved by the pose."""

    source: GaussianVoxel
    target: GaussianVoxel


@dataclass(frozen=True)
class CostEval:
    """Scalar cost with its ingredients exposed for inspection and tests."""

    value: float
    e_icp: float
    e_cov: float
    w_icp: float
    w_cov: float
    shape_residual: float


def _chol_or_raise(matrix: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError(
            "covariance is not positive definite"
        ) from exc


def _inverse_and_logdet(cov: np.ndarray, reg: float) -> tuple[np.ndarray, float]:
    m = np.asarray(cov, dtype=np.float64) + reg * _EYE3
    chol = _chol_or_raise(m)
    logdet = 2.0 * float(np.log(np.diag(chol)).sum())
    return np.linalg.inv(m), logdet


def kl_divergence(
    mu_p: np.ndarray,
    cov_p: np.ndarray,
    mu_q: np.ndarray,
    cov_q: np.ndarray,
    reg: float = 0.0,
) -> float:
    """Gaussian KL divergence in its doubled (proportional) form.

    Returns (mq-mp)^T Cq^-1 (mq-mp) + Tr(Cq^-1 Cp) - 3 + log(|Cq|/|Cp|),
    which is twice the textbook KL; zero iff the Gaussians coincide. With
    reg > 0 both covariances are loaded with reg*I first (symmetrically, so
    the zero-at-equality property survives regularization).
    """
    inv_q, logdet_q = _inverse_and_logdet(cov_q, reg)
    _, logdet_p = _inverse_and_logdet(cov_p, reg)
    delta = np.asarray(mu_q, dtype=np.float64) - np.asarray(mu_p, dtype=np.float64)
    cp = np.asarray(cov_p, dtype=np.float64) + reg * _EYE3
    return float(delta @ inv_q @ delta + np.trace(inv_q @ cp) - 3.0 + logdet_q - logdet_p)


def sym_kl(
    mu_p: np.ndarray,
    cov_p: np.ndarray,
    mu_q: np.ndarray,
    cov_q: np.ndarray,
    reg: float = 0.0,
) -> float:
    """Symmetrized Gaussian divergence.

    (mq-mp)^T (Cq+Cp)^-1 (mq-mp) + Tr(Cq^-1 Cp) + Tr(Cp^-1 Cq) - 6. The mean
    term fuses both covariances, so the expression is symmetric in (p, q) by
    construction and zero iff the Gaussians coincide.
    """
    mu_p = np.asarray(mu_p, dtype=np.float64)
    mu_q = np.asarray(mu_q, dtype=np.float64)
    cp = np.asarray(cov_p, dtype=np.float64) + reg * _EYE3
    cq = np.asarray(cov_q, dtype=np.float64) + reg * _EYE3
    inv_p, _ = _inverse_and_logdet(cov_p, reg)
    inv_q, _ = _inverse_and_logdet(cov_q, reg)
    fused = cp + cq
    chol = _chol_or_raise(fused)
    delta = mu_q - mu_p
    solved = np.linalg.solve(fused, delta)
    return float(delta @ solved + np.trace(inv_q @ cp) + np.trace(inv_p @ cq) - 6.0)


def fused_covariance(
    cov_p: np.ndarray, cov_q: np.ndarray, rotation: np.ndarray, lam: float = 1e-6
) -> np.ndarray:
    """Frobenius-normalized inverse of the pair covariance.

    C_qp = (Cq + R Cp R^T + lam I)^-1 / ||(Cq + R Cp R^T + lam I)^-1||_F.
    The result is SPD with unit Frobenius norm, so the induced quadratic form
    is scale-free across correspondences.
    """
    if lam <= 0.0:
        raise ValueError("lam must be > 0")
    rotation = np.asarray(rotation, dtype=np.float64)
    pooled = (
        np.asarray(cov_q, dtype=np.float64)
        + rotation @ np.asarray(cov_p, dtype=np.float64) @ rotation.T
        + lam * _EYE3
    )
    pooled = 0.5 * (pooled + pooled.T)
    _chol_or_raise(pooled)
    inv = np.linalg.inv(pooled)
    inv = 0.5 * (inv + inv.T)
    return inv / np.linalg.norm(inv, "fro")


def residual(corr: Correspondence, pose: Pose) -> np.ndarray:
    """Mean residual q - (R p + t)."""
    return corr.target.mean - pose.transform(corr.source.mean)


def e_icp(corr: Correspondence, pose: Pose, params: CostParams) -> float:
    """Pair-covariance-weighted squared mean residual (>= 0)."""
    c_qp = fused_covariance(corr.source.cov, corr.target.cov, pose.rotation, params.lam)
    r = residual(corr, pose)
    return float(r @ c_qp @ r)


def e_cov(corr: Correspondence, pose: Pose, reg: float = 0.0) -> tuple[float, float]:
    """Covariance-shape residual.

    Returns (s, s**2) with s = Tr(R Cp^-1 R^T Cq) + Tr(Cq^-1 R Cp R^T) - 6.
    s is zero exactly when Cq = R Cp R^T and positive otherwise for SPD
    inputs. With reg > 0 both covariances are loaded symmetrically, which
    preserves the exact zero. The unsquared s enters the summed objective;
    s**2 drives the shape weight.
    """
    rot = pose.rotation
    cp = np.asarray(corr.source.cov, dtype=np.float64) + reg * _EYE3
    cq = np.asarray(corr.target.cov, dtype=np.float64) + reg * _EYE3
    inv_p, _ = _inverse_and_logdet(corr.source.cov, reg)
    inv_q, _ = _inverse_and_logdet(corr.target.cov, reg)
    s = float(
        np.trace(rot @ inv_p @ rot.T @ cq) + np.trace(inv_q @ rot @ cp @ rot.T) - 6.0
    )
    return s, s * s


def weights(e_icp_val: float, e_cov_val: float, params: CostParams) -> tuple[float, float]:
    """Robust weights w = 1 - E/(E + sigma^2), in (0, 1], decreasing in E."""
    if e_icp_val < 0.0 or e_cov_val < 0.0:
        raise ValueError("error values must be >= 0")
    w_icp = 1.0 - e_icp_val / (e_icp_val + params.sigma_icp**2)
    w_cov = 1.0 - e_cov_val / (e_cov_val + params.sigma_cov**2)
    return float(w_icp), float(w_cov)


def cost(corr: Correspondence, pose: Pose, params: CostParams) -> CostEval:
    """Evaluate the configured cost for one correspondence at a pose.

    The litamin2 kinds follow the iteratively-reweighted convention: the
    weights (and the pair covariance) are computed from the supplied pose and
    treated as constants by the optimizer's derivatives.
    """
    kind = params.kind
    r = residual(corr, pose)
    rot = pose.rotation

    if kind is CostKind.STANDARD_ICP:
        value = float(r @ r)
        return CostEval(value, value, 0.0, 1.0, 1.0, 0.0)

    if kind is CostKind.NDT:
        inv_q, _ = _inverse_and_logdet(corr.target.cov, params.lam)
        value = float(r @ inv_q @ r)
        return CostEval(value, value, 0.0, 1.0, 1.0, 0.0)

    if kind is CostKind.GICP:
        pooled = (
            corr.target.cov + rot @ corr.source.cov @ rot.T + params.lam * _EYE3
        )
        _chol_or_raise(0.5 * (pooled + pooled.T))
        value = float(r @ np.linalg.solve(pooled, r))
        return CostEval(value, value, 0.0, 1.0, 1.0, 0.0)

    if kind is CostKind.LITAMIN:
        inv_q, _ = _inverse_and_logdet(corr.target.cov, params.lam)
        metric = inv_q / np.linalg.norm(inv_q, "fro")
        value = float(r @ metric @ r)
        return CostEval(value, value, 0.0, 1.0, 1.0, 0.0)

    icp_val = e_icp(corr, pose, params)
    if kind is CostKind.LITAMIN2_ICP:
        w_icp, _ = weights(icp_val, 0.0, params)
        return CostEval(w_icp * icp_val, icp_val, 0.0, w_icp, 1.0, 0.0)

    if kind is CostKind.LITAMIN2_ICP_COV:
        s, s_sq = e_cov(corr, pose, reg=params.lam)
        w_icp, w_cov = weights(icp_val, s_sq, params)
        value = w_icp * icp_val + w_cov * s
        return CostEval(value, icp_val, s_sq, w_icp, w_cov, s)

    raise ValueError(f"unhandled cost kind {kind}")
