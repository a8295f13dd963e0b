"""Non-rigid point set registration by coherent point drift.

The moving cloud is treated as a Gaussian mixture whose centroids drift
coherently: EM alternates soft correspondence (posteriors over centroid
assignments) with a kernel-regularized solve for per-anchor offset
weights.  The result is a DeformationField anchored at the moving cloud.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import SolverError, ValidationError
from .geometry import DeformationField, PointCloud, gaussian_kernel

__all__ = ["CpdConfig", "CpdResult", "cpd_nonrigid", "e_step"]


@dataclass(frozen=True)
class CpdConfig:
    """EM settings.

    ``beta`` is the kernel width of the recovered field, ``regularization``
    trades data fit against field smoothness, ``outlier_weight`` is the
    mixture mass reserved for a uniform clutter component.
    """

    beta: float = 2.0
    regularization: float = 2.0
    outlier_weight: float = 0.0
    max_iterations: int = 150
    tolerance: float = 1e-8

    def __post_init__(self):
        if not (np.isfinite(self.beta) and self.beta > 0):
            raise ValidationError(f"beta must be > 0, got {self.beta}")
        if not (np.isfinite(self.regularization) and self.regularization > 0):
            raise ValidationError(
                f"regularization must be > 0, got {self.regularization}"
            )
        if not (0.0 <= self.outlier_weight < 1.0):
            raise ValidationError(
                f"outlier_weight must be in [0, 1), got {self.outlier_weight}"
            )
        if self.max_iterations < 1:
            raise ValidationError(
                f"max_iterations must be >= 1, got {self.max_iterations}"
            )
        if not (np.isfinite(self.tolerance) and self.tolerance > 0):
            raise ValidationError(f"tolerance must be > 0, got {self.tolerance}")


@dataclass(frozen=True)
class CpdResult:
    field: DeformationField
    sigma2: float
    iterations: int
    converged: bool


def e_step(fixed, moved, sigma2: float, outlier_weight: float = 0.0) -> np.ndarray:
    """Posterior assignment probabilities of data points to moved centroids.

    Returns an (n_moved, n_fixed) matrix; column j holds the posterior of
    data point j over centroids, summing to 1 when ``outlier_weight`` is 0
    and to less otherwise (remaining mass goes to the clutter component).
    """
    if not (np.isfinite(sigma2) and sigma2 > 0):
        raise ValidationError(f"sigma2 must be > 0, got {sigma2}")
    if not (0.0 <= outlier_weight < 1.0):
        raise ValidationError(f"outlier_weight must be in [0, 1), got {outlier_weight}")
    x = fixed.points if isinstance(fixed, PointCloud) else np.asarray(fixed, float)
    t = moved.points if isinstance(moved, PointCloud) else np.asarray(moved, float)
    n_moved, n_fixed = t.shape[0], x.shape[0]
    log_resp = cdist(t, x, "sqeuclidean") / (-2.0 * sigma2)
    # Shift each column by its max so the softmax never overflows; the
    # clutter constant rides along in the same shifted frame.
    shift = log_resp.max(axis=0)
    numer = np.exp(log_resp - shift[None, :])
    denom = numer.sum(axis=0)
    if outlier_weight > 0.0:
        log_clutter = (
            1.5 * np.log(2.0 * np.pi * sigma2)
            + np.log(outlier_weight / (1.0 - outlier_weight))
            + np.log(n_moved / n_fixed)
        )
        denom = denom + np.exp(log_clutter - shift)
    np.maximum(denom, np.finfo(float).tiny, out=denom)
    return numer / denom[None, :]


def cpd_nonrigid(fixed, moving, config: CpdConfig = CpdConfig()) -> CpdResult:
    """Register ``moving`` onto ``fixed``, recovering a smooth warp.

    EM loop: soft-assign data points to the warped moving cloud, solve the
    regularized linear system for offset weights, update the mixture
    variance from the weighted residual, repeat until the relative variance
    change drops below tolerance or the iteration cap is hit.
    """
    x = fixed.points if isinstance(fixed, PointCloud) else PointCloud(fixed).points
    y = moving.points if isinstance(moving, PointCloud) else PointCloud(moving).points
    n_fixed, n_moving = x.shape[0], y.shape[0]

    kernel = gaussian_kernel(y, y, config.beta)
    sigma2 = cdist(y, x, "sqeuclidean").sum() / (3.0 * n_fixed * n_moving)
    if sigma2 <= 0.0:
        # All points coincide; nothing to estimate.
        weights = np.zeros((n_moving, 3))
        field = DeformationField(PointCloud(y), weights, config.beta)
        return CpdResult(field, 0.0, 0, True)

    weights = np.zeros((n_moving, 3))
    moved = y
    converged = False
    iteration = 0
    for iteration in range(1, config.max_iterations + 1):
        posterior = e_step(x, moved, sigma2, config.outlier_weight)
        mass_per_centroid = posterior.sum(axis=1)
        mass_per_point = posterior.sum(axis=0)
        total_mass = mass_per_centroid.sum()
        if not (total_mass > 0.0):
            raise SolverError("posterior mass vanished", iteration=iteration)
        weighted_targets = posterior @ x

        # (diag(m) G + reg*sigma2 I) W = P X - diag(m) Y: same solution as
        # the preconditioned textbook form wherever m > 0, and rows with
        # zero mass cleanly get W = 0 instead of a division by zero.
        system = mass_per_centroid[:, None] * kernel
        system[np.diag_indices_from(system)] += config.regularization * sigma2
        rhs = weighted_targets - mass_per_centroid[:, None] * y
        try:
            weights = np.linalg.solve(system, rhs)
        except np.linalg.LinAlgError as exc:
            raise SolverError(
                f"singular regularized system (duplicated moving points?): {exc}",
                iteration=iteration,
            ) from exc

        moved = y + kernel @ weights
        fit = (mass_per_point * np.einsum("ij,ij->i", x, x)).sum()
        cross = np.einsum("ij,ij->", weighted_targets, moved)
        spread = (mass_per_centroid * np.einsum("ij,ij->i", moved, moved)).sum()
        new_sigma2 = (fit - 2.0 * cross + spread) / (3.0 * total_mass)
        if new_sigma2 <= 0.0:
            new_sigma2 = config.tolerance / 10.0
        if abs(sigma2 - new_sigma2) / sigma2 < config.tolerance:
            sigma2 = new_sigma2
            converged = True
            break
        sigma2 = new_sigma2

    field = DeformationField(PointCloud(y), weights, config.beta)
    return CpdResult(field, float(sigma2), iteration, converged)
