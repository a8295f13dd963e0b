"""Reconstruction error metric and the viewpoint-sweep experiments.

The metric is the mean, over query points, of the squared distance to the
nearest reference point.  It is deliberately asymmetric.  Experiments run
the render-zoom-oracle-complete pipeline per view, next to a raw
registration baseline and the undeformed canonical baseline, and under
optional translational pose noise on the believed canonical pose.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .completion import fit_latent, pixels_to_sparse_deltas
from .cpd import CpdConfig, cpd_nonrigid
from .dataset import densify_mesh, target_delta
from .errors import EvaluationError, MorphFitError, ValidationError
from .geometry import Mesh, PointCloud, apply_deformation, voxel_downsample
from .imaging import DeformationImage, PositionImage, rasterize_target, splat_position_image, zoom
from .oracle import OracleSample, OracleSpec, infer
from .shape_space import ShapeSpace

__all__ = [
    "COND_PIPELINE",
    "COND_RAW_CPD",
    "COND_CANONICAL",
    "EvalRow",
    "registration_error",
    "evaluate_instance",
    "pose_noise_experiment",
    "report_to_csv",
    "report_to_json",
]

COND_PIPELINE = "oracle-pipeline"
COND_RAW_CPD = "raw-CPD-baseline"
COND_CANONICAL = "canonical-baseline"
DEFAULT_CONDITIONS = (COND_PIPELINE, COND_RAW_CPD, COND_CANONICAL)
# Raw registration is pointless to repeat per pose draw (pose noise touches
# only the canonical render), so noise runs default to the cheap pair.
POSE_NOISE_CONDITIONS = (COND_PIPELINE, COND_CANONICAL)


def registration_error(query, reference) -> float:
    """Mean squared nearest-neighbor distance from query to reference (m^2).

    Not symmetric: every query point looks up its nearest reference point,
    unmatched reference points cost nothing.
    """
    q = query.points if isinstance(query, PointCloud) else np.asarray(query, np.float64)
    r = reference.points if isinstance(reference, PointCloud) else np.asarray(reference, np.float64)
    if q.size == 0 or r.size == 0:
        raise ValidationError("registration_error needs non-empty clouds")
    dist, _ = cKDTree(r).query(q)
    return float(np.mean(dist * dist))


@dataclass(frozen=True)
class EvalRow:
    """Per-(instance, condition) summary over views.

    ``errors`` holds the per-view values (m^2) of the views that
    succeeded; ``failed`` counts the views that did not.
    """

    instance: str
    condition: str
    errors: tuple
    failed: int = 0

    @property
    def n_views(self) -> int:
        return len(self.errors)

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors))

    @property
    def std(self) -> float:
        return float(np.std(self.errors))

    @property
    def flagged(self) -> bool:
        total = self.failed + self.n_views
        return total > 0 and self.failed > 0.05 * total


def _median_spacing(points: np.ndarray) -> float:
    dist, _ = cKDTree(points).query(points, k=2)
    spacing = float(np.median(dist[:, 1]))
    return spacing if spacing > 0 else 1e-6


def _shifted_positions(image: PositionImage, offset: np.ndarray) -> PositionImage:
    if not offset.any():
        return image
    return PositionImage(
        np.where(image.mask[..., None], image.data - offset, 0.0), image.mask
    )


def _run_pipeline_view(
    space: ShapeSpace,
    canonical_dense: np.ndarray,
    observed_dense: np.ndarray,
    view,
    delta_true: np.ndarray,
    oracle_spec: OracleSpec,
    offset: np.ndarray,
    zoom_resolution,
    splat_radius: int,
    oracle_seed: int,
    ridge: float,
):
    """One view through render, zoom, oracle, completion.

    ``offset`` displaces the believed canonical pose: the canonical model
    is rendered shifted, the pipeline maps its own render back through the
    believed pose, and the oracle reports the apparent offsets between the
    two renders (true deltas minus the pose error), which is what a
    consistent predictor would see.  Returns the reconstructed canonical
    cloud and the observed render (for the raw-registration baseline).
    """
    observed_img = splat_position_image(observed_dense, view, splat_radius)
    canonical_img = splat_position_image(canonical_dense + offset, view, splat_radius)
    zoomed = zoom(observed_img, canonical_img, zoom_resolution)

    believed = _shifted_positions(zoomed.canonical, offset)
    true_target = rasterize_target(believed, space.canonical, delta_true)
    mask = true_target.mask
    apparent = DeformationImage(
        np.where(mask[..., None], true_target.data - offset, 0.0), mask, 1.0
    )
    sample = OracleSample(zoomed.observed, zoomed.canonical, apparent)
    predicted = infer(oracle_spec, sample, seed=oracle_seed)

    sparse = pixels_to_sparse_deltas(
        predicted.data, believed.data, predicted.mask, space.canonical
    )
    result = fit_latent(space, sparse, ridge)
    reconstructed = apply_deformation(space.canonical, result.field)
    return reconstructed, observed_img


def _sweep(
    space,
    instance_cloud: PointCloud,
    canonical_dense,
    observed_dense,
    views,
    delta_true,
    oracle_spec,
    conditions,
    offsets,
    seed,
    zoom_resolution,
    splat_radius,
    ridge,
    cpd_config,
    instance_label,
):
    """Shared worker: offsets[d][v] is the pose offset for draw d, view v."""
    pipeline_errors, cpd_errors = [], []
    pipeline_failed = cpd_failed = 0
    leaf = _median_spacing(space.canonical.points)
    want_pipeline = COND_PIPELINE in conditions
    want_cpd = COND_RAW_CPD in conditions
    for draw_index, draw_offsets in enumerate(offsets):
        for view_index, view in enumerate(views):
            oracle_seed = int(
                np.random.default_rng(
                    np.random.SeedSequence([int(seed), 5, draw_index, view_index])
                ).integers(2**62)
            )
            offset = draw_offsets[view_index]
            observed_img = None
            if want_pipeline:
                try:
                    reconstructed, observed_img = _run_pipeline_view(
                        space, canonical_dense, observed_dense, view, delta_true,
                        oracle_spec, offset, zoom_resolution, splat_radius,
                        oracle_seed, ridge,
                    )
                    pipeline_errors.append(
                        registration_error(instance_cloud, reconstructed)
                    )
                except MorphFitError:
                    pipeline_failed += 1
            if want_cpd and draw_index == 0:
                # The observed render does not depend on the pose draw.
                try:
                    if observed_img is None:
                        observed_img = splat_position_image(
                            observed_dense, view, splat_radius
                        )
                    partial = voxel_downsample(observed_img.data[observed_img.mask], leaf)
                    moved = apply_deformation(
                        space.canonical, cpd_nonrigid(partial, space.canonical, cpd_config).field
                    )
                    cpd_errors.append(registration_error(instance_cloud, moved))
                except MorphFitError:
                    cpd_failed += 1

    rows = []
    n_cells = len(offsets) * len(views)
    for condition in conditions:
        if condition == COND_PIPELINE:
            rows.append(EvalRow(instance_label, condition, tuple(pipeline_errors), pipeline_failed))
        elif condition == COND_RAW_CPD:
            rows.append(EvalRow(instance_label, condition, tuple(cpd_errors), cpd_failed))
        elif condition == COND_CANONICAL:
            base = registration_error(instance_cloud, space.canonical)
            rows.append(EvalRow(instance_label, condition, (base,) * n_cells, 0))
        else:
            raise ValidationError(f"unknown condition {condition!r}")
    for row in rows:
        if row.condition != COND_CANONICAL and row.n_views == 0 and n_cells > 0:
            raise EvaluationError(
                f"every view failed for condition {row.condition!r}"
            )
    return rows


def _prepare(space, instance_mesh, instance_cloud, views, canonical_mesh, seed,
             cpd_config, densify_per_pixel, densify_max):
    if cpd_config is None:
        cpd_config = CpdConfig(beta=space.beta)
    views = list(views)
    if not views:
        raise ValidationError("need at least one view")
    distance = float(np.mean([np.linalg.norm(v.position) for v in views]))
    focal = views[0].focal
    canonical_dense, _, _ = densify_mesh(
        canonical_mesh, distance, focal, densify_per_pixel, densify_max,
        np.random.default_rng(np.random.SeedSequence([int(seed), 8, 0])),
    )
    observed_dense, _, _ = densify_mesh(
        instance_mesh, distance, focal, densify_per_pixel, densify_max,
        np.random.default_rng(np.random.SeedSequence([int(seed), 8, 1])),
    )
    # The full deformation of this instance, recovered once by registration
    # and reused for every view's ground-truth target.
    field = cpd_nonrigid(instance_cloud, space.canonical, cpd_config).field
    delta_true = target_delta(field, 0.0)
    return views, cpd_config, canonical_dense, observed_dense, delta_true


def evaluate_instance(
    space: ShapeSpace,
    instance_mesh: Mesh,
    instance_cloud: PointCloud,
    views,
    oracle_spec: OracleSpec,
    canonical_mesh: Mesh,
    *,
    instance_label: str = "instance",
    conditions=DEFAULT_CONDITIONS,
    zoom_resolution=(256, 192),
    splat_radius: int = 1,
    seed: int = 0,
    ridge: float = 0.0,
    cpd_config: CpdConfig | None = None,
    densify_per_pixel: float = 20.0,
    densify_max: int = 60000,
):
    """Viewpoint sweep of the full pipeline against the baselines.

    The instance must be held out of the space's construction for the
    numbers to mean anything; that discipline is the caller's.
    """
    views, cpd_config, canonical_dense, observed_dense, delta_true = _prepare(
        space, instance_mesh, instance_cloud, views, canonical_mesh, seed,
        cpd_config, densify_per_pixel, densify_max,
    )
    offsets = [[np.zeros(3)] * len(views)]
    return _sweep(
        space, instance_cloud, canonical_dense, observed_dense, views, delta_true,
        oracle_spec, tuple(conditions), offsets, seed, zoom_resolution,
        splat_radius, ridge, cpd_config, instance_label,
    )


def pose_noise_experiment(
    space: ShapeSpace,
    instance_mesh: Mesh,
    instance_cloud: PointCloud,
    views,
    oracle_spec: OracleSpec,
    canonical_mesh: Mesh,
    noise_range: float,
    *,
    draws: int = 5,
    instance_label: str = "instance",
    conditions=POSE_NOISE_CONDITIONS,
    zoom_resolution=(256, 192),
    splat_radius: int = 1,
    seed: int = 0,
    ridge: float = 0.0,
    cpd_config: CpdConfig | None = None,
    densify_per_pixel: float = 20.0,
    densify_max: int = 60000,
):
    """Pipeline sweep with a uniformly mistaken canonical pose.

    Per draw and view, a per-axis uniform translation in
    [-noise_range, noise_range] displaces the believed canonical pose;
    rows pool all draws.  noise_range = 0 reproduces evaluate_instance.
    """
    if noise_range < 0 or not np.isfinite(noise_range):
        raise ValidationError(f"noise_range must be >= 0, got {noise_range}")
    if draws < 1:
        raise ValidationError(f"draws must be >= 1, got {draws}")
    views, cpd_config, canonical_dense, observed_dense, delta_true = _prepare(
        space, instance_mesh, instance_cloud, views, canonical_mesh, seed,
        cpd_config, densify_per_pixel, densify_max,
    )
    offsets = []
    for draw_index in range(draws):
        per_view = []
        for view_index in range(len(views)):
            rng = np.random.default_rng(
                np.random.SeedSequence([int(seed), 4, draw_index, view_index])
            )
            per_view.append(
                rng.uniform(-noise_range, noise_range, 3) if noise_range > 0 else np.zeros(3)
            )
        offsets.append(per_view)
    return _sweep(
        space, instance_cloud, canonical_dense, observed_dense, views, delta_true,
        oracle_spec, tuple(conditions), offsets, seed, zoom_resolution,
        splat_radius, ridge, cpd_config, instance_label,
    )


def report_to_csv(rows, path, display_scale: float = 1.0) -> None:
    """Write rows as CSV; display_scale=1e6 echoes micro-scaled tables."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["instance", "condition", "n_views", "mean", "std"])
        for row in rows:
            writer.writerow([
                row.instance, row.condition, row.n_views,
                repr(row.mean * display_scale), repr(row.std * display_scale),
            ])


def report_to_json(rows, path, display_scale: float = 1.0) -> None:
    payload = [
        {
            "instance": row.instance,
            "condition": row.condition,
            "n_views": row.n_views,
            "failed_views": row.failed,
            "flagged": row.flagged,
            "mean": row.mean * display_scale,
            "std": row.std * display_scale,
            "per_view": [e * display_scale for e in row.errors],
        }
        for row in rows
    ]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
