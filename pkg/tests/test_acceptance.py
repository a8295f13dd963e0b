"""Acceptance gate: the eight shipping criteria, one reported line each.

Each test prints (and records for the terminal summary) a single
PASS/FAIL line with the measured values at the stated tolerance.  Run
``pytest -s tests/test_acceptance.py`` to watch the lines live; a plain
``pytest`` run prints them in the end-of-run summary block.
"""
import functools
import time

import numpy as np
import pytest

from helpers import SyntheticCategory, icosphere, smooth_weights, sphere_cloud

from morphfit import (
    CategorySpec,
    PointCloud,
    CpdConfig,
    DeformationField,
    OracleSpec,
    SparseDeltas,
    apply_deformation,
    cpd_nonrigid,
    evaluate_instance,
    expand_kernel,
    fit_latent,
    flatten_offsets,
    gaussian_kernel,
    generate_dataset,
    latent_to_field,
    pose_noise_experiment,
    rasterize_target,
    read_manifest,
    registration_error,
    relative_residual,
    sample_count_formula,
    splat_position_image,
    viewpoint_sphere,
)
from morphfit.evaluation import COND_CANONICAL, COND_PIPELINE, COND_RAW_CPD

ACCEPTANCE_LINES: list = []
_SUITE_START = None

FAST = dict(densify_per_pixel=4.0, densify_max=15000, zoom_resolution=(96, 72))


def criterion(num, name):
    """Record exactly one PASS/FAIL line per criterion, then re-raise."""

    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            global _SUITE_START
            if _SUITE_START is None:
                _SUITE_START = time.perf_counter()
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                line = f"ACCEPTANCE {num} FAIL {name}: {exc}"
                ACCEPTANCE_LINES.append(line)
                print(line, flush=True)
                raise
            line = f"ACCEPTANCE {num} PASS {name}: {detail}"
            ACCEPTANCE_LINES.append(line)
            print(line, flush=True)

        return wrapper

    return decorate


@pytest.fixture(scope="module")
def gt_rows(category, eval_views):
    """Noise-free GT-oracle sweep shared by criteria 5 and 7."""
    mesh, cloud, _ = category.held_out()
    rows = evaluate_instance(
        category.space, mesh, cloud, eval_views, OracleSpec("ground_truth"),
        category.canonical_mesh, instance_label="held-out", seed=0, **FAST,
    )
    return {row.condition: row for row in rows}


@criterion(1, "CPD self-registration")
def test_criterion_1_cpd_self_registration():
    cloud = sphere_cloud(100, radius=1.0, seed=1)
    start = time.perf_counter()
    result = cpd_nonrigid(cloud, cloud, CpdConfig(beta=2.0, regularization=2.0))
    elapsed = time.perf_counter() - start
    weight_norm = float(np.abs(result.field.weights).max())
    error = registration_error(apply_deformation(cloud, result.field), cloud)
    assert weight_norm < 1e-6, f"max |W| {weight_norm:.3e} >= 1e-6"
    assert error < 1e-10, f"residual error {error:.3e} >= 1e-10"
    assert elapsed < 1.0, f"took {elapsed:.2f} s >= 1 s"
    return f"max |W| {weight_norm:.2e}, error {error:.2e}, {elapsed * 1000:.0f} ms"


@criterion(2, "CPD smooth-field recovery")
def test_criterion_2_cpd_recovery():
    template = sphere_cloud(200, radius=1.0, seed=6)
    truth = DeformationField(
        template, smooth_weights(template.points, 2.0, 0.1, seed=7), 2.0
    )
    data = apply_deformation(template, truth)
    start = time.perf_counter()
    result = cpd_nonrigid(data, template, CpdConfig(beta=2.0, regularization=2.0))
    elapsed = time.perf_counter() - start
    post = registration_error(apply_deformation(template, result.field), data)
    pre = registration_error(template, data)
    ratio = post / pre
    assert ratio <= 0.05, f"post/pre error ratio {ratio:.3f} > 0.05"
    assert elapsed < 10.0, f"took {elapsed:.2f} s >= 10 s"
    return f"post/pre error ratio {ratio:.4f}, {elapsed:.2f} s"


@criterion(3, "shape-space exactness on an affine family")
def test_criterion_3_shape_space_exactness(category):
    # Six training fields from the two-dimensional family, no registration
    # anywhere in the loop, latent dimension 2.
    worst = max(relative_residual(category.space, f) for f in category.fields)
    assert worst < 1e-8, f"worst per-field relative residual {worst:.3e} >= 1e-8"
    return f"6 fields, worst relative residual {worst:.2e}"


@criterion(4, "completion recovers in-span latents")
def test_criterion_4_completion(category):
    space = category.space
    x0 = np.random.default_rng(42).uniform(-1.0, 1.0, space.latent_dim)
    field = latent_to_field(space, x0)
    deltas = apply_deformation(space.canonical, field).points - space.canonical.points
    n = len(space.canonical)

    full = fit_latent(space, SparseDeltas(deltas, np.arange(n)))
    full_err = float(np.linalg.norm(full.latent - x0))

    half_idx = np.arange(0, n, 2)
    masked = np.zeros_like(deltas)
    masked[half_idx] = deltas[half_idx]
    half = fit_latent(space, SparseDeltas(masked, half_idx))
    half_rel = float(np.linalg.norm(half.latent - x0) / np.linalg.norm(x0))

    assert full_err < 1e-6, f"full-visibility |x*-x0| {full_err:.3e} >= 1e-6"
    assert half_rel < 0.05, f"50% occlusion relative error {half_rel:.3%} >= 5%"
    return f"full-vis |x*-x0| {full_err:.2e}, half-vis relative error {half_rel:.2e}"


@criterion(5, "end-to-end pipeline beats both baselines")
def test_criterion_5_end_to_end(gt_rows, eval_views):
    assert len(eval_views) >= 20
    pipeline = gt_rows[COND_PIPELINE]
    raw = gt_rows[COND_RAW_CPD]
    canonical = gt_rows[COND_CANONICAL]
    assert pipeline.failed == 0, f"{pipeline.failed} pipeline views failed"
    assert pipeline.mean < canonical.mean, (
        f"pipeline {pipeline.mean:.3e} not below canonical {canonical.mean:.3e}"
    )
    assert pipeline.mean < raw.mean, (
        f"pipeline {pipeline.mean:.3e} not below raw registration {raw.mean:.3e}"
    )
    return (
        f"over {pipeline.n_views} views: pipeline {pipeline.mean:.2e} "
        f"< canonical {canonical.mean:.2e}, < raw registration {raw.mean:.2e} (m^2)"
    )


@criterion(6, "dataset arithmetic and miniature manifests")
def test_criterion_6_dataset_arithmetic(tmp_path):
    expected = {12: 2664, 15: 3552, 14: 3256, 16: 3848}
    for size, count in expected.items():
        got = sample_count_formula(size, 4, 74)
        assert got == count, f"size {size}: formula gave {got}, expected {count}"
        assert got == (size - 3) * 4 * 74
    # The same formula, observed on generated corpora scaled down to
    # (size-3) instances x 1 interpolation level x 2 views.
    views = viewpoint_sphere(2, 0.6, focal=(68.75, 68.75), resolution=(64, 48))
    manifest_counts = {}
    for size in expected:
        cat = SyntheticCategory(n_instances=size - 3)
        out = tmp_path / f"size-{size}"
        records = generate_dataset(
            cat.category_spec(), views, [0.25], out, seed=size,
            densify_per_pixel=2.0, densify_max=8000, zoom_resolution=(64, 48),
        )
        header, parsed = read_manifest(out / "manifest.jsonl")
        assert header["records"] == len(parsed) == len(records)
        manifest_counts[size] = header["records"]
        want = sample_count_formula(size, 1, 2)
        assert header["records"] == want, (
            f"size {size}: manifest holds {header['records']}, expected {want}"
        )
    return (
        f"formula exact for {expected}; miniature manifests {manifest_counts}"
    )


@criterion(7, "pose noise degrades the pipeline")
def test_criterion_7_pose_noise(category, eval_views, gt_rows):
    mesh, cloud, _ = category.held_out()
    draws = 5
    noisy_rows = pose_noise_experiment(
        category.space, mesh, cloud, eval_views, OracleSpec("ground_truth"),
        category.canonical_mesh, 0.05, draws=draws,
        instance_label="held-out", seed=0, **FAST,
    )
    noisy = next(r for r in noisy_rows if r.condition == COND_PIPELINE)
    clean = gt_rows[COND_PIPELINE]
    assert len(eval_views) >= 20 and draws >= 5
    assert noisy.n_views + noisy.failed == draws * len(eval_views)
    assert noisy.mean >= clean.mean, (
        f"noisy mean {noisy.mean:.3e} below noise-free mean {clean.mean:.3e}"
    )
    return (
        f"+/-0.05 m over {draws} draws x {len(eval_views)} views: "
        f"mean {noisy.mean:.2e} >= noise-free {clean.mean:.2e} (m^2)"
    )


@criterion(8, "unit identities and suite runtime")
def test_criterion_8_unit_identities():
    # Kernel hand value: two points 2 m apart with width 2.
    k = gaussian_kernel([[0.0, 0.0, 0.0]], [[2.0, 0.0, 0.0]], 2.0)[0, 0]
    assert abs(k - np.exp(-0.5)) < 1e-12, f"kernel value {k!r}"

    # Error metric hand values.
    assert registration_error([(1.0, 0.0, 0.0)], [(0.0, 0.0, 0.0)]) == 1.0
    cloud = sphere_cloud(30, seed=3)
    assert registration_error(cloud, cloud) == 0.0
    assert registration_error(cloud.points[:5], cloud) == 0.0

    # Expansion commutes with flattening.
    rng = np.random.default_rng(0)
    kernel = rng.normal(size=(5, 5))
    weights = rng.normal(size=(5, 3))
    np.testing.assert_allclose(
        expand_kernel(kernel) @ flatten_offsets(weights),
        flatten_offsets(kernel @ weights), atol=1e-12,
    )

    # Rasterization reproduces constant and linear deformations.
    mesh = icosphere(2, radius=0.5)
    view = viewpoint_sphere(1, 2.0, focal=(70.0, 70.0), resolution=(64, 48))[0]
    image = splat_position_image(mesh.vertices, view, 1)
    cloud = PointCloud(mesh.vertices)
    anchors = cloud.points
    const = rasterize_target(image, cloud, np.tile([0.3, -0.1, 0.2], (len(anchors), 1)))
    np.testing.assert_allclose(
        const.data[const.mask], np.tile([0.3, -0.1, 0.2], (const.mask.sum(), 1)),
        atol=1e-9,
    )
    a = np.array([[0.1, 0.0, 0.02], [-0.03, 0.2, 0.0], [0.0, 0.05, 0.15]])
    b = np.array([0.01, -0.02, 0.03])
    linear = rasterize_target(image, cloud, anchors @ a.T + b)
    np.testing.assert_allclose(
        linear.data[linear.mask], image.data[linear.mask] @ a.T + b, atol=1e-6,
    )

    elapsed = time.perf_counter() - _SUITE_START
    assert elapsed < 60.0, f"acceptance suite took {elapsed:.1f} s >= 60 s"
    return f"hand values exact; acceptance suite {elapsed:.1f} s < 60 s"
