"""Command-line entry points.

Subcommands: build-space, gen-dataset, register, evaluate,
pose-noise-eval, cross-register.  Validation reports every problem at
once and exits 2; runtime failures exit 1 with a structured message;
successful runs leave their declared outputs and exit 0.  Failed runs
never leave unmarked partial outputs: single-file outputs are written to
``<name>.partial`` and renamed only on success.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .completion import (
    cross_instance_correspondence,
    fit_latent,
    pixels_to_sparse_deltas,
    reconstruct_mesh,
)
from .cpd import CpdConfig, cpd_nonrigid
from .dataset import CategorySpec, build_category, densify_mesh, generate_dataset, target_delta
from .errors import MorphFitError, ValidationError
from .evaluation import (
    evaluate_instance,
    pose_noise_experiment,
    registration_error,
    report_to_csv,
    report_to_json,
)
from .geometry import (
    CameraView,
    quaternion_to_rotation,
    sample_mesh_surface,
    viewpoint_sphere,
    voxel_downsample,
)
from .imaging import rasterize_target, splat_position_image, zoom
from .io import read_ply, write_ply
from .oracle import OracleSample, OracleSpec, infer
from .shape_space import load_space, save_space, space_from_fields

DEFAULT_RESOLUTION = (256, 192)
# Horizontal field of view of roughly 50 degrees at the default width.
FOCAL_PER_WIDTH = 275.0 / 256.0


def _parse_resolution(text: str):
    try:
        w, h = text.lower().split("x")
        return (int(w), int(h))
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like 256x192, got {text!r}")


def _parse_floats(text: str):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _latent_arg(text: str):
    if text.startswith("@"):
        payload = json.loads(Path(text[1:]).read_text())
        return np.asarray(payload["latent"], dtype=np.float64)
    return np.asarray(_parse_floats(text), dtype=np.float64)


def _default_jobs() -> int:
    raw = os.environ.get("MORPHFIT_JOBS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="morphfit",
        description="Category-level deformation spaces, synthetic datasets, and completion.",
    )
    parser.add_argument("--seed", type=int, default=0, help="run seed for all stochastic steps")
    parser.add_argument(
        "--jobs", type=int, default=_default_jobs(),
        help="parallelism bound (1 = bitwise-reproducible; execution is currently sequential)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-space", help="register instances and build a shape space")
    p.add_argument("--canonical", required=True, help="canonical mesh (PLY)")
    p.add_argument("--instances", required=True, help="directory of instance PLY meshes")
    p.add_argument("--beta", type=float, default=2.0)
    p.add_argument("--lambda", dest="regularization", type=float, default=2.0)
    p.add_argument("--outlier-weight", type=float, default=0.0)
    p.add_argument("--latent", type=int, default=5)
    p.add_argument("--cloud-leaf", type=float, default=None, help="voxel size for cloud derivation (m)")
    p.add_argument("--dense-count", type=int, default=8192)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-dataset", help="generate the training corpus")
    p.add_argument("--space", required=True)
    p.add_argument("--canonical", required=True, help="canonical mesh (PLY), for rendering")
    p.add_argument("--models", required=True, help="directory of training instance PLY meshes")
    p.add_argument("--rhos", type=_parse_floats, default=[0.0, 0.25, 0.5, 0.75])
    p.add_argument("--views", type=int, default=74)
    p.add_argument("--view-radius", type=float, default=None, help="camera distance (m); default 4x canonical extent")
    p.add_argument("--res", type=_parse_resolution, default=DEFAULT_RESOLUTION)
    p.add_argument("--scale", type=float, default=1000.0, help="target export scale factor")
    p.add_argument("--split", type=float, default=0.9, help="train fraction for the split tag")
    p.add_argument("--splat-radius", type=int, default=1)
    p.add_argument("--lambda", dest="regularization", type=float, default=2.0)
    p.add_argument("--cloud-leaf", type=float, default=None)
    p.add_argument("--dense-count", type=int, default=8192)
    p.add_argument("--out", required=True)

    p = sub.add_parser("register", help="single-view completion of an observed mesh")
    p.add_argument("--space", required=True)
    p.add_argument("--canonical", required=True, help="canonical mesh (PLY)")
    p.add_argument("--observed", required=True, help="observed instance mesh (PLY)")
    p.add_argument("--pose", required=True, help="camera pose JSON (quaternion wxyz + translation)")
    p.add_argument("--oracle", default="gt", help="gt | noisy | external")
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--oracle-cmd", default="", help="command for the external oracle")
    p.add_argument("--res", type=_parse_resolution, default=DEFAULT_RESOLUTION)
    p.add_argument("--ridge", type=float, default=0.0)
    p.add_argument("--lambda", dest="regularization", type=float, default=2.0)
    p.add_argument("--splat-radius", type=int, default=1)
    p.add_argument("--cloud-leaf", type=float, default=None)
    p.add_argument("--out", required=True, help="reconstructed mesh (PLY)")

    for name, extra in (("evaluate", False), ("pose-noise-eval", True)):
        p = sub.add_parser(name, help="viewpoint sweep" + (" under pose noise" if extra else ""))
        p.add_argument("--space", required=True)
        p.add_argument("--canonical", required=True)
        p.add_argument("--instance", required=True, help="held-out instance mesh (PLY)")
        p.add_argument("--views", type=int, default=74)
        p.add_argument("--view-radius", type=float, default=None)
        p.add_argument("--oracle", default="gt")
        p.add_argument("--noise-sigma", type=float, default=0.0)
        p.add_argument("--oracle-cmd", default="")
        p.add_argument("--res", type=_parse_resolution, default=DEFAULT_RESOLUTION)
        p.add_argument("--ridge", type=float, default=0.0)
        p.add_argument("--lambda", dest="regularization", type=float, default=2.0)
        p.add_argument("--splat-radius", type=int, default=1)
        p.add_argument("--cloud-leaf", type=float, default=None)
        p.add_argument("--display-scale", type=float, default=1.0,
                       help="multiply reported errors (1e6 echoes micro-scaled tables)")
        p.add_argument("--out", required=True, help="CSV report path")
        p.add_argument("--json", default=None, help="optional JSON report path")
        if extra:
            p.add_argument("--noise-range", type=float, default=0.05)
            p.add_argument("--draws", type=int, default=5)

    p = sub.add_parser("cross-register", help="correspond two latent codes through the canonical model")
    p.add_argument("--space", required=True)
    p.add_argument("--latent-a", type=_latent_arg, required=True,
                   help="comma-separated floats or @completion.json")
    p.add_argument("--latent-b", type=_latent_arg, required=True)
    p.add_argument("--out", required=True, help="output prefix; writes <out>_a.ply and <out>_b.ply")
    return parser


# ---------------------------------------------------------------------------
# Validation: every violation reported, not just the first.

def validate_config(args) -> list[str]:
    problems: list[str] = []

    def check_file(attr, label):
        path = getattr(args, attr, None)
        if path is not None and not Path(path).is_file():
            problems.append(f"{label} {path!r} is not a readable file")

    def check_positive(attr, label):
        value = getattr(args, attr, None)
        if value is not None and not (np.isfinite(value) and value > 0):
            problems.append(f"{label} must be > 0 (kernel width and regularization invariants), got {value}")

    if args.jobs < 1:
        problems.append(f"--jobs must be >= 1, got {args.jobs}")

    if args.command == "build-space":
        check_file("canonical", "--canonical")
        check_positive("beta", "--beta")
        check_positive("regularization", "--lambda")
        if not (0.0 <= args.outlier_weight < 1.0):
            problems.append(f"--outlier-weight must be in [0, 1), got {args.outlier_weight}")
        if args.latent < 1:
            problems.append(f"--latent must be >= 1, got {args.latent}")
        instances = _list_meshes(args.instances)
        if instances is None:
            problems.append(f"--instances {args.instances!r} is not a directory")
        else:
            if len(instances) < 2:
                problems.append(
                    f"--instances holds {len(instances)} PLY meshes; shape-space construction needs >= 2"
                )
            elif args.latent > len(instances) - 1:
                problems.append(
                    f"--latent {args.latent} exceeds #instances - 1 = {len(instances) - 1}"
                )
    elif args.command == "gen-dataset":
        check_file("space", "--space")
        check_file("canonical", "--canonical")
        check_positive("scale", "--scale")
        check_positive("regularization", "--lambda")
        if _list_meshes(args.models) is None:
            problems.append(f"--models {args.models!r} is not a directory")
        elif not _list_meshes(args.models):
            problems.append(f"--models {args.models!r} contains no PLY meshes")
        for rho in args.rhos:
            if not (0.0 <= rho <= 1.0):
                problems.append(f"--rhos entries must be in [0, 1], got {rho}")
        if not args.rhos:
            problems.append("--rhos must list at least one value")
        if args.views < 1:
            problems.append(f"--views must be >= 1, got {args.views}")
        if not (0.0 < args.split <= 1.0):
            problems.append(f"--split must be in (0, 1], got {args.split}")
        if args.splat_radius < 0:
            problems.append(f"--splat-radius must be >= 0, got {args.splat_radius}")
    elif args.command == "register":
        check_file("space", "--space")
        check_file("canonical", "--canonical")
        check_file("observed", "--observed")
        check_file("pose", "--pose")
        check_positive("regularization", "--lambda")
        problems.extend(_oracle_problems(args))
        if args.ridge < 0:
            problems.append(f"--ridge must be >= 0, got {args.ridge}")
    elif args.command in ("evaluate", "pose-noise-eval"):
        check_file("space", "--space")
        check_file("canonical", "--canonical")
        check_file("instance", "--instance")
        check_positive("regularization", "--lambda")
        problems.extend(_oracle_problems(args))
        if args.views < 1:
            problems.append(f"--views must be >= 1, got {args.views}")
        if args.ridge < 0:
            problems.append(f"--ridge must be >= 0, got {args.ridge}")
        if args.command == "pose-noise-eval":
            if args.noise_range < 0:
                problems.append(f"--noise-range must be >= 0, got {args.noise_range}")
            if args.draws < 1:
                problems.append(f"--draws must be >= 1, got {args.draws}")
    elif args.command == "cross-register":
        check_file("space", "--space")
        if args.latent_a.shape != args.latent_b.shape:
            problems.append(
                f"latent dimensions differ: {args.latent_a.shape[0]} vs {args.latent_b.shape[0]}"
            )
    return problems


def _list_meshes(directory):
    path = Path(directory)
    if not path.is_dir():
        return None
    return sorted(path.glob("*.ply"))


def _oracle_problems(args) -> list[str]:
    problems = []
    if args.oracle not in ("gt", "noisy", "external"):
        problems.append(f"--oracle must be gt, noisy, or external, got {args.oracle!r}")
    if args.oracle == "external" and not args.oracle_cmd.strip():
        problems.append("--oracle external requires --oracle-cmd")
    if args.noise_sigma < 0:
        problems.append(f"--noise-sigma must be >= 0, got {args.noise_sigma}")
    return problems


def _oracle_spec(args) -> OracleSpec:
    kind = {"gt": "ground_truth", "noisy": "noisy", "external": "external"}[args.oracle]
    return OracleSpec(kind, noise_sigma=args.noise_sigma, command=args.oracle_cmd)


# ---------------------------------------------------------------------------
# Command bodies.

def _final_write(path, writer) -> None:
    """Write through a .partial name, renaming only on success."""
    path = Path(path)
    partial = Path(str(path) + ".partial")
    writer(partial)
    os.replace(partial, path)


def _load_camera(pose_path, resolution):
    payload = json.loads(Path(pose_path).read_text())
    try:
        rotation = quaternion_to_rotation(payload["quaternion"])
        translation = np.asarray(payload["translation"], dtype=np.float64)
    except KeyError as exc:
        raise ValidationError(f"pose file {pose_path} missing field {exc}") from exc
    resolution = tuple(payload.get("resolution", resolution))
    width = resolution[0]
    focal = tuple(payload.get("focal", (FOCAL_PER_WIDTH * width, FOCAL_PER_WIDTH * width)))
    principal = payload.get("principal_point")
    return CameraView(rotation, translation, focal=focal,
                      principal_point=principal, resolution=resolution)


def _views_for(args, canonical_mesh):
    radius = args.view_radius
    if radius is None:
        radius = 4.0 * float(np.linalg.norm(np.ptp(canonical_mesh.vertices, axis=0)))
    width = args.res[0]
    focal = (FOCAL_PER_WIDTH * width, FOCAL_PER_WIDTH * width)
    return viewpoint_sphere(args.views, radius, focal=focal, resolution=args.res)


def _mesh_cloud(mesh, leaf, seed, salt):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3, salt]))
    pts, _, _ = sample_mesh_surface(mesh, 8192, rng)
    if leaf is None:
        leaf = float(np.linalg.norm(np.ptp(mesh.vertices, axis=0))) / 16.0
    return voxel_downsample(pts, leaf)


def _cmd_build_space(args) -> int:
    canonical_mesh = read_ply(args.canonical)
    instance_paths = _list_meshes(args.instances)
    config = CpdConfig(
        beta=args.beta,
        regularization=args.regularization,
        outlier_weight=args.outlier_weight,
    )
    category = build_category(
        canonical_mesh,
        [read_ply(p) for p in instance_paths],
        config,
        cloud_leaf=args.cloud_leaf,
        dense_count=args.dense_count,
        seed=args.seed,
    )
    space = space_from_fields(category.canonical_cloud, category.fields, args.beta, args.latent)
    _final_write(args.out, lambda p: save_space(space, p))
    print(
        f"built shape space: {len(category.fields)} instances, "
        f"{len(space.canonical)} canonical points, latent dim {space.latent_dim} -> {args.out}"
    )
    return 0


def _cmd_gen_dataset(args) -> int:
    space = load_space(args.space)
    canonical_mesh = read_ply(args.canonical)
    meshes = [read_ply(p) for p in _list_meshes(args.models)]
    config = CpdConfig(beta=space.beta, regularization=args.regularization)
    clouds = tuple(
        _mesh_cloud(mesh, args.cloud_leaf, args.seed, index + 1)
        for index, mesh in enumerate(meshes)
    )
    fields = tuple(
        cpd_nonrigid(cloud, space.canonical, config).field for cloud in clouds
    )
    category = CategorySpec(canonical_mesh, space.canonical, tuple(meshes), clouds, fields)
    views = _views_for(args, canonical_mesh)
    records = generate_dataset(
        category, views, args.rhos, args.out,
        zoom_resolution=args.res, export_scale=args.scale, seed=args.seed,
        split_fraction=args.split, splat_radius=args.splat_radius,
    )
    ok = sum(1 for r in records if r.status == "ok")
    print(f"dataset: {ok}/{len(records)} samples exported to {args.out}")
    return 0


def _cmd_register(args) -> int:
    space = load_space(args.space)
    canonical_mesh = read_ply(args.canonical)
    observed_mesh = read_ply(args.observed)
    view = _load_camera(args.pose, args.res)
    oracle_spec = _oracle_spec(args)
    config = CpdConfig(beta=space.beta, regularization=args.regularization)

    distance = float(np.linalg.norm(view.position))
    canonical_dense, _, _ = densify_mesh(
        canonical_mesh, distance, view.focal,
        rng=np.random.default_rng(np.random.SeedSequence([args.seed, 8, 0])),
    )
    observed_dense, _, _ = densify_mesh(
        observed_mesh, distance, view.focal,
        rng=np.random.default_rng(np.random.SeedSequence([args.seed, 8, 1])),
    )
    observed_cloud = _mesh_cloud(observed_mesh, args.cloud_leaf, args.seed, 9)
    if oracle_spec.kind == "external":
        # The child process predicts on its own; the target slot only
        # carries the mask and scale.
        delta_true = np.zeros((len(space.canonical), 3))
    else:
        field = cpd_nonrigid(observed_cloud, space.canonical, config).field
        delta_true = target_delta(field, 0.0)

    observed_img = splat_position_image(observed_dense, view, args.splat_radius)
    canonical_img = splat_position_image(canonical_dense, view, args.splat_radius)
    zoomed = zoom(observed_img, canonical_img, args.res)
    true_target = rasterize_target(zoomed.canonical, space.canonical, delta_true)
    sample = OracleSample(zoomed.observed, zoomed.canonical, true_target)
    predicted = infer(oracle_spec, sample, seed=args.seed)
    sparse = pixels_to_sparse_deltas(
        predicted.data, zoomed.canonical.data, predicted.mask, space.canonical
    )
    result = fit_latent(space, sparse, args.ridge)
    mesh_out = reconstruct_mesh(space, result, canonical_mesh)
    _final_write(args.out, lambda p: write_ply(p, mesh_out))
    latent_path = Path(str(args.out)).with_suffix(".latent.json")
    _final_write(latent_path, lambda p: p.write_text(json.dumps({
        "latent": result.latent.tolist(),
        "residual": result.residual,
        "degenerate": result.degenerate,
    }, indent=2) + "\n"))

    err_recon = registration_error(observed_cloud, mesh_out.vertices)
    err_canon = registration_error(observed_cloud, canonical_mesh.vertices)
    print(f"reconstruction error {err_recon:.3e} m^2 vs canonical baseline {err_canon:.3e} m^2")
    print(f"wrote {args.out} and {latent_path}")
    return 0


def _cmd_evaluate(args, with_noise: bool) -> int:
    space = load_space(args.space)
    canonical_mesh = read_ply(args.canonical)
    instance_mesh = read_ply(args.instance)
    instance_cloud = _mesh_cloud(instance_mesh, args.cloud_leaf, args.seed, 9)
    views = _views_for(args, canonical_mesh)
    oracle_spec = _oracle_spec(args)
    config = CpdConfig(beta=space.beta, regularization=args.regularization)
    label = Path(args.instance).stem
    common = dict(
        instance_label=label, zoom_resolution=args.res,
        splat_radius=args.splat_radius, seed=args.seed, ridge=args.ridge,
        cpd_config=config,
    )
    if with_noise:
        rows = pose_noise_experiment(
            space, instance_mesh, instance_cloud, views, oracle_spec,
            canonical_mesh, args.noise_range, draws=args.draws, **common,
        )
    else:
        rows = evaluate_instance(
            space, instance_mesh, instance_cloud, views, oracle_spec,
            canonical_mesh, **common,
        )
    _final_write(args.out, lambda p: report_to_csv(rows, p, args.display_scale))
    if args.json:
        _final_write(args.json, lambda p: report_to_json(rows, p, args.display_scale))
    for row in rows:
        flag = "  [FLAGGED: >5% views failed]" if row.flagged else ""
        print(
            f"{row.instance} {row.condition}: mean {row.mean * args.display_scale:.6g} "
            f"std {row.std * args.display_scale:.6g} over {row.n_views} views{flag}"
        )
    return 0


def _cmd_cross_register(args) -> int:
    space = load_space(args.space)
    cloud_a, cloud_b = cross_instance_correspondence(space, args.latent_a, args.latent_b)
    prefix = str(args.out)
    for suffix, cloud in (("_a.ply", cloud_a), ("_b.ply", cloud_b)):
        _final_write(prefix + suffix, lambda p, c=cloud: _write_cloud_ply(p, c.points))
    print(f"wrote {prefix}_a.ply and {prefix}_b.ply ({len(cloud_a)} corresponding points)")
    return 0


def _write_cloud_ply(path, points) -> None:
    lines = [
        "ply", "format ascii 1.0",
        f"element vertex {len(points)}",
        "property float x", "property float y", "property float z",
        "element face 0",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    lines += [f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}" for p in points]
    Path(path).write_text("\n".join(lines) + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    problems = validate_config(args)
    if problems:
        for problem in problems:
            print(f"error: {problem}", file=sys.stderr)
        return 2
    try:
        if args.command == "build-space":
            return _cmd_build_space(args)
        if args.command == "gen-dataset":
            return _cmd_gen_dataset(args)
        if args.command == "register":
            return _cmd_register(args)
        if args.command == "evaluate":
            return _cmd_evaluate(args, with_noise=False)
        if args.command == "pose-noise-eval":
            return _cmd_evaluate(args, with_noise=True)
        if args.command == "cross-register":
            return _cmd_cross_register(args)
        parser.error(f"unknown command {args.command!r}")
    except MorphFitError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
