"""Low-dimensional category shape model over deformation fields.

Per-instance fields (each warping the canonical cloud onto one instance)
are flattened point-major to 3n-vectors; their mean and the leading
principal directions form an affine family ``w = basis @ x + mean`` that
maps a short latent vector to a full deformation field.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cpd import CpdConfig, cpd_nonrigid
from .errors import SpaceFileError, ValidationError
from .geometry import (
    DeformationField,
    PointCloud,
    flatten_offsets,
    unflatten_offsets,
)

__all__ = [
    "ShapeSpace",
    "build_shape_space",
    "space_from_fields",
    "latent_to_field",
    "project_field",
    "relative_residual",
    "save_space",
    "load_space",
]

_MAGIC = "MFSS1"


@dataclass(frozen=True)
class ShapeSpace:
    canonical: PointCloud
    beta: float
    mean: np.ndarray
    basis: np.ndarray
    latent_dim: int

    def __post_init__(self):
        n3 = 3 * len(self.canonical)
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        basis = np.asarray(self.basis, dtype=np.float64)
        if self.latent_dim < 1:
            raise ValidationError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if mean.shape != (n3,):
            raise ValidationError(f"mean length {mean.shape[0]} != 3n = {n3}")
        if basis.shape != (n3, self.latent_dim):
            raise ValidationError(
                f"basis shape {basis.shape} != ({n3}, {self.latent_dim})"
            )
        gram = basis.T @ basis
        if not np.allclose(gram, np.eye(self.latent_dim), atol=1e-8):
            raise ValidationError("basis columns are not orthonormal")
        if not (np.isfinite(self.beta) and self.beta > 0):
            raise ValidationError(f"beta must be > 0, got {self.beta}")
        if not np.all(np.isfinite(mean)):
            raise ValidationError("mean contains non-finite entries")
        mean.flags.writeable = False
        basis = np.ascontiguousarray(basis)
        basis.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "latent_dim", int(self.latent_dim))

    @property
    def n_points(self) -> int:
        return len(self.canonical)


def _weights_of(field) -> np.ndarray:
    if isinstance(field, DeformationField):
        return field.weights
    return np.asarray(field, dtype=np.float64)


def space_from_fields(canonical: PointCloud, fields, beta: float, latent_dim: int):
    """Principal-component space of already-known deformation fields.

    ``fields`` may be DeformationFields or bare (n, 3) weight matrices.
    This is the PCA half of :func:`build_shape_space`, exposed so spaces
    can be built from analytically known fields in tests and experiments.
    """
    stacked = np.stack([flatten_offsets(_weights_of(f)) for f in fields])
    count, n3 = stacked.shape
    if count < 2:
        raise ValidationError(f"need >= 2 instance fields, got {count}")
    if n3 != 3 * len(canonical):
        raise ValidationError(
            f"field length {n3} does not match canonical cloud ({3 * len(canonical)})"
        )
    limit = min(count - 1, n3)
    if latent_dim > limit:
        raise ValidationError(
            f"latent_dim {latent_dim} exceeds min(#instances - 1, 3n) = {limit}"
        )
    mean = stacked.mean(axis=0)
    centered = stacked - mean
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:latent_dim].T
    # Fix each column's sign so serialized spaces are run-reproducible.
    flip = basis[np.abs(basis).argmax(axis=0), np.arange(latent_dim)] < 0
    basis = np.where(flip[None, :], -basis, basis)
    return ShapeSpace(canonical, float(beta), mean, basis, int(latent_dim))


def build_shape_space(
    canonical: PointCloud,
    instances,
    config: CpdConfig,
    latent_dim: int,
):
    """Register every instance cloud against the canonical cloud, then PCA.

    Returns ``(space, fields)`` where ``fields[i]`` is the per-instance
    DeformationField recovered by registration (anchored at canonical).
    """
    instances = list(instances)
    if len(instances) < 2:
        raise ValidationError(f"need >= 2 instances, got {len(instances)}")
    fields = []
    for index, instance in enumerate(instances):
        try:
            result = cpd_nonrigid(instance, canonical, config)
        except Exception as exc:
            raise ValidationError(f"registration failed on instance {index}: {exc}") from exc
        fields.append(result.field)
    space = space_from_fields(canonical, fields, config.beta, latent_dim)
    return space, fields


def latent_to_field(space: ShapeSpace, latent) -> DeformationField:
    """Decode a latent vector to a full deformation field at the canonical anchors."""
    latent = np.asarray(latent, dtype=np.float64).reshape(-1)
    if latent.shape != (space.latent_dim,):
        raise ValidationError(
            f"latent has dimension {latent.shape[0]}, space expects {space.latent_dim}"
        )
    if not np.all(np.isfinite(latent)):
        raise ValidationError("latent contains non-finite entries")
    flat = space.basis @ latent + space.mean
    return DeformationField(space.canonical, unflatten_offsets(flat), space.beta)


def project_field(space: ShapeSpace, field: DeformationField) -> np.ndarray:
    """Latent coordinates of a field: closest point of the space to it."""
    if not np.array_equal(field.anchors.points, space.canonical.points):
        raise ValidationError("field is not anchored at the space's canonical cloud")
    return space.basis.T @ (flatten_offsets(field.weights) - space.mean)


def relative_residual(space: ShapeSpace, field, eps: float = 1e-12) -> float:
    """How far a field sits outside the space, relative to its centered size."""
    centered = flatten_offsets(_weights_of(field)) - space.mean
    off_span = centered - space.basis @ (space.basis.T @ centered)
    return float(np.linalg.norm(off_span) / max(np.linalg.norm(centered), eps))


# ---------------------------------------------------------------------------
# Serialization: one JSON header line, then raw little-endian float64 blocks
# for canonical points, mean, basis, in that order.  Blocks are f64 because
# the load(save(s)) == s round trip is bitwise and spaces are built in f64.

def save_space(space: ShapeSpace, path) -> None:
    header = {
        "magic": _MAGIC,
        "n": len(space.canonical),
        "latent_dim": space.latent_dim,
        "beta": space.beta,
        "flattening": "point-major",
        "dtype": "f64",
    }
    blocks = [
        np.ascontiguousarray(space.canonical.points, dtype="<f8").tobytes(),
        np.ascontiguousarray(space.mean, dtype="<f8").tobytes(),
        np.ascontiguousarray(space.basis, dtype="<f8").tobytes(),
    ]
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("ascii") + b"\n")
        for block in blocks:
            fh.write(block)


def load_space(path) -> ShapeSpace:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise SpaceFileError(f"cannot read shape-space file {path}: {exc}") from exc
    newline = raw.find(b"\n")
    if newline < 0:
        raise SpaceFileError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:newline].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SpaceFileError(f"{path}: corrupt header: {exc}") from exc
    if header.get("magic") != _MAGIC:
        raise SpaceFileError(
            f"{path}: bad magic {header.get('magic')!r}, expected {_MAGIC!r}"
        )
    if header.get("dtype") != "f64":
        raise SpaceFileError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    if header.get("flattening") != "point-major":
        raise SpaceFileError(
            f"{path}: unsupported flattening {header.get('flattening')!r}"
        )
    try:
        n = int(header["n"])
        latent_dim = int(header["latent_dim"])
        beta = float(header["beta"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SpaceFileError(f"{path}: malformed header fields: {exc}") from exc
    payload = raw[newline + 1 :]
    expected = 8 * (3 * n + 3 * n + 3 * n * latent_dim)
    if len(payload) != expected:
        raise SpaceFileError(
            f"{path}: payload is {len(payload)} bytes, header (n={n}, "
            f"l={latent_dim}) requires {expected}"
        )
    floats = np.frombuffer(payload, dtype="<f8")
    canonical = floats[: 3 * n].reshape(n, 3)
    mean = floats[3 * n : 6 * n]
    basis = floats[6 * n :].reshape(3 * n, latent_dim)
    try:
        return ShapeSpace(PointCloud(canonical), beta, mean.copy(), basis.copy(), latent_dim)
    except ValidationError as exc:
        raise SpaceFileError(f"{path}: invalid space content: {exc}") from exc
