"""File formats: ASCII PLY meshes, raw float32 tensors, PGM masks.

Only the narrow subsets the pipeline needs are supported; anything else
is rejected loudly rather than guessed at.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .geometry import Mesh, PointCloud

__all__ = [
    "read_ply",
    "write_ply",
    "write_tensor",
    "read_tensor",
    "write_mask",
    "read_mask",
]


# ---------------------------------------------------------------------------
# PLY (ASCII subset): vertex x/y/z with optional uchar red/green/blue,
# triangular faces.

_VERTEX_PROPS = ("x", "y", "z")
_COLOR_PROPS = ("red", "green", "blue")


def read_ply(path) -> Mesh:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    lines = iter(text.splitlines())

    def next_line():
        for raw in lines:
            stripped = raw.strip()
            if stripped and not stripped.startswith("comment"):
                return stripped
        raise ValidationError(f"{path}: truncated header")

    if next_line() != "ply":
        raise ValidationError(f"{path}: not a PLY file")
    if next_line() != "format ascii 1.0":
        raise ValidationError(f"{path}: only 'format ascii 1.0' is supported")

    elements = []  # (name, count, [property names])
    line = next_line()
    while line != "end_header":
        parts = line.split()
        if parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise ValidationError(f"{path}: property before any element")
            if parts[1] == "list":
                elements[-1][2].append(("list", parts[-1]))
            else:
                elements[-1][2].append((parts[1], parts[2]))
        else:
            raise ValidationError(f"{path}: unsupported header line {line!r}")
        line = next_line()

    names = [e[0] for e in elements]
    if names[:1] != ["vertex"] or "face" not in names:
        raise ValidationError(f"{path}: expected vertex and face elements, got {names}")

    vertices = colors = faces = None
    for name, count, props in elements:
        rows = [next_line().split() for _ in range(count)]
        if name == "vertex":
            prop_names = [p[1] for p in props]
            if list(prop_names[:3]) != list(_VERTEX_PROPS):
                raise ValidationError(f"{path}: vertex properties must start with x y z")
            has_color = tuple(prop_names[3:6]) == _COLOR_PROPS
            data = np.array([[float(v) for v in row] for row in rows])
            if data.shape[1] != len(prop_names):
                raise ValidationError(f"{path}: vertex row width mismatch")
            vertices = data[:, :3]
            if has_color:
                colors = data[:, 3:6].astype(np.uint8)
        elif name == "face":
            face_rows = []
            for row in rows:
                n = int(row[0])
                if n != 3:
                    raise ValidationError(f"{path}: only triangular faces supported, got {n}-gon")
                if len(row) != n + 1:
                    raise ValidationError(f"{path}: malformed face row {row!r}")
                face_rows.append([int(v) for v in row[1:]])
            faces = np.array(face_rows, dtype=np.int64)
    return Mesh(vertices, faces, colors)


def write_ply(path, mesh: Mesh) -> None:
    path = Path(path)
    has_color = mesh.vertex_colors is not None
    header = ["ply", "format ascii 1.0", f"element vertex {len(mesh.vertices)}"]
    header += [f"property float {p}" for p in _VERTEX_PROPS]
    if has_color:
        header += [f"property uchar {p}" for p in _COLOR_PROPS]
    header += [
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    body = []
    for i, v in enumerate(mesh.vertices):
        row = f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}"
        if has_color:
            c = mesh.vertex_colors[i]
            row += f" {c[0]} {c[1]} {c[2]}"
        body.append(row)
    body += [f"3 {f[0]} {f[1]} {f[2]}" for f in mesh.faces]
    path.write_text("\n".join(header + body) + "\n")


# ---------------------------------------------------------------------------
# Raw tensors: little-endian float32 payload, JSON sidecar carrying shape.

def write_tensor(path, array: np.ndarray, semantic: str) -> None:
    """Write ``array`` as raw little-endian float32 plus a JSON sidecar.

    The sidecar lives at ``<path>.json`` and records shape, dtype, and a
    free-form semantic label so files on disk stay self-describing.
    """
    path = Path(path)
    array = np.asarray(array, dtype="<f4")
    path.write_bytes(np.ascontiguousarray(array).tobytes())
    sidecar = {"shape": list(array.shape), "dtype": "f32", "semantic": semantic}
    Path(str(path) + ".json").write_text(json.dumps(sidecar) + "\n")


def read_tensor(path) -> tuple[np.ndarray, dict]:
    """Read a raw tensor written by :func:`write_tensor`.

    Returns ``(array, sidecar_dict)``; the array is float32 in the shape
    the sidecar declares.
    """
    path = Path(path)
    sidecar_path = Path(str(path) + ".json")
    try:
        sidecar = json.loads(sidecar_path.read_text())
    except OSError as exc:
        raise ValidationError(f"missing tensor sidecar {sidecar_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"corrupt tensor sidecar {sidecar_path}: {exc}") from exc
    if sidecar.get("dtype") != "f32":
        raise ValidationError(f"{sidecar_path}: unsupported dtype {sidecar.get('dtype')!r}")
    shape = tuple(int(s) for s in sidecar["shape"])
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    expected = int(np.prod(shape)) if shape else 1
    if raw.size != expected:
        raise ValidationError(
            f"{path}: payload holds {raw.size} floats, sidecar shape {shape} "
            f"needs {expected}"
        )
    return raw.reshape(shape).copy(), sidecar


# ---------------------------------------------------------------------------
# PGM P5 masks: 0 background, 255 foreground.

def write_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValidationError(f"mask must be 2-D, got shape {mask.shape}")
    data = np.where(mask.astype(bool), 255, 0).astype(np.uint8)
    height, width = data.shape
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def read_mask(path) -> np.ndarray:
    """Read a P5 mask back as a boolean (height, width) array."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ValidationError(f"{path}: not a P5 PGM file")
    # Header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed; payload starts after the single whitespace
    # byte that follows maxval.
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValidationError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace separating header from payload
    width, height, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValidationError(f"{path}: expected maxval 255, got {maxval}")
    payload = raw[pos : pos + width * height]
    if len(payload) != width * height:
        raise ValidationError(f"{path}: payload truncated")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width) > 0


def cloud_from_mesh(mesh: Mesh) -> PointCloud:
    """Vertices of a mesh as a point cloud (topology dropped)."""
    return PointCloud(mesh.vertices)
