"""Deformation-prediction oracles standing in for a trained network.

Given the four zoomed pipeline inputs, an oracle produces the per-pixel
deformation image the downstream completion consumes.  Three kinds:
exact ground truth, ground truth plus seeded noise, and an external
child process speaking a file-based protocol.
"""
from __future__ import annotations

import json
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import SampleRecord
from .errors import OracleError, ValidationError
from .imaging import DeformationImage, PositionImage
from .io import read_mask, read_tensor, write_tensor

__all__ = ["OracleSpec", "OracleSample", "load_sample", "infer"]

_KINDS = ("ground_truth", "noisy", "external")


@dataclass(frozen=True)
class OracleSpec:
    kind: str
    noise_sigma: float = 0.0
    command: str = ""

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValidationError(f"kind must be one of {_KINDS}, got {self.kind!r}")
        if self.noise_sigma < 0 or not np.isfinite(self.noise_sigma):
            raise ValidationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.kind == "external" and not self.command.strip():
            raise ValidationError("external oracle requires a non-empty command")


@dataclass(frozen=True)
class OracleSample:
    """The four zoomed inputs plus the true target, in memory."""

    observed: PositionImage
    canonical: PositionImage
    target: DeformationImage


def load_sample(record: SampleRecord) -> OracleSample:
    """Materialize an exported dataset sample for oracle inference."""
    if record.status != "ok":
        raise ValidationError(f"sample was skipped at generation: {record.reason}")
    obs_data, _ = read_tensor(record.paths["obs.pos.f32"])
    obs_mask = read_mask(record.paths["obs.mask.pgm"])
    can_data, _ = read_tensor(record.paths["canon.pos.f32"])
    can_mask = read_mask(record.paths["canon.mask.pgm"])
    target_data, _ = read_tensor(record.paths["target.f32"])
    # Targets are rasterized on the canonical render's foreground, so the
    # canonical mask is the target mask; a zero delta on foreground is a
    # valid measurement, not background.
    return OracleSample(
        observed=PositionImage(np.where(obs_mask[..., None], obs_data, 0.0), obs_mask),
        canonical=PositionImage(np.where(can_mask[..., None], can_data, 0.0), can_mask),
        target=DeformationImage(
            np.where(can_mask[..., None], target_data.astype(np.float64), 0.0),
            can_mask,
            record.export_scale,
        ),
    )


def infer(spec: OracleSpec, sample, seed: int = 0) -> DeformationImage:
    """Predict the per-pixel deformation image for one sample.

    Always returns values in meters with scale 1 and background exactly
    zero.  ``sample`` is an OracleSample or an exported SampleRecord.
    """
    if isinstance(sample, SampleRecord):
        sample = load_sample(sample)
    truth_meters = sample.target.in_meters()
    mask = sample.target.mask
    if spec.kind == "ground_truth":
        return DeformationImage(
            np.where(mask[..., None], truth_meters, 0.0), mask, 1.0
        )
    if spec.kind == "noisy":
        rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
        noise = rng.normal(0.0, spec.noise_sigma, truth_meters.shape) if spec.noise_sigma > 0 else 0.0
        data = np.where(mask[..., None], truth_meters + noise, 0.0)
        return DeformationImage(data, mask, 1.0)
    return _infer_external(spec, sample)


def _infer_external(spec: OracleSpec, sample: OracleSample) -> DeformationImage:
    height, width = sample.canonical.mask.shape
    scale = sample.target.scale
    with tempfile.TemporaryDirectory(prefix="oracle-") as tmp:
        tmp = Path(tmp)
        inputs = {
            "observed": "observed.f32",
            "observed_mask": "observed_mask.f32",
            "canonical": "canonical.f32",
            "canonical_mask": "canonical_mask.f32",
        }
        write_tensor(tmp / inputs["observed"], sample.observed.data, "observed position image (m)")
        write_tensor(tmp / inputs["observed_mask"], sample.observed.mask.astype(np.float32), "observed foreground mask")
        write_tensor(tmp / inputs["canonical"], sample.canonical.data, "canonical position image (m)")
        write_tensor(tmp / inputs["canonical_mask"], sample.canonical.mask.astype(np.float32), "canonical foreground mask")
        request = {
            "resolution": [width, height],
            "scale": scale,
            "paths": inputs,
            "output": "output.f32",
        }
        (tmp / "request.json").write_text(json.dumps(request) + "\n")
        argv = shlex.split(spec.command) + [str(tmp)]
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=600)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise OracleError(
                f"oracle command failed to run: {exc}",
                diagnostics={"argv": argv},
            ) from exc
        diagnostics = {
            "argv": argv,
            "returncode": proc.returncode,
            "stdout": proc.stdout[-4000:],
            "stderr": proc.stderr[-4000:],
        }
        if proc.returncode != 0:
            raise OracleError(
                f"oracle command exited with {proc.returncode}", diagnostics=diagnostics
            )
        try:
            output, _ = read_tensor(tmp / "output.f32")
        except ValidationError as exc:
            raise OracleError(f"oracle output unreadable: {exc}", diagnostics=diagnostics) from exc
        if output.shape != (height, width, 3):
            raise OracleError(
                f"oracle output shape {output.shape} != {(height, width, 3)}",
                diagnostics=diagnostics,
            )
        if not np.all(np.isfinite(output)):
            raise OracleError("oracle output contains non-finite values", diagnostics=diagnostics)
    mask = sample.target.mask
    # Protocol returns values at the request's scale; convert to meters and
    # force an exactly-zero background so occlusion logic stays intact.
    data = np.where(mask[..., None], output.astype(np.float64) / scale, 0.0)
    return DeformationImage(data, mask, 1.0)
