"""Synthetic head phantoms: a brain ellipsoid with one hypodense lesion ellipsoid."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..core import LabelMask, LabelSchema, Spacing, Volume, aisd_schema
from ..errors import SpecError

Vec3 = tuple[float, float, float]  # (z, y, x) in mm


@dataclass(frozen=True)
class PhantomSpec:
    extents: tuple[int, int, int]  # (slices, rows, cols)
    spacing: Spacing
    brain_semi_axes: Vec3
    brain_center: Vec3
    lesion_semi_axes: Vec3
    lesion_center: Vec3
    lesion_offset_hu: float = -10.0
    background_hu: float = 0.0
    brain_hu: float = 35.0
    noise_std: float = 0.0
    seed: int = 0
    lesion_label: int = 1
    case_id: str = "phantom"

    def validate(self) -> None:
        if len(self.extents) != 3 or min(self.extents) < 1:
            raise SpecError(f"extents must be three positive ints, got {self.extents}")
        if self.noise_std < 0:
            raise SpecError("noise std must be >= 0")
        if min(self.brain_semi_axes) <= 0:
            raise SpecError(f"brain semi-axes must be positive, got {self.brain_semi_axes}")
        if min(self.lesion_semi_axes) <= 0:
            raise SpecError(f"lesion semi-axes must be positive, got {self.lesion_semi_axes}")
        if self.lesion_offset_hu >= 0:
            raise SpecError("lesion offset must be negative (hypodense)")
        if not _ellipsoid_inside(self.lesion_center, self.lesion_semi_axes, self.brain_center, self.brain_semi_axes):
            raise SpecError("lesion ellipsoid is not contained in the brain ellipsoid")


def _sphere_points(n: int = 40000) -> np.ndarray:
    # Fibonacci lattice, near-uniform on the unit sphere
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5**0.5) * i
    return np.stack([np.cos(phi), np.sin(phi) * np.sin(theta), np.sin(phi) * np.cos(theta)], axis=1)


def _ellipsoid_inside(c_in, r_in, c_out, r_out) -> bool:
    """Whether ellipsoid (c_in, r_in) lies inside (c_out, r_out); both axis-aligned.

    Samples the inner surface densely in the outer ellipsoid's unit-ball frame.
    """
    c_in, r_in, c_out, r_out = map(lambda v: np.asarray(v, dtype=np.float64), (c_in, r_in, c_out, r_out))
    surface = c_in + _sphere_points() * r_in
    q = ((surface - c_out) / r_out) ** 2
    return bool(q.sum(axis=1).max() <= 1.0)


def ellipsoid_membership(extents, spacing: Spacing, center: Vec3, semi_axes: Vec3) -> np.ndarray:
    """Boolean grid: voxel centre (index * spacing) inside the ellipsoid."""
    s, r, c = extents
    z = np.arange(s) * spacing.dz
    y = np.arange(r) * spacing.dy
    x = np.arange(c) * spacing.dx
    q = (
        ((z - center[0]) / semi_axes[0])[:, None, None] ** 2
        + ((y - center[1]) / semi_axes[1])[None, :, None] ** 2
        + ((x - center[2]) / semi_axes[2])[None, None, :] ** 2
    )
    return q <= 1.0


def generate_phantom(spec: PhantomSpec, schema: Optional[LabelSchema] = None) -> tuple[Volume, LabelMask]:
    spec.validate()
    schema = schema or aisd_schema()
    if spec.lesion_label not in schema:
        raise SpecError(f"lesion label {spec.lesion_label} not in schema")
    brain = ellipsoid_membership(spec.extents, spec.spacing, spec.brain_center, spec.brain_semi_axes)
    lesion = ellipsoid_membership(spec.extents, spec.spacing, spec.lesion_center, spec.lesion_semi_axes)
    # containment is checked by surface sampling; keep the mask inside the brain regardless
    lesion &= brain

    img = np.full(spec.extents, spec.background_hu, dtype=np.float64)
    img[brain] = spec.brain_hu
    img[lesion] = spec.brain_hu + spec.lesion_offset_hu
    if spec.noise_std > 0:
        img += np.random.default_rng(spec.seed).normal(0.0, spec.noise_std, size=img.shape)

    mask = np.zeros(spec.extents, dtype=np.uint8)
    mask[lesion] = spec.lesion_label
    return Volume(img.astype(np.float32), spec.spacing, spec.case_id), LabelMask(mask, schema)


def random_phantom_spec(
    case_index: int,
    seed: int,
    slices: int = 3,
    size: int = 64,
    spacing: Spacing = Spacing(1.0, 1.0, 5.0),
    noise_std: float = 3.0,
    lesion_offset_hu: float = -15.0,
    background_hu: float = 0.0,
) -> PhantomSpec:
    """Draw one phantom case; the lesion always sits on the central slice."""
    rng = np.random.default_rng([seed, case_index])
    zc = (slices - 1) * spacing.dz / 2
    brain_semi = (zc + spacing.dz, 0.42 * size * spacing.dy, 0.36 * size * spacing.dx)
    brain_center = (zc, (size - 1) * spacing.dy / 2, (size - 1) * spacing.dx / 2)

    frac = rng.uniform(0.15, 0.28, size=2)
    lesion_semi = (0.6 * spacing.dz, frac[0] * brain_semi[1], frac[1] * brain_semi[2])
    radius, angle = 0.45 * np.sqrt(rng.uniform()), rng.uniform(0, 2 * np.pi)
    lesion_center = (
        zc,
        brain_center[1] + radius * np.sin(angle) * brain_semi[1],
        brain_center[2] + radius * np.cos(angle) * brain_semi[2],
    )
    return PhantomSpec(
        extents=(slices, size, size),
        spacing=spacing,
        brain_semi_axes=brain_semi,
        brain_center=brain_center,
        lesion_semi_axes=lesion_semi,
        lesion_center=lesion_center,
        lesion_offset_hu=lesion_offset_hu,
        background_hu=background_hu,
        noise_std=noise_std,
        seed=int(rng.integers(0, 2**31)),
        case_id=f"case_{case_index:03d}",
    )
