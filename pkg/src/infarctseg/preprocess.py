"""CT fingerprinting, intensity normalisation, in-plane resampling and patch shaping.

Slices are treated as independent 2-D images: normalisation is voxelwise, and
resampling only ever touches the (row, col) plane.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .core import LabelMask, LabelSchema, Spacing, Volume
from .errors import ConfigurationError, ContractError, DataError
from .io.nifti import atomic_write, read_mask, read_volume, write_mask, write_volume

LOW_PERCENTILE = 0.5
HIGH_PERCENTILE = 99.5


@dataclass(frozen=True)
class DatasetFingerprint:
    p_low: float
    p_high: float
    mean: float
    std: float

    def __post_init__(self):
        if not self.p_low <= self.p_high:
            raise ContractError(f"fingerprint p_low {self.p_low} > p_high {self.p_high}")
        if not self.std >= 0:
            raise ContractError(f"fingerprint std must be >= 0, got {self.std}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "DatasetFingerprint":
        return cls(float(d["p_low"]), float(d["p_high"]), float(d["mean"]), float(d["std"]))


@dataclass(frozen=True)
class PreprocessConfig:
    target_spacing: tuple[float, float] = (1.0, 1.0)
    patch_size: tuple[int, int] = (512, 512)
    epsilon: float = 1e-8
    image_order: int = 3
    mask_order: int = 1
    mask_threshold: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "target_spacing", tuple(float(v) for v in self.target_spacing))
        object.__setattr__(self, "patch_size", tuple(int(v) for v in self.patch_size))
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be > 0")
        for order in (self.image_order, self.mask_order):
            if order not in (0, 1, 3):
                raise ConfigurationError(f"interpolation order must be 0, 1 or 3, got {order}")
        if min(self.target_spacing) <= 0 or min(self.patch_size) < 1:
            raise ConfigurationError("target spacing and patch size must be positive")


def compute_fingerprint(volumes: Iterable[Volume]) -> DatasetFingerprint:
    """Intensity statistics over every voxel of the given (training) volumes.

    Percentiles interpolate linearly between closest ranks; mean and std are
    taken after clipping to the percentile band.
    """
    parts = [np.asarray(v.data, dtype=np.float64).ravel() for v in volumes]
    population = np.concatenate(parts) if parts else np.empty(0)
    if population.size == 0:
        raise DataError("cannot fingerprint an empty voxel population")
    p_low, p_high = np.percentile(population, [LOW_PERCENTILE, HIGH_PERCENTILE], method="linear")
    clipped = np.clip(population, p_low, p_high)
    return DatasetFingerprint(float(p_low), float(p_high), float(clipped.mean()), float(clipped.std()))


def normalize_array(a: np.ndarray, fp: DatasetFingerprint, epsilon: float = 1e-8) -> np.ndarray:
    out = (np.clip(np.asarray(a, dtype=np.float64), fp.p_low, fp.p_high) - fp.mean) / (fp.std + epsilon)
    return out.astype(np.float32)


def ct_normalize(volume: Volume, fp: DatasetFingerprint, config: PreprocessConfig = PreprocessConfig()) -> Volume:
    return volume.with_data(normalize_array(volume.data, fp, config.epsilon))


def pad_value(fp: DatasetFingerprint, config: PreprocessConfig = PreprocessConfig()) -> float:
    """Normalised value of ``p_low``, the darkest intensity after normalisation."""
    return float(normalize_array(np.array([fp.p_low]), fp, config.epsilon)[0])


def resampled_shape(shape: Sequence[int], source: Sequence[float], target: Sequence[float]) -> tuple[int, int]:
    out = tuple(int(round(n * s / t)) for n, s, t in zip(shape, source, target))
    if min(out) < 1:
        raise ConfigurationError(f"resampling {tuple(shape)} from {tuple(source)} to {tuple(target)} mm gives empty extents {out}")
    return out


def _sample_grid(in_shape, out_shape) -> np.ndarray:
    # pixel-centre alignment: output pixel j covers input coordinate (j + 0.5) * n_in / n_out - 0.5
    axes = [(np.arange(o) + 0.5) * (i / o) - 0.5 for i, o in zip(in_shape, out_shape)]
    return np.stack(np.meshgrid(*axes, indexing="ij"))


_SPLINE_PAD = 16


def _interpolate(image: np.ndarray, out_shape, order: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    coords = _sample_grid(image.shape, out_shape)
    # samples outside the grid take the edge value
    for ax, n in enumerate(image.shape):
        np.clip(coords[ax], 0, n - 1, out=coords[ax])
    if order <= 1:
        return ndimage.map_coordinates(image, coords, order=order, mode="nearest")
    # Odd reflection continues linear trends, so the spline prefilter sees no
    # artificial kink at the border and linear fields are reproduced exactly.
    padded = np.pad(image, _SPLINE_PAD, mode="reflect", reflect_type="odd")
    return ndimage.map_coordinates(padded, coords + _SPLINE_PAD, order=order, mode="mirror")


def resample_image_slice(
    image: np.ndarray,
    source_spacing: Sequence[float],
    target_spacing: Sequence[float] = (1.0, 1.0),
    order: int = 3,
    out_shape: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Resample one (row, col) plane to ``target_spacing`` with a spline of ``order``."""
    if min(source_spacing) <= 0 or min(target_spacing) <= 0:
        raise ContractError("spacings must be positive")
    shape = tuple(out_shape) if out_shape is not None else resampled_shape(image.shape, source_spacing, target_spacing)
    if shape == image.shape:
        return np.array(image, dtype=np.float32)
    return _interpolate(image, shape, order).astype(np.float32)


def resample_mask_slice(
    mask: np.ndarray,
    source_spacing: Sequence[float],
    target_spacing: Sequence[float] = (1.0, 1.0),
    order: int = 1,
    threshold: float = 0.5,
    out_shape: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Resample a binary plane: interpolate the {0,1} field, then keep values >= threshold."""
    mask = np.asarray(mask)
    if mask.size and not np.isin(mask, (0, 1)).all():
        raise ContractError("resample_mask_slice expects a binary mask; use resample_labels_slice for multi-label")
    shape = tuple(out_shape) if out_shape is not None else resampled_shape(mask.shape, source_spacing, target_spacing)
    if shape == mask.shape:
        return mask.astype(np.uint8)
    field_ = _interpolate(mask.astype(np.float64), shape, order)
    return (field_ >= threshold).astype(np.uint8)


def resample_labels_slice(
    labels: np.ndarray,
    source_spacing: Sequence[float],
    target_spacing: Sequence[float] = (1.0, 1.0),
    order: int = 1,
    out_shape: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Multi-label resampling: interpolate each label's one-hot field and take the argmax."""
    labels = np.asarray(labels)
    shape = tuple(out_shape) if out_shape is not None else resampled_shape(labels.shape, source_spacing, target_spacing)
    if shape == labels.shape:
        return labels.astype(np.uint8)
    ids = np.unique(labels)
    fields = np.stack([_interpolate((labels == i).astype(np.float64), shape, order) for i in ids])
    return ids[np.argmax(fields, axis=0)].astype(np.uint8)


@dataclass(frozen=True)
class PatchRecord:
    """How an image was padded/cropped to the patch; enough to invert it."""

    original_shape: tuple[int, int]
    pad_before: tuple[int, int] = (0, 0)
    pad_after: tuple[int, int] = (0, 0)
    crop_start: tuple[int, int] = (0, 0)

    @property
    def is_identity(self) -> bool:
        return not any(self.pad_before + self.pad_after + self.crop_start)

    def to_json(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, d: dict) -> "PatchRecord":
        return cls(**{k: tuple(int(x) for x in v) for k, v in d.items()})


def shape_to_patch(image: np.ndarray, patch: Sequence[int] = (512, 512), pad_value: float = 0.0):
    """Centre-pad or centre-crop each axis to ``patch``; returns ``(patched, record)``."""
    image = np.asarray(image)
    before, after, start = [0, 0], [0, 0], [0, 0]
    for ax, (n, p) in enumerate(zip(image.shape, patch)):
        if n < p:
            before[ax] = (p - n) // 2
            after[ax] = p - n - before[ax]
        elif n > p:
            start[ax] = (n - p) // 2
    out = image[start[0] : start[0] + min(image.shape[0], patch[0]), start[1] : start[1] + min(image.shape[1], patch[1])]
    out = np.pad(out, list(zip(before, after)), mode="constant", constant_values=pad_value)
    return out, PatchRecord(tuple(image.shape), tuple(before), tuple(after), tuple(start))


def restore_from_patch(patched: np.ndarray, record: PatchRecord, fill=0) -> np.ndarray:
    """Inverse of :func:`shape_to_patch`; cropped-away regions are filled with ``fill``."""
    h, w = patched.shape
    core = patched[record.pad_before[0] : h - record.pad_after[0], record.pad_before[1] : w - record.pad_after[1]]
    out = np.full(record.original_shape, fill, dtype=patched.dtype)
    r0, c0 = record.crop_start
    out[r0 : r0 + core.shape[0], c0 : c0 + core.shape[1]] = core
    return out


@dataclass
class PreprocessedCase:
    case_id: str
    image: np.ndarray  # (slices, patch_h, patch_w) float32
    mask: Optional[np.ndarray]  # same extents, uint8 {0,1}
    sidecar: dict = field(default_factory=dict)


def preprocess_case(
    volume: Volume,
    mask: Optional[LabelMask],
    fp: DatasetFingerprint,
    config: PreprocessConfig = PreprocessConfig(),
) -> PreprocessedCase:
    """Normalise, resample each slice in-plane, and shape to the patch size.

    ``mask`` must already be binary (remap labels first).
    """
    if mask is not None:
        mask.check_pairs(volume)
    norm = normalize_array(volume.data, fp, config.epsilon)
    src = volume.spacing.in_plane
    tgt = config.target_spacing
    rs_shape = resampled_shape(volume.shape[1:], src, tgt)
    fill = pad_value(fp, config)

    images, masks, record = [], [], None
    for k in range(volume.shape[0]):
        img = resample_image_slice(norm[k], src, tgt, config.image_order, rs_shape)
        img, record = shape_to_patch(img, config.patch_size, fill)
        images.append(img)
        if mask is not None:
            m = resample_mask_slice(mask.data[k], src, tgt, config.mask_order, config.mask_threshold, rs_shape)
            masks.append(shape_to_patch(m, config.patch_size, 0)[0])

    sidecar = {
        "case_id": volume.case_id,
        "fingerprint": fp.to_json(),
        "original_spacing": {"dx": volume.spacing.dx, "dy": volume.spacing.dy, "dz": volume.spacing.dz},
        "original_shape": list(volume.shape),
        "resampled_shape": list(rs_shape),
        "patch_record": record.to_json(),
    }
    return PreprocessedCase(
        volume.case_id,
        np.stack(images).astype(np.float32),
        np.stack(masks).astype(np.uint8) if mask is not None else None,
        sidecar,
    )


def restore_prediction(pred: np.ndarray, sidecar: dict, order: int = 1, threshold: float = 0.5) -> np.ndarray:
    """Map a (slices, patch_h, patch_w) binary prediction back to original geometry."""
    record = PatchRecord.from_json(sidecar["patch_record"])
    sp = sidecar["original_spacing"]
    src = (sp["dy"], sp["dx"])
    orig_hw = tuple(sidecar["original_shape"][1:])
    rs_spacing = tuple(s * o / r for s, o, r in zip(src, orig_hw, sidecar["resampled_shape"]))
    out = []
    for k in range(pred.shape[0]):
        plane = restore_from_patch(np.asarray(pred[k], dtype=np.uint8), record, 0)
        out.append(resample_mask_slice(plane, rs_spacing, src, order, threshold, out_shape=orig_hw))
    return np.stack(out).astype(np.uint8)


def save_preprocessed(case: PreprocessedCase, directory, target_spacing: Sequence[float] = (1.0, 1.0)) -> None:
    """Persist as ``<id>_img.nii.gz``, ``<id>_seg.nii.gz`` and a ``<id>.json`` sidecar."""
    directory = Path(directory)
    dz = case.sidecar.get("original_spacing", {}).get("dz", 1.0)
    spacing = Spacing(dx=target_spacing[1], dy=target_spacing[0], dz=dz)
    write_volume(Volume(case.image, spacing, case.case_id), directory / f"{case.case_id}_img.nii.gz")
    if case.mask is not None:
        write_mask(LabelMask(case.mask, LabelSchema.binary()), directory / f"{case.case_id}_seg.nii.gz", spacing)
    atomic_write(directory / f"{case.case_id}.json", (json.dumps(case.sidecar, indent=2, sort_keys=True) + "\n").encode())


def load_preprocessed(directory, case_id: str) -> PreprocessedCase:
    directory = Path(directory)
    side = directory / f"{case_id}.json"
    if not side.is_file():
        raise DataError(f"missing preprocessed case {case_id!r} in {directory}")
    sidecar = json.loads(side.read_text())
    image = read_volume(directory / f"{case_id}_img.nii.gz", case_id).data
    seg_path = directory / f"{case_id}_seg.nii.gz"
    mask = read_mask(seg_path, LabelSchema.binary()).data if seg_path.is_file() else None
    return PreprocessedCase(case_id, image, mask, sidecar)
