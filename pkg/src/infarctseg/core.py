"""Domain types shared by every stage of the pipeline.

Volumes are indexed ``(slice, row, col)``.  All arrays held by these types are
marked read-only on construction so instances can be shared across threads.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, Optional

import numpy as np

from .errors import BoundsError, ContractError, DataError, SchemaError, ShapeError

VOXEL_DTYPE = np.float32
MASK_DTYPE = np.uint8

SPLIT_TAGS = ("train", "val", "test", "unassigned")


def _frozen(a: np.ndarray) -> np.ndarray:
    if not a.flags.writeable and a.flags.c_contiguous:
        return a
    a = np.array(a, order="C")
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Spacing:
    """Voxel size in millimetres; ``dz`` is the slice thickness."""

    dx: float
    dy: float
    dz: float

    def __post_init__(self):
        for name in ("dx", "dy", "dz"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v <= 0:
                raise ContractError(f"spacing {name} must be positive and finite, got {v}")
            object.__setattr__(self, name, v)

    @property
    def in_plane(self) -> tuple[float, float]:
        """(row, col) spacing."""
        return (self.dy, self.dx)

    def as_zyx(self) -> tuple[float, float, float]:
        return (self.dz, self.dy, self.dx)


@dataclass(frozen=True)
class LabelSchema:
    entries: tuple[tuple[int, str], ...]

    def __post_init__(self):
        entries = tuple((int(i), str(n)) for i, n in self.entries)
        ids = [i for i, _ in entries]
        if len(set(ids)) != len(ids):
            raise SchemaError(f"duplicate label ids in schema: {ids}")
        if any(i < 0 for i in ids):
            raise SchemaError("label ids must be non-negative")
        names = dict(entries)
        if names.get(0) != "background":
            raise SchemaError("label schema must contain id 0 named 'background'")
        object.__setattr__(self, "entries", entries)

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(i for i, _ in self.entries)

    def name(self, label_id: int) -> str:
        return dict(self.entries)[label_id]

    def __contains__(self, label_id) -> bool:
        return int(label_id) in self.ids

    def to_json(self) -> list[dict]:
        return [{"id": i, "name": n} for i, n in self.entries]

    @classmethod
    def from_json(cls, items: Iterable[Mapping]) -> "LabelSchema":
        return cls(tuple((int(d["id"]), str(d["name"])) for d in items))

    @classmethod
    def binary(cls, name: str = "acute infarct") -> "LabelSchema":
        return cls(((0, "background"), (1, name)))


def _load_aisd() -> dict:
    text = resources.files("infarctseg.data").joinpath("aisd_labels.json").read_text()
    return json.loads(text)


def aisd_schema() -> LabelSchema:
    """Default five-class schema for the infarct types of the source dataset."""
    return LabelSchema.from_json(_load_aisd()["label_schema"])


def acute_remap() -> dict[int, int]:
    """Clear and blurred acute infarcts to foreground, everything else to background."""
    return {int(k): int(v) for k, v in _load_aisd()["acute_remap"].items()}


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: Spacing
    case_id: str = ""
    # NIfTI qform/sform block, carried verbatim and never interpreted
    orientation: Optional[bytes] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeError(f"volume must be 3-D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ShapeError(f"volume extents must be >= 1, got {data.shape}")
        data = data.astype(VOXEL_DTYPE, copy=False)
        if not np.isfinite(data).all():
            raise DataError(f"volume {self.case_id!r} contains NaN or Inf voxels")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray, spacing: Optional[Spacing] = None) -> "Volume":
        return Volume(data, spacing or self.spacing, self.case_id, self.orientation)


@dataclass(frozen=True)
class LabelMask:
    data: np.ndarray
    label_schema: LabelSchema

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeError(f"mask must be 3-D, got shape {data.shape}")
        if data.dtype.kind not in "uib":
            raise SchemaError(f"mask must hold integers, got dtype {data.dtype}")
        present = np.unique(data)
        unknown = sorted(set(present.tolist()) - set(self.label_schema.ids))
        if unknown:
            raise SchemaError(f"mask contains ids not in schema: {unknown}")
        object.__setattr__(self, "data", _frozen(data.astype(MASK_DTYPE, copy=False)))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def check_pairs(self, volume: Volume) -> None:
        if self.shape != volume.shape:
            raise ShapeError(
                f"mask extents {self.shape} differ from volume {volume.case_id!r} extents {volume.shape}"
            )


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    image_path: str
    mask_path: Optional[str] = None
    split_tag: str = "unassigned"
    fold_index: Optional[int] = None

    def __post_init__(self):
        if self.split_tag not in SPLIT_TAGS:
            raise ContractError(f"unknown split tag {self.split_tag!r}")
        if self.fold_index is not None and self.fold_index < 0:
            raise ContractError(f"fold index must be non-negative, got {self.fold_index}")


@dataclass(frozen=True)
class Image2D:
    data: np.ndarray
    spacing: tuple[float, float]  # (row, col) mm


def remap_labels(
    mask: LabelMask,
    remap: Mapping[int, int],
    names: Optional[Mapping[int, str]] = None,
) -> LabelMask:
    """Apply a label lookup table pointwise; ids missing from ``remap`` pass through.

    ``names`` optionally names the target ids; otherwise a target keeps the
    source schema's name for that id.
    """
    schema = mask.label_schema
    unknown = [k for k in remap if int(k) not in schema]
    if unknown:
        raise SchemaError(f"remap source ids not in schema: {sorted(unknown)}")
    if not remap:
        return mask

    lut = np.arange(max(max(schema.ids), max(remap.values())) + 1, dtype=np.int64)
    for src, dst in remap.items():
        if dst < 0:
            raise SchemaError(f"remap target id must be non-negative, got {dst}")
        lut[int(src)] = int(dst)

    target_ids = sorted({int(lut[i]) for i in schema.ids} | {0})
    old_names = dict(schema.entries)
    names = {int(k): v for k, v in (names or {}).items()}
    entries = []
    for i in target_ids:
        if i == 0:
            entries.append((0, "background"))
        else:
            entries.append((i, names.get(i, old_names.get(i, f"label_{i}"))))
    out = lut[mask.data].astype(MASK_DTYPE)
    return LabelMask(out, LabelSchema(tuple(entries)))


def foreground_voxel_count(mask: LabelMask, label: int) -> int:
    if label not in mask.label_schema:
        raise SchemaError(f"label {label} not in schema {mask.label_schema.ids}")
    return int(np.count_nonzero(mask.data == label))


def slice_extract(volume: Volume, slice_index: int) -> Image2D:
    n = volume.shape[0]
    if not 0 <= slice_index < n:
        raise BoundsError(f"slice index {slice_index} out of range for {n} slices")
    return Image2D(volume.data[slice_index], volume.spacing.in_plane)
