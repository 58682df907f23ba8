"""Dataset manifests and cross-validation fold assignment."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from ..core import CaseRecord, LabelSchema
from ..errors import ConfigurationError, DataError, SchemaError
from .nifti import atomic_write

MASK64 = (1 << 64) - 1


class SplitMix64:
    """SplitMix64 generator (Steele, Lea & Flood 2014): 64-bit state, 64-bit output.

    Pinned here instead of numpy's generators so that fold assignment can be
    reproduced bit-for-bit by any implementation.
    """

    GAMMA = 0x9E3779B97F4A7C15

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + self.GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection sampling (no modulo bias)."""
        if n <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates, walking from the last index down."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]


@dataclass(frozen=True)
class DatasetManifest:
    dataset_name: str
    cases: tuple[CaseRecord, ...]
    label_schema: LabelSchema
    seed: int = 0
    root: Optional[Path] = None  # base for relative paths

    def __post_init__(self):
        ids = [c.case_id for c in self.cases]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise SchemaError(f"duplicate case ids in manifest: {dupes}")
        object.__setattr__(self, "cases", tuple(self.cases))

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def case(self, case_id: str) -> CaseRecord:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(case_id)

    def validate(self) -> None:
        for c in self.cases:
            for rel in (c.image_path, c.mask_path):
                if rel is not None and not self.resolve(rel).is_file():
                    raise DataError(f"case {c.case_id}: missing file {self.resolve(rel)}")

    def fold_cases(self, fold: int) -> list[CaseRecord]:
        return [c for c in self.cases if c.fold_index == fold]

    def to_json(self) -> dict:
        cases = []
        for c in self.cases:
            d = {"case_id": c.case_id, "image": c.image_path}
            if c.mask_path is not None:
                d["mask"] = c.mask_path
            if c.fold_index is not None:
                d["fold"] = c.fold_index
            if c.split_tag != "unassigned":
                d["split"] = c.split_tag
            cases.append(d)
        return {
            "dataset_name": self.dataset_name,
            "seed": self.seed,
            "label_schema": self.label_schema.to_json(),
            "cases": cases,
        }

    @classmethod
    def from_json(cls, doc: dict, root: Optional[Path] = None) -> "DatasetManifest":
        try:
            cases = tuple(
                CaseRecord(
                    case_id=str(c["case_id"]),
                    image_path=str(c["image"]),
                    mask_path=c.get("mask"),
                    split_tag=c.get("split", "unassigned"),
                    fold_index=c.get("fold"),
                )
                for c in doc["cases"]
            )
            return cls(
                dataset_name=str(doc["dataset_name"]),
                cases=cases,
                label_schema=LabelSchema.from_json(doc["label_schema"]),
                seed=int(doc.get("seed", 0)),
                root=root,
            )
        except KeyError as e:
            raise ConfigurationError(f"manifest missing field {e}") from None


def load_manifest(path, validate: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: invalid JSON ({e})") from None
    m = DatasetManifest.from_json(doc, root=path.parent)
    if validate:
        m.validate()
    return m


def dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def save_manifest(manifest: DatasetManifest, path) -> None:
    atomic_write(path, dumps(manifest.to_json()).encode())


def assign_folds(manifest: DatasetManifest, k: int = 5, seed: Optional[int] = None) -> DatasetManifest:
    """Deterministic k-fold split: sort ids, SplitMix64 Fisher-Yates shuffle, deal round-robin.

    The result depends only on the set of case ids and the seed, never on the
    order cases appear in the manifest.
    """
    if k < 2:
        raise ConfigurationError(f"need at least 2 folds, got {k}")
    n = len(manifest.cases)
    if n < k:
        raise ConfigurationError(f"cannot split {n} cases into {k} folds")
    seed = manifest.seed if seed is None else seed
    order = sorted(c.case_id for c in manifest.cases)
    SplitMix64(seed).shuffle(order)
    fold_of = {cid: i % k for i, cid in enumerate(order)}
    cases = tuple(replace(c, fold_index=fold_of[c.case_id]) for c in manifest.cases)
    return replace(manifest, cases=cases, seed=seed)
