from .manifest import DatasetManifest, SplitMix64, assign_folds, load_manifest, save_manifest
from .nifti import read_mask, read_volume, write_mask, write_volume
from .phantom import PhantomSpec, generate_phantom, random_phantom_spec

__all__ = [
    "DatasetManifest",
    "PhantomSpec",
    "SplitMix64",
    "assign_folds",
    "generate_phantom",
    "load_manifest",
    "random_phantom_spec",
    "read_mask",
    "read_volume",
    "save_manifest",
    "write_mask",
    "write_volume",
]
