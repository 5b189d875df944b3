"""Volume ingestion, preprocessing, patch extraction and augmentation.

Arrays are stored with the axial axis first: ``data[z, y, x]``. NIfTI files keep
the axial axis last, so the readers/writers transpose on the way in and out.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

HU_MIN = -175.0
HU_MAX = 250.0
TARGET_SPACING = (1.5, 1.5, 1.5)
RAW_HEADER = struct.Struct("<3I3f")


class DataIntegrityError(ValueError):
    pass


@dataclass
class Volume:
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = "image"

    def __post_init__(self):
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(not s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        if self.kind not in ("image", "label"):
            raise ValueError(f"unknown volume kind {self.kind!r}")
        if self.kind == "label":
            if not np.issubdtype(self.data.dtype, np.integer):
                rounded = np.rint(self.data)
                if not np.array_equal(rounded, self.data):
                    raise DataIntegrityError("label volume holds non-integer values")
                self.data = rounded.astype(np.int64)
            if self.data.size and self.data.min() < 0:
                raise DataIntegrityError("label volume holds negative values")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class Patch:
    image: np.ndarray
    label: np.ndarray
    task_id: int = 1
    corner: Tuple[int, int, int] = (0, 0, 0)


# preprocessing

def clip_normalize(v: Volume, lo: float = HU_MIN, hi: float = HU_MAX) -> Volume:
    """Clamp intensities to ``[lo, hi]`` and map them linearly onto ``[0, 1]``."""
    if v.kind != "image":
        raise ValueError("clip_normalize expects an image volume")
    data = np.asarray(v.data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        bad = int(np.count_nonzero(~np.isfinite(data)))
        raise DataIntegrityError(f"image contains {bad} non-finite voxels")
    out = (np.clip(data, lo, hi) - lo) / (hi - lo)
    return Volume(out.astype(np.float32), v.spacing, "image")


def resampled_shape(shape, spacing, target_spacing):
    return tuple(int(round(n * s / t)) for n, s, t in zip(shape, spacing, target_spacing))


def resample_isotropic(v: Volume, target_spacing: Sequence[float] = TARGET_SPACING) -> Volume:
    """Resample onto ``target_spacing``; trilinear for images, nearest for labels."""
    target_spacing = tuple(float(t) for t in target_spacing)
    if any(not t > 0 for t in target_spacing):
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    new_shape = resampled_shape(v.shape, v.spacing, target_spacing)
    if min(new_shape) < 1:
        raise ValueError(f"resampling {v.shape} at {v.spacing} to {target_spacing} gives empty grid {new_shape}")
    if tuple(new_shape) == tuple(v.shape) and np.allclose(v.spacing, target_spacing, rtol=0, atol=1e-9):
        return Volume(v.data.copy(), target_spacing, v.kind)
    factors = [n / o for n, o in zip(new_shape, v.shape)]
    order = 0 if v.kind == "label" else 1
    data = v.data if v.kind == "label" else v.data.astype(np.float64)
    out = ndimage.zoom(data, factors, order=order, mode="nearest", grid_mode=False)
    if out.shape != tuple(new_shape):  # zoom rounds its own output shape; guard anyway
        raise RuntimeError(f"resample produced {out.shape}, expected {new_shape}")
    if v.kind == "image":
        out = out.astype(v.data.dtype if np.issubdtype(v.data.dtype, np.floating) else np.float32)
    return Volume(out, target_spacing, v.kind)


def preprocess_pair(img: Volume, lbl: Optional[Volume], target_spacing=TARGET_SPACING, clip=True):
    if clip:
        img = clip_normalize(img)
    if target_spacing is not None:
        img = resample_isotropic(img, target_spacing)
        if lbl is not None:
            lbl = resample_isotropic(lbl, target_spacing)
    return img, lbl


# patches

def pad_to(arr: np.ndarray, size: Sequence[int], value=0) -> np.ndarray:
    """Pad at the far end of each axis so every axis is at least ``size``."""
    pads = [(0, max(0, s - n)) for n, s in zip(arr.shape, size)]
    if not any(p[1] for p in pads):
        return arr
    return np.pad(arr, pads, mode="constant", constant_values=value)


def extract_patch(img, lbl, rng: np.random.Generator, patch_size=96, task_id=1,
                  foreground_bias=False) -> Patch:
    """Crop an aligned image/label patch.

    The corner is drawn uniformly over all valid positions. With
    ``foreground_bias`` half of the draws are instead centred on a random
    nonzero label voxel (clipped to the valid corner range).
    """
    img = img.data if isinstance(img, Volume) else np.asarray(img)
    lbl = lbl.data if isinstance(lbl, Volume) else np.asarray(lbl)
    if img.shape != lbl.shape:
        raise ValueError(f"image {img.shape} and label {lbl.shape} are not aligned")
    size = (patch_size,) * 3 if np.isscalar(patch_size) else tuple(patch_size)
    img = pad_to(img, size, 0.0)
    lbl = pad_to(lbl, size, 0)
    upper = [n - s for n, s in zip(img.shape, size)]
    corner = None
    if foreground_bias and rng.random() < 0.5:
        fg = np.argwhere(lbl > 0)
        if len(fg):
            center = fg[rng.integers(len(fg))]
            corner = tuple(int(np.clip(c - s // 2, 0, u)) for c, s, u in zip(center, size, upper))
    if corner is None:
        corner = tuple(int(rng.integers(0, u + 1)) for u in upper)
    sl = tuple(slice(c, c + s) for c, s in zip(corner, size))
    return Patch(img[sl], lbl[sl], task_id, corner)


def augment(p: Patch, rng: np.random.Generator, p_rot=0.2, p_int=0.1, shift=0.1) -> Patch:
    image, label = p.image, p.label
    if rng.random() < p_rot:
        # only axis pairs of equal length, so the patch shape is kept
        pairs = [(a, b) for a, b in ((0, 1), (0, 2), (1, 2)) if image.shape[a] == image.shape[b]]
        axes = pairs[rng.integers(len(pairs))] if pairs else None
        k = int(rng.integers(1, 4))
        if axes:
            image = np.rot90(image, k, axes)
            label = np.rot90(label, k, axes)
    if rng.random() < p_int:
        image = np.clip(image + rng.uniform(-shift, shift), 0.0, 1.0).astype(image.dtype)
    return Patch(np.ascontiguousarray(image), np.ascontiguousarray(label), p.task_id, p.corner)


def worker_rng(seed: int, worker: int = 0, epoch: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, worker, epoch]))


# file formats

def write_raw(path, v: Volume):
    data = np.ascontiguousarray(v.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(RAW_HEADER.pack(*v.data.shape, *v.spacing))
        fh.write(data.tobytes())


def read_raw(path, kind="image") -> Volume:
    with open(path, "rb") as fh:
        header = fh.read(RAW_HEADER.size)
        if len(header) != RAW_HEADER.size:
            raise DataIntegrityError(f"{path}: truncated header")
        *dims, sx, sy, sz = RAW_HEADER.unpack(header)
        payload = fh.read()
    n = int(np.prod(dims))
    if len(payload) != 4 * n:
        raise DataIntegrityError(f"{path}: expected {4 * n} payload bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return Volume(data, (sx, sy, sz), kind)


def write_nifti(path, v: Volume):
    import nibabel as nib

    data = np.transpose(v.data, (2, 1, 0))
    if v.kind == "label":
        data = data.astype(np.int16 if v.data.max(initial=0) < 2 ** 15 else np.int32)
    else:
        data = data.astype(np.float32)
    affine = np.diag([v.spacing[2], v.spacing[1], v.spacing[0], 1.0])
    img = nib.Nifti1Image(data, affine)
    img.header.set_zooms(v.spacing[::-1])
    nib.save(img, str(path))


def read_nifti(path, kind="image") -> Volume:
    import nibabel as nib

    img = nib.load(str(path))
    data = np.asarray(img.dataobj)
    if data.ndim == 4 and data.shape[-1] == 1:
        data = data[..., 0]
    zooms = tuple(float(z) for z in img.header.get_zooms()[:3])
    data = np.transpose(data, (2, 1, 0))
    if kind == "image":
        data = data.astype(np.float32)
    return Volume(np.ascontiguousarray(data), zooms[::-1], kind)


def read_volume(path, kind="image") -> Volume:
    path = Path(path)
    if path.name.endswith((".nii", ".nii.gz")):
        return read_nifti(path, kind)
    return read_raw(path, kind)


def write_volume(path, v: Volume):
    path = Path(path)
    if path.name.endswith((".nii", ".nii.gz")):
        write_nifti(path, v)
    else:
        write_raw(path, v)


# manifest

@dataclass
class Case:
    image_path: str
    label_path: str
    full_label_path: Optional[str] = None
    case_id: Optional[str] = None


@dataclass
class DatasetEntry:
    task_id: int
    name: str
    label_set: list
    cases: list = field(default_factory=list)


@dataclass
class Manifest:
    datasets: list
    registry: Optional[str] = None
    root: Path = Path(".")

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.root / p

    def dataset(self, task_id):
        for d in self.datasets:
            if d.task_id == task_id:
                return d
        raise KeyError(f"no dataset for task {task_id}")

    def to_dict(self):
        out = {"datasets": [
            {"task_id": d.task_id, "name": d.name, "label_set": list(d.label_set),
             "cases": [{k: v for k, v in vars(c).items() if v is not None} for c in d.cases]}
            for d in self.datasets]}
        if self.registry is not None:
            out["registry"] = self.registry
        return out


def load_manifest(path) -> Manifest:
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or "datasets" not in doc:
        raise ValueError(f"{path}: manifest needs a 'datasets' list")
    datasets = []
    for d in doc["datasets"]:
        missing = {"task_id", "name", "label_set", "cases"} - set(d)
        if missing:
            raise ValueError(f"{path}: dataset entry missing {sorted(missing)}")
        cases = []
        for j, c in enumerate(d["cases"]):
            if "image_path" not in c or "label_path" not in c:
                raise ValueError(f"{path}: case {j} of task {d['task_id']} needs image_path and label_path")
            cases.append(Case(c["image_path"], c["label_path"], c.get("full_label_path"),
                              c.get("case_id", f"t{d['task_id']}_{j:03d}")))
        datasets.append(DatasetEntry(int(d["task_id"]), d["name"], [int(x) for x in d["label_set"]], cases))
    return Manifest(datasets, doc.get("registry"), path.parent)


def save_manifest(path, manifest: Manifest):
    with open(path, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2)
        fh.write("\n")
