"""Synthetic partially labeled multi-task CT-like datasets.

Every case renders all structures into the image, but its label map keeps only
the labels its task annotates. A second, fully annotated label map is written
alongside for task-ID sweeps.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .partial_labels import TaskRegistry, TaskSpec, save_registry
from .volume import Case, DatasetEntry, Manifest, Volume, save_manifest, write_volume


class SynthSpecError(ValueError):
    pass


@dataclass
class Structure:
    name: str
    kind: str = "ellipsoid"  # ellipsoid | cuboid | blob
    center: tuple = (0.5, 0.5, 0.5)  # fractions of the grid
    radii: tuple = (0.2, 0.2, 0.2)
    hu: float = 100.0
    nested_in: Optional[str] = None


@dataclass
class SynthTask:
    name: str
    labels: List[str]
    cases: int = 4


@dataclass
class SynthSpec:
    structures: List[Structure]
    tasks: List[SynthTask]
    shape: tuple = (64, 64, 64)
    spacing: tuple = (1.5, 1.5, 1.5)
    seed: int = 0
    background_hu: float = -50.0
    noise_hu: float = 8.0
    jitter: float = 0.03
    scale_jitter: float = 0.1
    format: str = "nii"

    @classmethod
    def from_dict(cls, doc):
        try:
            structures = [Structure(**s) for s in doc["structures"]]
            tasks = [SynthTask(**t) for t in doc["tasks"]]
        except (KeyError, TypeError) as e:
            raise SynthSpecError(f"malformed synth spec: {e}") from e
        rest = {k: v for k, v in doc.items() if k not in ("structures", "tasks")}
        unknown = set(rest) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise SynthSpecError(f"unknown synth spec keys {sorted(unknown)}")
        spec = cls(structures, tasks, **rest)
        spec.validate()
        return spec

    def validate(self):
        names = [s.name for s in self.structures]
        if len(set(names)) != len(names):
            raise SynthSpecError("structure names must be unique")
        if not self.tasks:
            raise SynthSpecError("synth spec needs at least one task")
        if self.format not in ("nii", "nii.gz", "raw"):
            raise SynthSpecError(f"unknown output format {self.format!r}")
        for s in self.structures:
            if s.kind not in ("ellipsoid", "cuboid", "blob"):
                raise SynthSpecError(f"{s.name}: unknown kind {s.kind!r}")
            if s.nested_in is None:
                continue
            if s.nested_in not in names:
                raise SynthSpecError(f"{s.name} is nested in unknown structure {s.nested_in!r}")
            parent = self.structures[names.index(s.nested_in)]
            if names.index(s.nested_in) > names.index(s.name):
                raise SynthSpecError(f"{s.name} must come after its parent {parent.name} or it is painted over")
            # the nested shape must sit inside its parent at nominal geometry
            if _inside_score(parent, s.center) + max(np.divide(s.radii, parent.radii)) > 1.0:
                raise SynthSpecError(f"{s.name} does not fit inside its parent {parent.name}")
        for t in self.tasks:
            unknown = set(t.labels) - set(names)
            if unknown:
                raise SynthSpecError(f"task {t.name} annotates undefined structures {sorted(unknown)}")
            if t.cases < 0:
                raise SynthSpecError(f"task {t.name} has negative case count")

    def registry(self) -> TaskRegistry:
        names = [s.name for s in self.structures]
        tasks = [TaskSpec(i, t.name, tuple(n for n in names if n in t.labels)) for i, t in enumerate(self.tasks, 1)]
        nested = {s.name: s.nested_in for s in self.structures if s.nested_in}
        return TaskRegistry(names, tasks, nested)


def _inside_score(parent: Structure, point) -> float:
    d = np.abs(np.subtract(point, parent.center)) / np.asarray(parent.radii)
    if parent.kind == "cuboid":
        return float(d.max())
    return float(np.sqrt((d ** 2).sum()))


def structure_mask(kind, center, radii, shape) -> np.ndarray:
    """Rasterize one shape; ``center``/``radii`` are in voxel units."""
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    d = [(g - c) / r for g, c, r in zip(grids, center, radii)]
    if kind == "cuboid":
        return np.maximum.reduce([np.abs(x) for x in d]) <= 1.0
    return sum(x ** 2 for x in d) <= 1.0


def sample_geometry(spec: SynthSpec, rng: np.random.Generator):
    """Per-case jittered (center, radii) in voxels for every structure.

    Nested structures move with their parent so they stay inside it.
    """
    shape = np.asarray(spec.shape, dtype=np.float64)
    geo = {}
    for s in spec.structures:
        offset = rng.uniform(-spec.jitter, spec.jitter, 3) * shape
        scale = 1.0 + rng.uniform(-spec.scale_jitter, spec.scale_jitter)
        center = np.asarray(s.center) * shape + offset
        if s.nested_in:
            pc, pr = geo[s.nested_in]
            parent = next(p for p in spec.structures if p.name == s.nested_in)
            rel = (np.asarray(s.center) - np.asarray(parent.center)) / np.asarray(parent.radii)
            # keep the nominal relative position inside the jittered parent
            center = pc + rel * pr + rng.uniform(-0.5, 0.5, 3)
            scale = min(scale, 1.0)
        geo[s.name] = (center, np.asarray(s.radii) * shape * scale)
    return geo


def render_case(spec: SynthSpec, rng: np.random.Generator):
    """Return (image in HU, full integer label map)."""
    shape = tuple(spec.shape)
    geo = sample_geometry(spec, rng)
    image = np.full(shape, spec.background_hu, dtype=np.float64)
    label = np.zeros(shape, dtype=np.int64)
    for idx, s in enumerate(spec.structures, 1):
        center, radii = geo[s.name]
        m = structure_mask(s.kind, center, radii, shape)
        image[m] = s.hu
        label[m] = idx
    image += rng.normal(0.0, spec.noise_hu, shape)
    return image.astype(np.float32), label


def synth_generate(spec: SynthSpec, out_dir) -> Manifest:
    out_dir = Path(out_dir)
    for sub in ("images", "labels", "full_labels"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    registry = spec.registry()
    save_registry(out_dir / "registry.json", registry)
    ext = {"nii": ".nii", "nii.gz": ".nii.gz", "raw": ".raw"}[spec.format]
    datasets = []
    for ti, (task, tspec) in enumerate(zip(spec.tasks, registry.tasks), 1):
        keep = np.array([0] + [1 if n in tspec.label_set else 0 for n in registry.global_labels], dtype=bool)
        cases = []
        for j in range(task.cases):
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, ti, j]))
            image, full = render_case(spec, rng)
            partial = np.where(keep[full], full, 0)
            cid = f"task{ti:02d}_case{j:03d}"
            paths = [f"{sub}/{cid}{ext}" for sub in ("images", "labels", "full_labels")]
            write_volume(out_dir / paths[0], Volume(image, spec.spacing, "image"))
            write_volume(out_dir / paths[1], Volume(partial, spec.spacing, "label"))
            write_volume(out_dir / paths[2], Volume(full, spec.spacing, "label"))
            cases.append(Case(*paths, case_id=cid))
        datasets.append(DatasetEntry(ti, task.name, registry.label_ids(tspec), cases))
    manifest = Manifest(datasets, "registry.json", out_dir)
    save_manifest(out_dir / "manifest.json", manifest)
    return manifest


def load_synth_spec(path) -> SynthSpec:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise SynthSpecError(f"{path}: invalid JSON ({e})") from e
    return SynthSpec.from_dict(doc)


def two_task_spec(cases_per_task=8, shape=(64, 64, 64), seed=0, **kw) -> SynthSpec:
    """2 tasks sharing 3 structures, each annotating one structure of its own."""
    structures = [
        Structure("organ_a", "ellipsoid", (0.5, 0.38, 0.35), (0.30, 0.22, 0.20), 60.0),
        Structure("organ_b", "ellipsoid", (0.5, 0.45, 0.72), (0.25, 0.16, 0.14), 140.0),
        Structure("organ_c", "cuboid", (0.5, 0.78, 0.45), (0.22, 0.10, 0.22), -120.0),
        Structure("organ_d", "ellipsoid", (0.25, 0.20, 0.75), (0.12, 0.10, 0.10), 200.0),
        Structure("tumor_e", "blob", (0.5, 0.36, 0.34), (0.12, 0.10, 0.10), 240.0, nested_in="organ_a"),
    ]
    tasks = [SynthTask("task_one", ["organ_a", "organ_b", "organ_c", "organ_d"], cases_per_task),
             SynthTask("task_two", ["organ_a", "organ_b", "organ_c", "tumor_e"], cases_per_task)]
    spec = SynthSpec(structures, tasks, tuple(shape), seed=seed, **kw)
    spec.validate()
    return spec
