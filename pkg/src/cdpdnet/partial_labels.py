"""Task registry, multi-hot targets and presence masks for partially labeled data.

Integer label maps use global label ids: value ``c`` (1-based) is
``registry.global_labels[c - 1]`` and lands in channel ``c - 1``. Value 0 is
background.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, Iterator, List, Optional

import numpy as np

ROI_TEMPLATE = "A computerized tomography of a {}."
TASK_TEMPLATE = "A task of segmenting {}"


def render_task_prompt(names) -> str:
    return TASK_TEMPLATE.format(", ".join(names))


@dataclass(frozen=True)
class TaskSpec:
    id: int
    name: str
    label_set: tuple
    task_prompt: str = ""
    roi_prompt_template: str = ROI_TEMPLATE

    def __post_init__(self):
        if not self.task_prompt:
            object.__setattr__(self, "task_prompt", render_task_prompt(self.label_set))


@dataclass
class TaskRegistry:
    global_labels: List[str]
    tasks: List[TaskSpec]
    nested_in: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.global_labels)) != len(self.global_labels):
            raise ValueError("global label names must be unique")
        ids = [t.id for t in self.tasks]
        if sorted(ids) != list(range(1, len(ids) + 1)):
            raise ValueError(f"task ids must be dense 1..m, got {ids}")
        self.tasks = sorted(self.tasks, key=lambda t: t.id)
        known = set(self.global_labels)
        for t in self.tasks:
            unknown = set(t.label_set) - known
            if unknown:
                raise ValueError(f"task {t.id} uses unknown labels {sorted(unknown)}")
            if len(set(t.label_set)) >= len(known):
                raise ValueError(f"task {t.id} annotates every label; partial labeling requires |l_i| < |L|")
        for child, parent in self.nested_in.items():
            if child not in known or parent not in known or child == parent:
                raise ValueError(f"bad nesting {child!r} -> {parent!r}")

    @property
    def num_labels(self) -> int:
        return len(self.global_labels)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def task(self, task_id: int) -> TaskSpec:
        if not 1 <= int(task_id) <= len(self.tasks):
            raise KeyError(f"unknown task id {task_id}; valid ids are 1..{len(self.tasks)}")
        return self.tasks[int(task_id) - 1]

    def label_id(self, name: str) -> int:
        return self.global_labels.index(name) + 1

    def label_ids(self, task: TaskSpec) -> List[int]:
        return [self.label_id(n) for n in task.label_set]

    def roi_prompts(self) -> List[str]:
        return [ROI_TEMPLATE.format(n) for n in self.global_labels]

    def task_prompts(self) -> List[str]:
        return [t.task_prompt for t in self.tasks]

    def to_dict(self):
        doc = {"global_labels": list(self.global_labels),
               "tasks": [{"id": t.id, "name": t.name, "labels": list(t.label_set),
                          "task_prompt": t.task_prompt} for t in self.tasks]}
        if self.nested_in:
            doc["nested_in"] = dict(self.nested_in)
        return doc

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def registry_from_dict(doc) -> TaskRegistry:
    tasks = [TaskSpec(int(t["id"]), t["name"], tuple(t["labels"]), t.get("task_prompt") or "")
             for t in doc["tasks"]]
    return TaskRegistry(list(doc["global_labels"]), tasks, dict(doc.get("nested_in", {})))


def load_registry(path) -> TaskRegistry:
    with open(path) as fh:
        return registry_from_dict(json.load(fh))


def save_registry(path, registry: TaskRegistry):
    with open(path, "w") as fh:
        json.dump(registry.to_dict(), fh, indent=2)
        fh.write("\n")


def reference_registry() -> TaskRegistry:
    """The 11-task / 32-ROI abdominal CT registry."""
    text = resources.files("cdpdnet.data").joinpath("reference_registry.json").read_text()
    return registry_from_dict(json.loads(text))


def to_multihot(lbl, task: TaskSpec, registry: TaskRegistry, use_nesting=False) -> np.ndarray:
    """Expand an integer label map into a ``(|L|, *spatial)`` binary tensor.

    Channels of labels outside ``task.label_set`` stay zero; they are masked
    out of the loss, never asserted as negatives. With ``use_nesting`` a voxel
    labelled with a nested child (e.g. a tumor) is also set in its parent's
    channel when the parent is annotated by the task.
    """
    lbl = np.asarray(lbl)
    allowed = set(registry.label_ids(task))
    present = np.unique(lbl)
    bad = [int(v) for v in present if v != 0 and int(v) not in allowed]
    if bad:
        raise ValueError(f"label values {bad} are not annotated by task {task.id} ({task.name})")
    out = np.zeros((registry.num_labels,) + lbl.shape, dtype=np.uint8)
    for c in allowed:
        out[c - 1] = lbl == c
    if use_nesting:
        for child, parent in registry.nested_in.items():
            ci, pi = registry.label_id(child), registry.label_id(parent)
            if ci in allowed and pi in allowed:
                out[pi - 1] |= out[ci - 1]
    return out


def presence_mask(task, registry: TaskRegistry) -> np.ndarray:
    if not isinstance(task, TaskSpec):
        task = registry.task(task)
    elif registry.task(task.id) != task:
        raise KeyError(f"task {task.id} is not registered")
    mask = np.zeros(registry.num_labels, dtype=bool)
    for c in registry.label_ids(task):
        mask[c - 1] = True
    return mask


def uniform_task_sampler(registry: TaskRegistry, rng: np.random.Generator) -> Iterator[int]:
    m = registry.num_tasks
    if m < 1:
        raise ValueError("registry has no tasks")
    while True:
        yield int(rng.integers(1, m + 1))
