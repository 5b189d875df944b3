import hashlib
import json

import numpy as np
import pytest

from cdpdnet.partial_labels import load_registry
from cdpdnet.synth import (
    Structure, SynthSpec, SynthSpecError, SynthTask, render_case, sample_geometry, structure_mask, synth_generate,
    two_task_spec,
)
from cdpdnet.volume import load_manifest, read_volume


def test_two_task_registry_overlap():
    reg = two_task_spec().registry()
    a, b = set(reg.task(1).label_set), set(reg.task(2).label_set)
    assert len(a & b) == 3 and len(a ^ b) == 2


def test_generated_dataset_is_partial(small_synth):
    out, spec = small_synth
    man = load_manifest(out / "manifest.json")
    reg = load_registry(out / "registry.json")
    for ds in man.datasets:
        allowed = {0} | set(ds.label_set)
        for case in ds.cases:
            lbl = read_volume(man.resolve(case.label_path), "label").data
            full = read_volume(man.resolve(case.full_label_path), "label").data
            assert set(np.unique(lbl)) <= allowed
            # unannotated structures are still drawn in the image
            assert set(np.unique(full)) == set(range(reg.num_labels + 1))
            np.testing.assert_array_equal(lbl, np.where(np.isin(full, list(allowed)), full, 0))


def test_label_map_matches_rasterization_order():
    spec = two_task_spec(shape=(32, 32, 32))
    rng_geo = np.random.default_rng(4)
    geo = sample_geometry(spec, rng_geo)
    _, label = render_case(spec, np.random.default_rng(4))
    expected = np.zeros(spec.shape, int)
    for i, s in enumerate(spec.structures, 1):
        expected[structure_mask(s.kind, *geo[s.name], spec.shape)] = i
    np.testing.assert_array_equal(label, expected)


def test_nested_structure_inside_parent():
    spec = two_task_spec(shape=(32, 32, 32))
    names = [s.name for s in spec.structures]
    for seed in range(10):
        geo = sample_geometry(spec, np.random.default_rng(seed))
        tumor = structure_mask("blob", *geo["tumor_e"], spec.shape)
        organ = structure_mask("ellipsoid", *geo["organ_a"], spec.shape)
        assert tumor.any() and (organ | ~tumor).all()
    assert names.index("tumor_e") > names.index("organ_a")


def _files_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode() + p.read_bytes())
    return h.hexdigest()


def test_byte_identical_regeneration(tmp_path):
    spec = two_task_spec(cases_per_task=1, shape=(16, 16, 16), seed=5)
    synth_generate(spec, tmp_path / "a")
    synth_generate(spec, tmp_path / "b")
    assert _files_digest(tmp_path / "a") == _files_digest(tmp_path / "b")


def test_zero_cases_still_valid(tmp_path):
    spec = two_task_spec(cases_per_task=0, shape=(16, 16, 16))
    synth_generate(spec, tmp_path)
    man = load_manifest(tmp_path / "manifest.json")
    assert [len(d.cases) for d in man.datasets] == [0, 0]


def test_contradictory_geometry_rejected():
    parent = Structure("a", "ellipsoid", (0.5, 0.5, 0.5), (0.1, 0.1, 0.1), 50.0)
    child = Structure("b", "blob", (0.9, 0.5, 0.5), (0.05, 0.05, 0.05), 200.0, nested_in="a")
    with pytest.raises(SynthSpecError, match="fit"):
        SynthSpec([parent, child], [SynthTask("t", ["a"], 1)]).validate()
    with pytest.raises(SynthSpecError, match="after"):
        SynthSpec([Structure("b", "blob", (0.5, 0.5, 0.5), (0.01,) * 3, 1.0, nested_in="a"), parent],
                  [SynthTask("t", ["a"], 1)]).validate()
    with pytest.raises(SynthSpecError, match="undefined"):
        SynthSpec([parent], [SynthTask("t", ["zzz"], 1)]).validate()


def test_spec_from_dict_rejects_unknown_keys():
    doc = {"structures": [], "tasks": [{"name": "t", "labels": [], "cases": 0}], "colour": "red"}
    with pytest.raises(SynthSpecError):
        SynthSpec.from_dict(doc)
