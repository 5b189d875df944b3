import dataclasses
import hashlib
import json

import pytest

from cdpdnet.cli import main
from cdpdnet.partial_labels import TaskRegistry, TaskSpec, save_registry
from cdpdnet.synth import two_task_spec
from cdpdnet.volume import load_manifest

from test_training import TINY_TRAIN


def _spec_file(path, seed=1):
    spec = two_task_spec(cases_per_task=1, shape=(32, 32, 32), seed=seed)
    doc = dataclasses.asdict(spec)
    path.write_text(json.dumps(doc))
    return path


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "run_config.json":
            h.update(str(p.relative_to(root)).encode() + p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A dataset plus a one-epoch checkpoint produced through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    spec = _spec_file(root / "spec.json")
    assert main(["synth", str(spec), str(root / "data")]) == 0
    cfg = json.loads(json.dumps(TINY_TRAIN))
    cfg["optim"]["total_epochs"] = 2
    cfg["data"] = {"embedding_cache": str(root / "emb")}
    (root / "train.json").write_text(json.dumps(cfg))
    code = main(["train", "--config", str(root / "train.json"), "--manifest", str(root / "data/manifest.json"),
                 "--out", str(root / "run"), "--override", "optim.lr0=1e-4"])
    assert code == 0
    return root


def test_synth_writes_valid_manifest(trained):
    man = load_manifest(trained / "data" / "manifest.json")
    assert [d.task_id for d in man.datasets] == [1, 2]
    assert all(man.resolve(c.image_path).exists() for d in man.datasets for c in d.cases)
    assert (trained / "data" / "run_config.json").exists()


def test_synth_missing_spec(tmp_path, capsys):
    assert main(["synth", str(tmp_path / "nope.json"), str(tmp_path / "out")]) == 2
    assert "nope.json" in capsys.readouterr().err


def test_synth_bad_spec(tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"structures": [], "tasks": []}))
    assert main(["synth", str(tmp_path / "s.json"), str(tmp_path / "out")]) == 2


def test_synth_byte_identical(tmp_path):
    spec = _spec_file(tmp_path / "spec.json", seed=7)
    main(["synth", str(spec), str(tmp_path / "a")])
    main(["synth", str(spec), str(tmp_path / "b")])
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_override_recorded_in_resolved_snapshot(trained):
    resolved = json.loads((trained / "run" / "resolved_config.json").read_text())
    assert resolved["optim"]["lr0"] == 1e-4
    snap = json.loads((trained / "run" / "run_config.json").read_text())
    assert snap["override"] == ["optim.lr0=1e-4"]
    assert (trained / "run" / "metrics.ndjson").read_text().count("\n") == 4


def test_build_embeddings(tmp_path, capsys):
    assert main(["build-embeddings", "--registry", "reference", "--cache-dir", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "roi: 32x512" in out and "task: 11x512" in out
    assert len(list(tmp_path.glob("*.npy"))) == 2


def test_eval_writes_reports(trained, tmp_path):
    out = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(trained / "run/best.pt"),
                 "--manifest", str(trained / "data/manifest.json"), "--out", str(out)]) == 0
    for name in ("report.json", "report.txt", "report.csv", "report_roi_dsc_bars.csv", "cases.json", "run_config.json"):
        assert (out / name).exists(), name


def test_predict_writes_masks(trained, tmp_path):
    man = load_manifest(trained / "data/manifest.json")
    vol = man.resolve(man.datasets[0].cases[0].image_path)
    out = tmp_path / "pred"
    assert main(["predict", "--checkpoint", str(trained / "run/best.pt"), "--volume", str(vol),
                 "--task-id", "2", "--registry", str(trained / "data/registry.json"),
                 "--out", str(out), "--probabilities"]) == 0
    assert len(list(out.glob("mask_*.nii.gz"))) == 5 and len(list(out.glob("prob_*.nii.gz"))) == 5
    assert (out / "mask_01_organ_a.nii.gz").exists()


@pytest.mark.parametrize("tid", ["0", "3"])
def test_predict_invalid_task_id(trained, tmp_path, capsys, tid):
    code = main(["predict", "--checkpoint", str(trained / "run/best.pt"), "--volume", "x.nii",
                 "--task-id", tid, "--out", str(tmp_path)])
    assert code == 2
    assert "valid ids are 1, 2" in capsys.readouterr().err


def test_fingerprint_mismatch_exit_3(trained, tmp_path, capsys):
    other = TaskRegistry(["organ_a", "organ_b", "organ_c", "organ_d", "tumor_e"],
                         [TaskSpec(1, "x", ("organ_a",)), TaskSpec(2, "y", ("organ_b",))])
    save_registry(tmp_path / "other.json", other)
    code = main(["eval", "--checkpoint", str(trained / "run/best.pt"), "--manifest",
                 str(trained / "data/manifest.json"), "--registry", str(tmp_path / "other.json"),
                 "--out", str(tmp_path / "e")])
    assert code == 3
    err = capsys.readouterr().err
    assert other.fingerprint() in err


def test_sweep_csv(trained, tmp_path):
    assert main(["sweep", "--checkpoint", str(trained / "run/best.pt"),
                 "--manifest", str(trained / "data/manifest.json"), "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "sweep.csv").read_text().splitlines()
    assert rows[0].startswith("task_id,task,organ_a") and len(rows) == 3


def test_train_requires_manifest(tmp_path):
    assert main(["train", "--out", str(tmp_path)]) == 2
