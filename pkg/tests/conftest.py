import numpy as np
import pytest
import torch

from cdpdnet.model import ModelConfig, build_model
from cdpdnet.partial_labels import TaskRegistry, TaskSpec
from cdpdnet.synth import synth_generate, two_task_spec

TINY_MODEL = dict(stem_channels=4, level_channels=(8, 8, 8, 8), decoder_channels=(8, 8, 8, 8, 4),
                  max_tokens=64, backbone={"standin": {"seed": 0, "embed_dim": 16, "depth": 4, "patch": 16}})


@pytest.fixture
def registry3():
    return TaskRegistry(["liver", "kidney", "spleen"],
                        [TaskSpec(1, "a", ("liver", "kidney")), TaskSpec(2, "b", ("spleen",))])


@pytest.fixture
def tiny_model(registry3, tmp_path):
    torch.manual_seed(0)
    cfg = ModelConfig(registry3.num_labels, registry3.num_tasks, patch_size=32, **TINY_MODEL)
    return build_model(cfg, registry3, cache=tmp_path / "emb")


@pytest.fixture
def tiny_input():
    g = torch.Generator().manual_seed(1)
    return torch.rand(1, 1, 16, 32, 32, generator=g)


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """Two tasks, 2 cases each, 32^3 volumes."""
    out = tmp_path_factory.mktemp("synth")
    spec = two_task_spec(cases_per_task=2, shape=(32, 32, 32), seed=3)
    synth_generate(spec, out)
    return out, spec


# one summary line per acceptance criterion

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call" and not (call.when == "setup" and call.excinfo):
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "notes": []})
    if call.excinfo is not None:
        entry["ok"] = False
        entry["notes"].append(str(call.excinfo.value).splitlines()[0][:160])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        line = f"[{'PASS' if e['ok'] else 'FAIL'}] criterion {number}: {e['title']}"
        if e["notes"]:
            line += f" ({'; '.join(e['notes'])})"
        terminalreporter.write_line(line)


@pytest.fixture
def measured(request):
    """Attach a measured value to the criterion's summary line."""
    mark = request.node.get_closest_marker("criterion")

    def note(text):
        entry = _CRITERIA.setdefault(mark.args[0], {"title": mark.args[1], "ok": True, "notes": []})
        entry["notes"].append(text)
    return note
