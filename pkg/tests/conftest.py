import pytest

from ctfs.config import ExperimentConfig
from ctfs.synth import SceneSpec, generate_dataset, save_dataset


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """20 scenes of 64x64; small enough for multi-epoch runs in seconds."""
    root = tmp_path_factory.mktemp("tiny") / "data"
    save_dataset(generate_dataset(20, 5, SceneSpec(height=64, width=64)), root)
    return root


@pytest.fixture
def tiny_cfg(tiny_data, tmp_path):
    def make(**kw):
        base = dict(data_dir=str(tiny_data), ratio=0.25, grid=16, epochs=4, warmup=2,
                    batch_labeled=2, batch_unlabeled=3, widths=(4, 8, 8, 8),
                    run_dir=str(tmp_path / "run"))
        base.update(kw)
        return ExperimentConfig(**base)
    return make


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in results.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
