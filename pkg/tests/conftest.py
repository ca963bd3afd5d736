import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mstl.model import ArchitectureSpec
from mstl.optim import TrainConfig
from mstl.tensor import RngStream
from mstl.textures import default_task, synth_texture_task

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return RngStream(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(99)


@pytest.fixture
def tiny_spec():
    """Smallest member of the architecture family, 4 classes."""
    return ArchitectureSpec(k=1, dense_widths=(16, 8), num_classes=4)


@pytest.fixture
def quick_config():
    return TrainConfig(batch_size=16, max_epochs=3, patience_epochs=2, seed=5)


@pytest.fixture(scope="session")
def tiny_task():
    """Four easy classes, 24 train / 12 val / 12 test patches per class."""
    return synth_texture_task(default_task(seed=3, train_per_class=24, val_per_class=12, test_per_class=12))


TINY_MANIFEST = {
    "seed": 1,
    "data": {
        "target": {"preset": "default4", "train_per_class": 12, "val_per_class": 6, "test_per_class": 6},
        "sources": {"preset": "textures3", "train_per_class": 6, "val_per_class": 3},
        "augment": False,
    },
    "architecture": {"k": 1, "dense_widths": [16, 8]},
    "train": {"batch_size": 32, "max_epochs": 3, "patience_epochs": 3},
    "transfer": {"depths": [2, 5], "repetitions": 1,
                 "pretrain": {"batch_size": 32, "max_epochs": 2, "patience_epochs": 2}},
    "ensemble": {"N": 1, "M": 2, "repeats": 2, "n_scratch": 1},
    "distill": {"train": {"batch_size": 32, "max_epochs": 2, "patience_epochs": 2}},
    "mtl": {"enabled": True, "train": {"batch_size": 32, "max_epochs": 2, "patience_epochs": 2},
            "finetune": {"batch_size": 32, "max_epochs": 1, "patience_epochs": 1}},
}


@pytest.fixture
def tiny_manifest(tmp_path):
    """Path of a whole-pipeline manifest that runs in a few seconds."""
    import json
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY_MANIFEST, indent=2))
    return p


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, in criterion order."""
    results = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            label = dict(getattr(rep, "user_properties", [])).get("criterion")
            if label is None:
                continue
            ok = rep.passed and results.get(label, True)
            results[label] = ok
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(results, key=lambda s: int(s.split()[0])):
        terminalreporter.write_line(f"{'PASS' if results[label] else 'FAIL'} {label}")
