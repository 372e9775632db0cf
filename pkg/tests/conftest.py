import os
import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from liclab import codec as C
from liclab.datagen import DomainKind, DomainSpec, generate
from liclab.experiment import ExperimentConfig, run_experiment

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def init_model():
    return C.CodecModel.initialize(0).freeze()


@pytest.fixture(scope="session")
def source_images():
    return generate(DomainSpec("smooth", DomainKind.SMOOTH_NATURAL, seed=11, size=64), 32)


@pytest.fixture(scope="session")
def target_images():
    return generate(DomainSpec("pixel", DomainKind.PIXEL_ART, seed=12, size=64), 32)


@pytest.fixture(scope="session")
def small_model(source_images):
    """A briefly pretrained codec: enough structure for adaptation tests, cheap to build."""
    return C.pretrain_baseline(source_images, 0.0067, steps=150, seed=3, patch=32)


@pytest.fixture(scope="session")
def desk_experiment(tmp_path_factory):
    """The full desk-scale experiment, run once per session.

    Set LICLAB_CACHE to a directory to reuse pretrained models between sessions.
    """
    cache = os.environ.get("LICLAB_CACHE") or tmp_path_factory.mktemp("pretrain-cache")
    return run_experiment(ExperimentConfig(), cache_dir=cache, strict=False)



def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
