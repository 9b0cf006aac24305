import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from ifdreid.datamodel import DatasetIndex, Sample, default_vocabulary  # noqa: E402
from ifdreid.synthdata import SynthConfig, generate_split  # noqa: E402


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """A reduced synthetic set on disk: 4 ids x 3 outfits x 4 images."""
    root = tmp_path_factory.mktemp("synth")
    cfg = SynthConfig(num_identities=4, clothings_per_identity=3, images_per_appearance=4)
    generate_split(cfg, root)
    return root, cfg


@pytest.fixture
def vocab():
    return default_vocabulary()


def make_sample(identity=0, clothing=0, camera=0, size=(8, 4), seed=0):
    rng = np.random.default_rng(seed)
    image = rng.random((*size, 3)).astype(np.float32)
    parsing = rng.integers(0, 9, size=size)
    return Sample(image, parsing, identity, clothing, camera)


def make_index(spec, size=(8, 4)):
    """``spec`` maps (identity, clothing) -> image count."""
    samples = []
    k = 0
    for (pid, cl), n in spec.items():
        for _ in range(n):
            samples.append(make_sample(pid, cl, cl % 2, size, seed=k))
            k += 1
    return DatasetIndex(tuple(samples))


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


# one verdict line per acceptance criterion, echoed at the end of the run
CRITERIA: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> str:
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
    CRITERIA[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[number])
