import numpy as np
import pytest
from hypothesis import settings

from infarctseg.core import Spacing
from infarctseg.io.phantom import generate_phantom, random_phantom_spec
from infarctseg.network import NetworkConfig

settings.register_profile("repo", derandomize=True, deadline=None, max_examples=60)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_cfg():
    return NetworkConfig.toy()


@pytest.fixture
def phantom_pair():
    return generate_phantom(random_phantom_spec(0, 7))


def toy_slices(n=8, seed=7, size=64):
    """n single-slice phantom cases stacked as (n, size, size) images and masks."""
    images, masks = [], []
    for i in range(n):
        vol, mask = generate_phantom(random_phantom_spec(i, seed, slices=1, size=size, spacing=Spacing(1.0, 1.0, 5.0)))
        images.append(vol.data[0])
        masks.append(mask.data[0])
    return np.stack(images), np.stack(masks)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for the acceptance summary."""

    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
