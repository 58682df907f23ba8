import math

import numpy as np
import pytest

from infarctseg.core import Spacing
from infarctseg.errors import SpecError
from infarctseg.io.phantom import PhantomSpec, generate_phantom, random_phantom_spec


def spec(**kw):
    base = dict(
        extents=(21, 21, 21),
        spacing=Spacing(1, 1, 1),
        brain_semi_axes=(9.0, 9.5, 9.5),
        brain_center=(10.0, 10.0, 10.0),
        lesion_semi_axes=(4.0, 6.0, 6.0),
        lesion_center=(10.0, 10.0, 10.0),
    )
    base.update(kw)
    return PhantomSpec(**base)


def test_noise_free_intensities():
    vol, mask = generate_phantom(spec())
    lesion = mask.data == 1
    assert lesion.any()
    assert np.all(vol.data[lesion] == 25.0)
    assert set(np.unique(vol.data[~lesion]).tolist()) == {0.0, 35.0}


def test_lesion_volume_close_to_analytic():
    _, mask = generate_phantom(spec())
    analytic = 4 / 3 * math.pi * 4 * 6 * 6
    assert abs(int(mask.data.sum()) - analytic) / analytic < 0.05
    # brute-force voxel-centre scan
    count = sum(
        1
        for z in range(21)
        for y in range(21)
        for x in range(21)
        if ((z - 10) / 4) ** 2 + ((y - 10) / 6) ** 2 + ((x - 10) / 6) ** 2 <= 1
    )
    assert int(mask.data.sum()) == count == 585


@pytest.mark.parametrize(
    "kw",
    [
        {"lesion_semi_axes": (0.0, 0.0, 0.0)},
        {"lesion_offset_hu": 5.0},
        {"lesion_center": (10.0, 10.0, 16.0)},  # pokes out of the brain
        {"noise_std": -1.0},
    ],
)
def test_invalid_specs(kw):
    with pytest.raises(SpecError):
        generate_phantom(spec(**kw))


def test_noise_is_seeded():
    a, _ = generate_phantom(spec(noise_std=3.0, seed=5))
    b, _ = generate_phantom(spec(noise_std=3.0, seed=5))
    c, _ = generate_phantom(spec(noise_std=3.0, seed=6))
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_random_spec_lesion_on_central_slice():
    for i in range(6):
        s = random_phantom_spec(i, 7, slices=3)
        _, mask = generate_phantom(s)
        per_slice = mask.data.reshape(3, -1).sum(axis=1)
        assert per_slice[1] > 0 and per_slice[0] == per_slice[2] == 0
        assert s.case_id == f"case_{i:03d}"
