import numpy as np
import pytest

from oscthin import ProfileSpec, build_cell_mesh


@pytest.fixture(scope="session")
def flat_profile():
    return ProfileSpec(period=1.0, mean=1.0)


@pytest.fixture(scope="session")
def reference_profile():
    """The oscillating profile used throughout: 1 + cos(2 pi y) / 2."""
    return ProfileSpec(period=1.0, mean=1.0, cos_coeffs=(0.5,))


@pytest.fixture(scope="session")
def small_cell_mesh(reference_profile):
    return build_cell_mesh(reference_profile, 16, 8)


@pytest.fixture(scope="session")
def medium_cell_mesh(reference_profile):
    return build_cell_mesh(reference_profile, 64, 16)


@pytest.fixture(scope="session")
def unit_square_mesh(flat_profile):
    return build_cell_mesh(flat_profile, 8, 8)


def rng(seed=0):
    return np.random.default_rng(seed)
