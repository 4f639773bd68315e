"""Shared fixtures.  Expensive forward simulations are session scoped."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dbar_eit.forward import make_pattern_basis, simulate_dataset
from dbar_eit.geometry import DomainDisc, build_zgrid
from dbar_eit.mesh import MeshConfig
from dbar_eit import thorax


@pytest.fixture(scope="session")
def domain32() -> DomainDisc:
    return thorax.paper_domain()


@pytest.fixture(scope="session")
def domain16() -> DomainDisc:
    return DomainDisc(radius=1.0, electrode_count=16, coverage=0.5)


@pytest.fixture(scope="session")
def basis32(domain32):
    return make_pattern_basis(domain32.electrode_count)


@pytest.fixture(scope="session")
def basis16(domain16):
    return make_pattern_basis(domain16.electrode_count)


@pytest.fixture(scope="session")
def zgrid_small():
    return build_zgrid(143.2, 41)


@pytest.fixture(scope="session")
def thorax_regions_true():
    return thorax.thorax_regions(143.2, thorax.PHANTOM_DIVIDER_FRACTION)


@pytest.fixture(scope="session")
def homogeneous_dataset(domain32, basis32):
    """sigma = 1 frames on the paper geometry, small meshes."""
    return simulate_dataset(domain32, lambda z: np.ones(np.shape(z)), basis=basis32,
                            data_mesh=MeshConfig(6), reference_mesh=MeshConfig(5))


@pytest.fixture(scope="session")
def thorax_dataset(domain32, basis32, thorax_regions_true):
    """Noise-free effusion-phantom frames on the paper geometry, small meshes."""
    from dbar_eit.priors import evaluate_piecewise

    sigma_fn = lambda z: evaluate_piecewise(thorax_regions_true, thorax.PHANTOM_VALUES, z)  # noqa: E731
    return simulate_dataset(domain32, sigma_fn, basis=basis32,
                            data_mesh=MeshConfig(6), reference_mesh=MeshConfig(5))
