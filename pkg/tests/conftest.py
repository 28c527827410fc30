import numpy as np
import pytest

from dnnmg import mesh as meshmod


@pytest.fixture(scope="session")
def box2d():
    """Unit square, 2x2 cells, refined twice (levels 0..2, all walls)."""
    h = meshmod.build_template_mesh("box", extent_lo=(0, 0), extent_hi=(1, 1),
                                    n_cells=(2, 2))
    meshmod.refine_uniform(h)
    meshmod.refine_uniform(h)
    return h


@pytest.fixture(scope="session")
def channel2d():
    """Small rectangular channel with inflow/outflow tags, levels 0..2."""
    h = meshmod.build_template_mesh("box", extent_lo=(0, 0), extent_hi=(2.0, 0.5),
                                    n_cells=(4, 1), channel_tags=True)
    meshmod.refine_uniform(h)
    meshmod.refine_uniform(h)
    return h


@pytest.fixture(scope="session")
def cylinder2d():
    """Benchmark channel with a circular obstacle, levels 0..2."""
    h = meshmod.build_template_mesh("channel_cylinder_2d", growth=2.0)
    meshmod.refine_uniform(h)
    meshmod.refine_uniform(h)
    return h


@pytest.fixture(scope="session")
def box3d():
    """Unit cube, one cell, refined twice (levels 0..2)."""
    h = meshmod.build_template_mesh("box", extent_lo=(0, 0, 0),
                                    extent_hi=(1, 1, 1), n_cells=(1, 1, 1))
    meshmod.refine_uniform(h)
    meshmod.refine_uniform(h)
    return h


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)
