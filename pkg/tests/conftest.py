"""Shared fixtures: small synthetic landscapes and a compact model config.

The session-scoped landscape keeps the suite fast; tests that mutate nothing
share it, tests that need a different size or seed build their own.
"""

import numpy as np
import pytest

from cropmap.model import ModelConfig
from cropmap.raster import RasterGrid
from cropmap.synthetic import SyntheticConfig, generate_synthetic_landscape


@pytest.fixture(scope="session")
def landscape():
    """512 x 512 three-category landscape, fixed seed."""
    return generate_synthetic_landscape(SyntheticConfig(rows=512, cols=512), seed=3)


@pytest.fixture(scope="session")
def small_model_config():
    """Narrow widths so forward passes stay cheap in unit tests."""
    return ModelConfig(base_channels=(8, 16, 24, 32), n_categories=8,
                       attention_inter_channels=8, dropout_rate=0.1)


def make_grid(values, origin_x=500000.0, origin_y=1500000.0, pixel_size=5.0,
              crs_id="EPSG:32648", nodata=None):
    values = np.asarray(values)
    return RasterGrid.create(values, origin_x=origin_x, origin_y=origin_y,
                             pixel_size=pixel_size, crs_id=crs_id, nodata=nodata)


@pytest.fixture
def grid_factory():
    return make_grid
