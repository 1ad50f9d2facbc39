import numpy as np
import pytest

from sawopto.emitter import ModulatedEmitter
from sawopto.resonator import ResonatorMode

# Four cavity modes of the measured device.
TABLE_I = (
    ResonatorMode(298.425e6, 1300.0, 5900.0),
    ResonatorMode(299.425e6, 3000.0, 800.0),
    ResonatorMode(300.975e6, 1600.0, 2300.0),
    ResonatorMode(303.561e6, 1700.0, 6000.0),
)


@pytest.fixture
def table_modes():
    return list(TABLE_I)


@pytest.fixture
def s11_grid():
    return np.linspace(296e6, 306e6, 10001)


@pytest.fixture
def split_emitter():
    """ΔE = 0.46 meV emitter with a 0.05 meV half-width line."""
    return ModulatedEmitter(omega0=1600.0, gamma=0.05, delta_e=0.46, f_rf=299.425e6)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
