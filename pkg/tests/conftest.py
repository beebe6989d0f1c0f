import numpy as np
import pytest

from monodyn.dynamics import BCCParams, BiochemicalCircuit, LotkaVolterra, LVParams


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def lv_model():
    """Two-patch LV model with rates drawn on [0, 5]; stable from the unit box."""
    return LotkaVolterra(LVParams.random(2, 4, tau=0.0005))


@pytest.fixture
def bcc_model():
    return BiochemicalCircuit(BCCParams.random(4, 0, alpha_range=(0.5, 3.0)))
