import numpy as np
import pytest

from seecontrol.presets import control_diffusion, lq_diagonal, nonlinear_sine


@pytest.fixture(scope="session")
def presets():
    return {"lq_diagonal": lq_diagonal(), "nonlinear_sine": nonlinear_sine(),
            "control_diffusion": control_diffusion()}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
