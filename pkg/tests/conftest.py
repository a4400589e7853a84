import functools

import pytest

from uhrkit import analysis, presets
from uhrkit.graph import infer_shapes


@functools.lru_cache(maxsize=None)
def shaped_preset(name, shape=presets.COST_INPUT_SHAPE):
    return infer_shapes(presets.build(name), shape)


@pytest.fixture(scope="session")
def calibration():
    baselines = [
        (shaped_preset(name), target) for name, target in presets.BASELINE_GFLOPS.items()
    ]
    return analysis.calibrate_convention(baselines)


@pytest.fixture(scope="session")
def convention(calibration):
    return calibration.convention
