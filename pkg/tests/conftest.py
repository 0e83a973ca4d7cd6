import numpy as np
import pytest

from sleepmod import quant
from sleepmod.config import reference_config
from sleepmod.fixtures import CALIB_SEED, EVAL_SEED, load_fixture, synthetic_recording, windows_of
from sleepmod.model import FloatEngine, QuantEngine

N_CALIB_WINDOWS = 512
N_EVAL_WINDOWS = 1000


@pytest.fixture(scope="session")
def cfg():
    return reference_config()


@pytest.fixture(scope="session")
def float_bundle():
    return load_fixture()


@pytest.fixture(scope="session")
def float_engine(cfg, float_bundle):
    return FloatEngine(cfg, float_bundle)


@pytest.fixture(scope="session")
def calib_hists(float_engine):
    segs, _ = windows_of(synthetic_recording(CALIB_SEED, N_CALIB_WINDOWS))
    return quant.run_calibration_pass(float_engine, segs)


@pytest.fixture(scope="session")
def quant_bundles(cfg, float_bundle, calib_hists):
    out = {}
    for method in (quant.MINMAX, quant.ENTROPY, quant.Percentile(99.99)):
        params = quant.calibrate_all(calib_hists, method)
        out[method.label()] = quant.build_quantized_model(float_bundle, params, cfg, method)
    return out


@pytest.fixture(scope="session")
def quant_engine(cfg, quant_bundles):
    return QuantEngine(cfg, quant_bundles["minmax"])


@pytest.fixture(scope="session")
def eval_windows():
    """``N_EVAL_WINDOWS`` scored windows plus the two warm-up windows before them."""
    return windows_of(synthetic_recording(EVAL_SEED, N_EVAL_WINDOWS + 2))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
