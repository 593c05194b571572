import numpy as np
import pytest

from nnobserver.models import DEFAULT_POLES, DEMO_BOX, design_feedback_gain, distill_controller, vehicle_plant
from nnobserver.observer_synth import SynthOptions, synthesize


@pytest.fixture(scope="session")
def vehicle():
    plant, u_nom, u_lo, u_hi = vehicle_plant()
    K = design_feedback_gain(plant.A, plant.B_phi, DEFAULT_POLES)
    net = distill_controller(K, *DEMO_BOX, seed=0)
    gains = synthesize(plant, net, SynthOptions(seed=0, bracket_box=DEMO_BOX))
    return {"plant": plant, "u": u_nom, "u_lo": u_lo, "u_hi": u_hi, "K": K, "net": net, "gains": gains}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n])
