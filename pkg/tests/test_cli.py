import json

import numpy as np
import pytest

from nnobserver.cli import EXIT_CHECK, EXIT_INFEASIBLE, EXIT_OK, EXIT_STALE, EXIT_VALIDATION, main
from nnobserver.models import DEMO_BOX, distill_controller
from nnobserver.nnet import save_network
from nnobserver.observer_synth import PlantModel, load_certificate, plant_to_dict, save_plant


@pytest.fixture(scope="module")
def files(tmp_path_factory, vehicle):
    d = tmp_path_factory.mktemp("cli")
    plant = save_plant(vehicle["plant"], d / "plant.json")
    net = save_network(vehicle["net"], d / "net.json")
    other = save_network(distill_controller(vehicle["K"], *DEMO_BOX, seed=1), d / "other.json")
    cert = d / "cert.json"
    assert main(["synth", "--plant", str(plant), "--net", str(net), "--cert", str(cert)]) == EXIT_OK
    return {"dir": d, "plant": str(plant), "net": str(net), "other": str(other), "cert": str(cert)}


def scenario_file(path, vehicle, horizon=10.0, x0=(0.2, 0.0, 0.05, 0.0)):
    x0 = np.array(x0)
    pad = np.array([0.1, 0.1, 0.05, 0.05])
    d = {"x0": x0.tolist(), "x0_lo": (np.array([0.2, 0, 0.05, 0]) - pad).tolist(),
         "x0_hi": (np.array([0.2, 0, 0.05, 0]) + pad).tolist(),
         "u": {"kind": "constant", "value": vehicle["u"].value.tolist()},
         "u_lo": vehicle["u_lo"].tolist(), "u_hi": vehicle["u_hi"].tolist(), "horizon": horizon, "step": 1e-3}
    path.write_text(json.dumps(d))
    return str(path)


def test_synth_writes_certificate(files):
    g = load_certificate(files["cert"])
    assert g.margin_psd >= 1e-7 and g.L_lo.shape == (4, 4)


def test_synth_negative_B_phi(tmp_path, capsys):
    d = plant_to_dict(PlantModel([[-1.0]], [[1.0]], [[1.0]], [[1.0]]))
    d["B_phi"] = [[-1.0]]
    (tmp_path / "p.json").write_text(json.dumps(d))
    assert main(["synth", "--plant", str(tmp_path / "p.json")]) == EXIT_VALIDATION
    assert "nonnegative" in capsys.readouterr().err


def test_synth_unobservable(tmp_path):
    p = PlantModel([[0.5, 1.0], [1.0, 0.5]], np.zeros((2, 0)), np.eye(2), np.zeros((1, 2)))
    save_plant(p, tmp_path / "p.json")
    assert main(["synth", "--plant", str(tmp_path / "p.json"), "--out", str(tmp_path)]) == EXIT_INFEASIBLE
    assert not (tmp_path / "cert.json").exists()


def test_missing_file_and_bad_flags(tmp_path):
    assert main(["synth", "--plant", str(tmp_path / "nope.json")]) == EXIT_VALIDATION
    assert main(["synth"]) == EXIT_VALIDATION
    assert main(["frobnicate"]) == EXIT_VALIDATION


def test_verify_fresh(files, capsys):
    assert main(["verify", "--plant", files["plant"], "--net", files["net"], "--cert", files["cert"]]) == EXIT_OK
    assert "metzler" in capsys.readouterr().out


def test_verify_tampered(files, tmp_path, capsys):
    d = json.loads(open(files["cert"]).read())
    d["L_lo"][0][0] += 5.0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(d))
    assert main(["verify", "--plant", files["plant"], "--net", files["net"], "--cert", str(bad)]) == EXIT_CHECK
    assert "metzler" in capsys.readouterr().err


def test_verify_stale(files, capsys):
    assert main(["verify", "--plant", files["plant"], "--net", files["other"], "--cert", files["cert"]]) == EXIT_STALE
    assert "stale" in capsys.readouterr().err


def test_simulate_vehicle(files, vehicle, tmp_path):
    scen = scenario_file(tmp_path / "s.json", vehicle)
    out = tmp_path / "out"
    code = main(["simulate", "--plant", files["plant"], "--net", files["net"], "--cert", files["cert"],
                 "--scenario", scen, "--out", str(out)])
    assert code == EXIT_OK
    lines = (out / "traj.csv").read_text().splitlines()
    assert len(lines) == 1 + 10001
    rep = json.loads((out / "report.json").read_text())
    assert rep["enclosure"]["passed"] and rep["metrics"]["bounded"]


def test_simulate_bad_initial_state(files, vehicle, tmp_path, capsys):
    scen = scenario_file(tmp_path / "s.json", vehicle, horizon=0.1, x0=(0.5, 0.0, 0.05, 0.0))
    code = main(["simulate", "--plant", files["plant"], "--net", files["net"], "--cert", files["cert"],
                 "--scenario", scen, "--out", str(tmp_path)])
    assert code == EXIT_VALIDATION
    assert "x0_lo <= x0 <= x0_hi" in capsys.readouterr().err


def test_simulate_zero_width(tmp_path):
    # no network input and no input channel: the bounds must reproduce the state
    p = PlantModel([[-1.0, 0.5], [0.2, -2.0]], np.zeros((2, 1)), np.zeros((2, 1)), np.eye(2))
    save_plant(p, tmp_path / "p.json")
    assert main(["synth", "--plant", str(tmp_path / "p.json"), "--out", str(tmp_path)]) == EXIT_OK
    x0 = [0.4, -0.3]
    (tmp_path / "s.json").write_text(json.dumps({"x0": x0, "x0_lo": x0, "x0_hi": x0,
                                                 "u": {"kind": "constant", "value": [0.0]},
                                                 "u_lo": [-1.0], "u_hi": [1.0], "horizon": 1.0, "step": 1e-2}))
    code = main(["simulate", "--plant", str(tmp_path / "p.json"), "--cert", str(tmp_path / "cert.json"),
                 "--scenario", str(tmp_path / "s.json"), "--out", str(tmp_path)])
    assert code == EXIT_OK
    data = np.loadtxt(tmp_path / "traj.csv", delimiter=",", skiprows=1)
    x, xl, xh = data[:, 1:3], data[:, 3:5], data[:, 5:7]
    assert np.abs(x - xl).max() <= 1e-12 and np.abs(x - xh).max() <= 1e-12


def test_demo_vehicle_short(tmp_path, capsys):
    assert main(["demo", "vehicle", "--horizon", "0.5", "--out", str(tmp_path)]) == EXIT_OK
    assert "enclosure pass" in capsys.readouterr().out
    assert (tmp_path / "vehicle_traj.csv").read_text().count("\n") == 502


def test_certificate_round_trip_is_exact(files, tmp_path):
    from nnobserver.observer_synth import save_certificate

    g = load_certificate(files["cert"])
    again = save_certificate(g, tmp_path / "again.json")
    assert again.read_text() == open(files["cert"]).read()
