"""Command-line front end.

Exit codes:

    0  success
    1  input parse or validation error
    2  observer LMI infeasible
    3  solver indeterminate
    4  certificate does not match the plant/network files (stale)
    5  a certificate check or the enclosure check failed
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dynsim, models, observer_synth as osyn
from .conic_core import Status
from .nnet import NetworkError, load_network

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_INFEASIBLE = 2
EXIT_INDETERMINATE = 3
EXIT_STALE = 4
EXIT_CHECK = 5


class _Fail(Exception):
    def __init__(self, code, msg):
        self.code = code
        super().__init__(msg)


def _load_inputs(args):
    if not args.plant:
        raise _Fail(EXIT_VALIDATION, "--plant is required")
    try:
        plant = osyn.load_plant(args.plant)
        net = load_network(args.net) if args.net else None
        plant.check_network(net)
    except FileNotFoundError as exc:
        raise _Fail(EXIT_VALIDATION, f"cannot read {exc.filename}") from None
    except (osyn.PlantError, NetworkError) as exc:
        raise _Fail(EXIT_VALIDATION, str(exc)) from None
    except json.JSONDecodeError as exc:
        raise _Fail(EXIT_VALIDATION, f"network file is not valid JSON: {exc}") from None
    return plant, net


def _load_cert(args, plant, net):
    if not args.cert:
        raise _Fail(EXIT_VALIDATION, "--cert is required")
    try:
        gains = osyn.load_certificate(args.cert)
    except FileNotFoundError as exc:
        raise _Fail(EXIT_VALIDATION, f"cannot read {exc.filename}") from None
    except (osyn.PlantError, ValueError) as exc:
        raise _Fail(EXIT_VALIDATION, str(exc)) from None
    if gains.problem_hash != osyn.input_hash(plant, net):
        raise _Fail(EXIT_STALE, "stale certificate: its input hash does not match the plant/network files")
    return gains


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise _Fail(EXIT_VALIDATION, f"output directory not writable: {exc}") from None
    return out


def _print_report(rep: osyn.CertificateReport):
    print(f"lmi max eigenvalue      {rep.lmi_max_eig:.6e}  {'ok' if rep.lmi_ok else 'FAIL'}")
    print(f"metzler min off-diag    lower {rep.metzler_lo_min:.6e}  upper {rep.metzler_hi_min:.6e}  "
          f"{'ok' if rep.metzler_ok else 'FAIL'}")
    print(f"positivity min off-diag {rep.positivity_min:.6e}  {'ok' if rep.positivity_ok else 'FAIL'}")
    print(f"reduced form max eig    {rep.schur_max_eig:.6e}  {'ok' if rep.schur_ok else 'FAIL'}")
    print(f"multipliers             Q min {rep.q_min:.6e}  lambda min {rep.lambda_min:.6e}  "
          f"{'ok' if rep.multipliers_ok else 'FAIL'}")
    if rep.bracketing is not None:
        b = rep.bracketing
        print(f"bracketing              max violation {max(b.max_violation, b.max_layer_violation):.3e} "
              f"over {b.samples} samples  {'ok' if b.passed else 'FAIL'}")


def cmd_synth(args) -> int:
    plant, net = _load_inputs(args)
    out = _out_dir(args)
    opts = osyn.SynthOptions(seed=args.seed, tol_psd=args.tol_psd)
    try:
        gains = osyn.synthesize(plant, net, opts)
    except osyn.SynthesisInfeasible as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INDETERMINATE if exc.status is Status.INDETERMINATE else EXIT_INFEASIBLE
    path = Path(args.cert) if args.cert else out / "cert.json"
    osyn.save_certificate(gains, path)
    rep = osyn.verify_certificate(gains, plant, net, seed=args.seed)
    print(f"feasible, margin {gains.margin_psd:.6e}; certificate written to {path}")
    _print_report(rep)
    return EXIT_OK


def cmd_verify(args) -> int:
    plant, net = _load_inputs(args)
    gains = _load_cert(args, plant, net)
    try:
        rep = osyn.verify_certificate(gains, plant, net, seed=args.seed,
                                      tol_psd=args.tol_psd if args.tol_psd_set else None)
    except osyn.PlantError as exc:
        raise _Fail(EXIT_VALIDATION, str(exc)) from None
    _print_report(rep)
    if not rep.passed:
        print(f"failed checks: {', '.join(rep.failures())}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def _scenario(args, plant):
    if not args.scenario:
        raise _Fail(EXIT_VALIDATION, "--scenario is required")
    try:
        with open(args.scenario) as fh:
            d = json.load(fh)
        if args.step is not None:
            d["step"] = args.step
        if args.horizon is not None:
            d["horizon"] = args.horizon
        scen = dynsim.Scenario.from_dict(d)
        scen.validate(plant)
    except FileNotFoundError as exc:
        raise _Fail(EXIT_VALIDATION, f"cannot read {exc.filename}") from None
    except json.JSONDecodeError as exc:
        raise _Fail(EXIT_VALIDATION, f"scenario file is not valid JSON: {exc}") from None
    except dynsim.ScenarioError as exc:
        raise _Fail(EXIT_VALIDATION, f"scenario: {exc}") from None
    return scen


def cmd_simulate(args) -> int:
    plant, net = _load_inputs(args)
    gains = _load_cert(args, plant, net)
    scen = _scenario(args, plant)
    out = _out_dir(args)
    try:
        traj = dynsim.simulate_observer(plant, net, None, gains, scen)
    except dynsim.SimulationDiverged as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CHECK
    enc = dynsim.check_enclosure(traj)
    met = dynsim.error_metrics(traj)
    dynsim.export_csv(traj, out / "traj.csv")
    report = {
        "enclosure": {k: models._jsonable(v) for k, v in enc.__dict__.items()},
        "metrics": {**{k: models._jsonable(v) for k, v in met.__dict__.items()}, "bounded": met.bounded},
    }
    (out / "report.json").write_text(json.dumps(report, indent=1))
    print(f"enclosure {'pass' if enc.passed else 'FAIL'} (max violation {enc.max_violation:.3e}), "
          f"bounded {met.bounded}; wrote {out / 'traj.csv'}")
    return EXIT_OK if enc.passed else EXIT_CHECK


def cmd_demo_vehicle(args) -> int:
    out = _out_dir(args)
    kw = {"seed": args.seed, "out_dir": out, "tol_psd": args.tol_psd}
    if args.horizon is not None:
        kw["horizon"] = args.horizon
    if args.step is not None:
        kw["step"] = args.step
    try:
        b = models.vehicle_demo(**kw)
    except osyn.SynthesisInfeasible as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INDETERMINATE if exc.status is Status.INDETERMINATE else EXIT_INFEASIBLE
    except (dynsim.ScenarioError, models.DistillationError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_VALIDATION
    print(f"K = {np.array2string(b.K, precision=6)}; fit error {b.fit.max_error:.3e} (limit {b.fit.limit:.3e})")
    print(f"margin {b.gains.margin_psd:.6e}; enclosure {'pass' if b.enclosure.passed else 'FAIL'}; "
          f"bounded {b.metrics.bounded}; lyapunov eps {b.lyapunov.eps:.4g}, c2 {b.lyapunov.c2:.4g}")
    print(f"files: {', '.join(b.files.values())}")
    return EXIT_OK if b.passed else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nnobserver", description="Interval observers for plants with neural controllers")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--plant")
        sp.add_argument("--net")
        sp.add_argument("--cert")
        sp.add_argument("--scenario")
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--tol-psd", type=float, default=None)
        sp.add_argument("--step", type=float, default=None)
        sp.add_argument("--horizon", type=float, default=None)

    for name, fn in (("synth", cmd_synth), ("verify", cmd_verify), ("simulate", cmd_simulate)):
        sp = sub.add_parser(name)
        common(sp)
        sp.set_defaults(func=fn)
    demo = sub.add_parser("demo")
    dsub = demo.add_subparsers(dest="case", required=True)
    veh = dsub.add_parser("vehicle")
    common(veh)
    veh.set_defaults(func=cmd_demo_vehicle)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code else EXIT_OK
    args.tol_psd_set = args.tol_psd is not None
    if args.tol_psd is None:
        args.tol_psd = 1e-7
    try:
        return args.func(args)
    except _Fail as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
