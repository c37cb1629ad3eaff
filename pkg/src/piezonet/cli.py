"""Command-line entry point: scenario runs and the reproducible demo experiments."""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

from piezonet.sim import (
    RunResult, ScenarioError, air_scenario, calibrate_air, contact_scenario, inchworm_scenario,
    lift_scenario, link_scenario, load_scenario, pdr_scenario, run, sync_scenario,
)
from piezonet.sync import convergence_cycle

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2

FIXTURE_BUILDERS = {
    "inchworm3": inchworm_scenario,
    "lift3": lift_scenario,
    "sync2": sync_scenario,
    "contact2": contact_scenario,
    "pdr": pdr_scenario,
    "air1m": air_scenario,
    "link2": link_scenario,
}


def fixture_names() -> list[str]:
    root = resources.files("piezonet") / "fixtures"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def read_fixture(name: str) -> dict:
    return json.loads((resources.files("piezonet") / "fixtures" / f"{name}.json").read_text())


def _k_list(text: str) -> list[int]:
    try:
        ks = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of integers: {text!r}") from None
    if not ks or any(k <= 0 for k in ks):
        raise argparse.ArgumentTypeError("k values must be positive integers")
    return ks


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="piezonet", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name: str, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, default=None, help="output directory")
        return p

    p = add("run", "run a scenario JSON file or a shipped fixture by name")
    p.add_argument("scenario")
    p = add("pdr-sweep", "packet delivery ratio against bitrate")
    p.add_argument("--k-list", type=_k_list, default=[32, 16, 8, 4, 2, 1])
    p.add_argument("--packets", type=_positive, default=1000)
    p.add_argument("--snr-db", type=float, default=40.0)
    p = add("sync-demo", "chirp synchronization of robots at 1 m")
    p.add_argument("--robots", type=_positive, default=2)
    p.add_argument("--offset-ms", type=float, default=250.0)
    p.add_argument("--period-ms", type=float, default=2000.0)
    p.add_argument("--cycles", type=_positive, default=10)
    p.add_argument("--audio", action="store_true", help="record robot 1's listening module")
    p = add("contact-demo", "sensitized region with a scripted contact at 2 s")
    p.add_argument("--sources", type=int, choices=(1, 2, 3), default=2)
    p = add("inchworm", "command propagation down a chain")
    p.add_argument("--robots", type=_positive, default=3)
    p = add("lift", "synchronized simultaneous inflation")
    p.add_argument("--robots", type=_positive, default=3)
    p.add_argument("--max-offset-ms", type=float, default=300.0)
    p = add("calibrate-air", "bisect the air coupling constant to a target SNR at 1 m")
    p.add_argument("--target-db", type=float, default=7.0)
    p.add_argument("--tol-db", type=float, default=0.01)
    return ap


def _emit(res: RunResult, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(res.trace_csv)
    else:
        res.write(out)
        print(f"wrote {out}", file=sys.stderr)


def _failed(res: RunResult) -> bool:
    bad = {"lift-abort", "stall", "delivery-failed"}
    return any(e["kind"] in bad for e in res.events)


def _scenario_doc(args: argparse.Namespace) -> dict:
    cmd = args.command
    if cmd == "run":
        path = Path(args.scenario)
        if path.exists():
            doc = json.loads(path.read_text())
        elif args.scenario in fixture_names():
            doc = read_fixture(args.scenario)
        else:
            raise ScenarioError([f"no such scenario file or fixture: {args.scenario}"])
        if "--seed" in sys.argv or args.seed != 0:
            doc["seed"] = args.seed
        return doc
    if cmd == "pdr-sweep":
        return pdr_scenario(tuple(args.k_list), args.packets, args.snr_db, args.seed)
    if cmd == "sync-demo":
        return sync_scenario(args.robots, args.offset_ms, args.period_ms, args.cycles, args.seed,
                             audio=args.audio)
    if cmd == "contact-demo":
        return contact_scenario(args.sources, args.seed)
    if cmd == "inchworm":
        return inchworm_scenario(args.robots, args.seed)
    if cmd == "lift":
        return lift_scenario(args.robots, args.max_offset_ms, args.seed)
    raise AssertionError(cmd)


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    if args.command == "calibrate-air":
        ref, snr = calibrate_air(args.target_db, args.tol_db, args.seed)
        print(f"coupling_ref = {ref:.4g}  (measured {snr:.3f} dB)")
        if args.out is not None:
            res = run(load_scenario(air_scenario(float(f"{ref:.4g}"), args.seed)))
            res.write(args.out)
        return EXIT_OK

    try:
        doc = _scenario_doc(args)
        scenario = load_scenario(doc)
    except (ScenarioError, json.JSONDecodeError, OSError) as exc:
        errors = exc.errors if isinstance(exc, ScenarioError) else [str(exc)]
        for e in errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    res = run(scenario, stop_when_done=scenario.experiment["kind"] == "lift")
    _emit(res, args.out)
    if args.command == "sync-demo":
        cyc = convergence_cycle(res.summary.get("offsets_ms", []))
        print(f"converged at cycle {cyc}" if cyc is not None else "did not converge", file=sys.stderr)
    return EXIT_FAILED if _failed(res) else EXIT_OK
