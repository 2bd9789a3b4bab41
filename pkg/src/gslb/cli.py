"""``gslb`` command line: sim run, live up/bench/kill, report render."""
from __future__ import annotations

import argparse
import logging
import signal
import sys
from pathlib import Path
from typing import List, Optional, Tuple

from .bench import (
    TABLE3,
    TABLE4,
    AbSpec,
    SystemUnavailable,
    TableDocument,
    TableRow,
    aggregate_repeats,
    render_table,
    run_ab,
    run_duration,
)
from .scenario import SchemaError, ScenarioFile, build_sim_system, parse_scenario
from .wire import BindFailure

log = logging.getLogger("gslb")

EXIT_OK = 0
EXIT_RUN_FAILED = 1
EXIT_USAGE = 2
EXIT_BIND = 3


def scenario_label(n_backends: int, n_balancers: int) -> str:
    if n_balancers == 1:
        return f"(1) {n_backends} web VMs with one load balancer"
    return f"(2) {n_backends} web VMs with two-level global load balancer ({n_balancers} load balancers)"


def _which(scn: ScenarioFile) -> str:
    return TABLE3 if scn.workload["kind"] == "ab" else TABLE4


def _run_one(spec, system):
    return run_ab(spec, system) if isinstance(spec, AbSpec) else run_duration(spec, system)


def run_sim(scn: ScenarioFile, seed: Optional[int] = None) -> Tuple[TableDocument, List[str]]:
    """Run the workload against every app (one row each), repeats averaged.

    Repeat ``i`` uses seed ``seed + i``; every repeat gets a fresh system.
    """
    base = scn.seed if seed is None else seed
    rows = []
    problems = []
    for app in scn.apps:
        spec = scn.workload_spec(app.app_id)
        reports = []
        for i in range(spec.repeats):
            report = _run_one(spec, build_sim_system(scn, seed=base + i))
            problems += [f"{app.app_id}: {p}" for p in report.self_check]
            reports.append(report)
        rows.append(TableRow(scenario_label(len(app.backends), len(app.balancers)),
                             app.bandwidth_groups, app.algorithm, aggregate_repeats(reports)))
    return render_table(rows, _which(scn)), problems


def run_live_bench(scn: ScenarioFile, client) -> TableDocument:
    rows = []
    for app in scn.apps:
        spec = scn.workload_spec(app.app_id)
        reports = [_run_one(spec, client) for _ in range(spec.repeats)]
        rows.append(TableRow(scenario_label(len(app.backends), len(app.balancers)),
                             app.bandwidth_groups, app.algorithm, aggregate_repeats(reports)))
    return render_table(rows, _which(scn))


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _load(path, mode: str) -> ScenarioFile:
    scn = parse_scenario(path)
    if scn.mode != mode:
        raise SchemaError([f"mode: scenario is {scn.mode!r}, this command needs {mode!r}"])
    return scn


def cmd_sim_run(args) -> int:
    scn = _load(args.scenario, "sim")
    doc, problems = run_sim(scn, args.seed)
    _emit(doc.render(args.format), args.out)
    for p in problems:
        print(f"self-check failed: {p}", file=sys.stderr)
    return EXIT_RUN_FAILED if problems else EXIT_OK


def cmd_live_up(args) -> int:
    from .live import LiveDeployment

    scn = _load(args.scenario, "live")
    dep = LiveDeployment(scn)
    dep.start()
    try:
        control = scn.ports.get("control")
        if control:
            dep.serve_control(f"{scn.host}:{control}")
        for name, address in dep.listing():
            print(f"{name}\t{address}", flush=True)
        if control:
            print(f"control\t{scn.host}:{control}", flush=True)
        signal.signal(signal.SIGTERM, lambda *_: dep.shutdown_requested.set())
        try:
            while not dep.shutdown_requested.wait(0.2):
                pass
        except KeyboardInterrupt:
            pass
    finally:
        dep.stop()
    return EXIT_OK


def cmd_live_bench(args) -> int:
    from .wire import LiveClient

    scn = _load(args.scenario, "live")
    client = LiveClient(scn.master, scn.slave, args.connect_timeout)
    doc = run_live_bench(scn, client)
    _emit(doc.render(args.format), args.out)
    return EXIT_OK


def cmd_live_kill(args) -> int:
    from .live import control_command

    if args.control:
        address = args.control
    else:
        scn = _load(args.scenario, "live")
        if not scn.ports.get("control"):
            raise SchemaError(["ports.control: needed to reach a running deployment"])
        address = f"{scn.host}:{scn.ports['control']}"
    reply = control_command(address, f"KILL {args.component}")
    if reply != "OK":
        print(reply, file=sys.stderr)
        return EXIT_RUN_FAILED
    print(f"killed {args.component}")
    return EXIT_OK


def cmd_report_render(args) -> int:
    doc = TableDocument.from_json(Path(args.report).read_text())
    _emit(doc.render(args.format), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gslb", description="Two-level global load balancing lab")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="group", required=True)

    def fmt(sp):
        sp.add_argument("--format", choices=["text", "csv", "json"], default="json")
        sp.add_argument("--out", help="write the report here instead of stdout")

    sim = sub.add_parser("sim").add_subparsers(dest="cmd", required=True)
    run = sim.add_parser("run", help="simulate a scenario")
    run.add_argument("scenario")
    run.add_argument("--seed", type=int)
    fmt(run)
    run.set_defaults(func=cmd_sim_run)

    live = sub.add_parser("live").add_subparsers(dest="cmd", required=True)
    up = live.add_parser("up", help="start every component of a live scenario")
    up.add_argument("scenario")
    up.set_defaults(func=cmd_live_up)
    bench = live.add_parser("bench", help="run the workload against a running deployment")
    bench.add_argument("scenario")
    bench.add_argument("--connect-timeout", type=float, default=0.2)
    fmt(bench)
    bench.set_defaults(func=cmd_live_bench)
    kill = live.add_parser("kill", help="stop one component, e.g. selector-master")
    kill.add_argument("component")
    target = kill.add_mutually_exclusive_group(required=True)
    target.add_argument("--scenario")
    target.add_argument("--control", help="host:port of the control channel")
    kill.set_defaults(func=cmd_live_kill)

    report = sub.add_parser("report").add_subparsers(dest="cmd", required=True)
    render = report.add_parser("render", help="re-render a JSON report")
    render.add_argument("report")
    fmt(render)
    render.set_defaults(func=cmd_report_render)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SchemaError as exc:
        for e in exc.errors:
            print(f"schema error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"no such file: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BindFailure as exc:
        print(f"bind failure: {exc}", file=sys.stderr)
        return EXIT_BIND
    except SystemUnavailable as exc:
        print(f"system unavailable: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILED
    except ConnectionError as exc:
        print(f"cannot reach deployment: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILED


if __name__ == "__main__":
    sys.exit(main())
