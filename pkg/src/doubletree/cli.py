"""Command line entry point.

Experiment knobs live in a JSON spec file; flags only pick the subcommand,
the spec file, and where outputs go::

    doubletree generate SPEC --out topo.txt
    doubletree run SPEC --out RUNDIR [--sequential]
    doubletree oracle SPEC --out DIR
    doubletree report RUNDIR [--format table|lines]
    doubletree decode FILE

Errors print one line ``doubletree: error[<code>]: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import random
import sys
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

from .address import Address, format_address, parse_address
from .coordinator import (
    ConfigError,
    Message,
    MonitorConfig,
    RunArtifacts,
    State,
    plan_windows,
    run_system,
)
from .engine import TraceRecord
from .metrics import OracleResult, RunMetrics, classic_oracle, compute_metrics, report
from .topology import (
    SimTopology,
    TopologyError,
    TopologyParams,
    dump_topology,
    generate_topology,
    load_topology,
)
from .wire import WireError, describe, iter_messages

EXIT_OK = 0
EXIT_ERROR = 2
EXIT_MONITOR_FAILED = 3

_CONFIG_FIELDS = {f.name for f in fields(MonitorConfig)} - {"id", "next_monitor"}


class CliError(Exception):
    def __init__(self, code: str, message: str) -> None:
        self.code = code
        super().__init__(message)


# --------------------------------------------------------------------------
# run spec


@dataclass
class RunSpec:
    seed: int
    topology_path: Path | None = None
    generator: dict[str, Any] | None = None
    monitors: list[Address] | None = None
    destinations: list[Address] | None = None
    shuffle_destinations: bool = False
    monitor_defaults: dict[str, Any] = field(default_factory=dict)
    monitor_overrides: dict[Address, dict[str, Any]] = field(default_factory=dict)
    scheduler: str = "sequential"
    start_time: float = 0.0
    link_latency: float = 0.05


def _addresses(values: Any, what: str, problems: list[str]) -> list[Address] | None:
    if values is None:
        return None
    if not isinstance(values, list):
        problems.append(f"{what} must be a list of dotted-quad addresses")
        return None
    out = []
    for v in values:
        try:
            out.append(parse_address(str(v)))
        except ValueError:
            problems.append(f"{what}: bad address {v!r}")
    return out


def load_spec(path: str | Path) -> RunSpec:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError("io", f"spec file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise CliError("config", f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise CliError("config", f"{path}: top level must be an object")

    problems: list[str] = []
    known = {
        "seed", "topology", "generator", "monitors", "destinations", "shuffle_destinations",
        "monitor_defaults", "monitor_overrides", "scheduler", "start_time", "link_latency",
    }
    for key in sorted(set(data) - known):
        problems.append(f"unknown key {key!r}")

    seed = data.get("seed")
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        problems.append("seed is required and must be an unsigned 64-bit integer")
        seed = 0

    topology_path = None
    if "topology" in data:
        topology_path = (path.parent / str(data["topology"])).resolve()
        if not topology_path.exists():
            problems.append(f"topology file {data['topology']} does not exist")
    generator = data.get("generator")
    if (topology_path is None) == (generator is None):
        problems.append("give exactly one of 'topology' or 'generator'")
    if generator is not None:
        if not isinstance(generator, dict):
            problems.append("generator must be an object")
            generator = None
        else:
            for key in ("num_monitors", "num_destinations"):
                if not isinstance(generator.get(key), int) or generator[key] < 1:
                    problems.append(f"generator.{key} must be a positive integer")
            try:
                params = TopologyParams.from_dict(generator.get("params", {}))
                problems.extend(f"generator.params: {p}" for p in params.validate())
            except (TopologyError, TypeError) as exc:
                problems.append(f"generator.params: {exc}")

    defaults = data.get("monitor_defaults", {})
    if not isinstance(defaults, dict):
        problems.append("monitor_defaults must be an object")
        defaults = {}
    for key in sorted(set(defaults) - _CONFIG_FIELDS):
        problems.append(f"monitor_defaults: unknown field {key!r}")
    overrides: dict[Address, dict[str, Any]] = {}
    for addr, over in (data.get("monitor_overrides") or {}).items():
        try:
            a = parse_address(addr)
        except ValueError:
            problems.append(f"monitor_overrides: bad address {addr!r}")
            continue
        if not isinstance(over, dict):
            problems.append(f"monitor_overrides.{addr} must be an object")
            continue
        for key in sorted(set(over) - _CONFIG_FIELDS):
            problems.append(f"monitor_overrides.{addr}: unknown field {key!r}")
        overrides[a] = over

    scheduler = data.get("scheduler", "sequential")
    if scheduler not in ("sequential", "threaded"):
        problems.append("scheduler must be 'sequential' or 'threaded'")

    spec = RunSpec(
        seed=seed,
        topology_path=topology_path,
        generator=generator,
        monitors=_addresses(data.get("monitors"), "monitors", problems),
        destinations=_addresses(data.get("destinations"), "destinations", problems),
        shuffle_destinations=bool(data.get("shuffle_destinations", False)),
        monitor_defaults=dict(defaults),
        monitor_overrides=overrides,
        scheduler=scheduler,
        start_time=float(data.get("start_time", 0.0)),
        link_latency=float(data.get("link_latency", 0.05)),
    )
    if problems:
        raise CliError("config", "; ".join(problems))
    return spec


def build_topology(spec: RunSpec) -> SimTopology:
    if spec.topology_path is not None:
        try:
            return load_topology(spec.topology_path)
        except TopologyError as exc:
            raise CliError("topology", f"{spec.topology_path.name}: {exc}") from None
    gen = spec.generator or {}
    try:
        return generate_topology(
            gen["num_monitors"],
            gen["num_destinations"],
            TopologyParams.from_dict(gen.get("params", {})),
            seed=spec.seed,
        )
    except TopologyError as exc:
        raise CliError("topology", str(exc)) from None


def resolve(spec: RunSpec, topo: SimTopology) -> tuple[list[Address], list[Address], list[MonitorConfig]]:
    monitors = spec.monitors or topo.monitors
    dests = list(spec.destinations or topo.destinations)
    if spec.shuffle_destinations:
        random.Random(spec.seed).shuffle(dests)
    problems = []
    for m in monitors:
        missing = [d for d in dests if (m, d) not in topo.routes]
        if missing:
            problems.append(f"no route from {format_address(m)} to {len(missing)} destination(s)")
    configs = []
    for j, m in enumerate(monitors):
        settings = {**spec.monitor_defaults, **spec.monitor_overrides.get(m, {})}
        try:
            configs.append(MonitorConfig(id=m, next_monitor=monitors[(j + 1) % len(monitors)], **settings))
        except TypeError as exc:
            problems.append(f"{format_address(m)}: {exc}")
    if problems:
        raise CliError("config", "; ".join(problems))
    return monitors, dests, configs


# --------------------------------------------------------------------------
# artifacts on disk


def message_log(messages: Sequence[Message]) -> str:
    lines = ["# sender receiver window slice sent_at frame_hex"]
    for msg in messages:
        for frame in msg.frames:
            lines.append(
                f"{format_address(msg.sender)} {format_address(msg.receiver)} "
                f"{msg.window} {msg.slice} {msg.sent_at:.6f} {frame.hex()}"
            )
    return "\n".join(lines) + "\n"


@dataclass
class LoggedMessage:
    sender: Address
    frames: tuple[bytes, ...]

    @property
    def size(self) -> int:
        return sum(len(f) for f in self.frames)


def read_message_log(path: Path) -> list[LoggedMessage]:
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        try:
            out.append(LoggedMessage(parse_address(parts[0]), (bytes.fromhex(parts[-1]),)))
        except (ValueError, IndexError):
            raise CliError("io", f"{path.name} line {lineno}: malformed message log entry") from None
    return out


def oracle_to_json(oracle: OracleResult) -> str:
    data = {
        "probe_count": oracle.probe_count,
        "nodes": [format_address(a) for a in sorted(oracle.nodes)],
        "links": [[format_address(a), format_address(b)] for a, b in sorted(oracle.links)],
        "per_interface_visits": {format_address(a): c for a, c in sorted(oracle.per_interface_visits.items())},
        "per_destination_probes": {format_address(a): c for a, c in sorted(oracle.per_destination_probes.items())},
    }
    return json.dumps(data, indent=1, sort_keys=True) + "\n"


def oracle_from_json(text: str) -> OracleResult:
    data = json.loads(text)
    return OracleResult(
        nodes={parse_address(a) for a in data["nodes"]},
        links={(parse_address(a), parse_address(b)) for a, b in data["links"]},
        probe_count=int(data["probe_count"]),
        per_interface_visits=Counter({parse_address(a): c for a, c in data["per_interface_visits"].items()}),
        per_destination_probes=Counter({parse_address(a): c for a, c in data["per_destination_probes"].items()}),
    )


def run_summary(art: RunArtifacts) -> dict[str, Any]:
    return {
        "monitors": [format_address(a) for a in art.monitors],
        "destinations": [format_address(a) for a in art.destinations],
        "final_states": {format_address(a): s.value for a, s in art.final_states.items()},
        "h_by_window": {format_address(a): {str(k): v for k, v in sorted(hs.items())} for a, hs in art.h_by_monitor.items()},
        "trace_probes": {format_address(a): c for a, c in art.trace_probes.items()},
        "estimation_probes": {format_address(a): c for a, c in art.estimation_probes.items()},
        "waiting_time": {format_address(a): round(t, 6) for a, t in art.waiting_time.items()},
        "waiting_transitions": {
            format_address(a): sum(1 for c in log if c.state is State.WAITING) for a, log in art.state_logs.items()
        },
        "end_time": {format_address(a): round(t, 6) for a, t in art.end_time.items()},
    }


def metrics_for_run_dir(run_dir: Path) -> RunMetrics:
    try:
        records = [
            TraceRecord.from_dict(json.loads(line))
            for line in (run_dir / "records.jsonl").read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
        summary = json.loads((run_dir / "run.json").read_text(encoding="utf-8"))
        oracle = oracle_from_json((run_dir / "oracle.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CliError("io", f"missing run artifact {Path(exc.filename).name} in {run_dir}") from None
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise CliError("io", f"corrupt run artifact in {run_dir}: {exc}") from None
    messages = read_message_log(run_dir / "messages.log")
    h_by_monitor = {
        parse_address(a): {int(k): v for k, v in hs.items()} for a, hs in summary["h_by_window"].items()
    }
    return compute_metrics(
        records,
        messages,
        oracle,
        destinations=[parse_address(a) for a in summary["destinations"]],
        h_by_monitor=h_by_monitor,
        estimation_probes=sum(summary["estimation_probes"].values()),
    )


# --------------------------------------------------------------------------
# subcommands


def cmd_generate(spec_path: str, out: str) -> int:
    spec = load_spec(spec_path)
    if spec.generator is None:
        raise CliError("config", "generate needs a 'generator' section in the spec file")
    topo = build_topology(spec)
    Path(out).write_text(dump_topology(topo), encoding="utf-8")
    print(f"wrote {out}: {len(topo.monitors)} monitors, {len(topo.destinations)} destinations, "
          f"{len(topo.interfaces)} interfaces")
    return EXIT_OK


def cmd_run(spec_path: str, out: str, sequential: bool = False) -> int:
    spec = load_spec(spec_path)
    topo = build_topology(spec)
    monitors, dests, configs = resolve(spec, topo)
    try:
        plan = plan_windows(len(dests), len(monitors), configs[0].step_size if configs else 1)
        art = run_system(
            topo, configs, plan, dests,
            scheduler="sequential" if sequential else spec.scheduler,
            start_time=spec.start_time,
            link_latency=spec.link_latency,
        )
    except ConfigError as exc:
        raise CliError("config", str(exc)) from None

    oracle = classic_oracle(topo, monitors, dests)
    metrics = compute_metrics(
        art.records, art.messages, oracle, dests, art.h_by_monitor, sum(art.estimation_probes.values())
    )
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "records.jsonl").write_text("".join(r.to_json() + "\n" for r in art.records), encoding="utf-8")
    (out_dir / "messages.log").write_text(message_log(art.messages), encoding="utf-8")
    (out_dir / "oracle.json").write_text(oracle_to_json(oracle), encoding="utf-8")
    (out_dir / "run.json").write_text(json.dumps(run_summary(art), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    (out_dir / "report.txt").write_text(report(metrics, "table"), encoding="utf-8")
    (out_dir / "metrics.jsonl").write_text(report(metrics, "lines"), encoding="utf-8")

    failed = [format_address(a) for a, s in art.final_states.items() if s is State.FAILED]
    print(f"{len(art.records)} records, {len(art.messages)} updates, "
          f"node coverage {metrics.node_coverage:.3f}, link coverage {metrics.link_coverage:.3f}, "
          f"load reduction {metrics.load_reduction:.3f}")
    if failed:
        print(f"doubletree: error[monitor-failed]: {', '.join(failed)}", file=sys.stderr)
        return EXIT_MONITOR_FAILED
    return EXIT_OK


def cmd_oracle(spec_path: str, out: str) -> int:
    spec = load_spec(spec_path)
    topo = build_topology(spec)
    monitors, dests, _ = resolve(spec, topo)
    oracle = classic_oracle(topo, monitors, dests)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "oracle.json").write_text(oracle_to_json(oracle), encoding="utf-8")
    print(f"oracle: {len(oracle.nodes)} nodes, {len(oracle.links)} links, {oracle.probe_count} probes")
    return EXIT_OK


def cmd_report(run_dir: str, fmt: str = "table") -> int:
    sys.stdout.write(report(metrics_for_run_dir(Path(run_dir)), fmt))
    return EXIT_OK


def _frames_from_file(path: Path) -> list[tuple[str, bytes]]:
    """Frames from either a binary capture or a hex message log."""
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise CliError("io", f"{path} not found") from None
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError:
        text = None
    hexdigits = set("0123456789abcdefABCDEF \t\r\n")
    if text is not None and text.strip() and (
        set(text) <= hexdigits or any(line.startswith("#") for line in text.splitlines())
    ):
        frames: list[tuple[str, bytes]] = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip() or line.startswith("#"):
                continue
            tokens = line.split()
            try:
                blob = bytes.fromhex(tokens[-1] if len(tokens) > 1 else "".join(tokens))
            except ValueError:
                raise CliError("decode", f"line {lineno}: not hex") from None
            try:
                frames.extend((f"line {lineno} offset {off}", fr) for off, fr in iter_messages(blob))
            except WireError as exc:
                raise CliError("decode", f"line {lineno}: {exc}") from None
        return frames
    try:
        return [(f"offset {off}", fr) for off, fr in iter_messages(raw)]
    except WireError as exc:
        raise CliError("decode", str(exc)) from None


def cmd_decode(path: str) -> int:
    for where, frame in _frames_from_file(Path(path)):
        try:
            body = describe(frame)
        except WireError as exc:
            raise CliError("decode", f"{where}: {exc}") from None
        print(f"[{where}] {body}")
    return EXIT_OK


# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        print(f"doubletree: error[usage]: {message}", file=sys.stderr)
        raise SystemExit(EXIT_ERROR)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="doubletree", description="Cooperative traceroute (Doubletree) on simulated networks")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="generate a topology file from a spec's generator section")
    p.add_argument("spec")
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", help="run a Doubletree experiment")
    p.add_argument("spec")
    p.add_argument("--out", required=True)
    p.add_argument("--sequential", action="store_true", help="force the deterministic sequential scheduler")

    p = sub.add_parser("oracle", help="run the classic traceroute oracle")
    p.add_argument("spec")
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="render metrics for a run directory")
    p.add_argument("run_dir")
    p.add_argument("--format", choices=("table", "lines"), default="table")

    p = sub.add_parser("decode", help="dump StopSet messages from a capture or message log")
    p.add_argument("file")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "generate":
            return cmd_generate(args.spec, args.out)
        if args.command == "run":
            return cmd_run(args.spec, args.out, args.sequential)
        if args.command == "oracle":
            return cmd_oracle(args.spec, args.out)
        if args.command == "report":
            return cmd_report(args.run_dir, args.format)
        return cmd_decode(args.file)
    except CliError as exc:
        print(f"doubletree: error[{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"doubletree: error[io]: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
