"""Command-line front end: ``teemaf demo | threats | bench``.

Exit codes: 0 success, 1 protocol or verification failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from . import bench, threats
from .drop import AppSpec, DeploymentRequest, DropWorld, WorldConfig, build_fixture_image

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

_DEMO_CONFIG_KEYS = {"nodes", "block_time_s", "block_capacity", "gossip_delay_ms", "topology", "interactions", "attestation_rtt_ms"}


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RunManifest:
    subcommand: str
    config: Path | None
    seed: int
    out: Path | None


def _write(out: Path | None, text: str) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text)


def _load_json(path: Path) -> dict:
    try:
        obj = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return obj


# -- demo ------------------------------------------------------------------------------


def cmd_demo(args: argparse.Namespace, manifest: RunManifest) -> int:
    settings = {"nodes": 1, "block_time_s": 5.0, "interactions": 3}
    if manifest.config is not None:
        obj = _load_json(manifest.config)
        unknown = set(obj) - _DEMO_CONFIG_KEYS
        if unknown:
            raise UsageError(f"unknown demo config keys {sorted(unknown)}")
        settings.update(obj)
    if args.nodes is not None:
        settings["nodes"] = args.nodes
    if args.block_time is not None:
        settings["block_time_s"] = args.block_time
    interactions = settings.pop("interactions")
    app = AppSpec("app", interactions)
    request = DeploymentRequest("app")
    if args.tamper:
        # the host flips one bit in the middle of the image after fetching it
        size = len(build_fixture_image("app-sid", interactions, bytes(8)))
        request = DeploymentRequest("app", (size // 2, 0x01))
    try:
        cfg = WorldConfig(
            seed=manifest.seed,
            apps=(app,),
            requests=(request,),
            faithful_replay=args.faithful_replay,
            **settings,
        )
        world = DropWorld(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    result = world.run()
    _write(manifest.out, "\n".join(result.trace) + "\n")
    if result.is_attested:
        print("demo: isAttested=1", file=sys.stderr)
        return EXIT_OK
    reasons = sorted({o.failure or str(o.state) for o in result.outcomes})
    print(f"demo: isAttested=0 ({', '.join(reasons)})", file=sys.stderr)
    return EXIT_FAILURE


# -- threats ---------------------------------------------------------------------------


def cmd_threats(args: argparse.Namespace, manifest: RunManifest) -> int:
    try:
        if manifest.config is None:
            scripts = threats.default_pack()
        else:
            scripts = threats.load_scenarios(manifest.config)
    except OSError as exc:
        raise UsageError(f"cannot read scenarios: {exc}") from exc
    except threats.ScenarioParseError as exc:
        raise UsageError(str(exc)) from exc
    if manifest.seed:
        scripts = [replace(s, seed=s.seed + manifest.seed) for s in scripts]
    try:
        outcomes = threats.run_scenarios(scripts)
    except (threats.ScenarioParseError, ValueError, TypeError) as exc:
        raise UsageError(f"bad scenario parameters: {exc}") from exc
    _write(manifest.out, "".join(json.dumps(o.to_json(), sort_keys=True) + "\n" for o in outcomes))
    for o in outcomes:
        print(f"{'PASS' if o.passed else 'FAIL'}  {o.kind:<22} {o.observed}", file=sys.stderr)
    return EXIT_OK if all(o.passed for o in outcomes) else EXIT_FAILURE


# -- bench -----------------------------------------------------------------------------


def cmd_bench(args: argparse.Namespace, manifest: RunManifest) -> int:
    try:
        grid = bench.load_grid(manifest.config) if manifest.config is not None else bench.Grid()
    except OSError as exc:
        raise UsageError(f"cannot read grid: {exc}") from exc
    changes: dict = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.tx is not None:
        changes["tx_count"] = args.tx
    if args.nodes is not None:
        changes["base_nodes"] = args.nodes
        changes["node_sweep"] = (args.nodes,)
    if args.block_time is not None:
        changes["block_times"] = (args.block_time,)
        changes["node_sweep_block_time"] = args.block_time
    if args.rate is not None:
        changes["rates"] = (args.rate,)
    if args.ra is not None:
        changes["ra"] = (args.ra == "on",)
    grid = replace(grid, **changes)
    configs = grid.configs()
    rows = bench.sweep(configs, jobs=args.jobs)
    _write(manifest.out, bench.to_csv(rows))
    verdicts = bench.trend_report(rows)
    sys.stderr.write(bench.format_report(verdicts))
    return EXIT_OK if all(v.passed for v in verdicts) else EXIT_FAILURE


# -- entry point -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="teemaf", description="Mutual attestation simulator for DApps.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, default=None, help="seed for every random choice (default 0)")
        p.add_argument("--config", type=Path, default=None, help="JSON config or scenario file")
        p.add_argument("--out", type=Path, default=None, help="output file (default: stdout)")

    demo = sub.add_parser("demo", help="run the attestation workflow end to end")
    common(demo)
    demo.add_argument("--tamper", action="store_true", help="mutate the image on the worker host")
    demo.add_argument("--faithful-replay", action="store_true", help="disable the on-chain replay guard")
    demo.add_argument("--nodes", type=_positive_int, default=None)
    demo.add_argument("--block-time", type=_positive_float, default=None, help="seconds")

    thr = sub.add_parser("threats", help="run adversary scenarios and log outcomes")
    common(thr)

    b = sub.add_parser("bench", help="latency/throughput sweep to CSV")
    common(b)
    b.add_argument("--ra", choices=("on", "off"), default=None)
    b.add_argument("--nodes", type=_positive_int, default=None)
    b.add_argument("--block-time", type=_positive_float, default=None, help="seconds")
    b.add_argument("--rate", type=_positive_float, default=None, help="send rate in tps")
    b.add_argument("--tx", type=_positive_int, default=None, help="transactions per run")
    b.add_argument("--jobs", type=_positive_int, default=1, help="grid cells run in parallel processes")
    return parser


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return value


_COMMANDS = {"demo": cmd_demo, "threats": cmd_threats, "bench": cmd_bench}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    manifest = RunManifest(args.command, args.config, args.seed if args.seed is not None else 0, args.out)
    try:
        return _COMMANDS[args.command](args, manifest)
    except (UsageError, bench.ConfigInvalid) as exc:
        print(f"teemaf {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
