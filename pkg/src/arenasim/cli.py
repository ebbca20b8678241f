"""Command line entry point.

    arenasim init [--out FILE]
    arenasim validate-map MAP [--json]
    arenasim run [--config FILE] [--seed N] [--mode M] [--agent A] [--dreamer D]
                 [--routes R1,R2,...] [--out DIR] [--jobs N]
    arenasim replay LOG [--weights EP,TTC,C] [--out DIR]
    arenasim serve [--config FILE] [--host H] [--port P]

``run`` with several routes (or none on a multi-route map set) runs a suite
and prints a table with an average row. ``--agent`` and ``--dreamer`` take a
builtin kind or an ``http(s)://`` endpoint. Endpoint credentials come from the
``ARENASIM_AUTH_TOKEN`` environment variable only.

Exit codes: 0 route complete; 1 invariant violations or replay mismatch;
2 bad config or usage; 3 log integrity error; 4 unreadable map;
10-15 the episode termination (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

from . import __version__
from .errors import ArenaError, ConfigError, EmptyMapError, IntegrityError, MapParseError, TopologyError
from .maps import load_map, route_index
from .metrics import EvalConfig, ScoreWeights
from .orchestrator import (
    EXIT_CODES,
    EpisodeLog,
    SimulationConfig,
    default_config_yaml,
    load_config,
    make_service_server,
    replay_episode,
    run_episode,
)
from .roadnet import validate_graph

EXIT_INVARIANT = 1
EXIT_CONFIG = 2
EXIT_INTEGRITY = 3
EXIT_MAP = 4

SUITE_ROUTES = ("sing_route_1", "sing_route_2", "boston_route_1", "boston_route_2")


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _binding(value: str | None, remote_kind: str = "remote") -> dict | None:
    if value is None:
        return None
    if value.startswith(("http://", "https://")):
        return {"kind": remote_kind, "endpoint": value}
    return {"kind": value}


# ---------------------------------------------------------------------------
# init


def cmd_init(args) -> int:
    text = default_config_yaml()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# validate-map


def cmd_validate_map(args) -> int:
    try:
        bundle = load_map(args.map)
    except FileNotFoundError:
        _err(f"map file not found: {args.map}")
        return EXIT_MAP
    except EmptyMapError as exc:
        _err(f"empty map: {exc}")
        return EXIT_MAP
    except TopologyError as exc:
        _err(f"dangling reference: {exc}")
        return EXIT_MAP
    except MapParseError as exc:
        _err(f"parse error: {exc}")
        return EXIT_MAP
    g = bundle.graph
    problems = validate_graph(g)
    stats = {
        "map": args.map,
        "lanes": len(g.lanes),
        "connectors": sum(1 for lane in g.lanes.values() if lane.is_connector),
        "junctions": len(g.junctions),
        "crossings": len(g.crossings),
        "routes": sorted(bundle.routes),
        "violations": problems,
        "valid": not problems,
    }
    if args.json:
        print(json.dumps(stats, indent=2))
    else:
        print(f"{args.map}: {stats['lanes']} lanes ({stats['connectors']} junction connectors), " f"{stats['junctions']} junctions, {stats['crossings']} crossings")
        if stats["routes"]:
            print("routes: " + ", ".join(stats["routes"]))
        for p in problems:
            print(f"violation: {p}")
        print("OK" if not problems else f"{len(problems)} invariant violation(s)")
    return 0 if not problems else EXIT_INVARIANT


# ---------------------------------------------------------------------------
# run / suite


def _base_config(args) -> SimulationConfig:
    cfg = load_config(args.config) if args.config else SimulationConfig()
    overrides = {
        "seed": args.seed,
        "mode": args.mode,
        "agent": _binding(args.agent),
        "dreamer": _binding(args.dreamer),
    }
    return cfg.with_overrides(**overrides)


def _route_configs(base: SimulationConfig, routes: str | None) -> list[tuple[str, SimulationConfig]]:
    if routes is None:
        name = base.route if isinstance(base.route, str) else "custom"
        return [(name, base)]
    index = route_index()
    names = [r.strip() for r in routes.split(",") if r.strip()]
    if names == ["all"]:
        names = list(SUITE_ROUTES)
    if len(set(names)) != len(names):
        raise ConfigError("route names in a suite must be unique", field="routes")
    out = []
    for name in names:
        if name not in index:
            raise ConfigError(f"unknown route {name!r}; known: {', '.join(sorted(index))}", field="routes")
        out.append((name, base.with_overrides(map=index[name], route=name)))
    return out


def _run_one(name: str, cfg: SimulationConfig, out_dir: str) -> dict:
    log_path = os.path.join(out_dir, f"{name}.log.ndjson")
    res = run_episode(cfg, log_path=log_path)
    rep = res.report
    doc = rep.to_document()
    doc["route"] = name
    doc["episode_id"] = res.episode_id
    with open(os.path.join(out_dir, f"{name}.report.json"), "w") as fh:
        json.dump(doc, fh, indent=2)
    with open(os.path.join(out_dir, f"{name}.frames.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "nc", "dac", "ep", "ttc", "comfort", "pdms_t"])
        for f in rep.frame_scores:
            w.writerow([f.t, f.nc, f.dac, f.ep, f.ttc, f.comfort, f.pdms_t])
    return {
        "route": name,
        "termination": rep.termination,
        "pdms": rep.pdms,
        "route_completion": rep.route_completion,
        "ads": rep.ads,
        "exit_code": res.exit_code,
        "log": log_path,
    }


def format_table(rows: list[dict], average: bool = True) -> str:
    """Per-route PDMS / RC / ADS table, optionally with an average row."""
    lines = [f"{'Route':<20} {'PDMS':>8} {'RC':>8} {'ADS':>8}  Termination"]
    for r in rows:
        lines.append(f"{r['route']:<20} {r['pdms']:>8.4f} {r['route_completion']:>8.4f} {r['ads']:>8.4f}  {r['termination']}")
    if average and rows:
        n = len(rows)
        avg = [sum(r[k] for r in rows) / n for k in ("pdms", "route_completion", "ads")]
        lines.append(f"{'Average':<20} {avg[0]:>8.4f} {avg[1]:>8.4f} {avg[2]:>8.4f}")
    return "\n".join(lines)


def cmd_run(args) -> int:
    try:
        base = _base_config(args)
        jobs = _route_configs(base, args.routes)
    except FileNotFoundError:
        _err(f"config file not found: {args.config}")
        return EXIT_CONFIG
    except ConfigError as exc:
        _err(f"config error in {exc.field or '<root>'}: {exc}")
        return EXIT_CONFIG
    os.makedirs(args.out, exist_ok=True)
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_run_one, *zip(*[(n, c, args.out) for n, c in jobs])))
    else:
        rows = [_run_one(n, c, args.out) for n, c in jobs]
    suite = len(rows) > 1
    table = format_table(rows, average=suite)
    print(table)
    with open(os.path.join(args.out, "report.txt"), "w") as fh:
        fh.write(table + "\n")
    summary = {"version": __version__, "routes": rows}
    if suite:
        n = len(rows)
        summary["average"] = {k: sum(r[k] for r in rows) / n for k in ("pdms", "route_completion", "ads")}
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    return next((r["exit_code"] for r in rows if r["exit_code"]), 0)


# ---------------------------------------------------------------------------
# replay


def _parse_weights(text: str) -> ScoreWeights:
    try:
        w_ep, w_ttc, w_c = (float(x) for x in text.split(","))
    except ValueError as exc:
        raise ConfigError("--weights takes three comma-separated numbers EP,TTC,C", field="eval.weights") from exc
    return ScoreWeights(w_ep, w_ttc, w_c).validate()


def cmd_replay(args) -> int:
    try:
        log = EpisodeLog.read(args.log)
    except FileNotFoundError:
        _err(f"log file not found: {args.log}")
        return EXIT_CONFIG
    except IntegrityError as exc:
        _err(f"integrity error at record {exc.record}: {exc}")
        return EXIT_INTEGRITY
    eval_config = None
    if args.weights:
        try:
            logged = SimulationConfig.from_dict(log.header["config"]).eval
            eval_config = replace(logged, weights=_parse_weights(args.weights))
        except (ConfigError, ArenaError) as exc:
            _err(str(exc))
            return EXIT_CONFIG
    result = replay_episode(log, eval_config=eval_config)
    rep = result.report
    name = log.header["config"]["route"] if isinstance(log.header["config"]["route"], str) else "custom"
    row = {"route": name, "pdms": rep.pdms, "route_completion": rep.route_completion, "ads": rep.ads, "termination": rep.termination}
    print(format_table([row], average=False))
    print(f"frame scores reproduced: {'yes' if result.matches else 'NO'}")
    if result.rescored:
        print("re-scored with weights " + ",".join(f"{w:g}" for w in (eval_config.weights.w_ep, eval_config.weights.w_ttc, eval_config.weights.w_c)))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        doc = rep.to_document()
        doc["rescored"] = result.rescored
        doc["matches"] = result.matches
        with open(os.path.join(args.out, f"{name}.replay.json"), "w") as fh:
            json.dump(doc, fh, indent=2)
    return 0 if result.matches else EXIT_INVARIANT


# ---------------------------------------------------------------------------
# serve


def cmd_serve(args) -> int:
    try:
        defaults = load_config(args.config) if args.config else SimulationConfig()
    except (FileNotFoundError, ConfigError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    server = make_service_server(args.host, args.port, defaults)
    host, port = server.server_address[:2]
    print(f"serving on http://{host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        server.server_close()
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="arenasim", description="Closed-loop driving simulation and evaluation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="emit the full default config")
    p.add_argument("--out", help="write to this file instead of stdout")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("validate-map", help="check a map file or bundled fixture")
    p.add_argument("map", help="fixture name, fixture .json or OSM .osm file")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(func=cmd_validate_map)

    p = sub.add_parser("run", help="run one episode or a route suite")
    p.add_argument("--config", help="YAML config file (defaults if omitted)")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("closed_loop", "open_loop"))
    p.add_argument("--agent", help="builtin agent kind or http(s) endpoint")
    p.add_argument("--dreamer", help="builtin_synthetic or http(s) endpoint")
    p.add_argument("--routes", help="comma-separated route names, or 'all' for the standard four")
    p.add_argument("--out", default="runs", help="output directory (default: runs)")
    p.add_argument("--jobs", type=int, default=1, help="run suite routes in parallel processes")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("replay", help="re-run a logged episode and re-score it")
    p.add_argument("log", help="episode log (.ndjson)")
    p.add_argument("--weights", help="score weights EP,TTC,C for re-scoring")
    p.add_argument("--out", help="directory for the replay report")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("serve", help="run the episode HTTP service")
    p.add_argument("--config", help="default config for submitted episodes")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(f"config error in {exc.field or '<root>'}: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
