"""Command line entry point: ``crowdmap <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
from dataclasses import replace
from typing import List, Optional

import numpy as np

from .errors import CrowdmapError
from .experiments import (
    convergence_curve,
    emit_curves,
    emit_permutation,
    passings_for,
    permutation_average,
    simulate_passings,
    superpose,
    synthetic_field_dataset,
)
from .matching import DEFAULT_GATE_RADIUS, read_sign_table, write_sign_table
from .noise import default_scenario, generate_passing, load_scenario
from .onboard import read_observations, write_observations
from .triangulate import DEFAULT_RANGE_SCALE, OBJECTIVES

logger = logging.getLogger("crowdmap")


def _configure_logging() -> None:
    level = os.environ.get("CROWDMAP_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def cmd_serve(args) -> int:
    from .service.client import parse_addr
    from .service.server import MapServer, MapService
    from .service.state import MapConfig

    seeds = read_sign_table(args.landmarks) if args.landmarks else []
    config = MapConfig(gate_radius=args.gate, objective=args.objective, range_scale=args.range_scale)
    service = MapService(args.log, seeds=seeds, config=config, snapshot_every=args.snapshot_every)
    server = MapServer(parse_addr(args.addr), service)
    host, port = server.server_address[:2]
    print(f"listening on {host}:{port}", flush=True)

    def stop(signum, frame):
        raise KeyboardInterrupt

    signal.signal(signal.SIGTERM, stop)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_ingest(args) -> int:
    from .service.client import MapClient

    observations = read_observations(args.file)
    if not observations:
        logger.warning("%s holds no observations, nothing sent", args.file)
        return 0
    size = args.batch_size or len(observations)
    with MapClient.connect(args.addr) as client:
        for start in range(0, len(observations), size):
            report = client.ingest(observations[start : start + size])
            print(json.dumps(report))
    return 0


def cmd_snapshot(args) -> int:
    from .service.client import MapClient

    with MapClient.connect(args.addr) as client:
        text = client.snapshot_text()
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(text)
    return 0


def cmd_simulate(args) -> int:
    scenario, params = load_scenario(args.scenario)
    if args.seed is not None:
        params = replace(params, seed=args.seed)
    if args.obs:
        write_observations(
            args.obs, (o for k in range(scenario.passing_count) for o in generate_passing(scenario, k, params))
        )
    passings = simulate_passings(scenario, params, args.sign_index)
    points = convergence_curve(passings, scenario.signs[args.sign_index].position, args.objective, args.range_scale)
    emit_curves(points, args.out)
    return 0


def cmd_superpose(args) -> int:
    groundtruth = read_sign_table(args.groundtruth)
    write_observations(args.out, superpose(read_observations(args.obs), groundtruth))
    return 0


def cmd_permute(args) -> int:
    desc, truth = read_sign_table(args.groundtruth)[0]
    passings = passings_for(read_observations(args.obs), desc)
    if not passings:
        raise CrowdmapError(f"no observations of the reference sign {desc.label()} in {args.obs}")
    result = permutation_average(
        passings, truth, args.n_perm, np.random.default_rng(args.seed), args.objective, args.range_scale
    )
    emit_permutation(result, args.out)
    if result.excluded:
        print(f"{result.excluded} of {len(passings)} passings had no single-passing estimate", file=sys.stderr)
    return 0


def cmd_field_data(args) -> int:
    params = load_scenario(args.scenario)[1] if args.scenario else None
    if args.seed is not None:
        params = replace(params or default_scenario()[1], seed=args.seed)
    observations, groundtruth = synthetic_field_dataset(params)
    write_observations(args.out, observations)
    write_sign_table(args.groundtruth, groundtruth)
    return 0


def _add_solver_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--objective", choices=OBJECTIVES, default="heading")
    p.add_argument(
        "--range-scale",
        type=float,
        default=DEFAULT_RANGE_SCALE,
        help="camera position noise over heading noise, meters (0 = unweighted heading residuals)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crowdmap", description="Crowdsourced traffic-sign landmark mapping.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the map service")
    p.add_argument("--addr", default="127.0.0.1:7878", help="host:port to listen on (port 0 picks a free one)")
    p.add_argument("--log", required=True, help="append-only map log")
    p.add_argument("--landmarks", help="seed landmarks CSV: sign_class,text_payload,east,north")
    p.add_argument("--gate", type=float, default=DEFAULT_GATE_RADIUS, help="matching gate radius in meters")
    p.add_argument("--snapshot-every", type=int, default=50, help="write a snapshot every N revisions (0 = never)")
    _add_solver_options(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("ingest", help="send observations to a running service")
    p.add_argument("--addr", required=True)
    p.add_argument("--file", required=True, help="observations JSONL")
    p.add_argument("--batch-size", type=int, default=0, help="observations per batch (default: one batch)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("snapshot", help="save the service's current map")
    p.add_argument("--addr", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_snapshot)

    p = sub.add_parser("simulate", help="run the convergence study on a scenario file")
    p.add_argument("--scenario", required=True)
    p.add_argument("--seed", type=int, help="overrides the scenario's seed")
    p.add_argument("--out", required=True, help="error curve CSV")
    p.add_argument("--obs", help="also write the simulated observations as JSONL")
    p.add_argument("--sign-index", type=int, default=0)
    _add_solver_options(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("experiment", help="field-style experiments")
    esub = p.add_subparsers(dest="experiment", required=True)

    e = esub.add_parser("superpose", help="translate every sign onto the reference sign")
    e.add_argument("--obs", required=True)
    e.add_argument("--groundtruth", required=True, help="CSV, first row is the reference sign")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_superpose)

    e = esub.add_parser("permute", help="average cumulative errors over shuffled passing orders")
    e.add_argument("--obs", required=True, help="single-landmark observations JSONL (e.g. superposed)")
    e.add_argument("--groundtruth", required=True, help="CSV whose first row gives the landmark's true position")
    e.add_argument("--n-perm", type=int, default=1000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    _add_solver_options(e)
    e.set_defaults(func=cmd_permute)

    e = esub.add_parser("field-data", help="write a synthetic many-signs dataset and its groundtruth")
    e.add_argument("--scenario", help="take noise settings from this scenario file")
    e.add_argument("--seed", type=int)
    e.add_argument("--out", required=True, help="observations JSONL")
    e.add_argument("--groundtruth", required=True, help="groundtruth CSV")
    e.set_defaults(func=cmd_field_data)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CrowdmapError, OSError, ValueError) as exc:
        print(f"crowdmap: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
