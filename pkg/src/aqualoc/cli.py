"""Command-line front end.

Exit codes: 0 success, 1 usage, 2 domain error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import detect, montecarlo, physics, protocol, schemas, topology, waveform

log = logging.getLogger("aqualoc")

EXIT_OK, EXIT_USAGE, EXIT_DOMAIN, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# Input helpers.

def _load_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def load_scenario(path) -> dict:
    doc = _load_json(path)
    schemas.validate(doc, schemas.SCENARIO)
    ids = sorted(d["id"] for d in doc.get("devices", []))
    if ids and ids != list(range(len(ids))):
        raise ValueError("device ids must be unique and contiguous from 0")
    return doc


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    return int(os.environ.get("AQUALOC_SEED", "0"))


def sound_speed_from(doc: dict) -> float:
    water = doc.get("water", {})
    if "c" in water:
        return float(water["c"])
    if water:
        return physics.sound_speed(physics.WaterParams(**water))
    return physics.DEFAULT_SOUND_SPEED


def agents_from(doc: dict) -> list[protocol.DeviceAgent]:
    agents = []
    heading = doc.get("leader_heading")
    for d in sorted(doc["devices"], key=lambda d: d["id"]):
        agents.append(protocol.DeviceAgent(
            id=d["id"], position=d["position"], clock_ppm=d.get("clock_ppm", 0.0), depth=d.get("depth"),
            range_set=d.get("range_set"),
            heading=heading if d["id"] == topology.LEADER else None,
        ))
    return agents


def environment_from(doc: dict, c: float) -> protocol.Environment:
    env = dict(doc.get("environment", {}))
    channel = doc.get("channel")
    profile = None
    if channel:
        if "synth" in channel:
            profile = physics.ChannelSynthConfig(**channel["synth"])
        else:
            profile = physics.ChannelProfile(taps=tuple(map(tuple, channel.get("taps", [[0, 1.0]]))),
                                             noise_std=channel.get("noise_std", 0.0))
    return protocol.Environment(c=c, channel=profile, **env)


def problem_from(doc: dict) -> topology.TopologyProblem:
    schemas.validate(doc, schemas.PROBLEM)
    W = np.array(doc["W"], dtype=float)
    D = np.array([[np.nan if v is None else v for v in row] for row in doc["D"]], dtype=float)
    D = np.where(W > 0, D, 0.0)
    np.fill_diagonal(D, 0.0)
    if np.any(~np.isfinite(D)):
        raise ValueError("linked pairs need a finite distance")
    return topology.TopologyProblem(
        D=D, W=W, depths=doc["depths"], leader_heading=doc.get("leader_heading", [1.0, 0.0]),
        flip_evidence={int(k): v for k, v in doc.get("flip_evidence", {}).items()},
    )


def problem_to_json(p: topology.TopologyProblem) -> dict:
    D = [[float(p.D[i, j]) if (p.W[i, j] or i == j) else None for j in range(p.n)] for i in range(p.n)]
    return {
        "D": D,
        "W": p.W.astype(int).tolist(),
        "depths": p.depths.tolist(),
        "leader_heading": p.leader_heading.tolist(),
        "flip_evidence": {str(k): [float(m), float(n)] for k, (m, n) in p.flip_evidence.items()},
    }


def solution_to_json(s: topology.Solution) -> dict:
    return {
        "positions": s.positions_3d.tolist(),
        "stress_m": float(s.stress_m),
        "dropped_links": [list(map(int, e)) for e in s.dropped_links],
        "clamped_links": [list(map(int, e)) for e in s.clamped_links],
        "flip_vote": int(s.flip_vote),
        "flip_confident": bool(s.flip_confident),
        "realizable": bool(s.realizable),
        "error": s.error,
    }


def _write_json(path, doc: dict, schema: dict) -> None:
    schemas.validate(doc, schema)
    text = json.dumps(doc, indent=2) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def write_distance_csv(path, D: np.ndarray, W: np.ndarray) -> None:
    n = len(D)
    if D.shape != (n, n) or W.shape != (n, n):
        raise ValueError("distance matrix must be square")
    schemas.validate([[float(D[i, j]) if (W[i, j] or i == j) else None for j in range(n)] for i in range(n)],
                     schemas.DISTANCE_MATRIX)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id"] + list(range(n)))
    for i in range(n):
        writer.writerow([i] + ["0.0000" if i == j else (f"{D[i, j]:.4f}" if W[i, j] else "nan")
                               for j in range(n)])
    if str(path) == "-":
        sys.stdout.write(buf.getvalue())
    else:
        Path(path).write_text(buf.getvalue())


# Commands.

def cmd_speed(args) -> int:
    c = physics.sound_speed(physics.WaterParams(args.t, args.s, args.d))
    print(round(c, 6))
    return EXIT_OK


def cmd_preamble(args) -> int:
    config = waveform.PreambleConfig()
    signal = waveform.generate_preamble(config)
    if args.id is not None:
        signal = np.concatenate([signal, waveform.encode_id(args.id, args.group_size, config)])
    if args.distance is not None:
        c = args.c
        profile = physics.ChannelProfile(noise_std=args.noise_std)
        # mics at +/- half the separation along x, source at the given bearing from +y
        theta = np.deg2rad(args.bearing)
        src = args.distance * np.array([np.sin(theta), np.cos(theta)])
        mics = [np.array([s * detect.MIC_SEPARATION_M / 2, 0.0]) for s in (1, -1)][: args.mics]
        streams = [physics.propagate(signal, np.linalg.norm(src - m), profile, fs=config.fs, c=c,
                                     seed=_seed(args) + k) for k, m in enumerate(mics)]
        size = max(s.size for s in streams) + config.symbol_len
        signal = np.column_stack([np.pad(s, (0, size - s.size)) for s in streams])
        if args.mics == 1:
            signal = signal[:, 0]
    waveform.write_wav(args.out, signal, config.fs)
    print(json.dumps({"out": str(args.out), "samples": int(len(signal)), "fs": config.fs}))
    return EXIT_OK


def cmd_detect(args) -> int:
    config = waveform.PreambleConfig()
    try:
        fs, data = waveform.read_wav(args.pcm)
    except ValueError as exc:     # malformed container
        raise OSError(f"cannot read {args.pcm}: {exc}") from exc
    if fs != config.fs:
        raise ValueError(f"capture sample rate {fs} differs from {config.fs}")
    streams = [data] if data.ndim == 1 else [data[:, k] for k in range(min(2, data.shape[1]))]
    report = {"detected": False, "fs": fs, "channels": len(streams)}
    try:
        hit = detect.locate(streams, config, c=args.c)
    except detect.NoDirectPathError as exc:
        hit = None
        report["error"] = str(exc)
    except ValueError as exc:
        hit = None
        report["error"] = str(exc)
    if hit is not None:
        report.update({
            "detected": True,
            "offset": hit.offset,
            "score": hit.score,
            "window_start": hit.window_start,
            "direct_path": {"n": hit.direct_path.n, "m": hit.direct_path.m,
                            "tau_los": hit.direct_path.tau_los, "arrival": hit.arrival},
            "noise_floor": [e.noise_floor for e in hit.estimates],
        })
        if args.channel_csv:
            schemas.validate([e.magnitude.tolist() for e in hit.estimates], schemas.CHANNEL_TAPS)
            detect.write_channel_csv(args.channel_csv, hit.estimates)
    elif "error" not in report:
        report["error"] = "no detection"
    _write_json(args.report, report, schemas.DETECTION_REPORT)
    return EXIT_OK


def cmd_protocol(args) -> int:
    doc = load_scenario(args.scenario)
    seed = _seed(args)
    c = sound_speed_from(doc)
    agents = agents_from(doc)
    cfg = protocol.SlotConfig(group_size=len(agents), **doc.get("protocol", {}))
    env = environment_from(doc, c)
    result = protocol.run_round(agents, env, cfg, seed=seed, fidelity=args.fidelity)
    events = {
        "seed": seed,
        "fidelity": args.fidelity,
        "round_time_s": result.round_time_s,
        "completion_s": result.completion_s,
        "silent": result.silent,
        "events": [e.to_dict() for e in result.events],
        "logs": {str(i): {"sync_source": rec.sync_source, "times": {str(j): t for j, t in rec.times.items()}}
                 for i, rec in sorted(result.logs.items())},
    }
    _write_json(args.events, events, schemas.EVENT_LOG)
    D, W = protocol.distance_matrix(result.logs, cfg.group_size, c)
    if args.distances:
        write_distance_csv(args.distances, D, W)
    for i, j in zip(*np.nonzero(np.triu(W == 0, 1))):
        log.warning("no distance for link (%d, %d)", i, j)
    if args.problem:
        problem = protocol.build_problem(result.logs, agents, cfg, c, flip_evidence=result.flip_evidence)
        _write_json(args.problem, problem_to_json(problem), schemas.PROBLEM)
    to_stdout = "-" in (str(args.events), str(args.distances))
    print(f"round time {result.round_time_s:.3f} s, completed at {result.completion_s:.3f} s, "
          f"silent devices {result.silent or 'none'}", file=sys.stderr if to_stdout else sys.stdout)
    return EXIT_OK


def cmd_solve(args) -> int:
    problem = problem_from(_load_json(args.problem))
    if not topology.is_connected(problem.W):
        raise topology.DisconnectedGraphError("link graph is disconnected")
    if not args.allow_ambiguous and not topology.is_uniquely_realizable(problem.W):
        raise ValueError("link graph is not uniquely realizable; pass --allow-ambiguous to solve anyway")
    sol = topology.solve(problem, o_max=args.o_max, tol=args.tol, max_iter=args.max_iter, seed=_seed(args))
    _write_json(args.out, solution_to_json(sol), schemas.SOLUTION)
    return EXIT_OK


def cmd_montecarlo(args) -> int:
    sweep = {}
    if args.scenario:
        sweep = load_scenario(args.scenario).get("sweep", {})
    if "space" in sweep:
        sweep["space"] = tuple(sweep["space"])
    if "pointed_range" in sweep:
        sweep["pointed_range"] = tuple(sweep["pointed_range"])
    sweep.setdefault("seed", _seed(args))
    if args.trials is not None:
        sweep["trials"] = args.trials
    cfg = montecarlo.ScenarioConfig(**sweep)
    values = [float(v) for v in args.values.split(",") if v.strip()]
    rows = montecarlo.run_sweep(cfg, args.sweep, values, jobs=args.jobs)
    schemas.validate(rows, schemas.SWEEP_ROWS)
    if args.out:
        montecarlo.write_sweep_csv(args.out, rows)
    else:
        sys.stdout.write(montecarlo.format_sweep_csv(rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aqualoc", description="Underwater acoustic positioning toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("speed", help="speed of sound for water parameters")
    s.add_argument("--t", type=float, required=True, help="temperature, C")
    s.add_argument("--s", type=float, required=True, help="salinity, ppt")
    s.add_argument("--d", type=float, required=True, help="depth, m")
    s.set_defaults(func=cmd_speed)

    s = sub.add_parser("preamble", help="write the preamble (optionally a synthetic capture) to WAV")
    s.add_argument("out", type=Path)
    s.add_argument("--id", type=int, help="append the MFSK id symbol for this device")
    s.add_argument("--group-size", type=int, default=5)
    s.add_argument("--distance", type=float, help="synthesize a capture from this range, m")
    s.add_argument("--bearing", type=float, default=0.0, help="source bearing from broadside, degrees")
    s.add_argument("--mics", type=int, choices=(1, 2), default=1)
    s.add_argument("--noise-std", type=float, default=0.0)
    s.add_argument("--c", type=float, default=physics.DEFAULT_SOUND_SPEED)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_preamble)

    s = sub.add_parser("detect", help="run the receiver pipeline on a PCM capture")
    s.add_argument("pcm", type=Path)
    s.add_argument("--report", default="-", help="JSON report path (default stdout)")
    s.add_argument("--channel-csv", type=Path)
    s.add_argument("--c", type=float, default=physics.DEFAULT_SOUND_SPEED)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("protocol", help="simulate one protocol round")
    s.add_argument("scenario", type=Path)
    s.add_argument("--fidelity", choices=("timestamp", "audio"), default="timestamp")
    s.add_argument("--seed", type=int)
    s.add_argument("--events", type=Path, default=Path("events.json"))
    s.add_argument("--distances", type=Path, default=Path("distances.csv"))
    s.add_argument("--problem", type=Path, help="also write a topology problem JSON")
    s.set_defaults(func=cmd_protocol)

    s = sub.add_parser("solve", help="solve a topology problem")
    s.add_argument("problem", type=Path)
    s.add_argument("--out", default="-")
    s.add_argument("--o-max", type=int, default=topology.MAX_OUTLIERS)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--max-iter", type=int, default=300)
    s.add_argument("--allow-ambiguous", action="store_true", help="solve graphs that are not uniquely realizable")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("montecarlo", help="Monte-Carlo sweep of the solver error")
    s.add_argument("scenario", type=Path, nargs="?")
    s.add_argument("--sweep", required=True, choices=montecarlo.SWEEPABLE)
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--trials", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", type=Path)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_montecarlo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"aqualoc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:      # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"aqualoc: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (jsonschema.ValidationError, ValueError, TypeError, protocol.ProtocolViolation) as exc:
        msg = exc.message if isinstance(exc, jsonschema.ValidationError) else str(exc)
        print(f"aqualoc: error: {msg}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
