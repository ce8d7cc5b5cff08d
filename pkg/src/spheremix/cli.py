"""Config-driven command line front end for the experiment modules.

Every command reads a JSON config with an explicit schema version, a
mandatory 64-bit seed, and strict key checking (unknown keys are rejected
at every level, so typos fail loudly instead of silently running with a
default).  Artifacts are machine readable and each one embeds the seed
and a sha256 hash of the canonical serialization (sorted keys, compact
separators) of the effective config, i.e. the config after any --seed
override.  Two runs with the same effective config produce byte-identical
artifacts.

Worker parallelism never touches the sampled numbers: ensemble work is
split into fixed-size chunks, each chunk owns a generator derived from
(seed, stream, chunk index), and chunk outputs are integer counts summed
in a fixed order.  --workers only decides how many chunks run at once.

Exit codes: 0 success, 2 config error, 3 numerical failure (norm-drift
guard, heavy censoring, insufficient signal for a required fit, or a
failed genericity check).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import control, core, dynamics, ergodicity, galerkin, noise
from .errors import ConfigError, SpheremixError

__all__ = ["main", "run"]

SCHEMA_VERSION = 1
CHUNK_SIZE = 2048          # fixed ensemble chunk; changing it changes draws
MAX_SEED = 2**64

# seed-stream labels (first spawn-key entry); chunked streams append the
# chunk index as a second entry
STREAM_PARTITION = 0
STREAM_RUN = 1
STREAM_RUN_B = 2
STREAM_REPLICA = 3
STREAM_REPLICA_B = 4

_REQUIRED = object()
_STATE = object()

_BLOCK_SCHEMAS = {
    "simulate": {
        "steps": (int, _REQUIRED),
        "record_stride": (int, 0),
        "start": (_STATE, "e1"),
    },
    "mix": {
        "k_max": (int, 30),
        "n_traj": (int, 20000),
        "cells": (int, None),
        "seed_samples": (int, 4000),
        "law_a": (_STATE, "e1"),
        "law_b": (_STATE, "e2"),
    },
    "hittime": {
        "delta": (float, 0.3),
        "alpha": (float, 0.05),
        "k_max": (int, 500),
        "n_traj": (int, 5000),
        "start": (_STATE, "e2"),
    },
    "steer": {
        "z_from": (_STATE, _REQUIRED),
        "z_to": (_STATE, _REQUIRED),
        "delta": (float, 0.03),
        "tol": (float, 1e-6),
    },
    "couple": {
        "delta0": (float, 0.2),
        "runs": (int, 500),
        "max_steps": (int, 200),
        "n_kernel": (int, 2000),
        "cells": (int, None),
        "start_radius": (float, None),
        "seed_samples": (int, 4000),
    },
    "kernel": {
        "state": (_STATE, "e1"),
        "n_samples": (int, 10000),
        "cells": (int, None),
        "seed_samples": (int, 4000),
    },
    "galerkin": {
        "potential": (str, _REQUIRED),
        "n": (int, _REQUIRED),
        "sigma": (float, 2.0),
        "epsilon": (float, 0.0),
    },
    "check": {
        "tol_gap": (float, 1e-8),
        "tol_coupling": (float, 1e-10),
    },
}

_TOP_KEYS = {"schema", "seed", "system", "noise"} | set(_BLOCK_SCHEMAS)


# --------------------------------------------------------------------------
# config loading and validation


def canonical_hash(payload: dict) -> str:
    """sha256 hex digest of the sorted-key compact JSON serialization."""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _load_payload(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError("config root must be a JSON object")
    return payload


def _check_seed(value) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError("seed must be an integer")
    if not 0 <= value < MAX_SEED:
        raise ConfigError("seed must fit in an unsigned 64-bit integer")
    return value


def validate_config(payload: dict) -> dict:
    """Full strict validation; returns the payload unchanged on success."""
    unknown = set(payload) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if payload.get("schema") != SCHEMA_VERSION:
        raise ConfigError(f"config must declare \"schema\": {SCHEMA_VERSION}")
    if "seed" not in payload:
        raise ConfigError("config must declare a seed")
    _check_seed(payload["seed"])
    system = payload.get("system", "system_a")
    if isinstance(system, str):
        if system not in ("system_a", "system_b"):
            raise ConfigError(f"unknown system name {system!r}")
    elif not isinstance(system, dict):
        raise ConfigError("system must be a name or an inline JSON object")
    if "noise" in payload and not isinstance(payload["noise"], dict):
        raise ConfigError("noise must be a JSON object")
    for name in _BLOCK_SCHEMAS:
        if name in payload:
            _read_block(payload, name)
    return payload


def _coerce(where: str, kind, value):
    if isinstance(value, bool):
        raise ConfigError(f"{where} must not be a boolean")
    if kind is int:
        if not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if kind is float:
        if not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    return value                       # _STATE: resolved against the system later


def _read_block(payload: dict, name: str) -> dict:
    schema = _BLOCK_SCHEMAS[name]
    raw = payload.get(name, {})
    if not isinstance(raw, dict):
        raise ConfigError(f"{name} block must be a JSON object")
    unknown = set(raw) - set(schema)
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    out = {}
    for key, (kind, default) in schema.items():
        if key in raw:
            out[key] = _coerce(f"{name}.{key}", kind, raw[key])
        elif default is _REQUIRED:
            raise ConfigError(f"{name}.{key} is required")
        else:
            out[key] = default
    return out


def _resolve_system(payload: dict) -> core.SystemSpec:
    value = payload.get("system", "system_a")
    if value == "system_a":
        return core.system_a()
    if value == "system_b":
        return galerkin.system_b()
    if isinstance(value, dict) and "system" in value:
        value = value["system"]        # accept a wrapped system.json artifact
    return core.system_from_json(value)


def _resolve_noise(payload: dict) -> noise.NoiseModel:
    if "noise" in payload:
        return noise.model_from_json(payload["noise"])
    return noise.NoiseModel()


_BASIS_RE = re.compile(r"^e([1-9][0-9]*)$")


def _resolve_state(n: int, value, where: str) -> np.ndarray:
    """A state is either "e<k>" or a list of n [re, im] pairs."""
    if isinstance(value, str):
        m = _BASIS_RE.match(value)
        if not m or int(m.group(1)) > n:
            raise ConfigError(f"{where}: no basis vector {value!r} in dimension {n}")
        z = np.zeros(n, dtype=np.complex128)
        z[int(m.group(1)) - 1] = 1.0
        return z
    arr = np.asarray(value, dtype=float)
    if arr.shape != (n, 2):
        raise ConfigError(f"{where}: expected {n} [re, im] pairs, got shape {arr.shape}")
    z = arr[:, 0] + 1j * arr[:, 1]
    if np.linalg.norm(z) <= 1e-12:
        raise ConfigError(f"{where}: state is numerically zero")
    return core.sphere_renormalize(z)


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


# --------------------------------------------------------------------------
# artifacts


def _meta(payload: dict, command: str) -> dict:
    return {
        "command": command,
        "config_sha256": canonical_hash(payload),
        "seed": payload["seed"],
    }


def _write_json(path: Path, obj: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"wrote {path}")


def _open_csv(path: Path, meta: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    fh = open(path, "w", encoding="utf-8", newline="")
    fh.write(f"# config_sha256={meta['config_sha256']} seed={meta['seed']}\n")
    return fh


def _artifact_path(out: str, default_name: str, multi: bool = False) -> Path:
    """--out is a directory; a file path is allowed for single-file commands."""
    p = Path(out)
    if p.suffix in (".json", ".csv"):
        if multi:
            raise ConfigError("--out must be a directory for this command")
        return p
    return p / default_name


def _pairs(z: np.ndarray) -> list:
    return [[float(v.real), float(v.imag)] for v in z]


def _build_partition(spec, model, block, payload, config) -> ergodicity.Partition:
    cells = block["cells"]
    if cells is None:
        cells = ergodicity.default_cell_count(spec.n)
    rng = _stream(payload["seed"], STREAM_PARTITION)
    return ergodicity.make_partition(spec, model, cells, block["seed_samples"],
                                     rng, config)


# --------------------------------------------------------------------------
# chunked ensemble push (worker-count independent by construction)


def _chunk_plan(total: int) -> list:
    edges = list(range(0, total, CHUNK_SIZE)) + [total]
    return [(i, hi - lo) for i, (lo, hi) in enumerate(zip(edges, edges[1:]))]


def _push_counts(spec, model, state0, k_max, n_traj, partition, seed, stream,
                 workers, config) -> np.ndarray:
    """Cell counts (k_max+1, M) of a point-mass ensemble, chunk-seeded.

    Chunk i draws from SeedSequence(seed, spawn_key=(stream, i)); the chunk
    grid depends only on n_traj, so the result is identical for any worker
    count.  Counts are integers, so the reduction order cannot matter.
    """
    jobs = _chunk_plan(n_traj)

    def one(job):
        index, size = job
        rng = _stream(seed, stream, index)
        z = np.tile(state0, (size, 1))
        counts = np.zeros((k_max + 1, partition.size), dtype=np.int64)
        counts[0] = np.bincount(partition.assign(z), minlength=partition.size)
        for k in range(1, k_max + 1):
            z = dynamics.step_markov_ensemble(spec, z, model, rng, config)
            counts[k] = np.bincount(partition.assign(z), minlength=partition.size)
        return counts

    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one, jobs))
    else:
        parts = [one(job) for job in jobs]
    return sum(parts)


def _measures(partition, counts) -> list:
    return [ergodicity.EmpiricalMeasure(partition, row / row.sum()) for row in counts]


# --------------------------------------------------------------------------
# commands


def _cmd_check(payload, args, config) -> int:
    block = _read_block(payload, "check")
    spec = _resolve_system(payload)
    report = core.check_condition2(spec, block["tol_gap"], block["tol_coupling"])
    artifact = _meta(payload, "check")
    artifact.update({
        "passed": report.passed,
        "min_gap": report.min_gap,
        "min_coupling": report.min_coupling,
        "couplings": [float(c) for c in report.couplings],
        "reasons": list(report.reasons),
    })
    _write_json(_artifact_path(args.out, "check.json"), artifact)
    print(report)
    return 0 if report.passed else 3


def _cmd_simulate(payload, args, config) -> int:
    block = _read_block(payload, "simulate")
    if block["steps"] < 1:
        raise ConfigError("simulate.steps must be >= 1")
    if block["record_stride"] < 0:
        raise ConfigError("simulate.record_stride must be >= 0")
    spec = _resolve_system(payload)
    model = _resolve_noise(payload)
    z0 = _resolve_state(spec.n, block["start"], "simulate.start")
    steps = block["steps"]
    run_config = dynamics.PropagatorConfig(
        substeps_per_unit=config.substeps_per_unit,
        norm_drift_tolerance=config.norm_drift_tolerance,
        record_stride=block["record_stride"],
    )
    h = 1.0 / run_config.substeps_per_unit
    mids_unit = (np.arange(run_config.substeps_per_unit) + 0.5) * h
    drive = np.concatenate([
        dynamics.segment_drive_values(
            model, noise.segment_xi(model, payload["seed"], 0, k), mids_unit)
        for k in range(steps)
    ])
    rec = dynamics.propagate(spec, z0, drive, float(steps), run_config,
                             drive_label="markov-noise")
    meta = _meta(payload, "simulate")
    path = _artifact_path(args.out, "trajectory.csv")
    with _open_csv(path, meta) as fh:
        dynamics.record_to_csv(rec, fh)
    print(f"wrote {path}")
    print(f"simulate: {steps} unit steps, {rec.states.shape[0]} records, "
          f"max norm drift {rec.max_norm_drift:.3e}")
    return 0


def _cmd_kernel(payload, args, config) -> int:
    block = _read_block(payload, "kernel")
    spec = _resolve_system(payload)
    model = _resolve_noise(payload)
    z = _resolve_state(spec.n, block["state"], "kernel.state")
    partition = _build_partition(spec, model, block, payload, config)
    rng = _stream(payload["seed"], STREAM_RUN)
    est = ergodicity.estimate_kernel(spec, model, z, partition,
                                     block["n_samples"], rng, config)
    artifact = _meta(payload, "kernel")
    source_cell = int(partition.assign(est.source[None, :])[0])
    artifact.update({
        "state": _pairs(est.source),
        "cells": partition.size,
        "source_cell": source_cell,
        "count": int(est.count),
        "row": [float(w) for w in est.row.weights],
    })
    _write_json(_artifact_path(args.out, "kernel.json"), artifact)
    print(f"kernel: source cell {source_cell}, {est.count} samples, "
          f"{int(np.count_nonzero(est.row.weights))} cells reached")
    return 0


def _cmd_mix(payload, args, config) -> int:
    block = _read_block(payload, "mix")
    if block["k_max"] < 1:
        raise ConfigError("mix.k_max must be >= 1")
    if block["n_traj"] < 100:
        raise ConfigError("mix.n_traj must be >= 100")
    json_path = _artifact_path(args.out, "mixing.json", multi=True)
    csv_path = _artifact_path(args.out, "tv_series.csv", multi=True)
    spec = _resolve_system(payload)
    model = _resolve_noise(payload)
    law_a = _resolve_state(spec.n, block["law_a"], "mix.law_a")
    law_b = _resolve_state(spec.n, block["law_b"], "mix.law_b")
    partition = _build_partition(spec, model, block, payload, config)
    seed, k_max, n_traj = payload["seed"], block["k_max"], block["n_traj"]

    counts = {}
    for key, state, stream in (
        ("a", law_a, STREAM_RUN),
        ("b", law_b, STREAM_RUN_B),
        ("ra", law_a, STREAM_REPLICA),
        ("rb", law_b, STREAM_REPLICA_B),
    ):
        counts[key] = _push_counts(spec, model, state, k_max, n_traj,
                                   partition, seed, stream, args.workers, config)
    meas = {key: _measures(partition, rows) for key, rows in counts.items()}
    tv = [ergodicity.tv_distance(pa, pb) for pa, pb in zip(meas["a"], meas["b"])]
    floors = [ergodicity.tv_distance(meas["a"][k], meas["ra"][k])
              for k in range(1, k_max + 1)]
    floors += [ergodicity.tv_distance(meas["b"][k], meas["rb"][k])
               for k in range(1, k_max + 1)]
    floor = float(np.median(floors))
    report = ergodicity.mixing_rate(list(enumerate(tv)), floor)

    meta = _meta(payload, "mix")
    artifact = dict(meta)
    artifact.update({
        "k_max": k_max,
        "n_traj": n_traj,
        "cells": partition.size,
        "report": ergodicity.mixing_report_to_json(report),
    })
    _write_json(json_path, artifact)
    with _open_csv(csv_path, meta) as fh:
        ergodicity.tv_series_to_csv(report, fh)
    print(f"wrote {csv_path}")
    lo, hi = report.rate_ci
    print(f"mix: rate {report.rate:.4f} (95% CI {lo:.4f}..{hi:.4f}), "
          f"noise floor {floor:.4f}, final TV {tv[-1]:.4f}")
    return 0


def _cmd_hittime(payload, args, config) -> int:
    block = _read_block(payload, "hittime")
    spec = _resolve_system(payload)
    model = _resolve_noise(payload)
    z = _resolve_state(spec.n, block["start"], "hittime.start")
    rng = _stream(payload["seed"], STREAM_RUN)
    report = ergodicity.hitting_time(spec, model, z, block["delta"], block["alpha"],
                                     block["k_max"], block["n_traj"], rng, config)
    artifact = _meta(payload, "hittime")
    artifact["start"] = _pairs(z)
    artifact["report"] = ergodicity.hitting_report_to_json(report)
    _write_json(_artifact_path(args.out, "hitting.json"), artifact)
    print(f"hittime: censored {report.censored}/{block['n_traj']}, "
          f"exp moment {report.moment:.4f}, tail slope {report.tail_slope}")
    return 0


def _cmd_steer(payload, args, config) -> int:
    spec = _resolve_system(payload)
    if args.replay is not None:
        return _replay_artifact(payload, args, spec, config)
    block = _read_block(payload, "steer")
    z1 = _resolve_state(spec.n, block["z_from"], "steer.z_from")
    z2 = _resolve_state(spec.n, block["z_to"], "steer.z_to")
    rng = _stream(payload["seed"], STREAM_RUN)
    plan = control.global_steer(spec, z1, z2, delta=block["delta"],
                                tol=block["tol"], rng=rng)
    endpoint, _ = control.replay_plan(spec, plan)
    artifact = _meta(payload, "steer")
    artifact.update({
        "plan": control.plan_to_json(plan),
        "replay": {
            "endpoint_error": float(np.linalg.norm(endpoint - plan.endpoint)),
            "target_error": float(np.linalg.norm(endpoint - z2)),
        },
    })
    _write_json(_artifact_path(args.out, "plan.json"), artifact)
    print(f"steer: {len(plan.stages)} stages, duration {plan.total_duration:g}, "
          f"target error {artifact['replay']['target_error']:.3e}")
    return 0


def _replay_artifact(payload, args, spec, config) -> int:
    try:
        with open(args.replay, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read plan {args.replay}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"plan {args.replay} is not valid JSON: {exc}") from exc
    if isinstance(data, dict) and "plan" in data:
        data = data["plan"]
    plan = control.plan_from_json(data)
    endpoint, _ = control.replay_plan(spec, plan)
    artifact = _meta(payload, "steer")
    artifact.update({
        "plan_file": str(args.replay),
        "endpoint_error": float(np.linalg.norm(endpoint - plan.endpoint)),
        "target_error": float(np.linalg.norm(endpoint - plan.target)),
        "recorded_error": plan.total_error,
    })
    _write_json(_artifact_path(args.out, "replay.json"), artifact)
    print(f"steer --replay: endpoint error {artifact['endpoint_error']:.3e}, "
          f"target error {artifact['target_error']:.3e}")
    return 0


def _cmd_couple(payload, args, config) -> int:
    block = _read_block(payload, "couple")
    if block["runs"] < 1:
        raise ConfigError("couple.runs must be >= 1")
    csv_path = _artifact_path(args.out, "meetings.csv", multi=True)
    json_path = _artifact_path(args.out, "couple.json", multi=True)
    spec = _resolve_system(payload)
    model = _resolve_noise(payload)
    partition = _build_partition(spec, model, block, payload, config)
    delta0 = block["delta0"]
    radius = block["start_radius"] if block["start_radius"] is not None else delta0
    anchor = np.zeros(spec.n, dtype=np.complex128)
    anchor[0] = 1.0
    rng = _stream(payload["seed"], STREAM_RUN)
    starts = ergodicity.sphere_ball_sample(anchor, radius, 2 * block["runs"], rng)

    cache = {}
    pairs = []
    for i in range(block["runs"]):
        pairs.append(ergodicity.coupled_chain(
            spec, model, starts[2 * i], starts[2 * i + 1], delta0, partition,
            block["n_kernel"], block["max_steps"], rng, config, row_cache=cache))

    meta = _meta(payload, "couple")
    with _open_csv(csv_path, meta) as fh:
        fh.write("run,met,meet_step,ball_entries\n")
        for i, pair in enumerate(pairs):
            step = "" if pair.meet_step is None else str(pair.meet_step)
            fh.write(f"{i},{int(pair.met)},{step},{len(pair.entries)}\n")
    print(f"wrote {csv_path}")

    met = sum(p.met for p in pairs)
    levels, probs = ergodicity.meeting_tail(pairs)
    tail = None
    try:
        slope, ci = ergodicity.log_slope(np.asarray(levels, float),
                                         np.asarray(probs, float))
        tail = {"slope": slope, "ci": [ci[0], ci[1]]}
    except SpheremixError:
        pass                           # too few positive levels for a fit
    artifact = dict(meta)
    artifact.update({
        "runs": block["runs"],
        "delta0": delta0,
        "start_radius": radius,
        "max_steps": block["max_steps"],
        "n_kernel": block["n_kernel"],
        "cells": partition.size,
        "met": int(met),
        "met_fraction": met / block["runs"],
        "tail_levels": [int(v) for v in levels],
        "tail_probs": [float(v) for v in probs],
        "tail_fit": tail,
    })
    _write_json(json_path, artifact)
    print(f"couple: {met}/{block['runs']} met within {block['max_steps']} steps, "
          f"tail fit {tail if tail else 'insufficient data'}")
    return 0


def _cmd_galerkin(payload, args, config) -> int:
    block = _read_block(payload, "galerkin")
    potential = galerkin.PolynomialPotential.from_string(block["potential"])
    spec = galerkin.build(potential, block["n"], sigma=block["sigma"],
                          epsilon=block["epsilon"])
    artifact = _meta(payload, "galerkin")
    artifact.update({
        "potential": block["potential"],
        "system": core.system_to_json(spec),
    })
    _write_json(_artifact_path(args.out, "system.json"), artifact)
    lam = ", ".join(f"{v:.6g}" for v in np.diag(spec.lam).real)
    print(f"galerkin: n={block['n']} sigma={block['sigma']:g} "
          f"epsilon={block['epsilon']:g}, spectrum [{lam}]")
    return 0


_COMMANDS = {
    "check": _cmd_check,
    "simulate": _cmd_simulate,
    "kernel": _cmd_kernel,
    "mix": _cmd_mix,
    "hittime": _cmd_hittime,
    "steer": _cmd_steer,
    "couple": _cmd_couple,
    "galerkin": _cmd_galerkin,
}


# --------------------------------------------------------------------------
# entry points


def _galerkin_payload(args) -> dict:
    """Synthesize a config from the galerkin convenience flags."""
    block = {}
    if args.potential is not None:
        block["potential"] = args.potential
    if args.n is not None:
        block["n"] = args.n
    if args.sigma is not None:
        block["sigma"] = args.sigma
    if args.epsilon is not None:
        block["epsilon"] = args.epsilon
    return {"schema": SCHEMA_VERSION, "seed": 0, "galerkin": block}


def _effective_config(args) -> dict:
    if args.config is not None:
        payload = _load_payload(args.config)
    elif args.command == "galerkin":
        payload = _galerkin_payload(args)
    else:
        raise ConfigError("--config is required")
    if args.command == "galerkin" and args.config is not None:
        # flags override the corresponding block entries
        overrides = _galerkin_payload(args)["galerkin"]
        if overrides:
            block = dict(payload.get("galerkin", {}))
            block.update(overrides)
            payload = dict(payload)
            payload["galerkin"] = block
    if args.seed is not None:
        payload = dict(payload)
        payload["seed"] = _check_seed(args.seed)
    return validate_config(payload)


def _guarded(fn) -> int:
    try:
        return fn()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SpheremixError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


def run(command: str, payload: dict, out: str = ".", workers: int = 1,
        seed: int | None = None, replay: str | None = None) -> int:
    """Programmatic entry point: validate, run, write artifacts, return status."""

    def body():
        if command not in _COMMANDS:
            raise ConfigError(f"unknown command {command!r}")
        if workers < 1:
            raise ConfigError("workers must be >= 1")
        cfg = dict(payload)
        if seed is not None:
            cfg["seed"] = _check_seed(seed)
        validate_config(cfg)
        args = argparse.Namespace(command=command, out=out, workers=workers,
                                  replay=replay)
        return _COMMANDS[command](cfg, args, dynamics.DEFAULT_CONFIG)

    return _guarded(body)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spheremix",
        description="Experiments on the randomly forced bilinear flow on the "
                    "complex unit sphere.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    descriptions = {
        "check": "spectrum and coupling genericity report",
        "simulate": "one noisy trajectory, recorded to CSV",
        "kernel": "one-step transition row from a fixed state",
        "mix": "two-ensemble total-variation decay and rate fit",
        "hittime": "first-entry times into a ball around the anchor state",
        "steer": "exact steering plan between two states (or --replay)",
        "couple": "coupled chains with cell-level maximal coupling",
        "galerkin": "assemble a truncated potential system",
    }
    for name, desc in descriptions.items():
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", default=None, metavar="PATH",
                       help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None, metavar="U64",
                       help="override the config seed")
        p.add_argument("--out", default=".", metavar="DIR",
                       help="artifact directory (or file for single-file commands)")
        p.add_argument("--workers", type=int, default=1, metavar="INT",
                       help="max concurrent ensemble chunks (results identical "
                            "for any value)")
        if name == "steer":
            p.add_argument("--replay", default=None, metavar="PATH",
                           help="replay a stored plan artifact instead of solving")
        if name == "galerkin":
            p.add_argument("--potential", default=None, metavar="POLY",
                           help="potential polynomial in x, e.g. \"x^2\"")
            p.add_argument("--n", type=int, default=None, metavar="INT",
                           help="number of retained modes")
            p.add_argument("--sigma", type=float, default=None, metavar="REAL",
                           help="nonlinearity exponent")
            p.add_argument("--epsilon", type=float, default=None, metavar="REAL",
                           help="nonlinearity strength")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if not hasattr(args, "replay"):
        args.replay = None

    def body():
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        payload = _effective_config(args)
        return _COMMANDS[args.command](payload, args, dynamics.DEFAULT_CONFIG)

    return _guarded(body)


if __name__ == "__main__":
    sys.exit(main())
