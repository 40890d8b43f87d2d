"""Scenario execution: build a world, drive it, write the artifacts.

A run is a fixed phase sequence, each phase tagged in the counters:
join (all initial nodes come up, deferring any with no joined neighbor
yet), events (scheduled world mutations in (tick, seq) order, with
protocol hooks for joins and heals), repair (the configured number of
periodic rounds), then measurement. The state snapshot is taken after
repair and before measurement, so table-size statistics describe the
steady state rather than sampling side effects.

Everything written under the output directory is machine output:
report.json (deterministic bytes for a given config and seed),
stretch.csv, state.csv, snapshot.json, and meta.json (wall-clock and
environment details, deliberately kept out of report.json so report
digests stay reproducible).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from random import Random
from typing import Optional

from . import _kernels, metrics
from .config import ScenarioConfig, load_config
from .errors import ConfigError, UipsimError
from .identity import NodeId
from .routing import World, derive_seed
from .underlay import Underlay, build_topology

logger = logging.getLogger(__name__)

SNAPSHOT_FORMAT = "uipsim-world/1"

EXIT_OK = 0
EXIT_FAILURES = 1
EXIT_CONFIG = 2
EXIT_IO = 3


def build_world(cfg: ScenarioConfig) -> World:
    """Underlay plus protocol state, before any joins."""
    punch_seed = derive_seed(cfg.seed, "punch")
    if cfg.topology.kind == "file":
        try:
            with open(cfg.topology.path) as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"topology file not found: {cfg.topology.path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{cfg.topology.path}: not valid JSON: {exc}")
        underlay = Underlay.from_snapshot(
            data, punch_success=cfg.protocol.punch_success, punch_seed=punch_seed
        )
        node_ids = None
        rows = data.get("nodes", [])
        if rows and all("id" in row for row in rows):
            width = data.get("id_bits") or cfg.protocol.id_bits
            node_ids = [NodeId.from_hex(row["id"], width) for row in rows]
        return World(underlay, cfg.protocol, seed=cfg.seed, node_ids=node_ids)
    underlay = build_topology(
        cfg.topology, punch_success=cfg.protocol.punch_success, punch_seed=punch_seed
    )
    return World(underlay, cfg.protocol, seed=cfg.seed)


def initial_join_order(cfg: ScenarioConfig, world: World) -> list[int]:
    deferred = {ev.node for ev in cfg.workload.events if ev.action == "node-join"}
    order = [i for i in range(world.underlay.n) if i not in deferred]
    if cfg.workload.join_order == "seeded-shuffle":
        Random(derive_seed(cfg.seed, "join-order")).shuffle(order)
    return order


def apply_events(cfg: ScenarioConfig, world: World, failures: list[dict]) -> None:
    events = sorted(cfg.workload.events, key=lambda ev: (ev.at, ev.seq))
    for ev in events:
        world.tick = max(world.tick, ev.at)
        if ev.action == "node-join":
            if world.nodes[ev.node].joined or not world.underlay.alive[ev.node]:
                failures.append({"kind": "join-rejected", "node": ev.node})
                continue
            boot = world._pick_bootstrap(ev.node)
            world.join(ev.node, boot)
        elif ev.action == "heal":
            healed = world.underlay.healable_channels()
            world.underlay.apply_event(ev)
            for ch in sorted(healed, key=lambda c: c.key):
                world.bridge_channel(ch.a, ch.b)
        else:
            world.underlay.apply_event(ev)


def run_scenario(cfg: ScenarioConfig, output_dir: Optional[str] = None) -> tuple[int, dict]:
    """Execute one configured run; returns (exit_code, report)."""
    started = time.monotonic()
    out = output_dir or cfg.output or "uipsim-out"
    os.makedirs(out, exist_ok=True)
    failures: list[dict] = []

    world = build_world(cfg)
    world.phase = "join"
    logger.info("joining %d nodes", world.underlay.n)
    world.run_joins(initial_join_order(cfg, world))

    world.phase = "events"
    apply_events(cfg, world, failures)

    world.phase = "repair"
    for round_no in range(cfg.workload.repair_rounds):
        logger.info("repair round %d", round_no + 1)
        world.repair_round()

    state = metrics.state_stats(world)

    world.phase = "measure"
    adopt = cfg.workload.sampling == "sequential-with-adoption"
    sampler_seed = derive_seed(cfg.seed, "sampler")
    measured = metrics.measure_stretch(
        world, cfg.workload.stretch_pairs, sampler_seed, adopt=adopt
    )
    failures.extend(measured.failures)

    extra = None
    if cfg.workload.stretch_both_modes and not cfg.protocol.direct_upgrade:
        world.phase = "measure-direct"
        world.params.direct_upgrade = True
        second = metrics.measure_stretch(
            world, cfg.workload.stretch_pairs, sampler_seed, adopt=adopt
        )
        world.params.direct_upgrade = False
        upgraded = metrics.stretch_summary(second.samples)
        extra = {
            "mean_with_direct_upgrade": upgraded["mean"],
            "samples_with_direct_upgrade": upgraded["samples"],
            "failures_with_direct_upgrade": len(second.failures),
        }

    report = metrics.build_report(
        cfg.echo(), cfg.seed, world, measured.samples, state, failures, extra
    )
    metrics.write_report_json(report, os.path.join(out, "report.json"))
    metrics.write_stretch_csv(measured.samples, os.path.join(out, "stretch.csv"))
    metrics.write_state_csv(state, os.path.join(out, "state.csv"))
    write_world_snapshot(world, os.path.join(out, "snapshot.json"))
    meta = {
        "wall_time_s": round(time.monotonic() - started, 3),
        "python": sys.version.split()[0],
        "using_numba": _kernels.USING_NUMBA,
    }
    with open(os.path.join(out, "meta.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    code = EXIT_OK if not failures else EXIT_FAILURES
    logger.info("run complete: %d samples, %d failures", len(measured.samples), len(failures))
    return code, report


def write_world_snapshot(world: World, path: str) -> None:
    data = world.underlay.snapshot()
    for row in data["nodes"]:
        node = world.nodes[row["index"]]
        row["id"] = node.node_id.hex
        row["joined"] = node.joined
    data["format"] = SNAPSHOT_FORMAT
    data["id_bits"] = world.params.id_bits
    data["counters"] = metrics.counters_view(world)
    with open(path, "w") as fh:
        json.dump(data, fh, sort_keys=True, indent=2)
        fh.write("\n")


def run_audit(cfg: ScenarioConfig, output_dir: Optional[str] = None) -> int:
    """Run the world through join/events/repair, then every invariant audit."""
    world = build_world(cfg)
    world.phase = "join"
    world.run_joins(initial_join_order(cfg, world))
    world.phase = "events"
    failures: list[dict] = []
    apply_events(cfg, world, failures)
    world.phase = "repair"
    for _ in range(cfg.workload.repair_rounds):
        world.repair_round()
    violations, warnings = world.audit()
    out = output_dir or cfg.output
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "audit.json"), "w") as fh:
            json.dump(
                {"violations": violations, "warnings": warnings, "join_failures": failures},
                fh,
                sort_keys=True,
                indent=2,
            )
            fh.write("\n")
    for v in violations:
        logger.error("audit violation: %s", v)
    for w in warnings:
        logger.info("audit warning: %s", w)
    logger.info("audit: %d violations, %d warnings", len(violations), len(warnings))
    return EXIT_OK if not violations and not failures else EXIT_FAILURES


def _run_one_seed(args: tuple[str, int, str]) -> tuple[int, int, Optional[str], Optional[float]]:
    config_path, seed, out_dir = args
    cfg = load_config(config_path)
    cfg.seed = seed
    code, report = run_scenario(cfg, out_dir)
    digest = _file_digest(os.path.join(out_dir, "report.json"))
    return seed, code, digest, report["stretch_summary"]["mean"]


def _file_digest(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def run_parallel_seeds(config_path: str, seeds: list[int], output_dir: str) -> int:
    """One independent run per seed, in worker processes, plus a merged index."""
    os.makedirs(output_dir, exist_ok=True)
    jobs = [(config_path, s, os.path.join(output_dir, f"seed-{s}")) for s in seeds]
    worst = EXIT_OK
    merged = {}
    with ProcessPoolExecutor(max_workers=min(len(jobs), os.cpu_count() or 1)) as pool:
        for seed, code, digest, mean in pool.map(_run_one_seed, jobs):
            worst = max(worst, code)
            merged[str(seed)] = {
                "exit": code,
                "report_digest": digest,
                "stretch_mean": mean,
            }
    with open(os.path.join(output_dir, "merged.json"), "w") as fh:
        json.dump({"seeds": merged}, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return worst
