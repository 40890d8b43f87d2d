"""Measurement: route stretch, per-node state, and report assembly.

Stretch compares the hop count of a delivered data packet against the BFS
oracle's shortest path over the same up channels, computed at the moment
of forwarding, so a reported stretch is always >= 1 and reflects exactly
what the routing state could have known. Per-node state (entries held,
non-empty buckets, virtual depths) is what the logarithmic growth claims
are judged on.

Everything here is read-mostly: sampling mutates the world only through
the protocol itself (searches may adopt entries unless frozen mode is
chosen), and all randomness comes from the sampler seed.
"""

from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import dataclass, field
from random import Random
from typing import Optional

from .routing import VirtualLink, World

STRETCH_COLUMNS = (
    "src_id_hex",
    "dst_id_hex",
    "oracle_hops",
    "uip_hops",
    "stretch",
    "search_steps",
    "search_messages",
)

STATE_COLUMNS = (
    "node_id_hex",
    "entries_total",
    "entries_physical",
    "entries_virtual",
    "nonempty_buckets",
    "max_virtual_depth",
)


@dataclass(slots=True)
class StretchSample:
    src_id_hex: str
    dst_id_hex: str
    oracle_hops: int
    uip_hops: int
    stretch: float
    search_steps: int
    search_messages: int


@dataclass(slots=True)
class StateRow:
    node_id_hex: str
    entries_total: int
    entries_physical: int
    entries_virtual: int
    nonempty_buckets: int
    max_virtual_depth: int


@dataclass(slots=True)
class StateSnapshot:
    rows: list[StateRow]
    summary: dict


@dataclass(slots=True)
class MeasureResult:
    samples: list[StretchSample]
    failures: list[dict] = field(default_factory=list)


def _sample_pairs(members: list[int], pair_count: int, sampler_seed: int) -> list[tuple[int, int]]:
    m = len(members)
    total = m * (m - 1)
    if total <= 0:
        return []
    if pair_count >= total:
        return [(a, b) for a in members for b in members if a != b]
    rng = Random(sampler_seed)
    chosen: set[int] = set()
    pairs: list[tuple[int, int]] = []
    while len(pairs) < pair_count:
        r = rng.randrange(total)
        if r in chosen:
            continue
        chosen.add(r)
        i, rem = divmod(r, m - 1)
        j = rem + 1 if rem >= i else rem
        pairs.append((members[i], members[j]))
    return pairs


def measure_stretch(
    world: World,
    pair_count: int,
    sampler_seed: int,
    adopt: bool = True,
    retries: int = 2,
    payload: bytes = b"\x00" * 16,
) -> MeasureResult:
    """Search-and-forward over sampled ordered pairs of joined live nodes.

    Each pair runs one search, then forwards one data packet over the found
    entry. A delivery failure drops the broken link (when adopting) and
    retries search + forward up to ``retries`` times. Pairs whose search
    fails while the oracle says the destination is reachable, and pairs
    whose packet never arrives, are recorded as failures, not samples.
    """
    members = [
        n.index
        for n in world.nodes
        if n.joined and world.underlay.alive[n.index]
    ]
    result = MeasureResult(samples=[])
    for src, dst in _sample_pairs(members, pair_count, sampler_seed):
        dst_id = world.nodes[dst].node_id
        src_id = world.nodes[src].node_id
        steps = 0
        messages = 0
        delivered = None
        for attempt in range(retries + 1):
            entry, trace = world.search(src, dst_id, adopt=adopt)
            messages += trace.messages
            steps = len(trace.steps)
            if entry is None:
                break
            oracle = world.underlay.shortest_path_len(src, dst)
            outcome = world.forward_packet(src, dst_id, payload, entry=entry)
            if outcome.delivered:
                delivered = (oracle, outcome.hops)
                break
            if adopt:
                world.handle_link_failure(src, entry.link)
        if delivered is None:
            reachable = world.underlay.reachable(src, dst)
            kind = "search-not-found" if entry is None else "delivery-failed"
            result.failures.append(
                {
                    "kind": kind,
                    "src": src_id.hex,
                    "dst": dst_id.hex,
                    "oracle_reachable": reachable,
                }
            )
            continue
        oracle, hops = delivered
        if oracle is None or oracle <= 0:
            result.failures.append(
                {
                    "kind": "oracle-disagrees",
                    "src": src_id.hex,
                    "dst": dst_id.hex,
                    "oracle_reachable": oracle is not None,
                }
            )
            continue
        result.samples.append(
            StretchSample(
                src_id_hex=src_id.hex,
                dst_id_hex=dst_id.hex,
                oracle_hops=oracle,
                uip_hops=hops,
                stretch=hops / oracle,
                search_steps=steps,
                search_messages=messages,
            )
        )
    return result


def stretch_summary(samples: list[StretchSample]) -> dict:
    """Mean, median, nearest-rank p95, and max of per-pair stretch."""
    if not samples:
        return {"samples": 0, "mean": None, "median": None, "p95": None, "max": None}
    values = sorted(s.stretch for s in samples)
    n = len(values)
    return {
        "samples": n,
        "mean": sum(values) / n,
        "median": statistics.median(values),
        "p95": values[max(0, math.ceil(0.95 * n) - 1)],
        "max": values[-1],
    }


def state_stats(world: World) -> StateSnapshot:
    """Per-node table sizes for all joined live nodes, plus aggregates."""
    rows: list[StateRow] = []
    for node in world.nodes:
        if not node.joined or not world.underlay.alive[node.index]:
            continue
        physical = 0
        virtual = 0
        max_depth = 0
        for entry in node.table.entries():
            if isinstance(entry.link, VirtualLink):
                virtual += 1
                max_depth = max(max_depth, entry.link.depth)
            else:
                physical += 1
        rows.append(
            StateRow(
                node_id_hex=node.node_id.hex,
                entries_total=physical + virtual,
                entries_physical=physical,
                entries_virtual=virtual,
                nonempty_buckets=sum(1 for b in node.table.buckets if b),
                max_virtual_depth=max_depth,
            )
        )
    if rows:
        entries = [r.entries_total for r in rows]
        buckets = [r.nonempty_buckets for r in rows]
        summary = {
            "nodes": len(rows),
            "mean_entries": sum(entries) / len(entries),
            "median_entries": statistics.median(entries),
            "max_entries": max(entries),
            "mean_entries_physical": sum(r.entries_physical for r in rows) / len(rows),
            "mean_entries_virtual": sum(r.entries_virtual for r in rows) / len(rows),
            "mean_nonempty_buckets": sum(buckets) / len(buckets),
            "median_nonempty_buckets": statistics.median(buckets),
            "max_nonempty_buckets": max(buckets),
            "max_virtual_depth": max(r.max_virtual_depth for r in rows),
        }
    else:
        summary = {"nodes": 0}
    return StateSnapshot(rows=rows, summary=summary)


def counters_view(world: World) -> dict:
    """Per-phase and total message/frame counters, all plain ints."""
    phases = {}
    total_messages: dict[str, int] = {}
    total_frames: dict[str, int] = {}
    for phase, bucket in world.counters.items():
        phases[phase] = {
            "messages": dict(sorted(bucket["messages"].items())),
            "frames": dict(sorted(bucket["frames"].items())),
        }
        for kind, count in bucket["messages"].items():
            total_messages[kind] = total_messages.get(kind, 0) + count
        for kind, count in bucket["frames"].items():
            total_frames[kind] = total_frames.get(kind, 0) + count
    return {
        "phases": phases,
        "messages_by_kind": dict(sorted(total_messages.items())),
        "frames_by_kind": dict(sorted(total_frames.items())),
        "messages_total": sum(total_messages.values()),
        "frames_total": sum(total_frames.values()),
    }


def build_report(
    config_echo: dict,
    seed: int,
    world: World,
    samples: list[StretchSample],
    state: StateSnapshot,
    failures: list[dict],
    extra_stretch: Optional[dict] = None,
) -> dict:
    summary = stretch_summary(samples)
    if extra_stretch:
        summary.update(extra_stretch)
    return {
        "config": config_echo,
        "seed": seed,
        "counters": counters_view(world),
        "stretch_summary": summary,
        "state_summary": state.summary,
        "failures": failures,
    }


def write_stretch_csv(samples: list[StretchSample], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(STRETCH_COLUMNS)
        for s in samples:
            writer.writerow(
                [
                    s.src_id_hex,
                    s.dst_id_hex,
                    s.oracle_hops,
                    s.uip_hops,
                    repr(s.stretch),
                    s.search_steps,
                    s.search_messages,
                ]
            )


def write_state_csv(snapshot: StateSnapshot, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(STATE_COLUMNS)
        for r in snapshot.rows:
            writer.writerow(
                [
                    r.node_id_hex,
                    r.entries_total,
                    r.entries_physical,
                    r.entries_virtual,
                    r.nonempty_buckets,
                    r.max_virtual_depth,
                ]
            )


def write_report_json(report: dict, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")


def export_report(report_or_samples, fmt: str, destination: str, state: Optional[StateSnapshot] = None) -> None:
    """Write measurement output; ``fmt`` picks the representation.

    ``json`` expects the assembled report dict; ``csv`` expects the sample
    list (plus optionally the state snapshot) and writes stretch.csv and,
    when state is given, state.csv into the destination directory.
    """
    import os

    if fmt == "json":
        write_report_json(report_or_samples, destination)
    elif fmt == "csv":
        os.makedirs(destination, exist_ok=True)
        write_stretch_csv(report_or_samples, os.path.join(destination, "stretch.csv"))
        if state is not None:
            write_state_csv(state, os.path.join(destination, "state.csv"))
    else:
        raise ValueError(f"unknown export format {fmt!r}")
