"""Scenario configuration: strict parsing into typed objects.

Configs are JSON documents validated against the shipped schema plus
semantic rules the schema cannot express (which topology parameters each
kind takes, which fields each event action takes, cross-field defaults).
Unknown keys and malformed values are rejected with the offending key
named, never ignored.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Optional

import jsonschema

from .errors import ConfigError
from .routing import ProtocolParams, derive_seed
from .underlay import TopologySpec, WorldEvent

JOIN_ORDERS = ("sequential", "seeded-shuffle")
SAMPLING_MODES = ("sequential-with-adoption", "frozen-tables")

# which optional topology knobs each kind accepts, beyond kind/n/seed
_TOPOLOGY_FIELDS = {
    "random-gnp": {"required": ("n", "p"), "allowed": ("p",)},
    "ring-with-chords": {"required": ("n",), "allowed": ("chords",)},
    "preferential-attachment": {"required": ("n", "m"), "allowed": ("m",)},
    "nat-clusters": {"required": ("n", "clusters", "gateways"), "allowed": ("clusters", "gateways")},
    "file": {"required": ("path",), "allowed": ("path",)},
}

_EVENT_FIELDS = {
    "node-join": ("node",),
    "node-fail": ("node",),
    "channel-fail": ("a", "b"),
    "partition": ("groups",),
    "heal": (),
}


@dataclass(slots=True)
class WorkloadSpec:
    join_order: str = "sequential"
    repair_rounds: int = 1
    stretch_pairs: int = 0
    sampling: str = "sequential-with-adoption"
    stretch_both_modes: bool = False
    events: list[WorldEvent] = field(default_factory=list)


@dataclass(slots=True)
class ScenarioConfig:
    seed: int
    topology: TopologySpec
    protocol: ProtocolParams
    workload: WorkloadSpec
    output: Optional[str] = None

    def echo(self) -> dict:
        """The fully-resolved config as plain data, output path omitted so
        reports digest identically regardless of where they were written."""
        topo: dict[str, Any] = {"kind": self.topology.kind, "seed": self.topology.seed}
        if self.topology.kind != "file":
            topo["n"] = self.topology.n
        for name in ("p", "chords", "m", "clusters", "gateways", "path"):
            value = getattr(self.topology, name)
            if value is not None:
                topo[name] = value
        return {
            "seed": self.seed,
            "topology": topo,
            "protocol": {
                "id_bits": self.protocol.id_bits,
                "k": self.protocol.k,
                "k_max": self.protocol.k_max,
                "depth_cap": self.protocol.depth_cap,
                "punch_success": self.protocol.punch_success,
                "direct_upgrade": self.protocol.direct_upgrade,
                "repair_period": self.protocol.repair_period,
                "liveness_timeout": self.protocol.liveness_timeout,
            },
            "workload": {
                "join_order": self.workload.join_order,
                "repair_rounds": self.workload.repair_rounds,
                "stretch_pairs": self.workload.stretch_pairs,
                "sampling": self.workload.sampling,
                "stretch_both_modes": self.workload.stretch_both_modes,
                "events": [
                    {
                        k: v
                        for k, v in (
                            ("at", ev.at),
                            ("action", ev.action),
                            ("node", ev.node),
                            ("a", ev.a),
                            ("b", ev.b),
                            ("groups", [list(g) for g in ev.groups] if ev.groups else None),
                        )
                        if v is not None
                    }
                    for ev in self.workload.events
                ],
            },
        }


def _schema() -> dict:
    text = resources.files("uipsim").joinpath("data/scenario.schema.json").read_text()
    return json.loads(text)


def _json_path(error: jsonschema.ValidationError) -> str:
    parts = []
    for p in error.absolute_path:
        if isinstance(p, int):
            parts.append(f"[{p}]")
        else:
            parts.append(f".{p}" if parts else str(p))
    return "".join(parts) or "(top level)"


def parse_config(data: dict, source: str = "<dict>") -> ScenarioConfig:
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(f"{source}: at {_json_path(e)}: {e.message}")

    topo_raw = data["topology"]
    kind = topo_raw["kind"]
    rules = _TOPOLOGY_FIELDS[kind]
    for name in rules["required"]:
        if name not in topo_raw:
            raise ConfigError(f"{source}: topology.{name} is required for kind {kind!r}")
    for name in ("p", "chords", "m", "clusters", "gateways", "path"):
        if name in topo_raw and name not in rules["allowed"]:
            raise ConfigError(f"{source}: topology.{name} does not apply to kind {kind!r}")
    if kind == "file" and "n" in topo_raw:
        raise ConfigError(f"{source}: topology.n comes from the file for kind 'file'")
    topology = TopologySpec(
        kind=kind,
        n=topo_raw.get("n", 1),
        seed=topo_raw.get("seed", derive_seed(data["seed"], "topology")),
        p=topo_raw.get("p"),
        chords=topo_raw.get("chords"),
        m=topo_raw.get("m"),
        clusters=topo_raw.get("clusters"),
        gateways=topo_raw.get("gateways"),
        path=topo_raw.get("path"),
    )

    proto_raw = data.get("protocol", {})
    k = proto_raw.get("k", 3)
    k_max = proto_raw.get("k_max", 2 * k)
    if k_max < k:
        raise ConfigError(f"{source}: protocol.k_max ({k_max}) must be >= protocol.k ({k})")
    repair_period = proto_raw.get("repair_period", 1)
    protocol = ProtocolParams(
        id_bits=proto_raw.get("id_bits", 64),
        k=k,
        k_max=k_max,
        depth_cap=proto_raw.get("depth_cap", 32),
        punch_success=proto_raw.get("punch_success", 1.0),
        direct_upgrade=proto_raw.get("direct_upgrade", False),
        repair_period=repair_period,
        liveness_timeout=proto_raw.get("liveness_timeout", 10 * repair_period),
    )

    wl_raw = data.get("workload", {})
    events = []
    for i, ev in enumerate(wl_raw.get("events", [])):
        action = ev["action"]
        wanted = _EVENT_FIELDS[action]
        for name in wanted:
            if name not in ev:
                raise ConfigError(
                    f"{source}: workload.events[{i}].{name} is required for action {action!r}"
                )
        for name in ("node", "a", "b", "groups"):
            if name in ev and name not in wanted:
                raise ConfigError(
                    f"{source}: workload.events[{i}].{name} does not apply to action {action!r}"
                )
        groups = None
        if action == "partition":
            flat: set[int] = set()
            for g in ev["groups"]:
                for member in g:
                    if member in flat:
                        raise ConfigError(
                            f"{source}: workload.events[{i}].groups lists node {member} twice"
                        )
                    flat.add(member)
            groups = tuple(tuple(g) for g in ev["groups"])
        events.append(
            WorldEvent(
                at=ev["at"],
                seq=i,
                action=action,
                node=ev.get("node"),
                a=ev.get("a"),
                b=ev.get("b"),
                groups=groups,
            )
        )
    workload = WorkloadSpec(
        join_order=wl_raw.get("join_order", "sequential"),
        repair_rounds=wl_raw.get("repair_rounds", 1),
        stretch_pairs=wl_raw.get("stretch_pairs", 0),
        sampling=wl_raw.get("sampling", "sequential-with-adoption"),
        stretch_both_modes=wl_raw.get("stretch_both_modes", False),
        events=events,
    )

    return ScenarioConfig(
        seed=data["seed"],
        topology=topology,
        protocol=protocol,
        workload=workload,
        output=data.get("output"),
    )


def load_config(path: str) -> ScenarioConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parse_config(data, source=path)
