"""Simulated underlay: nodes, point-to-point channels, and world events.

The underlay knows nothing about identities or routing state. It owns the
physical truth of the world: which nodes are alive, which channels are up,
who may initiate a channel to whom, and how many frames crossed each
channel. A frame is one traversal of one physical channel; the per-kind
frame counters are the simulator's ground-truth cost accounting.

Reachability policy models NAT: a channel to a `public` node can always be
initiated; a channel to a `natted` node can only be initiated if a prior
hole punch, brokered by an introducer with live channels to both sides,
recorded the pair.

A BFS oracle over the currently-up channels provides shortest path lengths
and is deliberately independent of all routing machinery, so route quality
is always judged against the real optimum at the moment of forwarding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from random import Random
from typing import Callable, Iterable, Optional

import numpy as np

from . import _kernels
from .errors import (
    ChannelDownError,
    ConfigError,
    NodeUnavailableError,
    PolicyDeniedError,
    PunchPreconditionError,
)

PUBLIC = "public"
NATTED = "natted"

# why a channel is down; partition downs are the only ones heal restores
_UP = None
_DOWN_FAILED = "failed"
_DOWN_NODE = "node-failed"
_DOWN_PARTITION = "partition"

EVENT_ACTIONS = ("node-join", "node-fail", "channel-fail", "partition", "heal")


class Channel:
    """Bidirectional physical channel between two node indices."""

    __slots__ = ("a", "b", "origin", "down_reason")

    def __init__(self, a: int, b: int, origin: str) -> None:
        self.a = a
        self.b = b
        self.origin = origin  # generated | connected | punched
        self.down_reason: Optional[str] = _UP

    @property
    def up(self) -> bool:
        return self.down_reason is None

    @property
    def key(self) -> tuple[int, int]:
        return (self.a, self.b)


@dataclass(frozen=True, slots=True)
class WorldEvent:
    """One scheduled mutation of the world.

    Events are applied in (at, seq) order, ``seq`` being position in the
    scenario's event list. ``node-join`` is carried here for scheduling but
    executed by the protocol layer, not the underlay.
    """

    at: int
    seq: int
    action: str
    node: Optional[int] = None
    a: Optional[int] = None
    b: Optional[int] = None
    groups: Optional[tuple[tuple[int, ...], ...]] = None


@dataclass(slots=True)
class TopologySpec:
    kind: str
    n: int
    seed: int = 0
    p: Optional[float] = None
    chords: Optional[int] = None
    m: Optional[int] = None
    clusters: Optional[int] = None
    gateways: Optional[int] = None
    path: Optional[str] = None


class Underlay:
    def __init__(self, n: int, punch_success: float = 1.0, punch_seed: int = 0) -> None:
        if n < 1:
            raise ConfigError(f"topology.n must be >= 1, got {n}")
        self.n = n
        self.alive = [True] * n
        self.policy = [PUBLIC] * n
        self.tag: list[Optional[str]] = [None] * n
        self._channels: dict[tuple[int, int], Channel] = {}
        self._adj: list[dict[int, Channel]] = [dict() for _ in range(n)]
        self.punch_records: set[tuple[int, int]] = set()
        self.punch_success = punch_success
        self._punch_rng = Random(punch_seed)
        self.frames: dict[str, int] = {}
        self.frames_total = 0
        self.frame_hook: Optional[Callable[[str], None]] = None
        self._epoch = 0
        self._csr_cache: Optional[tuple[int, np.ndarray, np.ndarray]] = None

    # -- construction and bookkeeping -------------------------------------

    @property
    def epoch(self) -> int:
        """Bumped on every channel/liveness mutation; used to invalidate caches."""
        return self._epoch

    def _touch(self) -> None:
        self._epoch += 1

    def add_channel(self, a: int, b: int, origin: str = "generated") -> Channel:
        if a == b:
            raise ConfigError(f"self-channel at node {a}")
        if not (0 <= a < self.n and 0 <= b < self.n):
            raise ConfigError(f"channel ({a}, {b}) out of range")
        a, b = (a, b) if a < b else (b, a)
        existing = self._channels.get((a, b))
        if existing is not None:
            return existing
        ch = Channel(a, b, origin)
        self._channels[(a, b)] = ch
        self._adj[a][b] = ch
        self._adj[b][a] = ch
        self._touch()
        return ch

    def channel(self, a: int, b: int) -> Optional[Channel]:
        if a > b:
            a, b = b, a
        return self._channels.get((a, b))

    def has_up_channel(self, a: int, b: int) -> bool:
        ch = self.channel(a, b)
        return ch is not None and ch.up

    def channels(self) -> Iterable[Channel]:
        return self._channels.values()

    def neighbors(self, i: int) -> list[int]:
        """Indices adjacent to ``i`` over up channels, ascending."""
        return sorted(j for j, ch in self._adj[i].items() if ch.up)

    def degree(self, i: int) -> int:
        return sum(1 for ch in self._adj[i].values() if ch.up)

    # -- frames ------------------------------------------------------------

    def deliver(self, u: int, v: int, kind: str) -> None:
        """Move one frame across the (u, v) channel, which must be up."""
        ch = self.channel(u, v)
        if ch is None or not ch.up:
            raise ChannelDownError(f"no up channel between {u} and {v}")
        self.frames[kind] = self.frames.get(kind, 0) + 1
        self.frames_total += 1
        if self.frame_hook is not None:
            self.frame_hook(kind)

    # -- connection policy -------------------------------------------------

    def connect(self, initiator: int, target: int) -> Channel:
        """Initiate a direct channel, subject to the reachability policy."""
        if not self.alive[initiator] or not self.alive[target]:
            raise NodeUnavailableError(f"connect({initiator}, {target}): endpoint failed")
        existing = self.channel(initiator, target)
        if existing is not None and existing.up:
            return existing
        if self.policy[target] == NATTED and not self._punched(initiator, target):
            raise PolicyDeniedError(f"node {target} is natted; no punch record for ({initiator}, {target})")
        if self._split_by_partition(initiator, target):
            raise PolicyDeniedError(f"nodes {initiator} and {target} are in different partition groups")
        if existing is not None:
            existing.down_reason = _UP
            self._touch()
            return existing
        return self.add_channel(initiator, target, origin="connected")

    def _punched(self, a: int, b: int) -> bool:
        return (min(a, b), max(a, b)) in self.punch_records

    def _split_by_partition(self, a: int, b: int) -> bool:
        return self.tag[a] is not None and self.tag[b] is not None and self.tag[a] != self.tag[b]

    def hole_punch(self, a: int, b: int, introducer: int) -> Optional[Channel]:
        """Broker a direct channel to a natted peer through an introducer.

        The introducer must hold live channels to both sides. Succeeds with
        probability ``punch_success``; on success the pair is recorded and a
        direct channel comes up. Returns None when the punch is unsupported
        (the failure draw), which callers treat as "keep relaying".
        """
        if not self.alive[a] or not self.alive[b]:
            raise NodeUnavailableError(f"hole_punch({a}, {b}): endpoint failed")
        if not self.has_up_channel(introducer, a) or not self.has_up_channel(introducer, b):
            raise PunchPreconditionError(
                f"introducer {introducer} lacks live channels to {a} and {b}"
            )
        if self._split_by_partition(a, b):
            return None
        existing = self.channel(a, b)
        if existing is not None and existing.up:
            self.punch_records.add((min(a, b), max(a, b)))
            return existing
        if self.punch_success >= 1.0:
            ok = True
        elif self.punch_success <= 0.0:
            ok = False
        else:
            ok = self._punch_rng.random() < self.punch_success
        if not ok:
            return None
        self.punch_records.add((min(a, b), max(a, b)))
        if existing is not None:
            existing.down_reason = _UP
            self._touch()
            return existing
        return self.add_channel(a, b, origin="punched")

    # -- world events --------------------------------------------------------

    def apply_event(self, event: WorldEvent) -> None:
        """Apply the physical part of one event. ``node-join`` is a no-op here."""
        if event.action == "node-join":
            return
        if event.action == "node-fail":
            i = event.node
            if i is None or not (0 <= i < self.n):
                raise ConfigError(f"node-fail: bad node {event.node}")
            self.alive[i] = False
            for ch in self._adj[i].values():
                ch.down_reason = _DOWN_NODE
            self._touch()
        elif event.action == "channel-fail":
            ch = None if event.a is None or event.b is None else self.channel(event.a, event.b)
            if ch is None:
                raise ConfigError(f"channel-fail: no channel ({event.a}, {event.b})")
            ch.down_reason = _DOWN_FAILED
            self._touch()
        elif event.action == "partition":
            if not event.groups:
                raise ConfigError("partition: groups required")
            for gi, group in enumerate(event.groups):
                for i in group:
                    if not (0 <= i < self.n):
                        raise ConfigError(f"partition: bad node {i}")
                    self.tag[i] = f"g{gi}"
            for ch in self._channels.values():
                if ch.up and self._split_by_partition(ch.a, ch.b):
                    ch.down_reason = _DOWN_PARTITION
            self._touch()
        elif event.action == "heal":
            for ch in self._channels.values():
                if ch.down_reason == _DOWN_PARTITION:
                    ch.down_reason = _UP
            self.tag = [None] * self.n
            self._touch()
        else:
            raise ConfigError(f"unknown event action {event.action!r}")

    def healable_channels(self) -> list[Channel]:
        """Channels a heal event would restore, for protocol-side hooks."""
        return [ch for ch in self._channels.values() if ch.down_reason == _DOWN_PARTITION]

    # -- shortest-path oracle ------------------------------------------------

    def _csr(self) -> tuple[np.ndarray, np.ndarray]:
        if self._csr_cache is not None and self._csr_cache[0] == self._epoch:
            return self._csr_cache[1], self._csr_cache[2]
        counts = np.zeros(self.n + 1, dtype=np.int64)
        rows: list[list[int]] = [[] for _ in range(self.n)]
        for ch in self._channels.values():
            if ch.up:
                rows[ch.a].append(ch.b)
                rows[ch.b].append(ch.a)
        for i, row in enumerate(rows):
            row.sort()
            counts[i + 1] = len(row)
        indptr = counts.cumsum()
        indices = np.empty(int(indptr[-1]), dtype=np.int64)
        pos = 0
        for row in rows:
            for v in row:
                indices[pos] = v
                pos += 1
        self._csr_cache = (self._epoch, indptr, indices)
        return indptr, indices

    def bfs_distances(self, src: int) -> np.ndarray:
        """Hop counts from ``src`` over up channels; -1 where unreachable."""
        indptr, indices = self._csr()
        return _kernels.bfs_distances(indptr, indices, self.n, src)

    def shortest_path_len(self, a: int, b: int) -> Optional[int]:
        """Oracle distance in hops, or None when unreachable."""
        if a == b:
            return 0
        dist = int(self.bfs_distances(a)[b])
        return None if dist < 0 else dist

    def reachable(self, a: int, b: int) -> bool:
        return self.shortest_path_len(a, b) is not None

    # -- serialization ---------------------------------------------------------

    def snapshot(self) -> dict:
        return {
            "nodes": [
                {
                    "index": i,
                    "policy": self.policy[i],
                    "alive": self.alive[i],
                    "tag": self.tag[i],
                }
                for i in range(self.n)
            ],
            "channels": [
                {
                    "a": ch.a,
                    "b": ch.b,
                    "state": "up" if ch.up else "down",
                    "origin": ch.origin,
                    **({} if ch.up else {"down_reason": ch.down_reason}),
                }
                for _, ch in sorted(self._channels.items())
            ],
            "hole_punch_records": sorted(list(p) for p in self.punch_records),
        }

    @classmethod
    def from_snapshot(cls, data: dict, punch_success: float = 1.0, punch_seed: int = 0) -> "Underlay":
        nodes = data.get("nodes")
        if not isinstance(nodes, list) or not nodes:
            raise ConfigError("topology file: 'nodes' must be a non-empty list")
        u = cls(len(nodes), punch_success=punch_success, punch_seed=punch_seed)
        for row in nodes:
            i = row["index"]
            u.policy[i] = row.get("policy", PUBLIC)
            u.alive[i] = row.get("alive", True)
            u.tag[i] = row.get("tag")
        for row in data.get("channels", []):
            ch = u.add_channel(row["a"], row["b"], origin=row.get("origin", "generated"))
            if row.get("state", "up") == "down":
                ch.down_reason = row.get("down_reason", _DOWN_FAILED)
        for pair in data.get("hole_punch_records", []):
            u.punch_records.add((min(pair), max(pair)))
        return u


# -- topology generators ------------------------------------------------------


def _stitch_components(u: Underlay, rng: Random) -> None:
    # deterministic augmentation guaranteeing a connected generated graph
    seen = [False] * u.n
    components: list[list[int]] = []
    for start in range(u.n):
        if seen[start]:
            continue
        comp = [start]
        seen[start] = True
        queue = [start]
        while queue:
            x = queue.pop()
            for y in u.neighbors(x):
                if not seen[y]:
                    seen[y] = True
                    comp.append(y)
                    queue.append(y)
        components.append(sorted(comp))
    base = components[0]
    for comp in components[1:]:
        a = rng.choice(comp)
        b = rng.choice(base)
        u.add_channel(a, b)
        base = sorted(base + comp)


def _gen_random_gnp(spec: TopologySpec, u: Underlay, rng: Random) -> None:
    p = spec.p
    if p is None or not 0.0 <= p <= 1.0:
        raise ConfigError(f"topology.p must be in [0, 1] for random-gnp, got {p}")
    for a in range(u.n):
        for b in range(a + 1, u.n):
            if rng.random() < p:
                u.add_channel(a, b)
    _stitch_components(u, rng)


def _gen_ring_with_chords(spec: TopologySpec, u: Underlay, rng: Random) -> None:
    chords = spec.chords if spec.chords is not None else 0
    if chords < 0:
        raise ConfigError(f"topology.chords must be >= 0, got {chords}")
    for i in range(u.n if u.n > 2 else u.n - 1):
        u.add_channel(i, (i + 1) % u.n)
    added = 0
    attempts = 0
    while added < chords and attempts < chords * 50 + 50:
        attempts += 1
        a = rng.randrange(u.n)
        b = rng.randrange(u.n)
        if a == b or u.channel(a, b) is not None:
            continue
        u.add_channel(a, b)
        added += 1


def _gen_preferential_attachment(spec: TopologySpec, u: Underlay, rng: Random) -> None:
    m = spec.m
    if m is None or m < 1:
        raise ConfigError(f"topology.m must be >= 1 for preferential-attachment, got {m}")
    # endpoint pool repeats nodes proportionally to their degree
    pool: list[int] = [0]
    for v in range(1, u.n):
        want = min(m, v)
        targets: set[int] = set()
        guard = 0
        while len(targets) < want:
            guard += 1
            t = rng.choice(pool) if guard < 1000 else rng.randrange(v)
            if t != v:
                targets.add(t)
        for t in sorted(targets):
            u.add_channel(v, t)
            pool.append(t)
        pool.extend([v] * want)


def _gen_nat_clusters(spec: TopologySpec, u: Underlay, rng: Random) -> None:
    clusters = spec.clusters
    gateways = spec.gateways
    if clusters is None or clusters < 1:
        raise ConfigError(f"topology.clusters must be >= 1, got {clusters}")
    if gateways is None or gateways < 1:
        raise ConfigError(f"topology.gateways must be >= 1, got {gateways}")
    if gateways >= u.n:
        raise ConfigError("topology.gateways must leave room for cluster members")
    members = u.n - gateways
    if members % clusters != 0:
        raise ConfigError(
            f"nat-clusters needs (n - gateways) divisible by clusters; "
            f"got n={u.n} gateways={gateways} clusters={clusters}"
        )
    size = members // clusters
    for g in range(gateways):
        for h in range(g + 1, gateways):
            u.add_channel(g, h)
    for c in range(clusters):
        start = gateways + c * size
        group = list(range(start, start + size))
        for i, a in enumerate(group):
            u.policy[a] = NATTED
            for b in group[i + 1 :]:
                u.add_channel(a, b)
            u.add_channel(a, c % gateways)


_GENERATORS = {
    "random-gnp": _gen_random_gnp,
    "ring-with-chords": _gen_ring_with_chords,
    "preferential-attachment": _gen_preferential_attachment,
    "nat-clusters": _gen_nat_clusters,
}

TOPOLOGY_KINDS = tuple(_GENERATORS) + ("file",)


def build_topology(spec: TopologySpec, punch_success: float = 1.0, punch_seed: int = 0) -> Underlay:
    """Generate a connected underlay per ``spec``, deterministically in its seed."""
    if spec.kind == "file":
        raise ConfigError("file topologies are loaded via Underlay.from_snapshot")
    gen = _GENERATORS.get(spec.kind)
    if gen is None:
        raise ConfigError(f"unknown topology kind {spec.kind!r}")
    if spec.n < 1:
        raise ConfigError(f"topology.n must be >= 1, got {spec.n}")
    u = Underlay(spec.n, punch_success=punch_success, punch_seed=punch_seed)
    gen(spec, u, Random(spec.seed))
    return u
