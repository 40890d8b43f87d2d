"""Identity-based routing over the simulated underlay.

Every node keeps a neighbor table of ``id_bits`` buckets; the entry for a
peer lives in the bucket numbered by the proximity (shared id prefix
length) between the table owner and that peer. Bucket ``b`` of node ``n``
therefore holds peers that agree with ``n`` on exactly the first ``b`` bits.
The table maintains the connectivity invariant: a bucket is non-empty
whenever some live, underlay-reachable node falls in it. That invariant is
what makes the search below complete: as long as every node on the way
satisfies it, each queried contact either knows somebody strictly closer to
the target or the target does not exist.

Entries are backed by links. A physical link is one underlay channel. A
virtual link is a recursive source route: it chains the link from the owner
to an intermediary with the intermediary's link onward, so a node can keep
a usable path to a peer it shares no channel with. The composed route is
loop-erased at build time, so a stored route never repeats a node or
channel; depth is the erased route's recursion height (ceil log2 of its
hop count, capped). A link dies when any channel on its route dies, and a
detected death cascades to every entry whose route crosses the same downed
channels.

Search is iterative. The origin starts from its bucket shared with the
target and repeatedly asks the best known contact for a strictly closer
node, building itself a link to each contact in turn. Every step resolves
at least one more prefix bit, so a search takes at most ``id_bits`` steps.
A contact with no closer node to offer ends the search: under the
invariant that means the target does not exist or is unreachable.

Joining is search turned inward: the newcomer walks toward its own id via
a bootstrap neighbor, copies bucket candidates from each contact on the
way (a contact shares all buckets below their mutual proximity), and
finally back-fills itself into the tables of the subtree of nodes that
share its longest prefix, since those are exactly the nodes whose
invariant the newcomer's arrival may have changed.

Repair is periodic per node: ping entries that have gone stale or whose
link is structurally dead, drop failures (with cascade), then refill
under-populated buckets by searching for synthetic ids that land in them.

Data forwarding walks the source route of the origin's entry for the
destination, after compacting it: loops are spliced out, any hop whose
owner has a direct channel to a later hop jumps ahead, and any node on the
path holding a strictly shorter live route to the destination replaces the
remainder. Hop counts reported for stretch are the physical channel
traversals actually performed.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from random import Random
from typing import Iterable, Optional

import numpy as np

from . import _kernels
from .errors import (
    BootstrapUnreachableError,
    DuplicateIdentityError,
    LinkBuildError,
    NodeUnavailableError,
    PolicyDeniedError,
    PunchPreconditionError,
    UsageError,
)
from .identity import IdentityKeyPair, NodeId, generate_identity, proximity
from .underlay import Underlay

logger = logging.getLogger(__name__)

DEFAULT_K = 3
DEFAULT_DEPTH_CAP = 32

ORIGIN_PHYSICAL = "physical"
ORIGIN_JOIN = "built-during-join"
ORIGIN_SEARCH = "built-during-search"
ORIGIN_REPAIR = "repair"

MSG_NEAREST_QUERY = "nearest_query"
MSG_NEAREST_REPLY = "nearest_reply"
MSG_LINK_SETUP = "link_setup"
MSG_LINK_TEARDOWN = "link_teardown"
MSG_DATA = "data"
MSG_PING = "liveness_ping"
MSG_ACK = "liveness_ack"


@dataclass(slots=True)
class ProtocolParams:
    id_bits: int = 64
    k: int = DEFAULT_K
    k_max: int = 2 * DEFAULT_K
    depth_cap: int = DEFAULT_DEPTH_CAP
    punch_success: float = 1.0
    direct_upgrade: bool = False
    repair_period: int = 1
    liveness_timeout: int = 10


class PhysicalLink:
    """One underlay channel, wrapped so links form a uniform tree."""

    __slots__ = ("lid", "a", "b", "route", "desc_lids")

    depth = 0

    def __init__(self, lid: int, a: int, b: int) -> None:
        self.lid = lid
        self.a = a
        self.b = b
        self.route = (a, b)
        self.desc_lids = frozenset((lid,))

    def other(self, end: int) -> int:
        return self.b if end == self.a else self.a


class VirtualLink:
    """Recursive two-half source route between ``a`` and ``b`` via ``via``.

    ``route`` is the node path from ``a`` to ``b`` after loop erasure: when
    the concatenated halves revisit a node, the detour between the visits
    is spliced out at build time, so a stored route never repeats a node or
    channel and expansion is acyclic by construction.

    ``depth`` is the recursion height of the stored route, not of the build
    lineage: an h-hop route decomposes into halves of halves ceil(log2 h)
    levels deep. Lineage height would creep up by one per recomposition
    while erasure keeps the route itself short. ``desc_lids`` names the
    physical channels the route crosses, which is exactly what forwarding
    over this link depends on.
    """

    __slots__ = ("lid", "a", "b", "via", "left", "right", "depth", "route", "desc_lids")

    def __init__(self, lid, a, b, via, left, right, route, channel_lids) -> None:
        self.lid = lid
        self.a = a
        self.b = b
        self.via = via
        self.left = left
        self.right = right
        self.depth = max(1, (len(route) - 2).bit_length())
        self.route = route
        self.desc_lids = frozenset(channel_lids) | {lid}

    def other(self, end: int) -> int:
        return self.b if end == self.a else self.a


Link = PhysicalLink | VirtualLink


@dataclass(slots=True)
class NeighborEntry:
    peer_id: NodeId
    peer: int
    link: Link
    origin: str
    last_confirmed: int
    seq: int

    @property
    def is_physical(self) -> bool:
        return isinstance(self.link, PhysicalLink)


class NeighborTable:
    """Proximity-bucketed entries for one node, capacity ``k_max`` a bucket."""

    __slots__ = ("owner_id", "owner", "id_bits", "k", "k_max", "buckets", "by_id")

    def __init__(self, owner_id: NodeId, owner: int, id_bits: int, k: int, k_max: int) -> None:
        self.owner_id = owner_id
        self.owner = owner
        self.id_bits = id_bits
        self.k = k
        self.k_max = k_max
        self.buckets: list[list[NeighborEntry]] = [[] for _ in range(id_bits)]
        self.by_id: dict[NodeId, NeighborEntry] = {}

    def get(self, peer_id: NodeId) -> Optional[NeighborEntry]:
        return self.by_id.get(peer_id)

    def entries(self) -> Iterable[NeighborEntry]:
        return self.by_id.values()

    def bucket_of(self, peer_id: NodeId) -> int:
        return proximity(self.owner_id, peer_id)

    def remove(self, entry: NeighborEntry) -> None:
        bucket = self.buckets[self.bucket_of(entry.peer_id)]
        bucket.remove(entry)
        del self.by_id[entry.peer_id]

    def __len__(self) -> int:
        return len(self.by_id)


@dataclass(slots=True)
class SearchStep:
    contact_id: NodeId
    reply_id: NodeId
    reply_proximity: int


@dataclass(slots=True)
class SearchTrace:
    target: NodeId
    found: bool
    steps: list[SearchStep] = field(default_factory=list)
    messages: int = 0
    restarts: int = 0


@dataclass(slots=True)
class JoinReport:
    node: int
    bootstrap: Optional[int]
    walk_steps: int = 0
    links_built: int = 0
    fixup_members: int = 0
    messages: int = 0


@dataclass(slots=True)
class RepairReport:
    node: int
    removed: int = 0
    refilled: int = 0
    searches: int = 0
    messages: int = 0


@dataclass(slots=True)
class Packet:
    src: NodeId
    dst: NodeId
    payload: bytes
    route_stack: list[int]
    hop_counter: int = 0


@dataclass(slots=True)
class DeliveryOutcome:
    delivered: bool
    hops: int
    packet: Packet
    failed_at: Optional[tuple[int, int]] = None


class Node:
    __slots__ = ("index", "node_id", "keypair", "table", "joined", "inbox", "_repair_rng")

    def __init__(self, index: int, node_id: NodeId, keypair: Optional[IdentityKeyPair], params: ProtocolParams) -> None:
        self.index = index
        self.node_id = node_id
        self.keypair = keypair
        self.table = NeighborTable(node_id, index, node_id.width, params.k, params.k_max)
        self.joined = False
        self.inbox: Optional[bytes] = None
        self._repair_rng: Optional[Random] = None


class _ContactFailed(Exception):
    def __init__(self, entry: NeighborEntry) -> None:
        self.entry = entry


def _loop_erase(route: tuple[int, ...]) -> tuple[int, ...]:
    """Cut every revisit loop out of a node path, keeping the endpoints."""
    out: list[int] = []
    position: dict[int, int] = {}
    for node in route:
        seen = position.get(node)
        if seen is not None:
            for cut in out[seen + 1 :]:
                del position[cut]
            del out[seen + 1 :]
        else:
            position[node] = len(out)
            out.append(node)
    return tuple(out)


def derive_seed(seed: int, *labels) -> int:
    """Stable sub-seed for an independent RNG stream."""
    text = ":".join([str(seed)] + [str(x) for x in labels])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big")


class World:
    """All protocol state above one underlay, advanced deterministically."""

    def __init__(
        self,
        underlay: Underlay,
        params: Optional[ProtocolParams] = None,
        seed: int = 0,
        node_ids: Optional[list[NodeId]] = None,
    ) -> None:
        self.underlay = underlay
        self.params = params or ProtocolParams()
        self.seed = seed
        self.tick = 0
        self.nodes: list[Node] = []
        self.by_id: dict[NodeId, int] = {}
        if node_ids is None:
            keypairs = [
                generate_identity(derive_seed(seed, "identity", i), self.params.id_bits)
                for i in range(underlay.n)
            ]
            node_ids = [kp.node_id for kp in keypairs]
        else:
            keypairs = [None] * underlay.n
            if len(node_ids) != underlay.n:
                raise UsageError("node_ids length must match underlay size")
        widths = {nid.width for nid in node_ids}
        if len(widths) > 1:
            raise UsageError(f"mixed id widths in one world: {sorted(widths)}")
        self.params.id_bits = node_ids[0].width
        for i, nid in enumerate(node_ids):
            if nid in self.by_id:
                raise DuplicateIdentityError(
                    f"nodes {self.by_id[nid]} and {i} share id {nid.hex}"
                )
            self.by_id[nid] = i
            self.nodes.append(Node(i, nid, keypairs[i], self.params))
        self._next_lid = 0
        self._next_entry_seq = 0
        self._phys_links: dict[tuple[int, int], PhysicalLink] = {}
        self._route_cache: dict[tuple[int, int, int], tuple[int, ...]] = {}
        self._alive_cache: dict[tuple[int, int], bool] = {}
        self.phase = "setup"
        self.counters: dict[str, dict[str, dict[str, int]]] = {}
        underlay.frame_hook = self._count_frame

    # -- counters ------------------------------------------------------------

    def _phase_bucket(self) -> dict[str, dict[str, int]]:
        bucket = self.counters.get(self.phase)
        if bucket is None:
            bucket = {"messages": {}, "frames": {}}
            self.counters[self.phase] = bucket
        return bucket

    def _count_frame(self, kind: str) -> None:
        frames = self._phase_bucket()["frames"]
        frames[kind] = frames.get(kind, 0) + 1

    def _count_message(self, kind: str) -> None:
        messages = self._phase_bucket()["messages"]
        messages[kind] = messages.get(kind, 0) + 1

    def messages_total(self) -> int:
        return sum(
            count
            for bucket in self.counters.values()
            for count in bucket["messages"].values()
        )

    # -- links ---------------------------------------------------------------

    def physical_link(self, a: int, b: int) -> PhysicalLink:
        key = (a, b) if a < b else (b, a)
        link = self._phys_links.get(key)
        if link is None:
            link = PhysicalLink(self._next_lid, key[0], key[1])
            self._next_lid += 1
            self._phys_links[key] = link
        return link

    def link_alive(self, link: Link) -> bool:
        key = (link.lid, self.underlay.epoch)
        hit = self._alive_cache.get(key)
        if hit is not None:
            return hit
        route = link.route
        ok = all(
            self.underlay.has_up_channel(route[i], route[i + 1])
            for i in range(len(route) - 1)
        )
        if len(self._alive_cache) > 500_000:
            self._alive_cache.clear()
        self._alive_cache[key] = ok
        return ok

    def compact_route(self, link: Link, start: int) -> tuple[int, ...]:
        """Walkable path for ``link`` from ``start``: structural route with
        loop splicing and greedy far-jump over live direct channels."""
        key = (link.lid, start, self.underlay.epoch)
        hit = self._route_cache.get(key)
        if hit is not None:
            return hit
        raw = link.route if link.route[0] == start else tuple(reversed(link.route))
        out = [raw[0]]
        i = 0
        n = len(raw)
        while i < n - 1:
            cur = raw[i]
            jump = i + 1
            for j in range(n - 1, i, -1):
                if raw[j] == cur:
                    jump = j
                    break
                if self.underlay.has_up_channel(cur, raw[j]):
                    jump = j
                    break
            if raw[jump] == cur:
                i = jump
                continue
            out.append(raw[jump])
            i = jump
        result = tuple(out)
        if len(self._route_cache) > 200_000:
            self._route_cache.clear()
        self._route_cache[key] = result
        return result

    def _send(self, src: int, link: Link, kind: str) -> tuple[bool, int, Optional[tuple[int, int]]]:
        """Send one message over ``link``; returns (ok, frames, failed_pair).

        Frames are counted for every channel actually crossed, including the
        prefix of a path that then fails.
        """
        self._count_message(kind)
        path = self.compact_route(link, src)
        for i in range(len(path) - 1):
            u, v = path[i], path[i + 1]
            if not self.underlay.has_up_channel(u, v):
                return False, i, (u, v)
            self.underlay.deliver(u, v, kind)
        return True, len(path) - 1, None

    # -- table mutation --------------------------------------------------------

    def _entry_badness(self, entry: NeighborEntry) -> tuple:
        # eviction rank: physical kept over virtual, then shallow depth,
        # then short route, then recent confirmation
        return (
            not entry.is_physical,
            entry.link.depth,
            len(entry.link.route),
            -entry.last_confirmed,
            -entry.seq,
            entry.peer_id,
        )

    def _adopt(self, node: Node, peer: int, link: Link, origin: str) -> NeighborEntry:
        """Insert or refresh the entry for ``peer`` in ``node``'s table.

        Returns the live entry to use for contacting ``peer``; when the
        bucket is full and the newcomer ranks worse than everything present,
        the returned entry is transient (usable, not retained).
        """
        peer_id = self.nodes[peer].node_id
        if peer == node.index:
            raise UsageError("a node never tables itself")
        table = node.table
        existing = table.get(peer_id)
        self._next_entry_seq += 1
        fresh = NeighborEntry(peer_id, peer, link, origin, self.tick, self._next_entry_seq)
        if existing is not None:
            # keep the better link: live beats dead, physical beats virtual,
            # then shorter route
            keep_old = (
                self.link_alive(existing.link)
                and self._entry_badness(existing)[:3] <= self._entry_badness(fresh)[:3]
            )
            if keep_old:
                existing.last_confirmed = self.tick
                return existing
            existing.link = link
            existing.origin = origin
            existing.last_confirmed = self.tick
            return existing
        bucket = table.buckets[table.bucket_of(peer_id)]
        if len(bucket) >= table.k_max:
            victim = max(bucket, key=self._entry_badness)
            if self._entry_badness(victim) <= self._entry_badness(fresh):
                return fresh  # transient: bucket is full of better entries
            self._evict(node, victim)
        bucket.append(fresh)
        table.by_id[peer_id] = fresh
        return fresh

    def _evict(self, node: Node, entry: NeighborEntry) -> None:
        # polite removal of a live entry: tell the peer, who may drop its
        # reciprocal entry if it keeps redundancy above k
        if self.link_alive(entry.link):
            ok, _, _ = self._send(node.index, entry.link, MSG_LINK_TEARDOWN)
            if ok:
                peer = self.nodes[entry.peer]
                mine = peer.table.get(node.node_id)
                if mine is not None:
                    b = peer.table.bucket_of(node.node_id)
                    if len(peer.table.buckets[b]) > peer.table.k:
                        peer.table.remove(mine)
        node.table.remove(entry)

    def adopt_physical(self, a: int, b: int, origin: str = ORIGIN_PHYSICAL) -> NeighborEntry:
        """Mutual entries over the (a, b) channel; test and join helper."""
        if not self.underlay.has_up_channel(a, b):
            raise UsageError(f"no up channel between {a} and {b}")
        link = self.physical_link(a, b)
        entry = self._adopt(self.nodes[a], b, link, ORIGIN_PHYSICAL)
        self._adopt(self.nodes[b], a, link, ORIGIN_PHYSICAL)
        return entry

    def handle_link_failure(self, node_index: int, link: Link) -> list[NeighborEntry]:
        """Drop the entry for a dead link plus every entry riding the same
        downed channels; returns the removals.

        The cascade keys on channels, not build lineage: an entry dies with
        a channel only if its stored route still crosses it. Only the acting
        node's table changes; remote sides learn by their own timeouts.
        """
        node = self.nodes[node_index]
        route = link.route
        dead_lids = {
            self.physical_link(route[i], route[i + 1]).lid
            for i in range(len(route) - 1)
            if not self.underlay.has_up_channel(route[i], route[i + 1])
        }
        removed = [
            e
            for e in list(node.table.entries())
            if e.link.lid == link.lid or (dead_lids and e.link.desc_lids & dead_lids)
        ]
        for e in removed:
            node.table.remove(e)
        return removed

    # -- virtual links -----------------------------------------------------------

    def build_virtual_link(
        self,
        owner: int,
        left: Link,
        via: int,
        remote: int,
        right: Link,
    ) -> VirtualLink:
        """Compose ``owner -(left)- via -(right)- remote`` into one link.

        The concatenated source route is loop-erased before being stored,
        so the new link's route is simple. Refuses routes whose recursion
        height would pass the depth cap and fails when a constituent is
        already dead.
        """
        if owner == remote:
            raise UsageError("virtual link endpoints must differ")
        if not self.link_alive(left) or not self.link_alive(right):
            raise LinkBuildError("constituent link is dead")
        left_route = left.route if left.route[0] == owner else tuple(reversed(left.route))
        right_route = right.route if right.route[0] == via else tuple(reversed(right.route))
        route = _loop_erase(left_route + right_route[1:])
        depth = max(1, (len(route) - 2).bit_length())
        if depth > self.params.depth_cap:
            raise LinkBuildError(f"depth {depth} exceeds cap {self.params.depth_cap}")
        link = VirtualLink(
            self._next_lid, owner, remote, via, left, right, route,
            (self.physical_link(route[i], route[i + 1]).lid for i in range(len(route) - 1)),
        )
        self._next_lid += 1
        ok, _, _ = self._send(owner, link, MSG_LINK_SETUP)
        if not ok:
            raise LinkBuildError("constituent channel died during setup")
        return link

    def _establish(
        self,
        node: Node,
        via_entry: NeighborEntry,
        remote: int,
        remote_id: NodeId,
        right: Link,
        origin: str,
        adopt: bool,
        transient: Optional[dict[NodeId, NeighborEntry]],
    ) -> NeighborEntry:
        """Give ``node`` a usable entry for ``remote``: a shared channel if
        one exists, a fresh direct channel when upgrades are enabled and
        policy allows, else a virtual link through ``via_entry``."""
        if self.underlay.has_up_channel(node.index, remote):
            link: Link = self.physical_link(node.index, remote)
            self._send(node.index, link, MSG_LINK_SETUP)
            origin = ORIGIN_PHYSICAL
        elif self.params.direct_upgrade and self._attempt_direct(node.index, via_entry, remote, right):
            link = self.physical_link(node.index, remote)
            self._send(node.index, link, MSG_LINK_SETUP)
            origin = ORIGIN_PHYSICAL
        else:
            link = self.build_virtual_link(
                node.index, via_entry.link, via_entry.peer, remote, right
            )
        if adopt:
            entry = self._adopt(node, remote, link, origin)
            self._adopt(self.nodes[remote], node.index, link, origin)
            return entry
        self._next_entry_seq += 1
        entry = NeighborEntry(remote_id, remote, link, origin, self.tick, self._next_entry_seq)
        if transient is not None:
            transient[remote_id] = entry
        return entry

    def _attempt_direct(self, a: int, via_entry: NeighborEntry, remote: int, right: Link) -> bool:
        """Try to end up with a direct channel a--remote.

        Straight connect first; against a natted peer, walk the would-be
        relay path and hole-punch hop by hop, each time using the previous
        path node (which already has channels to both sides) as introducer.
        """
        u = self.underlay
        try:
            u.connect(a, remote)
            return True
        except PolicyDeniedError:
            pass
        except NodeUnavailableError:
            return False
        path = list(self.compact_route(via_entry.link, a))
        tail = self.compact_route(right, via_entry.peer)
        path.extend(tail[1:])
        for i in range(2, len(path)):
            v = path[i]
            if v == a or u.has_up_channel(a, v):
                continue
            try:
                u.connect(a, v)
                continue
            except PolicyDeniedError:
                pass
            except NodeUnavailableError:
                return False
            try:
                if u.hole_punch(a, v, introducer=path[i - 1]) is None:
                    return False
            except (PolicyDeniedError, PunchPreconditionError, NodeUnavailableError):
                return False
        return u.has_up_channel(a, remote)

    # -- queries -------------------------------------------------------------------

    def handle_nearest_query(
        self,
        receiver: int,
        target: NodeId,
        exclude: frozenset[NodeId] = frozenset(),
        min_proximity: Optional[int] = None,
    ) -> Optional[NeighborEntry]:
        """The receiver's best strictly-improving entry toward ``target``.

        Best means maximum proximity to the target, ties to the smallest
        id; strictly improving means closer to the target than the receiver
        itself. None says the receiver knows nobody closer, which under the
        connectivity invariant means the target is absent.

        ``min_proximity`` replaces the improvement rule with an absolute
        floor. Repair uses it to pull bucket candidates from a neighbor
        regardless of how close that neighbor itself sits to the target.
        """
        node = self.nodes[receiver]
        floor = proximity(node.node_id, target) if min_proximity is None else min_proximity - 1
        best: Optional[NeighborEntry] = None
        best_key: Optional[tuple[int, NodeId]] = None
        for entry in node.table.entries():
            if entry.peer_id in exclude:
                continue
            p = proximity(entry.peer_id, target)
            if p <= floor:
                continue
            key = (-p, entry.peer_id)
            if best_key is None or key < best_key:
                best = entry
                best_key = key
        return best

    def _rpc_nearest(
        self,
        node: Node,
        contact: NeighborEntry,
        target: NodeId,
        exclude: frozenset[NodeId],
        min_proximity: Optional[int] = None,
    ) -> Optional[NeighborEntry]:
        ok, _, _ = self._send(node.index, contact.link, MSG_NEAREST_QUERY)
        if not ok:
            raise _ContactFailed(contact)
        reply = self.handle_nearest_query(contact.peer, target, exclude, min_proximity)
        ok, _, _ = self._send(contact.peer, contact.link, MSG_NEAREST_REPLY)
        if not ok:
            raise _ContactFailed(contact)
        contact.last_confirmed = self.tick
        return reply

    # -- search ----------------------------------------------------------------------

    def search(
        self,
        origin: int,
        target: NodeId,
        adopt: bool = True,
        start_anywhere: bool = False,
        origin_tag: str = ORIGIN_SEARCH,
        max_restarts: int = 16,
    ) -> tuple[Optional[NeighborEntry], SearchTrace]:
        """Iterative lookup of ``target`` from ``origin``.

        Returns the entry for the target (retained in the table when
        ``adopt``, transient otherwise) plus a trace of the contact chain.
        Contact failures retry from the next bucket candidate; a contact
        with nothing closer ends the search as not-found.
        """
        node = self.nodes[origin]
        if target == node.node_id:
            raise UsageError("search target equals the searching node")
        trace = SearchTrace(target=target, found=False)
        before = self.messages_total()
        transient: dict[NodeId, NeighborEntry] = {}
        dead: set[NodeId] = set()

        result = None
        for restart in range(max_restarts):
            trace.restarts = restart
            hit = node.table.get(target) or transient.get(target)
            if hit is not None:
                if self.link_alive(hit.link):
                    result = hit
                    break
                if adopt:
                    self.handle_link_failure(origin, hit.link)
                dead.add(hit.peer_id)
            candidates = self._start_candidates(node, target, start_anywhere, dead)
            if not candidates:
                break
            try:
                result = self._walk(node, candidates[0], target, trace, dead, origin_tag, adopt, transient)
                break
            except _ContactFailed as fail:
                dead.add(fail.entry.peer_id)
                if adopt:
                    self.handle_link_failure(origin, fail.entry.link)
                continue
        trace.messages = self.messages_total() - before
        trace.found = result is not None
        return result, trace

    def _start_candidates(
        self, node: Node, target: NodeId, start_anywhere: bool, dead: set[NodeId]
    ) -> list[NeighborEntry]:
        if start_anywhere:
            pool = list(node.table.entries())
        else:
            pool = list(node.table.buckets[proximity(node.node_id, target)])
        pool = [e for e in pool if e.peer_id not in dead and self.link_alive(e.link)]
        pool.sort(key=lambda e: (-proximity(e.peer_id, target), e.peer_id))
        return pool

    def _walk(
        self,
        node: Node,
        first: NeighborEntry,
        target: NodeId,
        trace: SearchTrace,
        dead: set[NodeId],
        origin_tag: str,
        adopt: bool,
        transient: dict[NodeId, NeighborEntry],
    ) -> Optional[NeighborEntry]:
        contact = first
        if contact.peer_id == target:
            return contact
        # never exclude the target itself: a stale link at the origin must
        # not stop a live contact from handing the target back over a fresh
        # route
        base_exclude = ({node.node_id} | dead) - {target}
        refused: set[NodeId] = set()  # candidates this contact offered that we could not link to
        while True:
            reply = self._rpc_nearest(node, contact, target, frozenset(base_exclude | refused))
            if reply is None:
                return None
            known = node.table.get(reply.peer_id) if adopt else transient.get(reply.peer_id)
            if known is not None and self.link_alive(known.link):
                nxt = known
            else:
                try:
                    nxt = self._establish(
                        node, contact, reply.peer, reply.peer_id, reply.link,
                        origin_tag, adopt, transient,
                    )
                except LinkBuildError:
                    refused.add(reply.peer_id)
                    continue
            trace.steps.append(
                SearchStep(contact.peer_id, nxt.peer_id, proximity(nxt.peer_id, target))
            )
            if nxt.peer_id == target:
                return nxt
            contact = nxt
            refused = set()

    # -- join -------------------------------------------------------------------------

    def join(self, newcomer: int, bootstrap: Optional[int] = None) -> JoinReport:
        """Integrate ``newcomer`` through a physically adjacent ``bootstrap``.

        A None bootstrap is the genesis case: the node starts the overlay
        with an empty table. Otherwise the newcomer walks toward its own id
        to find its closest peer, copying bucket candidates from every
        contact on the way, then links itself into the tables of the whole
        subtree sharing its longest prefix. Joined neighbors on other local
        channels become physical entries as well.
        """
        node = self.nodes[newcomer]
        if node.joined:
            raise UsageError(f"node {newcomer} already joined")
        before = self.messages_total()
        report = JoinReport(node=newcomer, bootstrap=bootstrap)
        if bootstrap is None:
            node.joined = True
            return report
        peer = self.nodes[bootstrap]
        if (
            not peer.joined
            or not self.underlay.alive[bootstrap]
            or not self.underlay.alive[newcomer]
            or not self.underlay.has_up_channel(newcomer, bootstrap)
        ):
            raise BootstrapUnreachableError(
                f"bootstrap {bootstrap} is not a live, joined channel neighbor of {newcomer}"
            )
        node.joined = True
        entry = self.adopt_physical(newcomer, bootstrap)
        self._integrate(node, entry, report)
        for other in self.underlay.neighbors(newcomer):
            if other == bootstrap:
                continue
            peer = self.nodes[other]
            if peer.joined and self.underlay.alive[other]:
                self.adopt_physical(newcomer, other)
        report.messages = self.messages_total() - before
        return report

    def _integrate(self, node: Node, start: NeighborEntry, report: JoinReport) -> None:
        contact = start
        refused: set[NodeId] = set()
        while True:
            self._fill_from_contact(node, contact, report)
            nxt = None
            while True:
                try:
                    reply = self._rpc_nearest(
                        node, contact, node.node_id, frozenset({node.node_id} | refused)
                    )
                except _ContactFailed:
                    self.handle_link_failure(node.index, contact.link)
                    reply = None
                if reply is None:
                    break
                try:
                    nxt = self._establish(
                        node, contact, reply.peer, reply.peer_id, reply.link,
                        ORIGIN_JOIN, True, None,
                    )
                    break
                except LinkBuildError:
                    refused.add(reply.peer_id)
                    continue
            if nxt is None:
                break
            report.walk_steps += 1
            report.links_built += 1
            contact = nxt
        self._fixup_subtree(node, contact, report)

    def _fill_from_contact(
        self, node: Node, contact: NeighborEntry, report: JoinReport, origin: str = ORIGIN_JOIN
    ) -> None:
        """Copy candidates for every bucket below the contact's proximity.

        The newcomer and the contact agree on all bits below their mutual
        proximity, so for those buckets the contact's candidates are the
        newcomer's candidates. One query/reply round fetches them all.
        """
        shared = proximity(node.node_id, contact.peer_id)
        deficits = [
            b for b in range(shared) if len(node.table.buckets[b]) < node.table.k
        ]
        if not deficits:
            return
        ok, _, _ = self._send(node.index, contact.link, MSG_NEAREST_QUERY)
        if not ok:
            return
        peer = self.nodes[contact.peer]
        self._send(contact.peer, contact.link, MSG_NEAREST_REPLY)
        for b in deficits:
            want = node.table.k - len(node.table.buckets[b])
            if want <= 0:
                continue
            candidates = [
                e
                for e in peer.table.buckets[b]
                if e.peer != node.index
                and node.table.get(e.peer_id) is None
                and self.link_alive(e.link)
            ]
            candidates.sort(key=lambda e: (len(e.link.route), e.peer_id))
            for cand in candidates[:want]:
                try:
                    self._establish(
                        node, contact, cand.peer, cand.peer_id, cand.link,
                        origin, True, None,
                    )
                    report.links_built += 1
                except LinkBuildError:
                    continue

    def _fixup_subtree(
        self, node: Node, closest: NeighborEntry, report: JoinReport, origin: str = ORIGIN_JOIN
    ) -> None:
        """Introduce the newcomer to every node sharing its longest prefix.

        Those nodes sit at proximity exactly ``b`` from the newcomer, where
        ``b`` is the proximity to the closest existing node; they are the
        only nodes whose bucket for the newcomer's prefix could have been
        empty, so they all need the newcomer. They are found transitively:
        from the closest node, follow entries in buckets above ``b``.
        """
        b = proximity(node.node_id, closest.peer_id)
        seen = {closest.peer_id}
        queue = [closest]
        while queue:
            member = queue.pop(0)
            report.fixup_members += 1
            ok, _, _ = self._send(node.index, member.link, MSG_NEAREST_QUERY)
            if not ok:
                continue
            peer = self.nodes[member.peer]
            self._send(member.peer, member.link, MSG_NEAREST_REPLY)
            found = [
                e
                for e in peer.table.entries()
                if e.peer_id not in seen
                and e.peer != node.index
                and proximity(peer.node_id, e.peer_id) > b
                and self.link_alive(e.link)
            ]
            found.sort(key=lambda e: e.peer_id)
            for e in found:
                seen.add(e.peer_id)
                try:
                    entry = self._establish(
                        node, member, e.peer, e.peer_id, e.link,
                        origin, True, None,
                    )
                    report.links_built += 1
                except LinkBuildError:
                    continue
                queue.append(entry)

    def run_joins(self, order: Iterable[int]) -> list[JoinReport]:
        """Join nodes in the given attempt order, deferring any with no
        joined channel neighbor yet; each underlay component grows from the
        first of its nodes to come up."""
        reports = []
        pending = [i for i in order if self.underlay.alive[i] and not self.nodes[i].joined]
        while pending:
            progressed = False
            remaining = []
            for i in pending:
                boot = self._pick_bootstrap(i)
                if boot is not None:
                    reports.append(self.join(i, boot))
                    progressed = True
                else:
                    remaining.append(i)
            if not progressed:
                # nobody adjacent is joined: seed a fresh component
                genesis = remaining.pop(0)
                reports.append(self.join(genesis, None))
            pending = remaining

        return reports

    def _pick_bootstrap(self, i: int) -> Optional[int]:
        if not self.underlay.alive[i]:
            return None
        for j in self.underlay.neighbors(i):
            if self.nodes[j].joined and self.underlay.alive[j]:
                return j
        return None

    def bridge_channel(self, a: int, b: int) -> None:
        """Re-integration run by both ends of a channel that just came up
        between already-joined nodes (after a heal): each side walks the
        join procedure over the other, pulling the far side's view in and
        fixing itself into the far subtree."""
        for x, y in ((a, b), (b, a)):
            nx, ny = self.nodes[x], self.nodes[y]
            if not (nx.joined and ny.joined):
                continue
            if not self.underlay.alive[x] or not self.underlay.alive[y]:
                continue
            entry = self.adopt_physical(x, y)
            report = JoinReport(node=x, bootstrap=y)
            self._integrate(nx, entry, report)

    # -- repair -----------------------------------------------------------------------

    def _rng_for_repair(self, node: Node) -> Random:
        if node._repair_rng is None:
            node._repair_rng = Random(derive_seed(self.seed, "repair", node.index))
        return node._repair_rng

    def synthetic_target(self, node: Node, bucket: int, rng: Random) -> NodeId:
        """An id that lands in ``bucket``: the node's prefix up to the
        bucket, the bucket bit flipped, and a random tail."""
        width = node.node_id.width
        head = node.node_id.value >> (width - bucket) if bucket else 0
        head = (head << 1) | (1 - node.node_id.bit(bucket))
        tail_bits = width - bucket - 1
        value = (head << tail_bits) | (rng.getrandbits(tail_bits) if tail_bits else 0)
        return NodeId(value, width) if width >= 8 else NodeId.from_bits(f"{value:0{width}b}")

    def _pull_bucket(self, node: Node, bucket: int, target: NodeId) -> bool:
        """Ask live peers one hop out for an occupant of an empty bucket.

        Search-based refill needs a strictly-improving contact chain, and
        after heavy loss every chain toward a bucket can dead-end inside
        some other node's hole; the deficit becomes self-sustaining. The
        pull sidesteps chains: any peer holding an id in the bucket's
        range hands it over directly. Occupants always survive in their
        own channel neighbors' tables, so round by round they spread back.
        """
        refused: set[NodeId] = {node.node_id}
        for entry in sorted(node.table.entries(), key=self._entry_badness):
            if node.table.get(entry.peer_id) is not entry or not self.link_alive(entry.link):
                continue
            while True:
                try:
                    reply = self._rpc_nearest(
                        node, entry, target, frozenset(refused), min_proximity=bucket + 1
                    )
                except _ContactFailed:
                    self.handle_link_failure(node.index, entry.link)
                    break
                if reply is None:
                    break
                try:
                    self._establish(
                        node, entry, reply.peer, reply.peer_id, reply.link,
                        ORIGIN_REPAIR, True, None,
                    )
                except LinkBuildError:
                    refused.add(reply.peer_id)
                    continue
                return True
        return False

    def repair_node(self, index: int) -> RepairReport:
        """One maintenance pass: sweep liveness, then refill thin buckets.

        Refill searches target synthetic ids in the deficient bucket; the
        contact chain of such a search lands in that bucket, so adopted
        contacts are exactly the missing redundancy. A search that adds
        nothing falls back to pulling a candidate straight from a peer's
        table, and an empty bucket that defeats both escalates to a
        breadth-first pull across the whole component.
        """
        node = self.nodes[index]
        report = RepairReport(node=index)
        before = self.messages_total()
        for entry in list(node.table.entries()):
            if node.table.get(entry.peer_id) is not entry:
                continue  # removed by an earlier cascade in this sweep
            if not self.link_alive(entry.link):
                self._send(index, entry.link, MSG_PING)
                report.removed += len(self.handle_link_failure(index, entry.link))
            elif self.tick - entry.last_confirmed > self.params.liveness_timeout:
                ok, _, _ = self._send(index, entry.link, MSG_PING)
                if ok:
                    self._send(entry.peer, entry.link, MSG_ACK)
                    entry.last_confirmed = self.tick
                else:
                    report.removed += len(self.handle_link_failure(index, entry.link))
        rng = self._rng_for_repair(node)
        for b in range(node.node_id.width):
            attempts = 0
            pulled = False
            while len(node.table.buckets[b]) < node.table.k and attempts < node.table.k:
                attempts += 1
                target = self.synthetic_target(node, b, rng)
                if target == node.node_id or self.by_id.get(target) == index:
                    continue
                size_before = len(node.table.buckets[b])
                report.searches += 1
                self.search(index, target, adopt=True, start_anywhere=True, origin_tag=ORIGIN_REPAIR)
                if len(node.table.buckets[b]) <= size_before:
                    if not node.table.buckets[b] and not pulled:
                        pulled = True
                        if self._pull_bucket(node, b, target):
                            report.refilled += 1
                            continue
                    break
                report.refilled += len(node.table.buckets[b]) - size_before
        report.messages = self.messages_total() - before
        return report

    def repair_round(self) -> list[RepairReport]:
        """Run repair at every joined live node, one period of the clock."""
        self.tick += self.params.repair_period
        return [
            self.repair_node(n.index)
            for n in self.nodes
            if n.joined and self.underlay.alive[n.index]
        ]

    # -- forwarding ------------------------------------------------------------------

    def forward_packet(
        self,
        origin: int,
        dst: NodeId,
        payload: bytes,
        entry: Optional[NeighborEntry] = None,
    ) -> DeliveryOutcome:
        """Send a data packet along the origin's entry for ``dst``.

        The packet carries the compacted source route; en route, any node
        holding a strictly shorter live route to the destination splices
        its own route in. The hop counter increments once per physical
        channel crossed, which is the number stretch is judged on. An
        explicit ``entry`` (e.g. one found without adoption) overrides the
        table lookup.
        """
        node = self.nodes[origin]
        if entry is None:
            entry = node.table.get(dst)
        if entry is None:
            raise UsageError(f"no table entry for {dst.hex}; search first")
        self._count_message(MSG_DATA)
        route = list(self.compact_route(entry.link, origin))
        packet = Packet(node.node_id, dst, payload, route_stack=route)
        pos = 0
        while True:
            here = packet.route_stack[pos]
            if self.nodes[here].node_id == dst:
                self.nodes[here].inbox = packet.payload
                if here != origin:
                    entry.last_confirmed = self.tick
                return DeliveryOutcome(True, packet.hop_counter, packet)
            self._maybe_reroute(packet, pos, dst)
            nxt = packet.route_stack[pos + 1]
            if not self.underlay.has_up_channel(here, nxt):
                return DeliveryOutcome(False, packet.hop_counter, packet, failed_at=(here, nxt))
            self.underlay.deliver(here, nxt, MSG_DATA)
            packet.hop_counter += 1
            pos += 1

    def _maybe_reroute(self, packet: Packet, pos: int, dst: NodeId) -> None:
        here = packet.route_stack[pos]
        hold = self.nodes[here].table.get(dst)
        if hold is None or not self.link_alive(hold.link):
            return
        candidate = self.compact_route(hold.link, here)
        if len(candidate) - 1 < len(packet.route_stack) - pos - 1:
            packet.route_stack[pos:] = list(candidate)

    # -- audits -----------------------------------------------------------------------

    def audit(self) -> tuple[list[dict], list[dict]]:
        """Check every structural invariant; returns (violations, warnings).

        Violations: misplaced or self entries, over-capacity buckets,
        entries whose link is dead (dangling), depth-cap breaches, reused
        constituent channels, and connectivity holes (an empty bucket for
        which a live reachable peer exists). Redundancy below min(k,
        available) is reported as a warning, not a violation.
        """
        violations: list[dict] = []
        warnings: list[dict] = []
        width = self.params.id_bits
        use_kernel = width <= 64
        if use_kernel:
            values = np.array([n.node_id.value for n in self.nodes], dtype=np.uint64)
        for node in self.nodes:
            if not node.joined or not self.underlay.alive[node.index]:
                continue
            table = node.table
            for b, bucket in enumerate(table.buckets):
                if len(bucket) > table.k_max:
                    violations.append(
                        {"kind": "bucket-overflow", "node": node.index, "bucket": b}
                    )
                for e in bucket:
                    if e.peer == node.index:
                        violations.append({"kind": "self-entry", "node": node.index})
                    if proximity(node.node_id, e.peer_id) != b:
                        violations.append(
                            {"kind": "misplaced-entry", "node": node.index, "bucket": b, "peer": e.peer}
                        )
                    if not self.link_alive(e.link):
                        violations.append(
                            {"kind": "dangling-entry", "node": node.index, "bucket": b, "peer": e.peer}
                        )
                    if e.link.depth > self.params.depth_cap:
                        violations.append(
                            {"kind": "depth-exceeded", "node": node.index, "peer": e.peer}
                        )
                    if len(set(e.link.route)) != len(e.link.route):
                        violations.append(
                            {"kind": "route-not-simple", "node": node.index, "peer": e.peer}
                        )
            dist = self.underlay.bfs_distances(node.index)
            reachable = [
                j
                for j in range(self.underlay.n)
                if j != node.index
                and dist[j] >= 0
                and self.nodes[j].joined
                and self.underlay.alive[j]
            ]
            if use_kernel and reachable:
                prox = _kernels.proximity_block(
                    values[reachable], node.node_id.value, width
                )
                available: dict[int, int] = {}
                for p in prox.tolist():
                    available[p] = available.get(p, 0) + 1
            else:
                available = {}
                for j in reachable:
                    p = proximity(node.node_id, self.nodes[j].node_id)
                    available[p] = available.get(p, 0) + 1
            for b, count in sorted(available.items()):
                have = len(table.buckets[b])
                if have == 0:
                    violations.append(
                        {"kind": "connectivity-hole", "node": node.index, "bucket": b, "available": count}
                    )
                elif have < min(table.k, count):
                    warnings.append(
                        {"kind": "redundancy-shortfall", "node": node.index, "bucket": b,
                         "have": have, "available": count}
                    )
        return violations, warnings
