"""Deterministic simulator for identity-based overlay routing.

Nodes derive self-certifying ids from key hashes, keep proximity-bucketed
neighbor tables backed by physical channels and recursive virtual links,
find each other by iterative prefix-resolving search, and forward data
over compacted source routes. A BFS oracle over the simulated underlay
grades every delivered packet's hop count.
"""

from .errors import (
    BootstrapUnreachableError,
    ChannelDownError,
    ConfigError,
    DuplicateIdentityError,
    LinkBuildError,
    NodeUnavailableError,
    PolicyDeniedError,
    PunchPreconditionError,
    UipsimError,
    UsageError,
)
from .identity import (
    IdentityKeyPair,
    IdentityProof,
    NodeId,
    generate_identity,
    make_identity_proof,
    proximity,
    verify_identity_proof,
)
from .metrics import measure_stretch, state_stats, stretch_summary
from .routing import (
    DeliveryOutcome,
    NeighborEntry,
    NeighborTable,
    PhysicalLink,
    ProtocolParams,
    SearchTrace,
    VirtualLink,
    World,
    derive_seed,
)
from .underlay import TopologySpec, Underlay, WorldEvent, build_topology

__version__ = "0.1.0"

__all__ = [
    "BootstrapUnreachableError",
    "ChannelDownError",
    "ConfigError",
    "DeliveryOutcome",
    "DuplicateIdentityError",
    "IdentityKeyPair",
    "IdentityProof",
    "LinkBuildError",
    "NeighborEntry",
    "NeighborTable",
    "NodeId",
    "NodeUnavailableError",
    "PhysicalLink",
    "PolicyDeniedError",
    "ProtocolParams",
    "PunchPreconditionError",
    "SearchTrace",
    "TopologySpec",
    "UipsimError",
    "Underlay",
    "UsageError",
    "VirtualLink",
    "World",
    "WorldEvent",
    "build_topology",
    "derive_seed",
    "generate_identity",
    "make_identity_proof",
    "measure_stretch",
    "proximity",
    "state_stats",
    "stretch_summary",
    "verify_identity_proof",
    "__version__",
]
