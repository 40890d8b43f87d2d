"""Exception taxonomy shared across the simulator.

Configuration problems and usage errors raise immediately; conditions a live
protocol must tolerate (unreachable peers, denied connections, failed link
builds) are distinct types so callers can route around them.
"""

from __future__ import annotations


class UipsimError(Exception):
    """Base class for all simulator errors."""


class ConfigError(UipsimError):
    """Invalid scenario or topology configuration. Maps to exit code 2."""


class UsageError(UipsimError):
    """API misuse by the caller (e.g. a node searching for its own id)."""


class DuplicateIdentityError(ConfigError):
    """Two nodes in one world resolved to the same node id."""


class NodeUnavailableError(UipsimError):
    """An endpoint of a requested channel operation is failed."""


class PolicyDeniedError(UipsimError):
    """Reachability policy forbids initiating this channel."""


class PunchPreconditionError(UipsimError):
    """Hole punch requested through an introducer lacking live channels."""


class ChannelDownError(UipsimError):
    """A frame was offered to a channel that is down or absent."""


class BootstrapUnreachableError(UipsimError):
    """Join attempted through a dead, unjoined, or disconnected bootstrap."""


class LinkBuildError(UipsimError):
    """A virtual link could not be built (dead via, depth, or reuse)."""
