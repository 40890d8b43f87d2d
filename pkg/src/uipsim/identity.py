"""Self-certifying node identities.

A node's identity is the first ``width`` bits of the SHA-256 hash of its
public key. Ownership of an identity is proven by signing a challenge with
the matching private key; anyone holding the claimed id can check that the
presented public key hashes to the id and that the signature verifies under
that key. No registration authority is involved, so identities are stable
across renumbering and mobility, and are exactly as trustworthy as the hash.

Proximity between two identities is the length of their common bit prefix
(msb first). It is symmetric and satisfies the ultrametric-style bound
``min(proximity(a, b), proximity(b, c)) <= proximity(a, c)``, which is what
lets a neighbor table bucketed by proximity guarantee forward progress
during a search: any node closer to the target than I am shares a longer
prefix with the target than it does with me.

The signature scheme is pluggable; the default is Ed25519, which is
deterministic, so identical seeds yield identical identities and proofs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from random import Random

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

MIN_ID_BITS = 8
MAX_ID_BITS = 256
DEFAULT_ID_BITS = 64

_HASH_BITS = 256


class NodeId:
    """An identity: ``width`` bits taken msb-first from a hash digest.

    Stored as a non-negative integer below ``2**width``. Ordering and
    equality require equal widths; mixing widths is a usage error because
    proximity between ids of different lengths is undefined.
    """

    __slots__ = ("value", "width")

    def __init__(self, value: int, width: int) -> None:
        if not MIN_ID_BITS <= width <= MAX_ID_BITS:
            raise ValueError(f"id width must be in [{MIN_ID_BITS}, {MAX_ID_BITS}], got {width}")
        if not 0 <= value < (1 << width):
            raise ValueError(f"id value out of range for width {width}")
        object.__setattr__(self, "value", value)
        object.__setattr__(self, "width", width)

    def __setattr__(self, name: str, value: object) -> None:
        raise AttributeError("NodeId is immutable")

    @classmethod
    def from_bits(cls, bits: str) -> "NodeId":
        """Build from a literal bit string like ``"1011"`` (msb first).

        Widths below the normal minimum are allowed here: exhaustive tests
        over tiny id spaces need 4-bit ids.
        """
        if not bits or any(c not in "01" for c in bits):
            raise ValueError(f"not a bit string: {bits!r}")
        nid = cls.__new__(cls)
        object.__setattr__(nid, "value", int(bits, 2))
        object.__setattr__(nid, "width", len(bits))
        return nid

    @classmethod
    def from_hex(cls, text: str, width: int) -> "NodeId":
        value = int(text, 16)
        nid = cls.__new__(cls)
        if not 0 <= value < (1 << width):
            raise ValueError(f"hex id {text!r} out of range for width {width}")
        object.__setattr__(nid, "value", value)
        object.__setattr__(nid, "width", width)
        return nid

    @classmethod
    def from_public_key(cls, public_key: bytes, width: int) -> "NodeId":
        digest = hashlib.sha256(public_key).digest()
        value = int.from_bytes(digest, "big") >> (_HASH_BITS - width)
        return cls(value, width)

    def bit(self, i: int) -> int:
        """The i-th bit, msb first (bit 0 is the most significant)."""
        if not 0 <= i < self.width:
            raise IndexError(i)
        return (self.value >> (self.width - 1 - i)) & 1

    @property
    def hex(self) -> str:
        ndigits = (self.width + 3) // 4
        return f"{self.value:0{ndigits}x}"

    @property
    def bits(self) -> str:
        return f"{self.value:0{self.width}b}"

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, NodeId)
            and self.value == other.value
            and self.width == other.width
        )

    def __lt__(self, other: "NodeId") -> bool:
        if not isinstance(other, NodeId):
            return NotImplemented
        if self.width != other.width:
            raise ValueError("cannot order ids of different widths")
        return self.value < other.value

    def __hash__(self) -> int:
        return hash((self.value, self.width))

    def __repr__(self) -> str:
        return f"NodeId({self.hex}/{self.width})"


def proximity(a: NodeId, b: NodeId) -> int:
    """Length of the common msb-first prefix of ``a`` and ``b``.

    Equal ids have proximity ``width``; ids differing in the first bit have
    proximity 0.
    """
    if a.width != b.width:
        raise UsageWidthMismatch(a.width, b.width)
    x = a.value ^ b.value
    if x == 0:
        return a.width
    return a.width - x.bit_length()


class UsageWidthMismatch(ValueError):
    def __init__(self, wa: int, wb: int) -> None:
        super().__init__(f"proximity undefined between widths {wa} and {wb}")


class SignatureScheme:
    """Interface for the proof-of-ownership primitive.

    Implementations must be deterministic: the same seed yields the same
    keypair and the same (key, message) pair yields the same signature.
    """

    name = "abstract"

    def keygen(self, seed: int) -> tuple[bytes, bytes]:
        """Return ``(private_key, public_key)`` derived from ``seed``."""
        raise NotImplementedError

    def sign(self, private_key: bytes, message: bytes) -> bytes:
        raise NotImplementedError

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool:
        raise NotImplementedError


class Ed25519Scheme(SignatureScheme):
    name = "ed25519"

    def keygen(self, seed: int) -> tuple[bytes, bytes]:
        raw = Random(seed).randbytes(32)
        key = Ed25519PrivateKey.from_private_bytes(raw)
        public = key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        return raw, public

    def sign(self, private_key: bytes, message: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(private_key).sign(message)

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        except (InvalidSignature, ValueError):
            return False
        return True


DEFAULT_SCHEME = Ed25519Scheme()


@dataclass(frozen=True, slots=True)
class IdentityKeyPair:
    """A node's keys plus the identity they hash to."""

    node_id: NodeId
    public_key: bytes
    private_key: bytes
    scheme: str = DEFAULT_SCHEME.name


@dataclass(frozen=True, slots=True)
class IdentityProof:
    """Material letting a verifier check ownership of a claimed id."""

    public_key: bytes
    challenge: bytes
    signature: bytes
    scheme: str = DEFAULT_SCHEME.name


def generate_identity(
    seed: int,
    id_bits: int = DEFAULT_ID_BITS,
    scheme: SignatureScheme = DEFAULT_SCHEME,
) -> IdentityKeyPair:
    """Derive a keypair from ``seed`` and bind it to its hashed identity."""
    private_key, public_key = scheme.keygen(seed)
    node_id = NodeId.from_public_key(public_key, id_bits)
    return IdentityKeyPair(node_id, public_key, private_key, scheme.name)


def make_identity_proof(
    keypair: IdentityKeyPair,
    challenge: bytes,
    scheme: SignatureScheme = DEFAULT_SCHEME,
) -> IdentityProof:
    signature = scheme.sign(keypair.private_key, challenge)
    return IdentityProof(keypair.public_key, challenge, signature, scheme.name)


def verify_identity_proof(
    claimed_id: NodeId,
    proof: IdentityProof,
    scheme: SignatureScheme = DEFAULT_SCHEME,
) -> bool:
    """True iff the proof's key hashes to ``claimed_id`` and the signature
    verifies under that key. Any malformed input verifies false rather than
    raising: a verifier must survive hostile material.
    """
    try:
        derived = NodeId.from_public_key(proof.public_key, claimed_id.width)
    except (ValueError, TypeError):
        return False
    if derived != claimed_id:
        return False
    return scheme.verify(proof.public_key, proof.challenge, proof.signature)
