"""Identity derivation, proximity metric, ownership proofs."""

import hashlib
from random import Random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uipsim.identity import (
    DEFAULT_SCHEME,
    IdentityProof,
    NodeId,
    UsageWidthMismatch,
    generate_identity,
    make_identity_proof,
    proximity,
    verify_identity_proof,
)


def nid(bits):
    return NodeId.from_bits(bits)


class TestNodeId:
    def test_from_bits_round_trip(self):
        n = nid("1011")
        assert n.value == 0b1011
        assert n.width == 4
        assert n.bits == "1011"

    def test_bit_is_msb_first(self):
        n = nid("1000")
        assert [n.bit(i) for i in range(4)] == [1, 0, 0, 0]
        with pytest.raises(IndexError):
            n.bit(4)

    def test_hex_pads_to_nibble_count(self):
        assert NodeId(0x1b, 64).hex == "000000000000001b"
        assert NodeId(0x1b, 12).hex == "01b"  # ceil(12/4) = 3 digits

    def test_from_hex_round_trips(self):
        n = NodeId(0xDEADBEEF, 64)
        assert NodeId.from_hex(n.hex, 64) == n

    def test_value_range_enforced(self):
        with pytest.raises(ValueError):
            NodeId(1 << 64, 64)
        with pytest.raises(ValueError):
            NodeId(-1, 64)

    def test_width_range_enforced(self):
        with pytest.raises(ValueError):
            NodeId(0, 4)  # tiny widths only via from_bits
        with pytest.raises(ValueError):
            NodeId(0, 257)

    def test_immutable_and_hashable(self):
        n = nid("1011")
        with pytest.raises(AttributeError):
            n.value = 3
        assert len({nid("1011"), nid("1011"), nid("1001")}) == 2

    def test_ordering_requires_equal_width(self):
        with pytest.raises(ValueError):
            NodeId(1, 8) < NodeId(1, 16)

    def test_equality_distinguishes_widths(self):
        assert NodeId(5, 8) != NodeId(5, 16)

    def test_from_public_key_is_hash_prefix(self):
        # independent recomputation: hashlib digest, top 64 of 256 bits
        key = b"\x07" * 32
        n = NodeId.from_public_key(key, 64)
        digest = hashlib.sha256(key).digest()
        assert n.value == int.from_bytes(digest, "big") >> (256 - 64)
        assert n.hex == "4bb06f8e4e3a7715"

    def test_from_public_key_other_widths(self):
        key = b"\x07" * 32
        full = int.from_bytes(hashlib.sha256(key).digest(), "big")
        for width in (8, 17, 64, 130, 256):
            assert NodeId.from_public_key(key, width).value == full >> (256 - width)


class TestProximity:
    def test_known_prefix_lengths(self):
        # 1011 vs 1001 share '10'; 1011 vs 0011 differ at the first bit
        assert proximity(nid("1011"), nid("1001")) == 2
        assert proximity(nid("1011"), nid("0011")) == 0

    def test_equal_ids_give_full_width(self):
        assert proximity(nid("1011"), nid("1011")) == 4
        a = NodeId(0xABCD, 64)
        assert proximity(a, a) == 64

    def test_adjacent_values(self):
        assert proximity(nid("1010"), nid("1011")) == 3

    def test_width_mismatch_rejected(self):
        with pytest.raises(UsageWidthMismatch):
            proximity(NodeId(1, 8), NodeId(1, 16))

    @given(st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1))
    def test_matches_prefix_scan(self, x, y):
        # oracle: count common bits one at a time
        a, b = NodeId(x, 64), NodeId(y, 64)
        expected = 0
        for i in range(64):
            if a.bit(i) != b.bit(i):
                break
            expected += 1
        assert proximity(a, b) == expected

    @given(st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1))
    def test_symmetric(self, x, y):
        a, b = NodeId(x, 64), NodeId(y, 64)
        assert proximity(a, b) == proximity(b, a)

    @given(
        st.integers(0, 2**32 - 1),
        st.integers(0, 2**32 - 1),
        st.integers(0, 2**32 - 1),
    )
    def test_two_near_one_implies_near_each_other(self, x, y, z):
        a, b, c = (NodeId(v, 32) for v in (x, y, z))
        assert proximity(a, c) >= min(proximity(a, b), proximity(b, c))


class TestIdentityGeneration:
    def test_deterministic_in_seed(self):
        assert generate_identity(42) == generate_identity(42)
        assert generate_identity(42).node_id.hex == "1bff07cf9e3841fb"

    def test_distinct_seeds_distinct_ids(self):
        ids = {generate_identity(s).node_id for s in range(200)}
        assert len(ids) == 200

    def test_id_binds_to_public_key(self):
        kp = generate_identity(7)
        assert kp.node_id == NodeId.from_public_key(kp.public_key, 64)

    def test_width_parameter(self):
        kp = generate_identity(7, id_bits=128)
        assert kp.node_id.width == 128


class TestProofs:
    def test_valid_proof_verifies(self):
        kp = generate_identity(3)
        proof = make_identity_proof(kp, b"challenge-123")
        assert verify_identity_proof(kp.node_id, proof)

    def test_wrong_claimed_id_rejected(self):
        kp = generate_identity(3)
        other = generate_identity(4)
        proof = make_identity_proof(kp, b"challenge-123")
        assert not verify_identity_proof(other.node_id, proof)

    def test_wrong_challenge_rejected(self):
        kp = generate_identity(3)
        proof = make_identity_proof(kp, b"challenge-123")
        forged = IdentityProof(proof.public_key, b"challenge-456", proof.signature)
        assert not verify_identity_proof(kp.node_id, forged)

    def test_tampered_signature_rejected(self):
        kp = generate_identity(3)
        proof = make_identity_proof(kp, b"c")
        sig = bytearray(proof.signature)
        sig[0] ^= 0x01
        assert not verify_identity_proof(
            kp.node_id, IdentityProof(proof.public_key, b"c", bytes(sig))
        )

    def test_substituted_key_rejected(self):
        # attacker presents their own key with the victim's id
        victim = generate_identity(3)
        attacker = generate_identity(9)
        proof = make_identity_proof(attacker, b"c")
        assert not verify_identity_proof(victim.node_id, proof)

    def test_malformed_material_never_raises(self):
        kp = generate_identity(3)
        junk = [b"", b"short", b"\x00" * 31, b"\xff" * 64, None]
        for pk in junk:
            for sig in junk:
                if pk is None or sig is None:
                    continue
                proof = IdentityProof(pk, b"c", sig)
                assert verify_identity_proof(kp.node_id, proof) is False

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32), st.data())
    def test_single_byte_perturbations_rejected(self, seed, data):
        kp = generate_identity(seed)
        proof = make_identity_proof(kp, b"fixed-challenge")
        field = data.draw(st.sampled_from(["public_key", "signature", "challenge"]))
        blob = bytearray(getattr(proof, field))
        pos = data.draw(st.integers(0, len(blob) - 1))
        delta = data.draw(st.integers(1, 255))
        blob[pos] ^= delta
        kwargs = {
            "public_key": proof.public_key,
            "challenge": proof.challenge,
            "signature": proof.signature,
        }
        kwargs[field] = bytes(blob)
        assert not verify_identity_proof(kp.node_id, IdentityProof(**kwargs))

    def test_scheme_verify_survives_garbage(self):
        assert DEFAULT_SCHEME.verify(b"nonsense", b"m", b"sig") is False
