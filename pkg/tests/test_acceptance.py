"""End-to-end acceptance checks for the headline routing claims.

One test per criterion; each records a single PASS/FAIL line with its
measured numbers. conftest.py replays the lines in the terminal summary
so they land in piped logs regardless of capture mode.
"""

import hashlib
import json
import math
import sys
from pathlib import Path
from random import Random

import numpy as np
import pytest

from uipsim.config import load_config, parse_config
from uipsim.identity import NodeId, generate_identity, make_identity_proof, verify_identity_proof
from uipsim.routing import ProtocolParams, World, derive_seed
from uipsim.scenario import run_scenario
from uipsim.underlay import TopologySpec, Underlay, WorldEvent, build_topology

REPO = Path(__file__).resolve().parent.parent

N_GRAND = 1000
SEEDS = (1, 2, 3, 4, 5)
STRETCH_BOUNDS = (1.0, 3.0)
BUCKET_CAP = math.log2(N_GRAND) + 3          # ~12.97
ENTRY_CAP = 3 * BUCKET_CAP                   # k * (log2 N + 3)
GROWTH_PER_DOUBLING = (0.0, 6.0)             # [0, 2k]


VERDICT_LINES: list = []


def verdict(ok: bool, label: str, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
    VERDICT_LINES.append(line)
    print(line, file=sys.__stdout__, flush=True)
    assert ok, f"{label}: {detail}"


def grand_config(kind, seed, n, pairs=2000, **topo):
    return parse_config(
        {
            "seed": seed,
            "topology": {"kind": kind, "n": n, **topo},
            "workload": {
                "join_order": "seeded-shuffle",
                "repair_rounds": 1,
                "stretch_pairs": pairs,
                "sampling": "sequential-with-adoption",
            },
        }
    )


def joined_world(underlay, seed, **params):
    w = World(underlay, ProtocolParams(**params), seed=seed)
    order = list(range(underlay.n))
    Random(derive_seed(seed, "order")).shuffle(order)
    w.run_joins(order)
    return w


def repair_until_stable(world, max_rounds=5):
    for round_no in range(1, max_rounds + 1):
        reports = world.repair_round()
        if sum(r.removed + r.refilled for r in reports) == 0:
            return round_no
    return max_rounds


@pytest.fixture(scope="module")
def grand_reports(tmp_path_factory):
    """The two-topology, five-seed measurement battery shared by the
    stretch and state criteria."""
    root = tmp_path_factory.mktemp("grand")
    reports = {}
    for kind, topo in (
        ("preferential-attachment", {"m": 2}),
        ("random-gnp", {"p": 6 / (N_GRAND - 1)}),
    ):
        for seed in SEEDS:
            cfg = grand_config(kind, seed, N_GRAND, **topo)
            code, report = run_scenario(cfg, str(root / f"{kind}-{seed}"))
            assert code == 0, f"{kind} seed {seed} reported failures"
            reports[(kind, seed)] = report
    return reports


def test_criterion_1_stretch(grand_reports):
    lo, hi = STRETCH_BOUNDS
    per_topology = {}
    ok = True
    for kind in ("preferential-attachment", "random-gnp"):
        means = []
        for seed in SEEDS:
            summary = grand_reports[(kind, seed)]["stretch_summary"]
            ok = ok and summary["samples"] == 2000
            means.append(summary["mean"])
        per_topology[kind] = sum(means) / len(means)
        ok = ok and lo <= per_topology[kind] <= hi
    detail = ", ".join(f"{k} mean {v:.4f}" for k, v in per_topology.items())
    verdict(ok, "criterion 1 stretch", f"{detail} (bounds [{lo}, {hi}], 5 seeds x 2000 pairs)")


def test_criterion_2_state(grand_reports, tmp_path_factory):
    worst_buckets = 0.0
    worst_entries = 0.0
    ok = True
    for report in grand_reports.values():
        s = report["state_summary"]
        worst_buckets = max(worst_buckets, s["mean_nonempty_buckets"])
        worst_entries = max(worst_entries, s["mean_entries"])
    ok = ok and worst_buckets <= BUCKET_CAP and worst_entries <= ENTRY_CAP

    root = tmp_path_factory.mktemp("growth")
    means = []
    for n in (512, 1024, 2048):
        cfg = grand_config("random-gnp", 1, n, pairs=0, p=6 / (n - 1))
        _, report = run_scenario(cfg, str(root / str(n)))
        means.append(report["state_summary"]["mean_entries"])
    deltas = [means[1] - means[0], means[2] - means[1]]
    lo, hi = GROWTH_PER_DOUBLING
    ok = ok and all(lo <= d <= hi for d in deltas)
    verdict(
        ok,
        "criterion 2 state",
        f"worst mean buckets {worst_buckets:.2f} (cap {BUCKET_CAP:.2f}), "
        f"worst mean entries {worst_entries:.2f} (cap {ENTRY_CAP:.2f}), "
        f"entries at 512/1024/2048 = {means[0]:.2f}/{means[1]:.2f}/{means[2]:.2f}, "
        f"doubling deltas {deltas[0]:+.2f}, {deltas[1]:+.2f} (allowed [{lo}, {hi}])",
    )


def test_criterion_3_search_completeness():
    worlds = []
    tiny = Underlay(2)
    tiny.add_channel(0, 1)
    worlds.append(("pair", World(tiny, ProtocolParams(), seed=21)))
    worlds[-1][1].run_joins([0, 1])
    for label, spec in (
        ("gnp-8", TopologySpec(kind="random-gnp", n=8, p=0.4, seed=22)),
        ("ring-50", TopologySpec(kind="ring-with-chords", n=50, chords=8, seed=23)),
        ("prefattach-200", TopologySpec(kind="preferential-attachment", n=200, m=2, seed=24)),
    ):
        worlds.append((label, joined_world(build_topology(spec), seed=spec.seed)))
    searched = 0
    missing = 0
    bad_traces = 0
    for _, w in worlds:
        w.repair_round()
        width = w.params.id_bits
        for a in w.nodes:
            for b in w.nodes:
                if a is b:
                    continue
                searched += 1
                entry, trace = w.search(a.index, b.node_id)
                if entry is None or entry.peer != b.index:
                    missing += 1
                    continue
                proxs = [s.reply_proximity for s in trace.steps]
                if len(trace.steps) > width or any(
                    q <= p for p, q in zip(proxs, proxs[1:])
                ):
                    bad_traces += 1
    verdict(
        missing == 0 and bad_traces == 0,
        "criterion 3 completeness",
        f"{searched} exhaustive searches over N in (2, 8, 50, 200): "
        f"{missing} not found, {bad_traces} non-monotone or overlong traces",
    )


def test_criterion_4_oracle_equivalence():
    kinds = (
        ("random-gnp", {"p": 0.12}),
        ("ring-with-chords", {"chords": 5}),
        ("preferential-attachment", {"m": 2}),
    )
    pairs_checked = 0
    mismatches = 0
    partitioned_seeds = 0
    for seed in range(1, 11):
        kind, topo = kinds[seed % len(kinds)]
        n = 20 + (7 * seed) % 31
        spec = TopologySpec(kind=kind, n=n, seed=seed, **topo)
        w = joined_world(build_topology(spec), seed=seed)
        if seed % 2 == 0:
            partitioned_seeds += 1
            half = n // 2
            w.underlay.apply_event(
                WorldEvent(
                    at=0, seq=0, action="partition",
                    groups=(tuple(range(half)), tuple(range(half, n))),
                )
            )
        for _ in range(5):
            w.repair_round()
        for a in w.nodes:
            for b in w.nodes:
                if a is b:
                    continue
                pairs_checked += 1
                entry, _ = w.search(a.index, b.node_id)
                delivered = False
                if entry is not None:
                    delivered = w.forward_packet(a.index, b.node_id, b"q", entry=entry).delivered
                if delivered != w.underlay.reachable(a.index, b.index):
                    mismatches += 1
    verdict(
        mismatches == 0,
        "criterion 4 oracle equivalence",
        f"{pairs_checked} pairs over 10 seeds ({partitioned_seeds} partitioned worlds): "
        f"{mismatches} forward/oracle disagreements",
    )


def test_criterion_5_partition_heal():
    n = 100
    seed = 11
    spec = TopologySpec(kind="random-gnp", n=n, p=6 / (n - 1), seed=seed)
    w = joined_world(build_topology(spec), seed=seed)
    w.repair_round()
    groups = (tuple(range(n // 2)), tuple(range(n // 2, n)))
    w.underlay.apply_event(WorldEvent(at=0, seq=0, action="partition", groups=groups))
    repair_until_stable(w)

    rng = Random(derive_seed(seed, "cross-pairs"))
    def cross_pair():
        return rng.choice(groups[0]), rng.choice(groups[1])

    split_ok = 0
    for _ in range(200):
        a, b = cross_pair()
        entry, _ = w.search(a, w.nodes[b].node_id)
        if entry is None:
            split_ok += 1

    healed = sorted(w.underlay.healable_channels(), key=lambda c: c.key)
    w.underlay.apply_event(WorldEvent(at=0, seq=1, action="heal"))
    for ch in healed:
        w.bridge_channel(ch.a, ch.b)
    rounds = repair_until_stable(w, max_rounds=5)

    restored = 0
    for _ in range(1000):
        a, b = cross_pair()
        if rng.random() < 0.5:
            a, b = b, a
        entry, _ = w.search(a, w.nodes[b].node_id)
        if entry is not None and entry.peer == b:
            restored += 1
    verdict(
        split_ok == 200 and restored == 1000,
        "criterion 5 partition heal",
        f"split: {split_ok}/200 cross searches correctly failed; "
        f"healed (+{rounds} repair rounds): {restored}/1000 cross searches succeeded",
    )


def test_criterion_6_churn_cascade():
    n = 200
    seed = 12
    spec = TopologySpec(kind="random-gnp", n=n, p=6 / (n - 1), seed=seed)
    w = joined_world(build_topology(spec), seed=seed)
    w.repair_round()

    channels = sorted(w.underlay.channels(), key=lambda c: c.key)
    rng = Random(derive_seed(seed, "churn"))
    dropped = rng.sample(channels, len(channels) // 10)
    for i, ch in enumerate(dropped):
        w.underlay.apply_event(
            WorldEvent(at=0, seq=i, action="channel-fail", a=ch.a, b=ch.b)
        )
    w.repair_round()  # reaction sweep
    violations, _ = w.audit()
    dangling = [v for v in violations if v["kind"] == "dangling-entry"]
    rounds = 1 + repair_until_stable(w, max_rounds=4)

    found = 0
    sampled = 0
    while sampled < 1000:
        a, b = rng.randrange(n), rng.randrange(n)
        if a == b or not w.underlay.reachable(a, b):
            continue
        sampled += 1
        entry, _ = w.search(a, w.nodes[b].node_id)
        if entry is not None and entry.peer == b:
            found += 1
    verdict(
        not dangling and found == 1000,
        "criterion 6 churn cascade",
        f"{len(dropped)} of {len(channels)} channels failed: {len(dangling)} dangling "
        f"references after reaction sweep; {found}/1000 sampled searches succeeded "
        f"among still-connected pairs ({rounds} repair rounds total)",
    )


def nat_world(punch_success, seed=31):
    spec = TopologySpec(kind="nat-clusters", n=104, clusters=4, gateways=4, seed=seed)
    u = build_topology(spec, punch_success=punch_success, punch_seed=derive_seed(seed, "punch"))
    w = joined_world(u, seed=seed, punch_success=punch_success, direct_upgrade=True)
    w.repair_round()
    return w


def cross_cluster_pairs(rng, count, gateways=4, size=25, clusters=4):
    def cluster_of(i):
        return (i - gateways) // size
    members = list(range(gateways, gateways + clusters * size))
    pairs = []
    while len(pairs) < count:
        a, b = rng.choice(members), rng.choice(members)
        if a != b and cluster_of(a) != cluster_of(b):
            pairs.append((a, b))
    return pairs


def test_criterion_7_nat_traversal():
    pairs = cross_cluster_pairs(Random(derive_seed(31, "nat-pairs")), 300)

    w = nat_world(punch_success=1.0)
    delivered_punch = 0
    direct = 0
    for a, b in pairs:
        entry, _ = w.search(a, w.nodes[b].node_id)
        if entry is None:
            continue
        if w.forward_packet(a, w.nodes[b].node_id, b"p", entry=entry).delivered:
            delivered_punch += 1
        if w.underlay.has_up_channel(a, b):
            direct += 1

    w0 = nat_world(punch_success=0.0)
    delivered_fwd = 0
    forwarded = 0
    for a, b in pairs:
        entry, _ = w0.search(a, w0.nodes[b].node_id)
        if entry is None:
            continue
        out = w0.forward_packet(a, w0.nodes[b].node_id, b"p", entry=entry)
        if out.delivered:
            delivered_fwd += 1
            if not w0.underlay.has_up_channel(a, b) and out.hops >= 2:
                forwarded += 1

    ok = (
        delivered_punch == 300
        and direct >= 0.9 * 300
        and delivered_fwd == 300
        and forwarded == 300
    )
    verdict(
        ok,
        "criterion 7 nat traversal",
        f"punch=1.0: {delivered_punch}/300 delivered, {direct}/300 pairs ended direct "
        f"(need >=270); punch=0.0: {delivered_fwd}/300 delivered, {forwarded}/300 "
        f"via relays only",
    )


def test_criterion_8_determinism(tmp_path):
    cfg_path = REPO / "scenarios" / "reference.json"
    golden_path = REPO / "scenarios" / "golden-report.json"
    digests = []
    for run in ("first", "second"):
        cfg = load_config(str(cfg_path))
        out = tmp_path / run
        code, _ = run_scenario(cfg, str(out))
        assert code == 0
        digests.append(hashlib.sha256((out / "report.json").read_bytes()).hexdigest())
    golden = hashlib.sha256(golden_path.read_bytes()).hexdigest()
    ok = digests[0] == digests[1] == golden
    verdict(
        ok,
        "criterion 8 determinism",
        f"two runs -> {digests[0][:16]}.. and {digests[1][:16]}.., "
        f"checked-in report {golden[:16]}..",
    )


def test_criterion_9_identity_suite():
    count = 10_000
    values = np.empty(count, dtype=np.uint64)
    pool = []
    for seed in range(count):
        kp = generate_identity(seed)
        values[seed] = kp.node_id.value
        if seed < 50:
            pool.append(kp)
    unique = len(np.unique(values)) == count

    bit_means = [
        float(((values >> np.uint64(63 - b)) & np.uint64(1)).mean()) for b in range(64)
    ]
    uniform = all(0.48 <= m <= 0.52 for m in bit_means)

    rng = Random(derive_seed(0, "proof-fuzz"))
    rejected = 0
    for i in range(1000):
        kp = pool[i % len(pool)]
        challenge = rng.randbytes(32)
        proof = make_identity_proof(kp, challenge)
        assert verify_identity_proof(kp.node_id, proof)
        mode = i % 4
        if mode == 0:  # corrupt signature
            sig = bytearray(proof.signature)
            sig[rng.randrange(len(sig))] ^= 1 << rng.randrange(8)
            mangled = type(proof)(proof.public_key, challenge, bytes(sig), proof.scheme)
            bad = verify_identity_proof(kp.node_id, mangled)
        elif mode == 1:  # corrupt public key
            pub = bytearray(proof.public_key)
            pub[rng.randrange(len(pub))] ^= 1 << rng.randrange(8)
            mangled = type(proof)(bytes(pub), challenge, proof.signature, proof.scheme)
            bad = verify_identity_proof(kp.node_id, mangled)
        elif mode == 2:  # claim a different id
            flipped = NodeId(kp.node_id.value ^ (1 << rng.randrange(64)), 64)
            bad = verify_identity_proof(flipped, proof)
        else:  # replay under a different challenge
            other = bytearray(challenge)
            other[rng.randrange(len(other))] ^= 1 << rng.randrange(8)
            mangled = type(proof)(proof.public_key, bytes(other), proof.signature, proof.scheme)
            bad = verify_identity_proof(kp.node_id, mangled)
        if bad is False:
            rejected += 1
    worst_bit = max(abs(m - 0.5) for m in bit_means)
    verdict(
        unique and uniform and rejected == 1000,
        "criterion 9 identity suite",
        f"{count} identities unique={unique}, worst bit bias {worst_bit:.4f} "
        f"(allowed 0.02), {rejected}/1000 perturbed proofs rejected",
    )
