"""Adversary node behaviors and the attack-outcome oracle.

Each attack kind is an insider behavior: the adversary holds registered keys
and full knowledge of the protocol, but not other nodes' private keys or
session keys. The judge classifies a finished run:

* succeeded   - the kind-specific harm state was reached;
* detected    - no harm, and receivers dropped traffic for reasons that
                identify this kind of tampering;
* neutralized - no harm and no such drops (the attack simply had no grip,
                e.g. a relay wormhole that secure nodes treat as ordinary
                duplicates, or a flood against a stateless listener).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, Optional, Tuple

from . import wire
from .crypto import (
    AggregateSignature,
    digest,
    rsa_encrypt,
    rsa_sign_first,
    sas_aggregate_step,
    RsaKeyPair,
)
from .identity import Registry, derive_id
from .sim import Network
from .transport import CLIENT_ISN_BASE, MASK

ATTACK_KINDS = ("seq_inflate", "hop_shorten", "redirect", "tunnel",
                "impersonate", "fake_rerr", "syn_flood", "session_hijack",
                "ack_inject")

# Drop reasons that count as recognizing each attack. Empty sets mean the
# defense works by denying the attack any effect rather than by flagging
# packets, so a clean run is judged neutralized.
DETECTION: Dict[str, Tuple[str, ...]] = {
    "seq_inflate": ("verify_failed",),
    "hop_shorten": ("verify_failed", "malformed"),
    "redirect": ("verify_failed", "id_mismatch"),
    "impersonate": ("verify_failed", "id_mismatch"),
    "fake_rerr": ("verify_failed", "id_mismatch"),
    "session_hijack": ("tag_mismatch",),
    "ack_inject": ("tag_mismatch",),
    "tunnel": (),
    "syn_flood": (),
}


@dataclass
class AttackSpec:
    kind: str
    attacker: str
    partner: Optional[str] = None    # second wormhole endpoint
    src: Optional[str] = None        # victim flow source / impersonated node
    dst: Optional[str] = None        # victim flow destination / server
    through: Optional[str] = None    # on-path node a forged report names
    start: int = 1
    sec_level: int = 1
    client_port: int = 5000
    server_port: int = 80
    rate: int = 50
    duration: int = 5
    capacity: int = 8
    marker: bytes = b"HIJACKED"
    inflate_to: int = 900000
    max_distance: int = 2
    expected_payload: bytes = b""


class AttackerNode:
    """Sim handler enacting one AttackSpec. Never installs routes or keys."""

    def __init__(self, name: str, signing: RsaKeyPair, registry: Registry,
                 net: Network, spec: AttackSpec):
        self.ip = name
        self.signing = signing
        self.node_id = derive_id(signing.public)
        self.registry = registry
        self.net = net
        self.spec = spec
        self._seen = set()
        self._fired = False
        self._ghost = 0
        net.add_node(name, self)
        if spec.kind == "syn_flood":
            net.timer(spec.start, name, "atk", ("flood", spec.duration))
        elif spec.kind in ("impersonate", "fake_rerr", "session_hijack",
                           "ack_inject"):
            net.timer(spec.start, name, "atk", ("fire", None))

    @property
    def sig_mode(self) -> int:
        if self.spec.sec_level == 1:
            return wire.MODE_AGGREGATE_FULL
        return wire.MODE_SOURCE_PLUS_LAST

    # --- sim handler interface ----------------------------------------------

    def on_receive(self, sender: str, payload: bytes) -> Optional[str]:
        kind = self.spec.kind
        if kind == "tunnel":
            self._relay(sender, payload)
            return None
        if kind in ("seq_inflate", "hop_shorten", "redirect"):
            try:
                msg = wire.decode_message(payload)
            except wire.ParseError:
                return None
            if isinstance(msg, wire.RouteMessage):
                self._handle_route(sender, msg)
        return None

    def on_timer(self, tag, data) -> None:
        if tag != "atk":
            return
        what, detail = data
        if what == "flood":
            self._flood_burst()
            if detail > 1:
                self.net.timer(1, self.ip, "atk", ("flood", detail - 1))
        elif not self._fired:
            self._fired = True
            fire = getattr(self, "_fire_" + self.spec.kind)
            fire()

    # --- wormhole relay -------------------------------------------------------

    def _relay(self, sender: str, payload: bytes) -> None:
        if sender == self.spec.partner:
            self.net.broadcast(self.ip, payload)
            return
        frame = digest(payload)
        if frame in self._seen:
            return
        self._seen.add(frame)
        self.net.tunnel_send(self.ip, self.spec.partner, payload)

    # --- on-path tampering ------------------------------------------------------

    def _handle_route(self, sender: str, msg: wire.RouteMessage) -> None:
        core = msg.core
        key = (core.kind, core.src_id, core.bct_id)
        if key in self._seen:
            return
        self._seen.add(key)
        if self.spec.kind == "redirect":
            if (core.kind == wire.KIND_RREQ and core.dst_ip == self.spec.dst
                    and not self._fired):
                self._fired = True
                self._forge_reply(sender, core)
            return
        if core.kind == wire.KIND_RREQ:
            if self.spec.kind == "seq_inflate":
                self._forward_inflated(msg)
            else:
                self._forward_shortened(msg)
        elif core.kind == wire.KIND_RREP:
            self._forward_as_is(msg)

    def _append_self(self, core, hops, agg):
        new_hops = hops + (self.node_id,)
        if agg is None:
            return new_hops, None
        h = wire.signer_hash(core, new_hops, len(new_hops),
                             self.signing.public)
        return new_hops, sas_aggregate_step(agg, h, self.signing)

    def _forward_inflated(self, msg: wire.RouteMessage) -> None:
        core = replace(msg.core, src_seq=self.spec.inflate_to)
        hops, agg = self._append_self(core, msg.hops, msg.aggregate)
        self._broadcast_route(core, hops, agg, msg.source_sig)

    def _forward_shortened(self, msg: wire.RouteMessage) -> None:
        # pretend the chain so far is a bare origin signature and that the
        # request arrived straight from the source
        agg = msg.aggregate
        if agg is not None:
            agg = AggregateSignature(value=agg.value, overflow_bits=(),
                                     signer_count=1)
        hops, agg = self._append_self(msg.core, (), agg)
        self._broadcast_route(msg.core, hops, agg, msg.source_sig)

    def _forward_as_is(self, msg: wire.RouteMessage) -> None:
        hops, agg = self._append_self(msg.core, msg.hops, msg.aggregate)
        self._broadcast_route(msg.core, hops, agg, msg.source_sig)

    def _forge_reply(self, victim: str, req: wire.RouteCore) -> None:
        target = self.registry.by_ip(self.spec.dst)
        core = wire.RouteCore(kind=wire.KIND_RREP, src_ip=self.spec.dst,
                              src_id=target.node_id,
                              src_seq=self.spec.inflate_to,
                              bct_id=req.bct_id, dst_ip=req.src_ip,
                              dst_seq=req.src_seq, dh_payload=0)
        hops, agg, src_sig = self._forge_chain(core, target.signing_public)
        msg = wire.RouteMessage(core=core, hops=hops, sig_mode=self.sig_mode,
                                sec_level=self.spec.sec_level, aggregate=agg,
                                source_sig=src_sig)
        self.net.unicast(self.ip, victim, wire.encode_message(msg))

    def _forge_chain(self, core, claimed_public):
        """Chain that claims another node's origin; its first link is fake."""
        hops = (self.node_id,)
        fake = rsa_sign_first(wire.signer_hash(core, hops, 0, claimed_public),
                              self.signing)
        h = wire.signer_hash(core, hops, 1, self.signing.public)
        agg = sas_aggregate_step(fake, h, self.signing)
        src_sig = fake.value if self.spec.sec_level == 0 else None
        return hops, agg, src_sig

    def _broadcast_route(self, core, hops, agg, src_sig) -> None:
        msg = wire.RouteMessage(core=core, hops=hops, sig_mode=self.sig_mode,
                                sec_level=self.spec.sec_level, aggregate=agg,
                                source_sig=src_sig)
        self.net.broadcast(self.ip, wire.encode_message(msg))

    # --- one-shot forgeries -------------------------------------------------------

    def _fire_impersonate(self) -> None:
        claimed = self.registry.by_ip(self.spec.src)
        target = self.registry.by_ip(self.spec.dst)
        sealed = rsa_encrypt(8, target.encryption_public)
        core = wire.RouteCore(kind=wire.KIND_RREQ, src_ip=self.spec.src,
                              src_id=claimed.node_id, src_seq=50, bct_id=7700,
                              dst_ip=self.spec.dst, dh_p=23, dh_g=5,
                              dh_payload=sealed)
        hops, agg, src_sig = self._forge_chain(core, claimed.signing_public)
        self._broadcast_route(core, hops, agg, src_sig)

    def _fire_fake_rerr(self) -> None:
        reporter = self.registry.by_ip(self.spec.through)
        unreachable = self.registry.by_ip(self.spec.dst)
        core = wire.RouteCore(kind=wire.KIND_RERR, src_ip=self.spec.through,
                              src_id=reporter.node_id, src_seq=7777, bct_id=0,
                              dst_ip=self.spec.src,
                              originator_id=unreachable.node_id)
        fake = rsa_sign_first(
            wire.signer_hash(core, (), 0, reporter.signing_public),
            self.signing)
        src_sig = fake.value if self.spec.sec_level == 0 else None
        msg = wire.RouteMessage(core=core, hops=(), sig_mode=self.sig_mode,
                                sec_level=self.spec.sec_level, aggregate=fake,
                                source_sig=src_sig)
        self.net.unicast(self.ip, self.spec.through, wire.encode_message(msg))

    def _fire_session_hijack(self) -> None:
        seq = (CLIENT_ISN_BASE + 1) & MASK    # first connection, no data yet
        seg = wire.Segment(role=wire.ROLE_DATA,
                           src_port=self.spec.client_port,
                           dst_port=self.spec.server_port, seq=seq, ack=0,
                           payload=self.spec.marker, tag=b"\x00" * 32)
        pkt = wire.DataPacket(src_ip=self.spec.src, dst_ip=self.spec.dst,
                              segment=seg)
        self.net.unicast(self.ip, self.spec.dst, wire.encode_message(pkt))

    def _fire_ack_inject(self) -> None:
        # race the real responder with a forged second handshake segment
        seg = wire.Segment(role=wire.ROLE_SYN_ACK,
                           src_port=self.spec.server_port,
                           dst_port=self.spec.client_port, seq=555000,
                           ack=(CLIENT_ISN_BASE + 1) & MASK, payload=b"",
                           tag=b"\x00" * 32)
        pkt = wire.DataPacket(src_ip=self.spec.dst, dst_ip=self.spec.src,
                              segment=seg)
        self.net.unicast(self.ip, self.spec.src, wire.encode_message(pkt))

    def _flood_burst(self) -> None:
        for _ in range(self.spec.rate):
            n = self._ghost
            self._ghost += 1
            seg = wire.Segment(role=wire.ROLE_SYN, src_port=40000 + n,
                               dst_port=self.spec.server_port,
                               seq=(7919 * n) & MASK, ack=0, payload=b"",
                               tag=b"\x5a" * 32)
            pkt = wire.DataPacket(src_ip="ghost%d" % n, dst_ip=self.spec.dst,
                                  segment=seg)
            self.net.unicast(self.ip, self.spec.dst,
                             wire.encode_message(pkt))


def deploy(spec: AttackSpec, signing_keys: Dict[str, RsaKeyPair],
           registry: Registry, net: Network):
    """Instantiate the attacker node(s) an AttackSpec calls for."""
    nodes = [AttackerNode(spec.attacker, signing_keys[spec.attacker],
                          registry, net, spec)]
    if spec.kind == "tunnel":
        mirrored = replace(spec, attacker=spec.partner,
                           partner=spec.attacker)
        nodes.append(AttackerNode(spec.partner,
                                  signing_keys[spec.partner], registry, net,
                                  mirrored))
    return nodes


# --- outcome oracle -----------------------------------------------------------

def judge(spec: AttackSpec, metrics, registry: Registry) -> str:
    if _harm(spec, metrics, registry):
        return "succeeded"
    if any(metrics.drops.get(r, 0) for r in DETECTION[spec.kind]):
        return "detected"
    return "neutralized"


def _id_hex(registry: Registry, ip: str) -> str:
    return registry.by_ip(ip).node_id.hex()


def _harm(spec: AttackSpec, metrics, registry: Registry) -> bool:
    kind = spec.kind
    installs = metrics.route_installs
    if kind == "seq_inflate":
        return any(i["seq"] >= spec.inflate_to and i["node"] != spec.attacker
                   for i in installs)
    if kind == "hop_shorten":
        origin = _id_hex(registry, spec.src)
        return any(i["node"] == spec.dst and i["dst"] == origin
                   and i["distance"] <= spec.max_distance for i in installs)
    if kind == "redirect":
        target = _id_hex(registry, spec.dst)
        return any(i["node"] == spec.src and i["dst"] == target
                   and i["next_hop"] == spec.attacker for i in installs)
    if kind == "tunnel":
        colluders = {spec.attacker, spec.partner}
        s_hex = _id_hex(registry, spec.src)
        d_hex = _id_hex(registry, spec.dst)
        return any(
            (i["node"] == spec.src and i["dst"] == d_hex
             and i["next_hop"] in colluders)
            or (i["node"] == spec.dst and i["dst"] == s_hex
                and i["next_hop"] in colluders)
            for i in installs)
    if kind == "impersonate":
        claimed = _id_hex(registry, spec.src)
        return any(i["node"] == spec.dst and i["dst"] == claimed
                   and i["next_hop"] == spec.attacker for i in installs)
    if kind == "fake_rerr":
        return any(r["node"] == spec.src for r in metrics.rerr_accepted)
    if kind == "syn_flood":
        return metrics.peak_half_open >= spec.capacity
    if kind == "session_hijack":
        return any(spec.marker in v
                   for v in metrics.delivered_payloads.values())
    if kind == "ack_inject":
        got = metrics.delivered_payloads.get(
            (spec.dst, spec.src, spec.server_port, spec.client_port), b"")
        return got != spec.expected_payload
    raise ValueError("unknown attack kind %r" % kind)
