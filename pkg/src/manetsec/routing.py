"""On-demand route discovery with chained per-hop signatures.

Each node runs one RouterNode. Route requests flood outward collecting hop
records and signatures; replies unicast back along reverse routes and carry
the responder's half of the key exchange. Two verification depths exist:

* level 1 carries the whole hop chain and every receiver unwinds all of it;
* level 0 keeps only the previous hop's binding over the originator
  signature, and only the endpoints check the originator relation.

Unsecured (baseline) nodes run the same message flow with no signatures and
no checks beyond well-formedness; the attack tests rely on that contrast.

Next hops always point at the physical sender of the accepted copy. In
secure mode the claimed last hop record must match that sender, which is
what makes replayed or re-attributed messages detectable.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from . import wire
from .crypto import (
    AggregateSignature,
    DhParams,
    SessionKey,
    derive_seed,
    dh_public,
    dh_shared,
    generate_dh_group,
    is_probable_prime,
    make_dh_params,
    rsa_decrypt,
    rsa_encrypt,
    rsa_sign_first,
    sas_aggregate_step,
    sas_unwind_step,
    sas_unwind_verify,
    RsaKeyPair,
)
from .identity import Registry, UnknownIdentityError, derive_id
from .sim import Network

MAX_CASE2_HOPS = 1


@dataclass
class NodeConfig:
    name: str
    signing: RsaKeyPair
    encryption: RsaKeyPair
    secure: bool = True
    sec_level: int = 1
    master_seed: int = 0
    dh_bits: int = 64
    discovery_timeout: int = 50
    max_discovery_retries: int = 3
    send_queue_limit: int = 16
    # fixed responder exponent, for pinning key-exchange vectors in tests
    responder_secret: Optional[int] = None


@dataclass
class RouteEntry:
    next_hop: str
    distance: int
    seq: int
    bct_id: int
    tick: int


@dataclass
class PendingDiscovery:
    target_ip: str
    bct_id: int
    params: Optional[DhParams]
    start_tick: int
    attempt: int


@dataclass
class FlowState:
    bct_id: int
    toward_src: Optional[str] = None
    toward_dst: Optional[str] = None


class RouterNode:
    def __init__(self, config: NodeConfig, registry: Registry, net: Network):
        self.config = config
        self.registry = registry
        self.net = net
        self.metrics = net.metrics
        self.node_id = derive_id(config.signing.public)
        self.ip = config.name
        self.seq = 0
        self._bct_counter = 0
        self.routes: Dict[bytes, RouteEntry] = {}
        self.pending: Dict[int, PendingDiscovery] = {}
        self.flows: Dict[Tuple[bytes, bytes], FlowState] = {}
        self.seen: set = set()
        self.session_keys: Dict[Tuple[bytes, int], SessionKey] = {}
        self.latest_key: Dict[bytes, int] = {}
        self.received_payloads: List[Tuple[str, bytes]] = []
        self.active_targets: set = set()
        self.send_queue: Dict[str, List[wire.Segment]] = {}
        self.transport = None
        self.rng = random.Random(
            derive_seed(config.master_seed, "node", config.name))
        net.add_node(config.name, self)

    @property
    def sig_mode(self) -> int:
        if self.config.sec_level == 1:
            return wire.MODE_AGGREGATE_FULL
        return wire.MODE_SOURCE_PLUS_LAST

    # --- discovery ----------------------------------------------------------

    def start_discovery(self, dst_ip: str,
                        dh_override: Optional[DhParams] = None,
                        _attempt: int = 1) -> int:
        dest = self.registry.by_ip(dst_ip)
        self.seq += 1
        self._bct_counter += 1
        bct = self._bct_counter
        params = None
        if self.config.secure:
            params = dh_override
            if params is None:
                p, g = generate_dh_group(self.config.dh_bits, self.rng)
                params = make_dh_params(p, g, self.rng)
            if params.p >= dest.encryption_public[0]:
                raise ValueError("exchange group too wide for peer key")
            sealed = rsa_encrypt(dh_public(params), dest.encryption_public)
            core = wire.RouteCore(kind=wire.KIND_RREQ, src_ip=self.ip,
                                  src_id=self.node_id, src_seq=self.seq,
                                  bct_id=bct, dst_ip=dst_ip, dh_p=params.p,
                                  dh_g=params.g, dh_payload=sealed)
        else:
            core = wire.RouteCore(kind=wire.KIND_RREQ, src_ip=self.ip,
                                  src_id=self.node_id, src_seq=self.seq,
                                  bct_id=bct, dst_ip=dst_ip)
        hops, agg, src_sig = self._sign_origin(core)
        msg = wire.RouteMessage(core=core, hops=hops, sig_mode=self.sig_mode,
                                sec_level=self.config.sec_level,
                                aggregate=agg, source_sig=src_sig)
        self.pending[bct] = PendingDiscovery(dst_ip, bct, params,
                                             self.net.tick, _attempt)
        self.active_targets.add(dst_ip)
        self.seen.add(self._seen_key(core))
        self.metrics.discoveries.append(dict(node=self.ip, target=dst_ip,
                                             bct=bct, tick=self.net.tick,
                                             attempt=_attempt))
        self.net.broadcast(self.ip, wire.encode_message(msg))
        self.net.timer(self.config.discovery_timeout, self.ip, "disc", bct)
        return bct

    def session_key_for(self, peer_ip: str) -> Optional[SessionKey]:
        try:
            peer_id = self.registry.by_ip(peer_ip).node_id
        except UnknownIdentityError:
            return None
        bct = self.latest_key.get(peer_id)
        if bct is None:
            return None
        return self.session_keys.get((peer_id, bct))

    # --- signing ------------------------------------------------------------

    def _sign_origin(self, core):
        if not self.config.secure:
            return (), None, None
        h0 = wire.signer_hash(core, (), 0, self.config.signing.public)
        agg = rsa_sign_first(h0, self.config.signing)
        self.metrics.signed += 1
        src_sig = agg.value if self.config.sec_level == 0 else None
        return (), agg, src_sig

    def _sign_forward(self, core, hops, agg, src_sig):
        if not self.config.secure:
            return hops + (self.node_id,), None, None
        if self.config.sec_level == 1:
            new_hops = hops + (self.node_id,)
            h = wire.signer_hash(core, new_hops, len(new_hops),
                                 self.config.signing.public)
            out = sas_aggregate_step(agg, h, self.config.signing)
            self.metrics.signed += 1
            return new_hops, out, None
        # level 0: strip the predecessor, rebind over the origin signature
        base = AggregateSignature(value=src_sig, overflow_bits=(),
                                  signer_count=1)
        new_hops = (self.node_id,)
        h = wire.signer_hash(core, new_hops, 1, self.config.signing.public)
        out = sas_aggregate_step(base, h, self.config.signing)
        self.metrics.signed += 1
        return new_hops, out, src_sig

    # --- verification -------------------------------------------------------

    def _verify(self, msg: wire.RouteMessage, sender: str,
                terminal: bool) -> Optional[str]:
        core = msg.core
        try:
            origin = self.registry.get(core.src_id)
            hop_ids = [self.registry.get(h) for h in msg.hops]
        except UnknownIdentityError:
            return "unknown_identity"
        if not self.config.secure:
            return None
        if (msg.sig_mode != self.sig_mode
                or msg.sec_level != self.config.sec_level):
            return "malformed"
        try:
            sender_id = self.registry.by_ip(sender).node_id
        except UnknownIdentityError:
            return "unknown_identity"
        expected_last = msg.hops[-1] if msg.hops else core.src_id
        if sender_id != expected_last:
            return "id_mismatch"
        agg = msg.aggregate
        if agg is None:
            return "verify_failed"
        if self.config.sec_level == 1:
            if agg.signer_count != len(msg.hops) + 1:
                return "malformed"
            per_signer = [(wire.signer_hash(core, msg.hops, 0,
                                            origin.signing_public),
                           origin.signing_public)]
            for i, ident in enumerate(hop_ids, start=1):
                per_signer.append((wire.signer_hash(core, msg.hops, i,
                                                    ident.signing_public),
                                   ident.signing_public))
            try:
                ok = sas_unwind_verify(agg, per_signer)
            except ValueError:
                return "malformed"
            self.metrics.verified += agg.signer_count
            return None if ok else "verify_failed"
        # level 0
        if msg.source_sig is None:
            return "verify_failed"
        if len(msg.hops) > MAX_CASE2_HOPS:
            return "malformed"
        if agg.signer_count != len(msg.hops) + 1:
            return "malformed"
        if msg.hops:
            last = hop_ids[0]
            n_last = last.signing_public[0]
            if not 0 <= agg.value < n_last:
                return "verify_failed"
            h = wire.signer_hash(core, msg.hops, 1, last.signing_public)
            recovered = sas_unwind_step(agg.value, h, last.signing_public,
                                        agg.overflow_bits[0])
            self.metrics.verified += 1
            if recovered != msg.source_sig:
                return "verify_failed"
        elif agg.value != msg.source_sig:
            return "verify_failed"
        if terminal:
            n0, e0 = origin.signing_public
            if not 0 <= msg.source_sig < n0:
                return "verify_failed"
            h0 = wire.signer_hash(core, (), 0, origin.signing_public)
            self.metrics.verified += 1
            if pow(msg.source_sig, e0, n0) != h0 % n0:
                return "verify_failed"
        return None

    # --- receive path -------------------------------------------------------

    def on_receive(self, sender: str, payload: bytes) -> Optional[str]:
        try:
            msg = wire.decode_message(payload)
        except wire.ParseError:
            return "malformed"
        if isinstance(msg, wire.RouteMessage):
            if msg.core.kind == wire.KIND_RREQ:
                return self._on_rreq(sender, msg)
            if msg.core.kind == wire.KIND_RREP:
                return self._on_rrep(sender, msg)
            return self._on_rerr(sender, msg)
        if isinstance(msg, wire.DataPacket):
            return self._on_data(sender, msg, payload)
        return "malformed"   # bare segments never travel node to node

    def on_timer(self, tag, data) -> None:
        if tag != "disc":
            if self.transport is not None:
                self.transport.on_timer(tag, data)
            return
        pd = self.pending.pop(data, None)
        if pd is None:
            return
        if pd.attempt < self.config.max_discovery_retries:
            self.start_discovery(pd.target_ip, _attempt=pd.attempt + 1)
        else:
            self.active_targets.discard(pd.target_ip)
            self.send_queue.pop(pd.target_ip, None)

    def _seen_key(self, core: wire.RouteCore):
        return (core.kind, core.src_id, core.bct_id, core.src_seq)

    def _on_rreq(self, sender: str, msg: wire.RouteMessage) -> Optional[str]:
        core = msg.core
        if self._seen_key(core) in self.seen:
            return "duplicate"
        terminal = core.dst_ip == self.ip
        reason = self._verify(msg, sender, terminal)
        if reason:
            return reason
        try:
            dst_id = self.registry.by_ip(core.dst_ip).node_id
        except UnknownIdentityError:
            return "unknown_identity"
        self.seen.add(self._seen_key(core))
        self._install(core.src_id, sender, len(msg.hops) + 1, core.src_seq,
                      core.bct_id, via="RREQ")
        flow = self.flows.setdefault((core.src_id, dst_id),
                                     FlowState(bct_id=core.bct_id))
        flow.bct_id = core.bct_id
        flow.toward_src = sender
        if terminal:
            return self._answer_request(core)
        hops, agg, src_sig = self._sign_forward(core, msg.hops,
                                                msg.aggregate, msg.source_sig)
        fwd = wire.RouteMessage(core=core, hops=hops, sig_mode=msg.sig_mode,
                                sec_level=msg.sec_level, aggregate=agg,
                                source_sig=src_sig)
        self.net.broadcast(self.ip, wire.encode_message(fwd))
        return None

    def _answer_request(self, core: wire.RouteCore) -> Optional[str]:
        sealed = 0
        if self.config.secure:
            reason, sealed = self._respond_key_exchange(core)
            if reason:
                return reason
        self.seq += 1
        reply = wire.RouteCore(kind=wire.KIND_RREP, src_ip=self.ip,
                               src_id=self.node_id, src_seq=self.seq,
                               bct_id=core.bct_id, dst_ip=core.src_ip,
                               dst_seq=core.src_seq, dh_payload=sealed)
        hops, agg, src_sig = self._sign_origin(reply)
        msg = wire.RouteMessage(core=reply, hops=hops, sig_mode=self.sig_mode,
                                sec_level=self.config.sec_level,
                                aggregate=agg, source_sig=src_sig)
        self.seen.add(self._seen_key(reply))
        route = self.routes.get(core.src_id)
        if route is not None:
            self.net.unicast(self.ip, route.next_hop,
                             wire.encode_message(msg))
        return None

    def _respond_key_exchange(self, core) -> Tuple[Optional[str], int]:
        p, g = core.dh_p, core.dh_g
        if p < 7 or p % 2 == 0 or not 2 <= g <= p - 2:
            return "malformed", 0
        if not is_probable_prime(p):
            return "malformed", 0
        try:
            origin = self.registry.get(core.src_id)
            theirs = rsa_decrypt(core.dh_payload, self.config.encryption)
        except (UnknownIdentityError, ValueError):
            return "malformed", 0
        if not 0 < theirs < p:
            return "malformed", 0
        if p >= origin.encryption_public[0]:
            return "malformed", 0
        secret = self.config.responder_secret
        if secret is None:
            secret = self.rng.randrange(2, p - 1)
        params = DhParams(p=p, g=g, r=secret)
        key = dh_shared(theirs, params)
        self._store_key(core.src_id, core.bct_id, key)
        sealed = rsa_encrypt(dh_public(params), origin.encryption_public)
        return None, sealed

    def _store_key(self, peer_id: bytes, bct: int, key: SessionKey,
                   initiated: bool = False) -> None:
        self.session_keys[(peer_id, bct)] = key
        self.latest_key[peer_id] = bct
        self.metrics.session_key_records.append(dict(
            node=self.ip, peer=peer_id.hex(), bct=bct, key=key.value,
            initiated=initiated, tick=self.net.tick))

    def _on_rrep(self, sender: str, msg: wire.RouteMessage) -> Optional[str]:
        core = msg.core
        if self._seen_key(core) in self.seen:
            return "duplicate"
        terminal = core.dst_ip == self.ip
        reason = self._verify(msg, sender, terminal)
        if reason:
            return reason
        try:
            src_node_id = self.registry.by_ip(core.dst_ip).node_id
        except UnknownIdentityError:
            return "unknown_identity"
        if terminal:
            pd = self.pending.get(core.bct_id)
            if pd is None or self.registry.get(core.src_id).ip != pd.target_ip:
                return "no_pending"
            if self.config.secure:
                reason = self._finish_key_exchange(core, pd)
                if reason:
                    return reason
            self.seen.add(self._seen_key(core))
            self._install(core.src_id, sender, len(msg.hops) + 1,
                          core.src_seq, core.bct_id, via="RREP")
            flow = self.flows.setdefault((src_node_id, core.src_id),
                                         FlowState(bct_id=core.bct_id))
            flow.toward_dst = sender
            del self.pending[core.bct_id]
            self.metrics.discovery_latency_ticks.append(
                self.net.tick - pd.start_tick)
            self._flush_queue(pd.target_ip)
            return None
        self.seen.add(self._seen_key(core))
        self._install(core.src_id, sender, len(msg.hops) + 1, core.src_seq,
                      core.bct_id, via="RREP")
        flow = self.flows.setdefault((src_node_id, core.src_id),
                                     FlowState(bct_id=core.bct_id))
        flow.toward_dst = sender
        route = self.routes.get(src_node_id)
        if route is None:
            return "no_route"
        hops, agg, src_sig = self._sign_forward(core, msg.hops,
                                                msg.aggregate, msg.source_sig)
        fwd = wire.RouteMessage(core=core, hops=hops, sig_mode=msg.sig_mode,
                                sec_level=msg.sec_level, aggregate=agg,
                                source_sig=src_sig)
        self.net.unicast(self.ip, route.next_hop, wire.encode_message(fwd))
        return None

    def _finish_key_exchange(self, core, pd: PendingDiscovery) -> Optional[str]:
        try:
            theirs = rsa_decrypt(core.dh_payload, self.config.encryption)
        except ValueError:
            return "malformed"
        if pd.params is None or not 0 < theirs < pd.params.p:
            return "malformed"
        self._store_key(core.src_id, core.bct_id, dh_shared(theirs, pd.params),
                        initiated=True)
        return None

    def _on_rerr(self, sender: str, msg: wire.RouteMessage) -> Optional[str]:
        core = msg.core
        if self._seen_key(core) in self.seen:
            return "duplicate"
        terminal = core.dst_ip == self.ip
        reason = self._verify(msg, sender, terminal)
        if reason:
            return reason
        if len(core.originator_id) != 32:
            return "malformed"
        try:
            src_node_id = self.registry.by_ip(core.dst_ip).node_id
            unreachable = self.registry.get(core.originator_id)
        except UnknownIdentityError:
            return "unknown_identity"
        flow = self.flows.get((src_node_id, core.originator_id))
        if self.config.secure:
            if flow is None or flow.toward_dst != sender:
                return "id_mismatch"
        elif flow is None and core.originator_id not in self.routes:
            return "no_route"
        self.seen.add(self._seen_key(core))
        self.metrics.rerr_accepted.append(dict(
            node=self.ip, reporter=core.src_id.hex(),
            unreachable=core.originator_id.hex(), tick=self.net.tick))
        self.routes.pop(core.originator_id, None)
        if flow is not None:
            flow.toward_dst = None
        if terminal:
            if unreachable.ip in self.active_targets:
                self.start_discovery(unreachable.ip)
            return None
        hops, agg, src_sig = self._sign_forward(core, msg.hops,
                                                msg.aggregate, msg.source_sig)
        fwd = wire.RouteMessage(core=core, hops=hops, sig_mode=msg.sig_mode,
                                sec_level=msg.sec_level, aggregate=agg,
                                source_sig=src_sig)
        target = flow.toward_src if flow is not None else None
        if target is None:
            route = self.routes.get(src_node_id)
            target = route.next_hop if route else None
        if target is not None:
            self.net.unicast(self.ip, target, wire.encode_message(fwd))
        return None

    def _report_break(self, src_node_id: bytes, dst_node_id: bytes) -> None:
        flow = self.flows.get((src_node_id, dst_node_id))
        self.routes.pop(dst_node_id, None)
        src = self.registry.get(src_node_id)
        self.seq += 1
        core = wire.RouteCore(kind=wire.KIND_RERR, src_ip=self.ip,
                              src_id=self.node_id, src_seq=self.seq,
                              bct_id=flow.bct_id if flow else 0,
                              dst_ip=src.ip, originator_id=dst_node_id)
        hops, agg, src_sig = self._sign_origin(core)
        msg = wire.RouteMessage(core=core, hops=hops, sig_mode=self.sig_mode,
                                sec_level=self.config.sec_level,
                                aggregate=agg, source_sig=src_sig)
        self.seen.add(self._seen_key(core))
        self.metrics.rerr_sent += 1
        if flow is not None and flow.toward_src is not None:
            self.net.unicast(self.ip, flow.toward_src,
                             wire.encode_message(msg))

    # --- data path ----------------------------------------------------------

    def send_payload(self, dst_ip: str, data: bytes) -> None:
        seg = wire.Segment(role=wire.ROLE_DATA, src_port=0, dst_port=0,
                           seq=0, ack=0, payload=data, tag=b"\x00" * 32)
        self.send_segment(dst_ip, seg)

    def send_segment(self, dst_ip: str, seg: wire.Segment) -> None:
        try:
            dst_id = self.registry.by_ip(dst_ip).node_id
        except UnknownIdentityError:
            return
        route = self.routes.get(dst_id)
        if route is None:
            queue = self.send_queue.setdefault(dst_ip, [])
            if len(queue) >= self.config.send_queue_limit:
                queue.pop(0)
            queue.append(seg)
            if not any(pd.target_ip == dst_ip for pd in self.pending.values()):
                self.start_discovery(dst_ip)
            return
        pkt = wire.DataPacket(src_ip=self.ip, dst_ip=dst_ip, segment=seg)
        if not self.net.unicast(self.ip, route.next_hop,
                                wire.encode_message(pkt)):
            # next hop gone: forget the route, retry through a fresh discovery
            self.routes.pop(dst_id, None)
            self.send_segment(dst_ip, seg)

    def _flush_queue(self, dst_ip: str) -> None:
        for seg in self.send_queue.pop(dst_ip, []):
            self.send_segment(dst_ip, seg)

    def _on_data(self, sender: str, pkt: wire.DataPacket,
                 raw: bytes) -> Optional[str]:
        if pkt.dst_ip == self.ip:
            self.received_payloads.append((pkt.src_ip, pkt.segment.payload))
            if self.transport is not None:
                return self.transport.on_segment(pkt.src_ip, pkt.segment)
            return None
        try:
            dst_id = self.registry.by_ip(pkt.dst_ip).node_id
        except UnknownIdentityError:
            return "no_route"
        route = self.routes.get(dst_id)
        if route is None:
            return "no_route"
        if not self.net.unicast(self.ip, route.next_hop, raw):
            try:
                src_id = self.registry.by_ip(pkt.src_ip).node_id
            except UnknownIdentityError:
                self.routes.pop(dst_id, None)
                return None
            self._report_break(src_id, dst_id)
        return None

    # --- route table --------------------------------------------------------

    def _install(self, dst_id: bytes, next_hop: str, distance: int, seq: int,
                 bct: int, via: str) -> None:
        if dst_id == self.node_id:
            return
        old = self.routes.get(dst_id)
        if old is not None and (old.seq > seq or
                                (old.seq == seq and old.distance <= distance)):
            return
        self.routes[dst_id] = RouteEntry(next_hop=next_hop, distance=distance,
                                         seq=seq, bct_id=bct,
                                         tick=self.net.tick)
        self.metrics.routes_installed += 1
        self.metrics.route_installs.append(dict(
            node=self.ip, dst=dst_id.hex(), next_hop=next_hop,
            distance=distance, seq=seq, via=via, tick=self.net.tick))
