"""GossipSub-style mesh delivery.

Each connected session is a peer. Peers learn each other's subscriptions,
keep a per-topic mesh of roughly ``d`` subscribed neighbours, push full
messages along the mesh and, on every heartbeat, advertise recently seen
message ids (IHAVE) to a few non-mesh subscribers, which pull what they lack
(IWANT). All control traffic travels over the same latency-modelled links.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from ..sim import NS_PER_MS, Network, Scheduler
from .base import DeliveryService, Envelope, Session
from .directory import DhtDirectory


@dataclass(frozen=True)
class GossipParams:
    d: int = 4
    d_low: int = 2
    d_high: int = 8
    d_lazy: int = 4
    heartbeat_ms: float = 1000.0
    history_length: int = 5
    history_gossip: int = 3
    dht_replicas: int = 3


@dataclass(frozen=True)
class Control:
    kind: str  # SUB, UNSUB, GRAFT, PRUNE, IHAVE, IWANT
    src: str
    dst: str
    topic: str = ""
    ids: tuple[str, ...] = ()


@dataclass
class Peer:
    peer_id: str
    session: Session
    rng: random.Random
    known_subs: dict[str, set[str]] = field(default_factory=dict)
    mesh: dict[str, set[str]] = field(default_factory=dict)
    fanout: dict[str, set[str]] = field(default_factory=dict)
    seen: set[str] = field(default_factory=set)
    mcache: dict[str, Envelope] = field(default_factory=dict)
    windows: list[list[str]] = field(default_factory=lambda: [[]])
    duplicates: int = 0
    running: bool = True

    def subscribers(self, topic: str) -> set[str]:
        return self.known_subs.get(topic, set())


class GossipDS(DeliveryService):
    kind = "gossipsub"
    arbitration = "gossip"

    def __init__(self, scheduler: Scheduler, network: Network | None = None,
                 params: GossipParams | None = None, seed: int = 0):
        super().__init__(scheduler, network)
        self.params = params or GossipParams()
        self.peers: dict[str, Peer] = {}
        self._seed = seed
        self.directory = DhtDirectory(lambda: sorted(self.peers), self.params.dht_replicas)
        self.control_sent = 0

    @property
    def heartbeat_ns(self) -> int:
        return int(self.params.heartbeat_ms * NS_PER_MS)

    @property
    def confirmation_window_ns(self) -> int:
        return 2 * self.heartbeat_ns

    # -- membership of the overlay ------------------------------------------

    def _on_connect(self, session: Session) -> None:
        pid = session.user_id
        rng = random.Random(f"{self._seed}/{pid}")
        peer = Peer(pid, session, rng)
        for other in self.peers.values():
            for topic, subs in other.known_subs.items():
                if other.peer_id in subs:
                    peer.known_subs.setdefault(topic, set()).add(other.peer_id)
        self.peers[pid] = peer
        self.directory.add_peer(pid)
        offset = rng.randrange(self.heartbeat_ns) if self.heartbeat_ns else 0
        self.scheduler.after(offset, self._heartbeat_tick, peer)

    def _on_disconnect(self, session: Session) -> None:
        peer = self.peers.pop(session.user_id, None)
        if peer is not None:
            peer.running = False
            self.directory.drop_peer(peer.peer_id)
            for other in self.peers.values():
                for subs in other.known_subs.values():
                    subs.discard(peer.peer_id)
                for mesh in other.mesh.values():
                    mesh.discard(peer.peer_id)

    # -- wire ------------------------------------------------------------

    def _send(self, ctl: Control) -> None:
        self.control_sent += 1
        delay = self.network.latency_ns(ctl.src, ctl.dst)
        self.scheduler.after(delay, self._on_control, ctl)

    def _send_message(self, src: str, dst: str, env: Envelope) -> None:
        delay = self.network.latency_ns(src, dst)
        self.scheduler.after(delay, self._on_message, src, dst, env)

    # -- subscriptions ---------------------------------------------------

    def subscribe(self, session: Session, topic: str) -> None:
        with self._lock:
            self._require(session)
            if topic in session.subscriptions:
                return
            session.subscriptions.add(topic)
            peer = self.peers[session.user_id]
            peer.known_subs.setdefault(topic, set()).add(peer.peer_id)
            for other in sorted(self.peers):
                if other != peer.peer_id:
                    self._send(Control("SUB", peer.peer_id, other, topic))
            candidates = sorted(peer.fanout.pop(topic, set()) | (peer.subscribers(topic) - {peer.peer_id}))
            peer.rng.shuffle(candidates)
            mesh = peer.mesh.setdefault(topic, set())
            for other in candidates[: self.params.d]:
                mesh.add(other)
                self._send(Control("GRAFT", peer.peer_id, other, topic))

    def unsubscribe(self, session: Session, topic: str) -> None:
        with self._lock:
            if topic not in session.subscriptions:
                return
            session.subscriptions.discard(topic)
            peer = self.peers.get(session.user_id)
            if peer is None:
                return
            peer.known_subs.get(topic, set()).discard(peer.peer_id)
            for other in sorted(peer.mesh.pop(topic, set())):
                self._send(Control("PRUNE", peer.peer_id, other, topic))
            for other in sorted(self.peers):
                if other != peer.peer_id:
                    self._send(Control("UNSUB", peer.peer_id, other, topic))

    # -- publishing ------------------------------------------------------

    def publish(self, session: Session, topic: str, payload: bytes) -> Envelope:
        with self._lock:
            self._require(session)
            env = self._envelope(session, topic, payload)
            peer = self.peers[session.user_id]
            self._remember(peer, env)
            if topic in session.subscriptions:
                # local echo so the publisher observes its own message
                self.scheduler.after(0, self._deliver, session, env)
                targets = set(peer.mesh.get(topic, set()))
                if not targets:
                    targets = self._pick(peer, peer.subscribers(topic) - {peer.peer_id}, self.params.d)
            else:
                fan = peer.fanout.get(topic, set()) & peer.subscribers(topic)
                if len(fan) < self.params.d:
                    extra = self._pick(peer, peer.subscribers(topic) - fan - {peer.peer_id},
                                       self.params.d - len(fan))
                    fan |= extra
                peer.fanout[topic] = fan
                targets = fan
            for dst in sorted(targets):
                self._send_message(peer.peer_id, dst, env)
            return env

    def _pick(self, peer: Peer, pool: set[str], k: int) -> set[str]:
        items = sorted(pool)
        peer.rng.shuffle(items)
        return set(items[:max(0, k)])

    def _remember(self, peer: Peer, env: Envelope) -> None:
        peer.seen.add(env.message_id)
        peer.mcache[env.message_id] = env
        peer.windows[0].append(env.message_id)

    def _on_message(self, src: str, dst: str, env: Envelope) -> None:
        peer = self.peers.get(dst)
        if peer is None or not peer.running:
            return
        if env.message_id in peer.seen:
            peer.duplicates += 1
            return
        self._remember(peer, env)
        self._deliver(peer.session, env)
        for nxt in sorted(peer.mesh.get(env.topic, set()) - {src, env.sender}):
            self._send_message(dst, nxt, env)

    # -- control ---------------------------------------------------------

    def _on_control(self, ctl: Control) -> None:
        peer = self.peers.get(ctl.dst)
        if peer is None or not peer.running:
            return
        if ctl.kind == "SUB":
            peer.known_subs.setdefault(ctl.topic, set()).add(ctl.src)
        elif ctl.kind == "UNSUB":
            peer.known_subs.get(ctl.topic, set()).discard(ctl.src)
            peer.mesh.get(ctl.topic, set()).discard(ctl.src)
        elif ctl.kind == "GRAFT":
            if ctl.topic in peer.session.subscriptions:
                peer.mesh.setdefault(ctl.topic, set()).add(ctl.src)
                peer.known_subs.setdefault(ctl.topic, set()).add(ctl.src)
            else:
                self._send(Control("PRUNE", peer.peer_id, ctl.src, ctl.topic))
        elif ctl.kind == "PRUNE":
            peer.mesh.get(ctl.topic, set()).discard(ctl.src)
        elif ctl.kind == "IHAVE":
            wanted = tuple(i for i in ctl.ids if i not in peer.seen)
            if wanted and ctl.topic in peer.session.subscriptions:
                self._send(Control("IWANT", peer.peer_id, ctl.src, ctl.topic, wanted))
        elif ctl.kind == "IWANT":
            for mid in ctl.ids:
                env = peer.mcache.get(mid)
                if env is not None:
                    self._send_message(peer.peer_id, ctl.src, env)

    # -- heartbeat -------------------------------------------------------

    def _heartbeat_tick(self, peer: Peer) -> None:
        if not peer.running:
            return
        self.gossip_heartbeat(peer.peer_id)
        self.scheduler.after(self.heartbeat_ns, self._heartbeat_tick, peer)

    def gossip_heartbeat(self, peer_id: str) -> list[Control]:
        """Mesh maintenance plus IHAVE gossip; returns the control messages sent."""
        p = self.params
        peer = self.peers[peer_id]
        out: list[Control] = []
        for topic in sorted(peer.session.subscriptions):
            subs = peer.subscribers(topic) - {peer_id}
            mesh = peer.mesh.setdefault(topic, set())
            mesh &= subs
            if len(mesh) < p.d_low:
                for other in sorted(self._pick(peer, subs - mesh, p.d - len(mesh))):
                    mesh.add(other)
                    out.append(Control("GRAFT", peer_id, other, topic))
            elif len(mesh) > p.d_high:
                drop = self._pick(peer, set(mesh), len(mesh) - p.d)
                for other in sorted(drop):
                    mesh.discard(other)
                    out.append(Control("PRUNE", peer_id, other, topic))
        recent: dict[str, list[str]] = {}
        for window in peer.windows[: p.history_gossip]:
            for mid in window:
                env = peer.mcache.get(mid)
                if env is not None:
                    recent.setdefault(env.topic, []).append(mid)
        for topic in sorted(recent):
            pool = peer.subscribers(topic) - peer.mesh.get(topic, set()) - {peer_id}
            for other in sorted(self._pick(peer, pool, p.d_lazy)):
                out.append(Control("IHAVE", peer_id, other, topic, tuple(recent[topic])))
        # shift the message cache
        peer.windows.insert(0, [])
        while len(peer.windows) > p.history_length:
            for mid in peer.windows.pop():
                peer.mcache.pop(mid, None)
        for ctl in out:
            self._send(ctl)
        return out

    def mesh_degrees(self, topic: str) -> dict[str, int]:
        return {pid: len(peer.mesh.get(topic, ())) for pid, peer in self.peers.items()
                if topic in peer.session.subscriptions}
