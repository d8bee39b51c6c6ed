"""Simulated MLS client.

A :class:`Client` is an actor driven by the shared scheduler. Each wake-up
(:meth:`Client.step`) draws its actions from the client's own seeded RNG;
everything else happens in :meth:`Client.handle_incoming` as envelopes
arrive. Clients only talk to each other through the Delivery Service.

Commit races are settled per epoch: every commit seen for the current epoch
is a candidate and :func:`~mlstestbed.delivery.epoch_winner` picks the one to
apply, either at once (broker) or after the hub's confirmation window
(gossip). A committer merges its own commit only when it wins, and only then
logs it, sends Welcomes and refreshes the GroupInfo.
"""

from __future__ import annotations

import random
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

from .. import codec
from ..crypto import CryptoError, CryptoProvider
from ..delivery import (
    DeliveryService,
    Envelope,
    NotFound,
    epoch_winner,
    group_topic,
    welcome_topic,
)
from ..group import (
    CommitResult,
    GroupError,
    GroupState,
    KeyPackageSecrets,
    create_commit,
    create_group,
    export_group_info,
    external_commit,
    make_update,
    merge_pending,
    new_key_package,
    open_application,
    process_commit,
    process_welcome,
    propose,
    seal_application,
    verify_proposal,
)
from ..messages import (
    TAG_APPLICATION,
    TAG_HANDSHAKE,
    TAG_WELCOME,
    Add,
    ApplicationMessage,
    GroupInfo,
    HandshakeMessage,
    KeyPackage,
    Proposal,
    Remove,
    Update,
    Welcome,
    message_kind,
)
from ..metrics.log import NO_COUNTERPART, LogRecord, LogSink
from ..sim import NS_PER_MS, Scheduler
from ..tree import RatchetTree
from .config import ClientConfig
from .policy import UpdaterPolicy, policy_allows


class ClientError(Exception):
    pass


class NoKeyPackageAvailable(ClientError):
    pass


class PolicyDenied(ClientError):
    pass


class EmptyGroup(ClientError):
    pass


class Busy(ClientError):
    """A commit for the current epoch is already in flight."""


class GrowthPaused(ClientError):
    """The staged ramp-up holds the group at its current size."""


MODIFICATIONS = ("invite", "remove", "update")
_DECODE_ERRORS = (codec.DecodeError, ValueError)
_BUFFER_LIMIT = 4096


class CostClock:
    """Measures the compute cost of one operation in microseconds.

    ``cpu`` reads the process CPU clock. ``model`` sums nominal per-primitive
    weights from the client's crypto meter and is fully deterministic.
    """

    KINDS = ("cpu", "model")

    def __init__(self, kind: str, crypto: CryptoProvider):
        if kind not in self.KINDS:
            raise ValueError(f"cost clock must be one of {self.KINDS}")
        self.kind = kind
        self.crypto = crypto

    def measure(self, fn: Callable, *args, **kwargs):
        if self.kind == "model":
            before = self.crypto.meter.total_us
            result = fn(*args, **kwargs)
            return result, int(round(self.crypto.meter.total_us - before))
        before = time.process_time_ns()
        result = fn(*args, **kwargs)
        return result, (time.process_time_ns() - before) // 1000


class Ramp:
    """Staged ramp-up: groups grow to each stage size, then hold there.

    While a group sits at its stage size further growth is paused until
    ``samples`` winning commits have been observed at that size.
    """

    def __init__(self, stages: list[int], samples: int):
        if not stages or sorted(stages) != stages or samples < 1:
            raise ValueError("stages must be ascending and samples >= 1")
        self.stages = list(stages)
        self.samples = samples
        self._stage: dict[str, int] = {}
        self._count: dict[str, int] = {}

    def target(self, group: str) -> int:
        return self.stages[self._stage.get(group, 0)]

    def growth_allowed(self, group: str, size: int) -> bool:
        return size < self.target(group)

    def done(self, group: str) -> bool:
        return (self._stage.get(group, 0) == len(self.stages) - 1
                and self._count.get(group, 0) >= self.samples)

    def observe(self, record: LogRecord) -> None:
        if not record.is_commit or record.group_size != self.target(record.group):
            return
        g = record.group
        self._count[g] = self._count.get(g, 0) + 1
        if self._count[g] >= self.samples and self._stage.get(g, 0) < len(self.stages) - 1:
            self._stage[g] = self._stage.get(g, 0) + 1
            self._count[g] = 0


@dataclass
class PendingOp:
    result: CommitResult
    action: str
    counterpart: str
    generated_ns: int
    cost_us: int
    encoded: bytes


@dataclass
class Membership:
    state: GroupState
    order: list[str]
    proposals: list[tuple[HandshakeMessage, Proposal, bytes]] = field(default_factory=list)
    buffered_since: int | None = None
    pending: PendingOp | None = None
    candidates: list[tuple[str, HandshakeMessage]] = field(default_factory=list)
    decision_at: int | None = None
    future: list[Envelope] = field(default_factory=list)
    behind_since: int | None = None


@dataclass
class JoinAttempt:
    epoch: int
    encoded: bytes
    state: GroupState
    generated_ns: int
    cost_us: int
    candidates: list[tuple[str, HandshakeMessage]] = field(default_factory=list)
    decision_at: int | None = None


class Client:
    def __init__(self, identity: str, config: ClientConfig, hub: DeliveryService, sink: LogSink,
                 seed: int, crypto: CryptoProvider | None = None, cost_clock: str = "cpu",
                 ramp: Ramp | None = None, desync_timeout_ms: float | None = None):
        self.identity = identity
        self.config = config
        self.hub = hub
        self.scheduler: Scheduler = hub.scheduler
        self.sink = sink
        self.rng = random.Random(seed)
        self.crypto = crypto or CryptoProvider.seeded(seed)
        self.clock = CostClock(cost_clock, self.crypto)
        self.ramp = ramp
        self.policy = UpdaterPolicy.parse(config.auth_policy)
        self.signature_keys = self.crypto.generate_signature_keypair()
        self.groups: dict[str, Membership] = {}
        self.joining: dict[str, JoinAttempt] = {}
        self.waiting: dict[str, list[Envelope]] = {}
        self.listening_since: dict[str, int] = {}
        self.key_packages: dict[bytes, KeyPackageSecrets] = {}
        self.counters: Counter = Counter()
        self.active = True
        self.steps = 0
        if desync_timeout_ms is None:
            desync_timeout_ms = 3 * hub.confirmation_window_ns / NS_PER_MS + 10_000
        self.desync_timeout_ns = int(desync_timeout_ms * NS_PER_MS)
        hub.registry.register_user(identity)
        self.session = hub.connect(identity, self.handle_incoming)
        self.session.subscribe(welcome_topic(identity))

    # -- helpers ------------------------------------------------------------

    @property
    def now(self) -> int:
        return self.scheduler.now

    @property
    def directory(self):
        return self.hub.directory

    def _log(self, group: str, size: int, action: str, counterpart: str, size_bytes: int | None,
             ts: int, cost: int) -> None:
        self.sink.emit(LogRecord(group, max(1, size), self.identity, action, counterpart or NO_COUNTERPART,
                                 size_bytes, ts, max(0, cost)))

    def _sleep_ns(self) -> int:
        c = self.config
        return self.rng.randint(c.sleep_millis_min, c.sleep_millis_max) * NS_PER_MS

    def start(self) -> None:
        self.scheduler.after(self._sleep_ns(), self._wake)

    def stop(self) -> None:
        self.active = False

    def _wake(self) -> None:
        if not self.active:
            return
        self.step()
        self.scheduler.after(self._sleep_ns(), self._wake)

    def is_member(self, group: str) -> bool:
        return group in self.groups

    def policy_allows(self, group: str) -> bool:
        m = self.groups.get(group)
        return m is not None and policy_allows(self.policy, self.identity, m.order)

    # -- the behaviour loop -------------------------------------------------

    def step(self) -> list[str]:
        """One wake-up; returns a short description of every action taken."""
        self.steps += 1
        cfg = self.config
        done: list[str] = []
        for group in cfg.groups:
            if group in self.groups:
                self._check_desync(group)
            if group in self.groups:
                if cfg.paradigm == "propose" and self._flush_due(group):
                    try:
                        self._commit_buffered(group)
                        done.append(f"flush:{group}")
                    except (ClientError, GroupError):
                        pass
                if self.rng.random() < cfg.message_chance:
                    length = self.rng.randint(cfg.message_length_min, cfg.message_length_max)
                    self.send_message(group, self.rng.randbytes(length))
                    done.append(f"message:{group}")
                if self.rng.random() < cfg.issue_update_chance:
                    kind = self._draw_kind()
                    self.counters["attempts"] += 1
                    try:
                        self.modify_group(group, kind)
                        done.append(f"{kind}:{group}")
                    except ClientError as exc:
                        self.counters[f"skip_{type(exc).__name__}"] += 1
                    except GroupError as exc:
                        self.counters[f"fail_{type(exc).__name__}"] += 1
            elif group not in self.joining and self.rng.random() < cfg.join_chance:
                outcome = self.join_group(group)
                if outcome:
                    done.append(f"{outcome}:{group}")
        return done

    def _draw_kind(self) -> str:
        cfg = self.config
        u = self.rng.random()
        if u < cfg.invite_chance:
            return "invite"
        if u < cfg.invite_chance + cfg.remove_chance:
            return "remove"
        return "update"

    # -- application messages -------------------------------------------------

    def send_message(self, group: str, plaintext: bytes) -> bytes:
        m = self.groups[group]
        payload, cost = self.clock.measure(seal_application, m.state, plaintext)
        self.session.publish(group_topic(group), payload)
        self._log(group, m.state.member_count, "Message", NO_COUNTERPART, len(payload), self.now, cost)
        return payload

    # -- modifications --------------------------------------------------------

    def _busy(self, m: Membership) -> bool:
        return m.pending is not None or bool(m.candidates)

    def modify_group(self, group: str, kind: str) -> list[bytes]:
        """Publish one modification; returns the payloads sent."""
        if kind not in MODIFICATIONS:
            raise ValueError(f"unknown modification {kind!r}")
        m = self.groups.get(group)
        if m is None:
            raise ClientError(f"not a member of {group}")
        if not self.policy_allows(group):
            raise PolicyDenied(f"{self.identity} may not modify {group} under {self.policy.value}")
        if self._busy(m):
            raise Busy(group)
        state = m.state
        counterpart = NO_COUNTERPART
        if self.config.paradigm == "propose":
            self._check_batch(m, kind)
        if kind == "invite":
            if self.ramp is not None and not self.ramp.growth_allowed(group, state.member_count):
                raise GrowthPaused(group)
            kp = self._take_key_package(state)
            body, counterpart = Add(kp), kp.identity
        elif kind == "remove":
            others = sorted(i for i in state.members() if i != self.identity)
            if not others:
                raise EmptyGroup(f"{group} has no other member to remove")
            targeted = {state.tree.leaf(p.body.leaf_index).identity for _, p, _ in m.proposals
                        if isinstance(p.body, Remove)}
            others = [i for i in others if i not in targeted]
            if not others:
                raise Busy("every other member is already proposed for removal")
            victim = self.rng.choice(others)
            body, counterpart = Remove(state.tree.find_identity(victim)), victim
        else:
            body = None

        if self.config.paradigm == "commit":
            proposals = () if body is None else (body,)
            action = {"invite": "Invite", "remove": "Remove", "update": "Update"}[kind]
            return [self._publish_commit(m, proposals, action, counterpart)]

        def build():
            return propose(state, body if body is not None else make_update(state))
        msg, cost = self.clock.measure(build)
        payload = msg.encode()
        self.session.publish(group_topic(group), payload)
        self._log(group, state.member_count, "Propose", counterpart, len(payload), self.now, cost)
        return [payload]

    def _check_batch(self, m: Membership, kind: str) -> None:
        """Refuse proposals the next commit would have to leave out."""
        if len(self._committable(m)[0]) >= self.config.proposals_per_commit:
            raise Busy("batch already full")
        mine = m.state.my_leaf_index
        if kind == "update" and any(isinstance(p.body, Update) and p.proposer == mine for _, p, _ in m.proposals):
            raise Busy("update already proposed this epoch")

    def _take_key_package(self, state: GroupState) -> KeyPackage:
        members = set(state.members())
        candidates = [u for u in sorted(self.hub.registry.list_users())
                      if u not in members and self.directory.key_package_count(u) > 0]
        if not candidates:
            raise NoKeyPackageAvailable(state.group_id)
        user = self.rng.choice(candidates)
        try:
            kp = KeyPackage.decode(self.directory.take_key_package(user))
        except NotFound as exc:
            raise NoKeyPackageAvailable(user) from exc
        return kp

    def _publish_commit(self, m: Membership, proposals, action: str, counterpart: str,
                        known: set[bytes] | None = None) -> bytes:
        result, cost = self.clock.measure(create_commit, m.state, proposals, known=known)
        payload = result.message.encode()
        m.pending = PendingOp(result, action, counterpart, self.now, cost, payload)
        self.session.publish(group_topic(m.state.group_id), payload)
        return payload

    def _flush_due(self, group: str) -> bool:
        """A full batch is committable, or a partial one has waited too long.

        The timeout (one longest sleep per batch slot) keeps small groups
        moving: with one Update per member per epoch a group of k members
        cannot fill a batch larger than k while growth is paused.
        """
        m = self.groups[group]
        if self._busy(m) or not self.policy_allows(group):
            return False
        ready = len(self._committable(m)[0])
        if ready == self.config.proposals_per_commit:
            return True
        patience = self.config.proposals_per_commit * self.config.sleep_millis_max * NS_PER_MS
        return ready > 0 and self.now - m.buffered_since >= patience

    def _committable(self, m: Membership) -> tuple[list[HandshakeMessage], set[bytes]]:
        """The first proposals_per_commit buffered proposals that fit together.

        A later proposal is skipped when it touches a leaf an earlier one
        already removes or updates, or adds someone already added.
        """
        chosen: list[HandshakeMessage] = []
        known: set[bytes] = set()
        removed, updated, added = set(), set(), set()
        members = set(m.state.members())
        for msg, p, pid in m.proposals:
            if len(chosen) == self.config.proposals_per_commit:
                break
            b = p.body
            if isinstance(b, Remove):
                if b.leaf_index == m.state.my_leaf_index or b.leaf_index in removed | updated:
                    continue
                removed.add(b.leaf_index)
            elif isinstance(b, Update):
                if p.proposer in updated | removed:
                    continue
                updated.add(p.proposer)
            elif isinstance(b, Add):
                ident = b.key_package.identity
                if ident in added or ident in members:
                    continue
                added.add(ident)
            chosen.append(msg)
            known.add(pid)
        return chosen, known

    def _commit_buffered(self, group: str) -> bytes:
        """Commit the committable buffered proposals."""
        m = self.groups[group]
        if self._busy(m):
            raise Busy(group)
        chosen, known = self._committable(m)
        if not chosen:
            raise Busy("no committable proposals")
        bodies = [msg.proposal().body for msg in chosen]
        if any(isinstance(b, Add) for b in bodies):
            action = "Invite"
            counterpart = next(b.key_package.identity for b in bodies if isinstance(b, Add))
        elif any(isinstance(b, Remove) for b in bodies):
            action = "Remove"
            leaf = next(b.leaf_index for b in bodies if isinstance(b, Remove))
            counterpart = m.state.tree.leaf(leaf).identity
        else:
            action, counterpart = "Update", NO_COUNTERPART
        return self._publish_commit(m, chosen, action, counterpart, known)

    # -- joining ------------------------------------------------------------------

    def join_group(self, group: str) -> str | None:
        """Create, externally join, or advertise a KeyPackage for ``group``."""
        if group in self.groups or group in self.joining:
            return None
        try:
            epoch, raw = self.directory.fetch_group_info(group)
        except NotFound:
            self._create(group)
            return "create"
        if self.config.external_join:
            gi = GroupInfo.decode(raw)
            size = _group_info_size(gi)
            if self.ramp is not None and not self.ramp.growth_allowed(group, size):
                self.counters["skip_GrowthPaused"] += 1
                return None
            if not self._listening(group):
                self._subscribe_waiting(group)
                return "subscribe"
            if any(e.epoch >= epoch for e in self._buffered_commits(group)):
                # a commit on top of this GroupInfo is already in flight
                self.counters["skip_GroupInfoInFlight"] += 1
                return None
            try:
                (msg, state), cost = self.clock.measure(external_commit, gi, self.identity, self.crypto,
                                                       self.signature_keys, resync=True)
            except GroupError as exc:
                self.counters[f"fail_{type(exc).__name__}"] += 1
                return None
            payload = msg.encode()
            self.joining[group] = JoinAttempt(msg.epoch, payload, state, self.now, cost)
            self.session.publish(group_topic(group), payload)
            return "external_join"
        self._subscribe_waiting(group)
        if self.directory.key_package_count(self.identity) == 0:
            self.publish_key_package()
            return "key_package"
        return None

    def publish_key_package(self) -> KeyPackage:
        kp, secrets = new_key_package(self.identity, self.crypto, self.signature_keys)
        self.key_packages[kp.ref(self.crypto)] = secrets
        self.directory.publish_key_package(self.identity, kp.encode())
        return kp

    def _subscribe_waiting(self, group: str) -> None:
        if group not in self.waiting:
            self.waiting[group] = []
            self.listening_since[group] = self.now
        self.session.subscribe(group_topic(group))

    def _listening(self, group: str) -> bool:
        """Subscribed long enough to see every rival commit of an epoch."""
        since = self.listening_since.get(group)
        return (group in self.waiting and since is not None
                and self.now - since >= max(self.hub.confirmation_window_ns, 1))

    def _buffered_commits(self, group: str) -> list[HandshakeMessage]:
        out = []
        for env in self.waiting.get(group, ()):
            msg = HandshakeMessage.decode(env.payload)
            if msg.is_commit:
                out.append(msg)
        return out

    def _create(self, group: str) -> None:
        state = create_group(group, self.identity, self.crypto, self.signature_keys)
        self.groups[group] = Membership(state, [self.identity])
        self.waiting.pop(group, None)
        self.session.subscribe(group_topic(group))
        self._publish_group_info(self.groups[group])

    def _publish_group_info(self, m: Membership, gi: GroupInfo | None = None) -> None:
        def encode():
            return (gi or export_group_info(m.state)).encode()
        raw, cost = self.clock.measure(encode)
        self.directory.publish_group_info(m.state.group_id, m.state.epoch, raw)
        self._log(m.state.group_id, m.state.member_count, "GroupInfo", NO_COUNTERPART, len(raw), self.now, cost)

    def _leave(self, group: str, reason: str) -> None:
        self.counters[reason] += 1
        self.groups.pop(group, None)
        self.listening_since.pop(group, None)
        self.session.unsubscribe(group_topic(group))

    # -- incoming -------------------------------------------------------------------

    def handle_incoming(self, env: Envelope) -> None:
        try:
            if env.topic == welcome_topic(self.identity):
                self._on_welcome(env)
                return
            group = env.topic.split("/", 1)[1]
            if group in self.groups:
                self._on_group_message(group, env)
            elif group in self.joining and message_kind(env.payload) == TAG_HANDSHAKE:
                self._on_join_candidate(group, env)
            elif group in self.waiting and message_kind(env.payload) == TAG_HANDSHAKE:
                buf = self.waiting[group]
                buf.append(env)
                if len(buf) > _BUFFER_LIMIT:
                    del buf[0]
        except _DECODE_ERRORS:
            self.counters["malformed"] += 1

    def _on_welcome(self, env: Envelope) -> None:
        welcome = Welcome.decode(env.payload)
        secrets = self.key_packages.get(welcome.key_package_ref)
        group = welcome.context.group_id
        if secrets is None or group in self.groups:
            self.counters["welcome_ignored"] += 1
            return
        try:
            state, cost = self.clock.measure(process_welcome, welcome, secrets, self.crypto)
        except (GroupError, CryptoError) as exc:
            self.counters[f"fail_{type(exc).__name__}"] += 1
            return
        del self.key_packages[welcome.key_package_ref]
        self.joining.pop(group, None)
        committer = state.tree.leaf(welcome.committer).identity
        order = [i for i in state.members() if i != self.identity] + [self.identity]
        self.groups[group] = Membership(state, order)
        self.session.subscribe(group_topic(group))
        self._log(group, state.member_count, "Welcome", committer, len(env.payload), self.now, cost)
        self._replay(group, self.waiting.pop(group, []))

    def _replay(self, group: str, envelopes: list[Envelope]) -> None:
        for env in envelopes:
            if group not in self.groups:
                return
            self._on_group_message(group, env)

    def _on_group_message(self, group: str, env: Envelope) -> None:
        m = self.groups[group]
        kind = message_kind(env.payload)
        if kind == TAG_APPLICATION:
            self._on_application(m, env)
        elif kind == TAG_HANDSHAKE:
            msg = HandshakeMessage.decode(env.payload)
            if msg.epoch < m.state.epoch:
                self.counters["stale"] += 1
            elif msg.epoch > m.state.epoch:
                self._defer(m, env)
            elif msg.is_commit:
                self._add_candidate(group, m, env.message_id, msg)
            else:
                self._on_proposal(group, m, env, msg)
        else:
            self.counters["malformed"] += 1

    def _defer(self, m: Membership, env: Envelope) -> None:
        if m.behind_since is None:
            m.behind_since = self.now
        m.future.append(env)

    def _check_desync(self, group: str) -> None:
        m = self.groups[group]
        if m.behind_since is not None and self.now - m.behind_since > self.desync_timeout_ns:
            self._leave(group, "desync")

    def _on_application(self, m: Membership, env: Envelope) -> None:
        if env.sender == self.identity:
            return
        header = ApplicationMessage.decode(env.payload)
        if header.epoch > m.state.epoch:
            self._defer(m, env)
            return
        try:
            (sender, _), cost = self.clock.measure(open_application, m.state, env.payload)
        except (GroupError, CryptoError):
            self.counters["undecryptable"] += 1
            return
        self._log(m.state.group_id, m.state.member_count, "Message", m.state.tree.leaf(sender).identity,
                  len(env.payload), self.now, cost)

    def _on_proposal(self, group: str, m: Membership, env: Envelope, msg: HandshakeMessage) -> None:
        state = m.state
        if env.sender == self.identity:
            proposal = msg.proposal()
        else:
            try:
                proposal, cost = self.clock.measure(verify_proposal, state, msg)
            except (GroupError, CryptoError) as exc:
                self.counters[f"bad_proposal_{type(exc).__name__}"] += 1
                return
            self._log(group, state.member_count, "ProcessProposal", state.tree.leaf(msg.sender).identity,
                      None, self.now, cost)
        if not m.proposals:
            m.buffered_since = self.now
        m.proposals.append((msg, proposal, proposal.id(self.crypto)))
        if env.sender == self.identity and self._flush_due(group):
            try:
                self._commit_buffered(group)
            except (ClientError, GroupError) as exc:
                self.counters[f"fail_{type(exc).__name__}"] += 1

    # -- arbitration -------------------------------------------------------------------

    def _add_candidate(self, group: str, m: Membership, message_id: str, msg: HandshakeMessage) -> None:
        m.candidates.append((message_id, msg))
        window = self.hub.confirmation_window_ns
        if window == 0:
            self._decide(group, m.state.epoch)
        elif m.decision_at is None:
            m.decision_at = self.now + window
            self.scheduler.at(m.decision_at, self._decide, group, m.state.epoch)

    def _decide(self, group: str, epoch: int) -> None:
        m = self.groups.get(group)
        if m is None or m.state.epoch != epoch or not m.candidates:
            return
        by_id = dict(m.candidates)
        winner_id = epoch_winner([mid for mid, _ in m.candidates], self.hub.arbitration)
        winner = by_id[winner_id]
        m.candidates, m.decision_at = [], None
        pending, m.pending = m.pending, None
        if pending is not None and winner.encode() == pending.encoded:
            self._merge_own(group, m, pending)
        else:
            if pending is not None:
                self.counters["lost_race"] += 1
            self._apply_foreign(group, m, winner)
        m = self.groups.get(group)
        if m is not None:
            self._epoch_advanced(group, m)

    def _merge_own(self, group: str, m: Membership, pending: PendingOp) -> None:
        pending.result.pending.confirm(pending.encoded)
        new_state = merge_pending(m.state, pending.result.pending)
        self._track_membership(m, pending.result.message, new_state)
        m.state = new_state
        self._log(group, new_state.member_count, pending.action, pending.counterpart, len(pending.encoded),
                  pending.generated_ns, pending.cost_us)
        for identity, welcome in pending.result.welcomes:
            self.session.publish(welcome_topic(identity), welcome.encode())
        self._publish_group_info(m, pending.result.group_info)

    def _apply_foreign(self, group: str, m: Membership, msg: HandshakeMessage) -> None:
        state = m.state
        if msg.is_external:
            committer = msg.commit().path.leaf_node.identity
        else:
            committer = state.tree.leaf(msg.sender).identity
        known = {pid for _, _, pid in m.proposals}
        try:
            new_state, cost = self.clock.measure(process_commit, state, msg, known)
        except (GroupError, CryptoError) as exc:
            self.counters[f"fail_{type(exc).__name__}"] += 1
            self._leave(group, "desync")
            return
        if new_state.evicted:
            self._leave(group, "evicted")
            return
        self._track_membership(m, msg, new_state)
        m.state = new_state
        self._log(group, new_state.member_count, "Process", committer, None, self.now, cost)

    def _track_membership(self, m: Membership, msg: HandshakeMessage, new_state: GroupState) -> None:
        commit = msg.commit()
        old_tree = m.state.tree
        removed = {old_tree.leaf(p.body.leaf_index).identity for p in commit.proposals
                   if isinstance(p.body, Remove)}
        order = [i for i in m.order if i not in removed]
        for p in commit.proposals:
            if isinstance(p.body, Add):
                order.append(p.body.key_package.identity)
        if msg.is_external:
            order.append(commit.path.leaf_node.identity)
        m.order = order

    def _epoch_advanced(self, group: str, m: Membership) -> None:
        m.proposals.clear()
        m.buffered_since = None
        future, m.future, m.behind_since = m.future, [], None
        self._replay(group, future)

    def _on_join_candidate(self, group: str, env: Envelope) -> None:
        attempt = self.joining[group]
        msg = HandshakeMessage.decode(env.payload)
        if not msg.is_commit or msg.epoch < attempt.epoch:
            return
        if msg.epoch > attempt.epoch:
            # replayed if our commit turns out to have won
            self.waiting.setdefault(group, []).append(env)
            return
        attempt.candidates.append((env.message_id, msg))
        window = self.hub.confirmation_window_ns
        if window == 0:
            self._decide_join(group)
        elif attempt.decision_at is None:
            attempt.decision_at = self.now + window
            self.scheduler.at(attempt.decision_at, self._decide_join, group)

    def _abandon_join(self, group: str, reason: str) -> None:
        self.counters[reason] += 1
        self.joining.pop(group, None)
        self.waiting.setdefault(group, [])

    def _decide_join(self, group: str) -> None:
        attempt = self.joining.get(group)
        if attempt is None or not attempt.candidates:
            return
        winner_id = epoch_winner([mid for mid, _ in attempt.candidates], self.hub.arbitration)
        winner = dict(attempt.candidates)[winner_id]
        try:
            current_epoch, _ = self.directory.fetch_group_info(group)
        except NotFound:
            current_epoch = attempt.epoch
        if winner.encode() != attempt.encoded or current_epoch > attempt.epoch:
            self._abandon_join(group, "lost_join")
            return
        del self.joining[group]
        state = attempt.state
        order = [i for i in state.members() if i != self.identity] + [self.identity]
        m = Membership(state, order)
        self.groups[group] = m
        self._log(group, state.member_count, "Join", NO_COUNTERPART, len(attempt.encoded),
                  attempt.generated_ns, attempt.cost_us)
        self._publish_group_info(m)
        self._replay(group, self.waiting.pop(group, []))


def _group_info_size(gi: GroupInfo) -> int:
    """Occupied leaves in a GroupInfo's tree, without validating it."""
    return RatchetTree.decode(gi.tree).member_count()
