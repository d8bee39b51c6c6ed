"""Shared delivery-layer types: topics, envelopes, sessions, signaling."""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable

from ..sim import Network, Scheduler


class DeliveryError(Exception):
    pass


class DuplicateUser(DeliveryError):
    pass


class Disconnected(DeliveryError):
    pass


class NotFound(DeliveryError):
    pass


def group_topic(group_id: str) -> str:
    return f"group/{group_id}"


def welcome_topic(user_id: str) -> str:
    return f"welcome/{user_id}"


def make_message_id(payload: bytes, sender: str, sequence: int) -> str:
    h = hashlib.sha256()
    h.update(payload)
    h.update(sender.encode())
    h.update(sequence.to_bytes(8, "big"))
    return h.hexdigest()


@dataclass(frozen=True)
class Envelope:
    topic: str
    payload: bytes
    sender: str
    message_id: str
    publish_time: int


Handler = Callable[[Envelope], None]


@dataclass
class Session:
    user_id: str
    hub: "DeliveryService"
    handler: Handler
    subscriptions: set[str] = field(default_factory=set)
    connected: bool = True
    sequence: int = 0

    def subscribe(self, topic: str) -> None:
        self.hub.subscribe(self, topic)

    def unsubscribe(self, topic: str) -> None:
        self.hub.unsubscribe(self, topic)

    def publish(self, topic: str, payload: bytes) -> Envelope:
        return self.hub.publish(self, topic, payload)

    def next_sequence(self) -> int:
        self.sequence += 1
        return self.sequence


class Registry:
    """Signaling server: the set of known users."""

    def __init__(self):
        self._users: dict[str, None] = {}
        self._lock = threading.Lock()

    def register_user(self, user: str) -> None:
        with self._lock:
            self._users.setdefault(user, None)

    def list_users(self) -> list[str]:
        with self._lock:
            return list(self._users)


def epoch_winner(candidates: Iterable[str], mode: str = "broker") -> str:
    """Pick the winning commit among candidates observed for one epoch.

    ``broker``: the first observed (the broker's total order makes this
    the same for everyone). ``gossip``: the lexicographically smallest
    message id in the observation set.
    """
    ids = list(candidates)
    if not ids:
        raise ValueError("need at least one candidate")
    if mode == "broker":
        return ids[0]
    if mode == "gossip":
        return min(ids)
    raise ValueError(f"unknown arbitration mode {mode}")


class DeliveryService:
    """Common surface of the broker and gossip implementations."""

    kind = "abstract"
    arbitration = "broker"

    def __init__(self, scheduler: Scheduler, network: Network | None = None):
        self.scheduler = scheduler
        self.network = network or Network()
        self.registry = Registry()
        self.sessions: dict[str, Session] = {}
        self._lock = threading.RLock()
        self.delivered = 0

    @property
    def confirmation_window_ns(self) -> int:
        return 0

    def connect(self, user_id: str, handler: Handler) -> Session:
        with self._lock:
            if user_id in self.sessions and self.sessions[user_id].connected:
                raise DuplicateUser(user_id)
            session = Session(user_id, self, handler)
            self.sessions[user_id] = session
            self._on_connect(session)
            return session

    def disconnect(self, session: Session) -> None:
        with self._lock:
            for topic in list(session.subscriptions):
                self.unsubscribe(session, topic)
            session.connected = False
            self._on_disconnect(session)

    def _require(self, session: Session) -> None:
        if not session.connected:
            raise Disconnected(session.user_id)

    def _envelope(self, session: Session, topic: str, payload: bytes) -> Envelope:
        seq = session.next_sequence()
        return Envelope(topic, payload, session.user_id,
                        make_message_id(payload, session.user_id, seq), self.scheduler.now)

    def _deliver(self, session: Session, env: Envelope) -> None:
        if session.connected and env.topic in session.subscriptions:
            self.delivered += 1
            session.handler(env)

    # hooks for implementations
    def _on_connect(self, session: Session) -> None:
        pass

    def _on_disconnect(self, session: Session) -> None:
        pass

    def subscribe(self, session: Session, topic: str) -> None:
        raise NotImplementedError

    def unsubscribe(self, session: Session, topic: str) -> None:
        raise NotImplementedError

    def publish(self, session: Session, topic: str, payload: bytes) -> Envelope:
        raise NotImplementedError
