"""Centralised broker: per-topic FIFO fan-out, no retained history."""

from __future__ import annotations

from ..sim import Network, Scheduler
from .base import DeliveryService, Envelope, Session
from .directory import Directory


class BrokerDS(DeliveryService):
    """MQTT-style broker.

    The broker stamps each publish with a per-topic sequence number on
    arrival and delivers to every current subscriber (the publisher included)
    in that order. Delivery to a subscriber happens after one link-latency
    sample, clamped so a subscriber never overtakes an earlier message of the
    same topic.
    """

    kind = "mqtt"
    arbitration = "broker"

    def __init__(self, scheduler: Scheduler, network: Network | None = None):
        super().__init__(scheduler, network)
        self.directory = Directory()
        self.topics: dict[str, list[Session]] = {}
        self._last: dict[tuple[str, str], int] = {}
        self.topic_seq: dict[str, int] = {}

    def subscribe(self, session: Session, topic: str) -> None:
        with self._lock:
            self._require(session)
            if topic not in session.subscriptions:
                session.subscriptions.add(topic)
                self.topics.setdefault(topic, []).append(session)

    def unsubscribe(self, session: Session, topic: str) -> None:
        with self._lock:
            if topic in session.subscriptions:
                session.subscriptions.discard(topic)
                self.topics[topic].remove(session)

    def publish(self, session: Session, topic: str, payload: bytes) -> Envelope:
        with self._lock:
            self._require(session)
            env = self._envelope(session, topic, payload)
            self.topic_seq[topic] = self.topic_seq.get(topic, 0) + 1
            now = self.scheduler.now
            for sub in list(self.topics.get(topic, ())):
                key = (topic, sub.user_id)
                t = max(now + self.network.latency_ns(session.user_id, sub.user_id),
                        self._last.get(key, 0))
                self._last[key] = t
                self.scheduler.at(t, self._deliver, sub, env)
            return env
