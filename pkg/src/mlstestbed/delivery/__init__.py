"""Publish-subscribe Delivery Services and their directories."""

from ..sim import Network, Scheduler
from .base import (
    DeliveryError,
    DeliveryService,
    Disconnected,
    DuplicateUser,
    Envelope,
    NotFound,
    Registry,
    Session,
    epoch_winner,
    group_topic,
    make_message_id,
    welcome_topic,
)
from .broker import BrokerDS
from .directory import DhtDirectory, Directory, rendezvous_rank
from .gossip import Control, GossipDS, GossipParams


def make_delivery(ds: str, scheduler: Scheduler, network: Network | None = None,
                  seed: int = 0, gossip: GossipParams | None = None) -> DeliveryService:
    if ds == "mqtt":
        return BrokerDS(scheduler, network)
    if ds == "gossipsub":
        return GossipDS(scheduler, network, gossip, seed=seed)
    raise ValueError(f"unknown delivery service {ds!r}")


__all__ = [
    "BrokerDS", "Control", "DeliveryError", "DeliveryService", "DhtDirectory", "Directory",
    "Disconnected", "DuplicateUser", "Envelope", "GossipDS", "GossipParams", "NotFound",
    "Registry", "Session", "epoch_winner", "group_topic", "make_delivery", "make_message_id",
    "rendezvous_rank", "welcome_topic",
]
