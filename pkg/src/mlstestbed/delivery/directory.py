"""KeyPackage / GroupInfo storage.

:class:`Directory` is the central web-server flavour; :class:`DhtDirectory`
spreads each record over ``k`` peers picked by rendezvous hashing and repairs
replicas on read.
"""

from __future__ import annotations

import hashlib
import threading
from collections import deque
from typing import Callable

from .base import NotFound


class Directory:
    def __init__(self):
        self._kps: dict[str, deque[bytes]] = {}
        self._gis: dict[str, tuple[int, bytes]] = {}
        self._lock = threading.Lock()

    def publish_key_package(self, user: str, kp: bytes) -> None:
        with self._lock:
            self._kps.setdefault(user, deque()).append(kp)

    def take_key_package(self, user: str) -> bytes:
        with self._lock:
            q = self._kps.get(user)
            if not q:
                raise NotFound(f"no key package for {user}")
            return q.popleft()

    def key_package_count(self, user: str) -> int:
        with self._lock:
            return len(self._kps.get(user, ()))

    def publish_group_info(self, group: str, epoch: int, gi: bytes) -> None:
        with self._lock:
            current = self._gis.get(group)
            if current is None or epoch >= current[0]:
                self._gis[group] = (epoch, gi)

    def fetch_group_info(self, group: str) -> tuple[int, bytes]:
        with self._lock:
            if group not in self._gis:
                raise NotFound(f"no group info for {group}")
            return self._gis[group]


def rendezvous_rank(key: str, peers: list[str]) -> list[str]:
    """Peers ordered by highest-random-weight score for ``key``."""
    def score(peer: str) -> bytes:
        return hashlib.sha256(f"{key}\x00{peer}".encode()).digest()
    return sorted(peers, key=score, reverse=True)


class DhtDirectory:
    """Replicated key-value directory over the gossip peers."""

    def __init__(self, peers: Callable[[], list[str]], replicas: int = 3):
        self._peers = peers
        self.replicas = replicas
        self.stores: dict[str, dict[str, object]] = {}
        self._lock = threading.Lock()
        self.repairs = 0

    def add_peer(self, peer: str) -> None:
        with self._lock:
            self.stores.setdefault(peer, {})

    def drop_peer(self, peer: str) -> None:
        with self._lock:
            self.stores.pop(peer, None)

    def replica_set(self, key: str) -> list[str]:
        live = [p for p in self._peers() if p in self.stores]
        return rendezvous_rank(key, live)[: self.replicas]

    def _holders(self, key: str) -> list[str]:
        replicas = self.replica_set(key)
        holders = [p for p in replicas if key in self.stores[p]]
        if not holders:
            # placement moved (peers joined or left): fall back to a full scan
            holders = [p for p in sorted(self.stores) if key in self.stores[p]]
        return holders

    def _repair(self, key: str, value) -> None:
        for p in self.replica_set(key):
            if self.stores[p].get(key) != value:
                self.stores[p][key] = value
                self.repairs += 1

    # -- key packages: value is a tuple of encoded packages
    def publish_key_package(self, user: str, kp: bytes) -> None:
        key = f"kp/{user}"
        with self._lock:
            holders = self._holders(key)
            current = self.stores[holders[0]][key] if holders else ()
            self._write(key, tuple(current) + (kp,))

    def take_key_package(self, user: str) -> bytes:
        key = f"kp/{user}"
        with self._lock:
            holders = self._holders(key)
            current = self.stores[holders[0]][key] if holders else ()
            if not current:
                raise NotFound(f"no key package for {user}")
            self._write(key, tuple(current[1:]))
            return current[0]

    def key_package_count(self, user: str) -> int:
        key = f"kp/{user}"
        with self._lock:
            holders = self._holders(key)
            return len(self.stores[holders[0]][key]) if holders else 0

    def _write(self, key: str, value) -> None:
        for store in self.stores.values():
            store.pop(key, None)
        for p in self.replica_set(key):
            self.stores[p][key] = value

    # -- group info: value is (epoch, bytes), monotone in epoch
    def publish_group_info(self, group: str, epoch: int, gi: bytes) -> None:
        key = f"gi/{group}"
        with self._lock:
            holders = self._holders(key)
            if holders:
                best = max(self.stores[p][key] for p in holders)
                if best[0] > epoch:
                    self._repair(key, best)
                    return
            self._write(key, (epoch, gi))

    def fetch_group_info(self, group: str) -> tuple[int, bytes]:
        key = f"gi/{group}"
        with self._lock:
            holders = self._holders(key)
            if not holders:
                raise NotFound(f"no group info for {group}")
            best = max(self.stores[p][key] for p in holders)
            self._repair(key, best)
            return best
