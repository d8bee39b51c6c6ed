"""Who may modify a group: the creator, the newest member, or anyone."""

from __future__ import annotations

import enum
from typing import Sequence


class UpdaterPolicy(enum.Enum):
    FIRST = "First"
    LAST = "Last"
    RANDOM = "Random"

    @classmethod
    def parse(cls, text: str) -> "UpdaterPolicy":
        for p in cls:
            if p.value.lower() == text.lower():
                return p
        raise ValueError(f"unknown policy {text!r}")


def policy_allows(policy: UpdaterPolicy | str, identity: str, join_order: Sequence[str]) -> bool:
    """``join_order`` lists current members from oldest to newest."""
    if isinstance(policy, str):
        policy = UpdaterPolicy.parse(policy)
    if identity not in join_order:
        return False
    if policy is UpdaterPolicy.FIRST:
        return join_order[0] == identity
    if policy is UpdaterPolicy.LAST:
        return join_order[-1] == identity
    return True
