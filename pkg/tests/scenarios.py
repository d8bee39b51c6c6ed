"""Small harness scenarios shared by several test modules."""

from __future__ import annotations

from mlstestbed.client.config import ClientConfig
from mlstestbed.harness import Scenario


def growth_config(replicas: int = 8, **changes) -> ClientConfig:
    """Invite-only clients that join eagerly and never remove anyone."""
    base = dict(ds="mqtt", groups=("group_1",), external_join=False, join_chance=1.0,
                issue_update_chance=0.5, message_chance=0.0, auth_policy="Random",
                sleep_millis_min=100, sleep_millis_max=300, paradigm="commit",
                invite_chance=1.0, remove_chance=0.0, update_chance=0.0, replicas=replicas)
    base.update(changes)
    return ClientConfig(**base)


def growth_scenario(replicas: int = 8, seed: int = 0, **changes) -> Scenario:
    scenario_keys = {"latency", "cost_clock", "stage_samples", "heartbeat_ms", "out", "duration_ms"}
    sc = {k: changes.pop(k) for k in list(changes) if k in scenario_keys}
    if "duration_ms" not in sc:
        sc["target_size"] = replicas
    sc.setdefault("cost_clock", "model")
    return Scenario(config=growth_config(replicas, **changes), seed=seed, **sc)
