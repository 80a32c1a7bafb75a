"""Cloud virtualization layer for smart-grid devices.

Physical devices (smart meters, weather units, generation units) are
mirrored by Virtual Objects that store observations behind tiered access
keys. Micro Engines compose VOs into permission-scoped aggregate views,
and services consume those views. A deterministic instance-pool
simulator models request latency under static and demand-driven scaling.
"""
from .model import (
    AccessKey,
    AccessTier,
    EntityId,
    EntityKind,
    GroupBy,
    Observation,
    Reduce,
    ViewSpec,
    VisibilityMap,
    VOState,
    VOStatus,
    parse_entity_id,
    tier_allows,
)

__all__ = [
    "AccessKey",
    "AccessTier",
    "EntityId",
    "EntityKind",
    "GroupBy",
    "Observation",
    "Reduce",
    "ViewSpec",
    "VisibilityMap",
    "VOState",
    "VOStatus",
    "parse_entity_id",
    "tier_allows",
]
