"""Aggregation layer: Micro Engines composing VOs into scoped views.

A Micro Engine owns a set of member VOs and serves one aggregation view
over their observations. The view is the privacy boundary: an
ALL_SOURCES engine never returns anything source-identifying, whatever
tier the caller holds, and per-field exposure tiers filter on top of
that. The composition manager reuses an existing engine when an
equivalent one is already accessible to the requester, and swaps
members when a VO dies ("choosing an alternative set" is the whole
point of the indirection).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from .model import (
    AccessKey,
    AccessTier,
    BadRequest,
    EntityId,
    Forbidden,
    NotFound,
    Observation,
    Unauthorized,
    Unavailable,
    ViewSpec,
    VisibilityMap,
    VOState,
    VOStatus,
    me_id,
    parse_entity_id,
    _req_str,
)
from .registry import ADMIN, Registry, VODescriptor, VORegistry
from .vo import AccessController, Send, _null_send
from .wire import (
    UpdateCommand,
    UpdateVerb,
    encode_policy_post,
    encode_query_get,
    encode_status_post,
)

# observations below this quality never enter a reduction
MIN_QUALITY = 0.5

ALL_GROUP = "ALL"


# ---------------------------------------------------------------------------
# Descriptors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Member:
    vo_id: EntityId
    key: Optional[AccessKey]  # None = the VO's public gate suffices

    @property
    def token(self) -> Optional[str]:
        return self.key.token if self.key is not None else None

    def to_wire(self) -> dict:
        out: dict = {"vo_id": self.vo_id.wire}
        if self.key is not None:
            out["key"] = self.key.to_wire()
        return out

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> "Member":
        key = data.get("key")
        return cls(vo_id=parse_entity_id(_req_str(data, "vo_id")),
                   key=AccessKey.from_wire(key) if key is not None else None)


@dataclass(frozen=True)
class MEDescriptor:
    id: EntityId
    owner: EntityId
    members: Tuple[Member, ...]
    view: ViewSpec
    requirements: Tuple[str, ...]
    priority: int
    exposure: VisibilityMap
    status: VOStatus = field(
        default_factory=lambda: VOStatus(VOState.ONLINE, 0))

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        object.__setattr__(self, "requirements", tuple(self.requirements))
        if not self.requirements:
            raise BadRequest("an aggregation needs at least one requirement tag")

    def member_ids(self) -> Tuple[EntityId, ...]:
        return tuple(m.vo_id for m in self.members)

    def to_wire(self) -> dict:
        return {
            "id": self.id.wire,
            "owner": self.owner.wire,
            "members": [m.to_wire() for m in self.members],
            "view": self.view.to_wire(),
            "requirements": list(self.requirements),
            "priority": self.priority,
            "exposure": self.exposure.to_wire(),
            "status": self.status.to_wire(),
        }

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> "MEDescriptor":
        members = data.get("members", [])
        if not isinstance(members, list):
            raise BadRequest("members must be a list")
        reqs = data.get("requirements")
        if not isinstance(reqs, list) or not all(isinstance(r, str) for r in reqs):
            raise BadRequest("requirements must be a list of strings")
        priority = data.get("priority", 0)
        if not isinstance(priority, int) or isinstance(priority, bool):
            raise BadRequest("priority must be an integer")
        return cls(
            id=parse_entity_id(_req_str(data, "id")),
            owner=parse_entity_id(_req_str(data, "owner")),
            members=tuple(Member.from_wire(m) for m in members),
            view=ViewSpec.from_wire(data.get("view", {})),
            requirements=tuple(reqs),
            priority=priority,
            exposure=VisibilityMap.from_wire(data.get("exposure", {"entries": {}})),
            status=VOStatus.from_wire(data.get("status", {"state": "online", "last_seen": 0})),
        )


# ---------------------------------------------------------------------------
# Aggregation (pure)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AggregateRow:
    bucket_start: int
    group: str  # source id for per-source views, "ALL" otherwise
    values: Mapping[str, float]
    contributing_sources: int

    def __post_init__(self):
        if self.contributing_sources < 1:
            raise BadRequest("aggregate row without contributors")

    def to_wire(self) -> dict:
        return {
            "bucket_start": self.bucket_start,
            "group": self.group,
            "values": dict(self.values),
            "contributing_sources": self.contributing_sources,
        }


def _reduce(kind, pairs: List[tuple]) -> float:
    # pairs are (order_key, value) with order_key = (timestamp, arrival index)
    from .model import Reduce
    values = [v for _, v in pairs]
    if kind is Reduce.SUM:
        return sum(values)
    if kind is Reduce.MEAN:
        return sum(values) / len(values)
    if kind is Reduce.MIN:
        return min(values)
    if kind is Reduce.MAX:
        return max(values)
    return max(pairs, key=lambda p: p[0])[1]  # LAST


def aggregate(observations: Sequence[Observation], view: ViewSpec) -> List[AggregateRow]:
    """Reduce observations into view rows. Pure and deterministic.

    An observation missing a view field is excluded from that field's
    reduction only; one below MIN_QUALITY is excluded from all of them.
    Groups that end up contributing nothing produce no row.
    """
    from .model import GroupBy

    cells: Dict[tuple, Dict[str, List[tuple]]] = {}
    sources: Dict[tuple, set] = {}
    for index, obs in enumerate(observations):
        if obs.quality < MIN_QUALITY:
            continue
        bucket = view.bucket_start(obs.timestamp)
        group = obs.source.wire if view.group_by is GroupBy.PER_SOURCE else ALL_GROUP
        key = (bucket, group)
        contributed = False
        for f in view.fields:
            if f not in obs.fields:
                continue
            cells.setdefault(key, {}).setdefault(f, []).append(
                ((obs.timestamp, index), float(obs.fields[f])))
            contributed = True
        if contributed:
            sources.setdefault(key, set()).add(obs.source)

    rows = []
    for key in sorted(cells):
        bucket, group = key
        values = {f: _reduce(view.reduce, pairs)
                  for f, pairs in sorted(cells[key].items())}
        rows.append(AggregateRow(bucket, group, values, len(sources[key])))
    return rows


# ---------------------------------------------------------------------------
# ME runtime
# ---------------------------------------------------------------------------

class ReconfigureOutcome(Enum):
    UNCHANGED = "unchanged"
    RECOMPOSED = "recomposed"
    REQUIREMENT_UNMET = "requirement_unmet"


@dataclass(frozen=True)
class ReconfigureResult:
    outcome: ReconfigureOutcome
    members: Tuple[EntityId, ...]

    def to_wire(self) -> dict:
        return {"outcome": self.outcome.value,
                "members": [m.wire for m in self.members]}


class MEInstance:
    """Execution environment of one Micro Engine."""

    def __init__(self, descriptor: MEDescriptor, send: Optional[Send] = None,
                 credentials: Tuple[str, ...] = ()):
        self.descriptor = descriptor
        self.id = descriptor.id
        self.send = send if send is not None else _null_send
        self.access = AccessController(self.id)
        self.credentials = tuple(credentials)  # tokens from the compose request
        self.store: Dict[tuple, Observation] = {}  # (source, ts) -> obs, dedup
        self.pull_members: set = set()  # members served by polling, not pushes
        self.state = VOState.ONLINE
        self.subscribers: List[EntityId] = []  # bound services
        self.notes: List[str] = []
        self.handled_outages: set = set()  # member VOs already reconfigured for
        self._pull_cursor: Dict[EntityId, int] = {}

    # -- membership --------------------------------------------------------

    @property
    def members(self) -> Tuple[Member, ...]:
        return self.descriptor.members

    def member_names(self) -> set:
        return {m.vo_id.name for m in self.members}

    def set_members(self, members: Tuple[Member, ...]) -> None:
        self.descriptor = replace(self.descriptor, members=tuple(members))

    # -- data intake ---------------------------------------------------------

    def ingest_push(self, obs: Observation) -> dict:
        if obs.source.name not in self.member_names():
            raise BadRequest(f"{obs.source.wire} is not a member of {self.id.wire}")
        key = (obs.source, obs.timestamp)
        if key in self.store:
            return {"stored": False, "reason": "duplicate"}
        self.store[key] = obs
        return {"stored": True}

    def ingest_rows(self, rows: List[Mapping[str, Any]]) -> int:
        """Backfill from a VO query response; rows emptied by the VO's
        tier filter carry no fields and are skipped."""
        stored = 0
        for row in rows:
            if not row.get("fields"):
                continue
            obs = Observation.from_wire(row)
            if self.ingest_push(obs).get("stored"):
                stored += 1
        return stored

    def observations(self, t0: int, t1: int) -> List[Observation]:
        keys = sorted(self.store, key=lambda k: (k[1], k[0]))
        return [self.store[k] for k in keys if t0 <= k[1] <= t1]

    # -- queries -----------------------------------------------------------

    def gate_tier(self) -> AccessTier:
        return self.descriptor.exposure.min_tier()

    def me_query(self, token: Optional[str], t0: int, t1: int,
                 fields: Optional[tuple] = None, view: Optional[ViewSpec] = None) -> List[dict]:
        if t0 > t1:
            raise BadRequest(f"inverted time range [{t0}, {t1}]")
        if view is not None and view != self.descriptor.view:
            # the composed view is the privacy contract; no overrides
            raise Forbidden("this engine serves only its composed view")
        tier, _holder, _ = self.access.resolve(token)
        gate = self.gate_tier()
        if tier < gate:
            if token is None:
                raise Unauthorized(f"{self.id.wire} requires an access key")
            raise Forbidden(f"tier {tier.wire} below this engine's {gate.wire} gate")
        rows = aggregate(self.observations(t0, t1), self.descriptor.view)
        out = []
        for row in rows:
            visible = {
                f: v for f, v in row.values.items()
                if self.descriptor.exposure.allows(tier, f)
                and (fields is None or f in fields)
            }
            wire_row = row.to_wire()
            wire_row["values"] = visible
            out.append(wire_row)
        return out

    def apply_policy(self, token: Optional[str], cmd) -> dict:
        """Register (or drop) a consumer subscription. Consumers are
        notified of aggregate availability in-process; data flows back
        through me_query."""
        from .wire import UpdateVerb
        tier, holder, _ = self.access.resolve(token)
        if holder is None:
            raise Unauthorized("subscriptions require an access key")
        if tier < self.gate_tier():
            raise Forbidden(f"tier {tier.wire} below this engine's gate")
        if cmd.verb is UpdateVerb.STOP_PERIODIC:
            self.subscribers = [s for s in self.subscribers if s != holder]
            return {"policy": "stopped"}
        if holder not in self.subscribers:
            self.subscribers.append(holder)
        return {"policy": "started", "period_s": cmd.period_s}

    # -- member polling (for members that rejected push policies) -----------

    def poll_member(self, member: Member, now: int) -> int:
        since = self._pull_cursor.get(member.vo_id, 0)
        rows = self._query_vo(member, since + 1, now)
        self._pull_cursor[member.vo_id] = now
        return self.ingest_rows(rows)

    def _query_vo(self, member: Member, t0: int, t1: int) -> List[dict]:
        resp = self.send(encode_query_get(member.vo_id, None, (t0, t1), key=member.key))
        if not resp.ok:
            self.notes.append(f"query to {member.vo_id.wire} failed: {resp.status}")
            return []
        return resp.json()

    # -- status -------------------------------------------------------------

    def set_state(self, state: VOState, now: int) -> None:
        if state is self.state:
            return
        self.state = state
        self.send(encode_status_post(self.id, VOStatus(state, now)))


class MERegistry(Registry):
    """Descriptor store for Micro Engines, plus reuse lookup."""

    def __init__(self, seed: int = 0, access_updater=None):
        super().__init__(f"{seed}/me-registry", access_updater)

    def find_reusable(self, requirements: Sequence[str], view: ViewSpec,
                      requester: EntityId, tokens: Sequence[str]) -> Optional[MEDescriptor]:
        """Existing engine with the same (requirements, view) that the
        requester owns or holds an adequate key for."""
        want = set(requirements)
        for target_id in sorted(self._entries):
            desc = self._entries[target_id]
            if set(desc.requirements) != want or desc.view != view:
                continue
            if desc.status.state is not VOState.ONLINE:
                continue
            if requester == desc.owner:
                return desc
            gate = desc.exposure.min_tier()
            if gate is AccessTier.PUBLIC:
                return desc
            for token in tokens:
                key = self.minter.resolve(token)
                if (key is not None and key.subject == desc.id
                        and key.holder == requester and key.tier >= gate):
                    return desc
        return None


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------

def _derived_name(requirements: Sequence[str], view: ViewSpec) -> str:
    text = "|".join(sorted(requirements)) + "|" + str(view.to_wire())
    return "me-" + hashlib.sha256(text.encode()).hexdigest()[:10]


class CompositionManager:
    """Builds and maintains Micro Engines on top of the VO registry."""

    def __init__(self, vo_registry: VORegistry, me_registry: MERegistry,
                 send: Send, create_instance):
        self.vo_registry = vo_registry
        self.me_registry = me_registry
        self.send = send
        # create_instance(descriptor, credentials) -> MEInstance, wired to
        # the platform's transport and findable at /me/{name}
        self.create_instance = create_instance

    # -- compose -------------------------------------------------------------

    def compose(self, requirements: Sequence[str], view: ViewSpec, owner: EntityId,
                tokens: Sequence[str] = (), name: Optional[str] = None,
                priority: int = 0,
                exposure: Optional[VisibilityMap] = None, now: int = 0) -> tuple:
        """Find-or-create an engine; returns (descriptor, created)."""
        if not requirements:
            raise BadRequest("composition needs at least one requirement tag")
        for token in tokens:
            if self.vo_registry.minter.resolve(token) is None:
                raise Unauthorized("unknown key material in composition request")

        reused = self.me_registry.find_reusable(requirements, view, owner, tokens)
        if reused is not None:
            return reused, False

        targets = self._select_targets(requirements, owner, tokens)
        engine_id = me_id(name if name is not None
                          else _derived_name(requirements, view))
        members = tuple(self._provision_member(engine_id, desc, tier, priority)
                        for desc, tier in targets)
        if exposure is None:
            # aggregates default to friend-gated output
            exposure = VisibilityMap({f: AccessTier.FRIEND for f in view.fields})
        descriptor = MEDescriptor(
            id=engine_id,
            owner=owner,
            members=members,
            view=view,
            requirements=tuple(requirements),
            priority=priority,
            exposure=exposure,
            status=VOStatus(VOState.ONLINE, now),
        )
        self.me_registry.register(descriptor)
        instance = self.create_instance(descriptor, tuple(tokens))
        for member in members:
            self._attach_member(instance, member, now)
        return descriptor, True

    def _select_targets(self, requirements: Sequence[str], owner: EntityId,
                        tokens: Sequence[str]) -> List[tuple]:
        """All VOs matching any tag, each at the requester's proven tier."""
        chosen: Dict[EntityId, tuple] = {}
        for tag in requirements:
            results = self.vo_registry.search((tag,), owner, tuple(tokens))
            if not results:
                raise Unavailable(f"no virtual object offers {tag!r}")
            for desc, tier in results:
                chosen.setdefault(desc.id, (desc, tier))
        return [chosen[k] for k in sorted(chosen)]

    def _provision_member(self, engine_id: EntityId, desc, tier: AccessTier,
                          priority: int) -> Member:
        """Give the engine its own key on the member, at exactly the
        tier the requester's tokens opened — provisioning never
        escalates access."""
        if tier is AccessTier.PUBLIC:
            return Member(desc.id, None)
        key = self.vo_registry.grant_access(desc.id, engine_id, tier,
                                            priority, caller=ADMIN)
        return Member(desc.id, key)

    def _attach_member(self, instance: MEInstance, member: Member, now: int) -> None:
        """Subscribe to the member (push if allowed, else poll) and
        backfill its history so buckets already in progress stay exact."""
        cmd = UpdateCommand(UpdateVerb.START_PERIODIC, period_s=1,
                            fields=instance.descriptor.view.fields)
        resp = instance.send(encode_policy_post(member.vo_id, cmd, key=member.key))
        if not resp.ok:
            instance.pull_members.add(member.vo_id)
            instance.notes.append(
                f"{member.vo_id.wire} accepts no push policy ({resp.status}); polling")
        if now >= 1:
            instance.ingest_rows(instance._query_vo(member, 1, now))

    # -- failure handling -----------------------------------------------------

    def handle_vo_alert(self, instance: MEInstance, vo_id: EntityId,
                        status: VOStatus, now: int = 0) -> ReconfigureResult:
        """React to a member VO status alert; see ReconfigureOutcome."""
        current = instance.descriptor.members
        if vo_id not in {m.vo_id for m in current}:
            return ReconfigureResult(ReconfigureOutcome.UNCHANGED,
                                     instance.descriptor.member_ids())
        if status.state is not VOState.OFFLINE:
            instance.handled_outages.discard(vo_id)
            instance.notes.append(f"{vo_id.wire} {status.state.value}; keeping membership")
            return ReconfigureResult(ReconfigureOutcome.UNCHANGED,
                                     instance.descriptor.member_ids())
        if vo_id in instance.handled_outages:
            # the VO's own alert and the registry relay can both report one
            # outage; a failed replacement search is not retried until the
            # member comes back
            return ReconfigureResult(ReconfigureOutcome.UNCHANGED,
                                     instance.descriptor.member_ids())
        instance.handled_outages.add(vo_id)

        survivors = [m for m in current if m.vo_id != vo_id]
        covered = set()
        for m in survivors:
            try:
                desc = self.vo_registry.get(m.vo_id)
            except NotFound:
                continue
            covered |= {r for r in instance.descriptor.requirements if desc.offers(r)}
        uncovered = [r for r in instance.descriptor.requirements if r not in covered]

        # the replacement search runs with the authority of the original
        # composition request, nothing more
        searcher = instance.descriptor.owner
        tokens = tuple(instance.credentials)
        replacement_failed = False
        fresh: List[Member] = []
        for tag in uncovered:
            results = self.vo_registry.search((tag,), searcher, tokens)
            candidates = [(d, t) for d, t in results
                          if d.id != vo_id and d.id not in {m.vo_id for m in survivors}]
            if not candidates:
                replacement_failed = True
                continue
            desc, tier = candidates[0]
            member = self._provision_member(instance.id, desc,
                                            tier, instance.descriptor.priority)
            survivors.append(member)
            fresh.append(member)

        if replacement_failed:
            instance.set_state(VOState.DEGRADED, now)
            self.me_registry.update_status(instance.id,
                                           VOStatus(VOState.DEGRADED, now))
            return ReconfigureResult(ReconfigureOutcome.REQUIREMENT_UNMET,
                                     tuple(m.vo_id for m in survivors))

        instance.set_members(tuple(survivors))
        for member in fresh:  # membership set first so pushes are accepted
            self._attach_member(instance, member, now)
        self.me_registry.register(instance.descriptor)  # same owner: upsert
        return ReconfigureResult(ReconfigureOutcome.RECOMPOSED,
                                 instance.descriptor.member_ids())
