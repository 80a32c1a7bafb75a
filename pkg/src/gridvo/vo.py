"""Virtual Object runtime: one digital counterpart per field device.

A VOInstance is a single logical actor owning an observation store, an
access controller (tiered grants plus actuation-conflict arbitration)
and a push scheduler. Everything it sends outward — registry status
updates, alerts to aggregation engines, periodic pushes — travels as
wire requests through the injected ``send`` callable, so the same code
runs in-process or behind a real HTTP server.

Access model: a request with no token acts at PUBLIC tier; a token must
resolve to a grant on this VO or the request is UNAUTHORIZED. The
descriptor's ``default_tier`` is the front gate: callers below it are
turned away before any data is touched (keyless callers get
UNAUTHORIZED, keyed-but-weak callers get FORBIDDEN). Past the gate,
per-field visibility filters silently — a field above the caller's tier
is omitted, never revealed by an error.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional

from .model import (
    AccessKey,
    AccessTier,
    BadRequest,
    EntityId,
    EntityKind,
    Forbidden,
    NotFound,
    Observation,
    Unauthorized,
    VOState,
    VOStatus,
    rwo_id,
)
from .registry import VODescriptor
from .wire import (
    ActuationCommand,
    HttpRequest,
    HttpResponse,
    UpdateCommand,
    UpdateVerb,
    encode_alert_post,
    encode_push_post,
    encode_status_post,
)

Send = Callable[[HttpRequest], HttpResponse]


def _null_send(request: HttpRequest) -> HttpResponse:
    return HttpResponse(200, b"{}")


@dataclass
class GrantRecord:
    key: AccessKey
    priority: int


class AccessController:
    """Grant table shared by VO and ME runtimes: resolves bearer tokens
    to (tier, holder) and replaces a holder's key on re-grant."""

    def __init__(self, subject: EntityId):
        self.subject = subject
        self.grants: Dict[EntityId, GrantRecord] = {}
        self._by_token: Dict[str, GrantRecord] = {}

    def update_grant(self, key: AccessKey, priority: int) -> None:
        if key.subject != self.subject:
            raise BadRequest(f"grant for {key.subject.wire} delivered"
                             f" to {self.subject.wire}")
        old = self.grants.get(key.holder)
        if old is not None:
            self._by_token.pop(old.key.token, None)
        record = GrantRecord(key, priority)
        self.grants[key.holder] = record
        self._by_token[key.token] = record

    def resolve(self, token: Optional[str]) -> tuple:
        """Token to (tier, holder, grant record); keyless acts at PUBLIC."""
        if token is None:
            return AccessTier.PUBLIC, None, None
        record = self._by_token.get(token)
        if record is None:
            raise Unauthorized("unknown access token")
        return record.key.tier, record.key.holder, record


@dataclass
class PushPolicy:
    subscriber: EntityId
    period_s: int
    fields: tuple
    tier: AccessTier
    last_pushed: Optional[int] = None
    failing: bool = False


@dataclass
class ConflictWindow:
    opened_at: int
    width_ms: int = 1000
    pending: List[ActuationCommand] = field(default_factory=list)

    @property
    def closes_at(self) -> float:
        return self.opened_at + self.width_ms / 1000.0


@dataclass(frozen=True)
class ActuationOutcome:
    command: ActuationCommand
    accepted: bool
    winner: EntityId

    def to_wire(self) -> dict:
        return {
            "command": self.command.to_wire(),
            "accepted": self.accepted,
            "winner": self.winner.wire,
        }


def arbitrate(commands: List[ActuationCommand]) -> ActuationCommand:
    """Pick the winning command: highest priority, then smallest issuer name.

    Pure and order-independent: any permutation of the same commands
    yields the same winner.
    """
    if not commands:
        raise BadRequest("empty conflict window")
    return min(commands, key=lambda c: (-c.priority, c.issuer.name))


class VOInstance:
    """Execution environment of one Virtual Object."""

    def __init__(self, descriptor: VODescriptor, visibility,
                 cadence_s: int = 60, send: Optional[Send] = None,
                 conflict_width_ms: int = 1000):
        self.descriptor = descriptor
        self.id = descriptor.id
        self.bound_rwo = rwo_id(descriptor.id.name)
        self.visibility = visibility
        self.cadence_s = cadence_s
        self.send = send if send is not None else _null_send
        self.conflict_width_ms = conflict_width_ms
        self.store: List[Observation] = []
        self.access = AccessController(self.id)
        self.push_policies: Dict[EntityId, PushPolicy] = {}
        self.state = VOState.OFFLINE  # unseen until the first observation
        self.last_seen: Optional[int] = None
        self.window: Optional[ConflictWindow] = None
        self.hal_log: List[tuple] = []  # (time, ActuationCommand) forwarded to the device
        self.skipped_stale = 0

    # -- access control -------------------------------------------------------

    def update_grant(self, key: AccessKey, priority: int) -> None:
        self.access.update_grant(key, priority)

    def _resolve(self, token: Optional[str]) -> tuple:
        return self.access.resolve(token)

    def _gate(self, tier: AccessTier, token: Optional[str]) -> None:
        if tier < self.descriptor.default_tier:
            if token is None:
                raise Unauthorized(f"{self.id.wire} requires an access key")
            raise Forbidden(f"tier {tier.wire} below this object's"
                            f" {self.descriptor.default_tier.wire} gate")

    # -- ingest ----------------------------------------------------------------

    def ingest(self, obs: Observation, now: Optional[int] = None) -> dict:
        if obs.source != self.bound_rwo:
            raise BadRequest(f"{self.id.wire} is bound to {self.bound_rwo.wire},"
                             f" not {obs.source.wire}")
        if self.store and obs.timestamp <= self.store[-1].timestamp:
            self.skipped_stale += 1
            return {"stored": False, "reason": "stale_observation"}
        self.store.append(obs)
        self.last_seen = obs.timestamp
        if self.state is not VOState.ONLINE:
            self._transition(VOState.ONLINE)
        self._serve_push_policies(obs)
        return {"stored": True, "count": len(self.store)}

    def _serve_push_policies(self, obs: Observation) -> None:
        for policy in list(self.push_policies.values()):
            if policy.last_pushed is not None and \
                    obs.timestamp < policy.last_pushed + policy.period_s:
                continue
            allowed = [f for f in policy.fields
                       if f in obs.fields and self.visibility.allows(policy.tier, f)]
            restricted = obs.restrict(set(allowed))
            if restricted is None:
                continue
            policy.last_pushed = obs.timestamp
            self._deliver_push(policy, restricted)

    def _deliver_push(self, policy: PushPolicy, obs: Observation) -> None:
        if policy.subscriber.kind is not EntityKind.ME:
            return  # non-ME subscribers poll; there is no inbox route for them
        req = encode_push_post(policy.subscriber.name, obs)
        resp = self.send(req)
        if not resp.ok:
            resp = self.send(req)  # one retry
            if not resp.ok:
                policy.failing = True
                self._post_status()  # surface the trouble to the registry

    # -- queries -----------------------------------------------------------------

    def query(self, token: Optional[str], t0: int, t1: int,
              fields: Optional[tuple] = None, view=None) -> List[dict]:
        if t0 > t1:
            raise BadRequest(f"inverted time range [{t0}, {t1}]")
        if view is not None:
            raise BadRequest("virtual objects serve raw data;"
                             " aggregate views live one layer up")
        tier, _holder, _ = self._resolve(token)
        self._gate(tier, token)
        rows = []
        for obs in self.store:
            if not t0 <= obs.timestamp <= t1:
                continue
            visible = {
                k: v for k, v in obs.fields.items()
                if self.visibility.allows(tier, k) and (fields is None or k in fields)
            }
            row = {"source": obs.source.wire, "timestamp": obs.timestamp,
                   "fields": visible, "quality": obs.quality}
            if obs.location is not None:
                row["location"] = obs.location
            rows.append(row)
        return rows

    # -- periodic update policies --------------------------------------------

    def apply_policy(self, token: Optional[str], cmd: UpdateCommand) -> dict:
        tier, holder, _ = self._resolve(token)
        if holder is None:
            raise Unauthorized("periodic updates require an access key")
        if tier < AccessTier.FRIEND:
            raise Forbidden("periodic updates require friend tier or better")
        if cmd.verb is UpdateVerb.STOP_PERIODIC:
            self.push_policies.pop(holder, None)
            return {"policy": "stopped"}
        existing = self.push_policies.get(holder)
        if cmd.verb is UpdateVerb.CHANGE_PERIODIC and existing is not None:
            existing.period_s = cmd.period_s
            existing.fields = cmd.fields
            existing.tier = tier
            return {"policy": "changed", "period_s": cmd.period_s}
        self.push_policies[holder] = PushPolicy(
            subscriber=holder, period_s=cmd.period_s, fields=cmd.fields, tier=tier)
        return {"policy": "started", "period_s": cmd.period_s}

    # -- actuation --------------------------------------------------------------

    @property
    def actions(self) -> set:
        return {f.split(":", 1)[1] for f in self.descriptor.functionalities
                if f.startswith("actuate:")}

    def actuate(self, token: Optional[str], cmd: ActuationCommand, now: int) -> dict:
        tier, holder, record = self._resolve(token)
        if holder is None:
            raise Unauthorized("actuation requires an access key")
        if tier < AccessTier.FRIEND:
            raise Forbidden("actuation requires friend tier or better")
        if cmd.action not in self.actions:
            raise NotFound(f"{self.id.wire} offers no action {cmd.action!r}")
        # priority comes from the grant, never from the request body
        stamped = replace(cmd, issuer=holder, priority=record.priority, issued_at=now)
        if self.window is None or now >= self.window.closes_at:
            self.close_window(now)
            self.window = ConflictWindow(opened_at=now, width_ms=self.conflict_width_ms)
        self.window.pending.append(stamped)
        return {"queued": True, "window_closes_at": self.window.closes_at}

    def close_window(self, now: float) -> List[ActuationOutcome]:
        """Resolve the pending window if it has expired; called every tick."""
        if self.window is None or now < self.window.closes_at:
            return []
        pending, self.window = self.window.pending, None
        if not pending:
            return []
        winner = arbitrate(pending)
        self.hal_log.append((now, winner))
        return [ActuationOutcome(c, c is winner, winner.issuer) for c in pending]

    # -- monitoring ---------------------------------------------------------------

    def monitor_tick(self, now: int) -> Optional[VOState]:
        if self.last_seen is None:
            return None
        age = now - self.last_seen
        if age > 3 * self.cadence_s:
            target = VOState.OFFLINE
        elif age > 1.5 * self.cadence_s:
            target = VOState.DEGRADED
        else:
            return None  # fresh data; recovery happens on ingest
        severity = {VOState.ONLINE: 0, VOState.DEGRADED: 1, VOState.OFFLINE: 2}
        if severity[target] <= severity[self.state]:
            return None  # staleness only ever worsens state
        self._transition(target)
        return target

    def _transition(self, target: VOState) -> None:
        self.state = target
        self._post_status()
        for policy in self.push_policies.values():
            if policy.subscriber.kind is EntityKind.ME:
                self.send(encode_alert_post(policy.subscriber.name, self.id, self.status))

    def _post_status(self) -> None:
        self.send(encode_status_post(self.id, self.status))

    @property
    def status(self) -> VOStatus:
        return VOStatus(self.state, self.last_seen if self.last_seen is not None else 0, 0.0)
