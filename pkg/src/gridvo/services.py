"""Consumer services: each binds a set of aggregate views and stays honest
about their health.

A service never talks to devices or raw VOs. It states what it needs as
requirement tags plus a view, asks the composition endpoint for an
engine, and reads through that engine from then on. If the engine
degrades it keeps serving; if the engine is lost it reports
unavailability and periodically re-requests composition rather than
returning stale or fabricated data.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple

from .model import (
    EntityId,
    NotFound,
    Unavailable,
    ViewSpec,
    VisibilityMap,
    VOState,
    VOStatus,
    parse_entity_id,
)
from .wire import HttpRequest, HttpResponse, encode_compose_post, encode_query_get

# a lost binding is re-requested at most this often
REBIND_BACKOFF_S = 60.0


class BindingHealth(Enum):
    OK = "ok"
    DEGRADED = "degraded"
    LOST = "lost"


@dataclass(frozen=True)
class Need:
    """One aggregate view a service depends on."""

    name: str
    requirements: Tuple[str, ...]
    view: ViewSpec
    me_name: Optional[str] = None  # engine name to request, if pinned
    priority: int = 0
    exposure: Optional[VisibilityMap] = None

    def __post_init__(self):
        object.__setattr__(self, "requirements", tuple(self.requirements))


@dataclass(frozen=True)
class ServiceSpec:
    id: EntityId
    needs: Tuple[Need, ...]
    tokens: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "needs", tuple(self.needs))
        object.__setattr__(self, "tokens", tuple(self.tokens))


@dataclass
class Binding:
    need: Need
    me: Optional[EntityId] = None
    token: Optional[str] = None  # key opening the engine's gate, if any
    health: BindingHealth = BindingHealth.LOST
    last_attempt: float = float("-inf")
    transitions: List[tuple] = field(default_factory=list)  # (now, health)

    def mark(self, now: float, health: BindingHealth) -> bool:
        if health is self.health:
            return False
        self.health = health
        self.transitions.append((now, health))
        return True


Send = Callable[[HttpRequest], HttpResponse]


class ServiceRuntime:
    """Holds a service's engine bindings and supervises their health."""

    def __init__(self, spec: ServiceSpec, send: Send):
        self.spec = spec
        self.id = spec.id
        self.send = send
        self.bindings: Dict[str, Binding] = {
            need.name: Binding(need) for need in spec.needs}
        self.log: List[str] = []

    # -- composition ------------------------------------------------------------

    def boot(self, now: float = 0.0) -> Dict[str, BindingHealth]:
        """Request every needed engine. A need that cannot be met leaves
        its binding lost without failing the rest."""
        for binding in self.bindings.values():
            self._request(binding, now)
        return {name: b.health for name, b in self.bindings.items()}

    def _request(self, binding: Binding, now: float) -> None:
        need = binding.need
        binding.last_attempt = now
        resp = self.send(encode_compose_post(
            list(need.requirements), need.view, self.spec.id,
            self.spec.tokens, need.me_name, need.priority,
            need.exposure.to_wire() if need.exposure is not None else None))
        if not resp.ok:
            detail = ""
            try:
                detail = resp.json().get("detail", "")
            except ValueError:
                pass
            self.log.append(f"{need.name}: composition refused"
                            f" ({resp.status}) {detail}".rstrip())
            binding.me = None
            binding.mark(now, BindingHealth.LOST)
            return
        body = resp.json()
        binding.me = parse_entity_id(body["descriptor"]["id"])
        key = body.get("key")
        if key is not None:
            binding.token = key["token"]
        binding.mark(now, BindingHealth.OK)
        self.log.append(f"{need.name}: bound to {binding.me.wire}")

    # -- supervision -------------------------------------------------------------

    def supervise_tick(self, now: float,
                       status_of: Callable[[EntityId], Optional[VOStatus]]) -> None:
        for binding in self.bindings.values():
            if binding.me is None:
                if now - binding.last_attempt >= REBIND_BACKOFF_S:
                    self._request(binding, now)
                continue
            status = status_of(binding.me)
            if status is None or status.state is VOState.OFFLINE:
                if binding.mark(now, BindingHealth.LOST):
                    self.log.append(f"{binding.need.name}: engine lost")
                if now - binding.last_attempt >= REBIND_BACKOFF_S:
                    self._request(binding, now)
            elif status.state is VOState.DEGRADED:
                if binding.mark(now, BindingHealth.DEGRADED):
                    self.log.append(f"{binding.need.name}: engine degraded")
            else:
                if binding.mark(now, BindingHealth.OK):
                    self.log.append(f"{binding.need.name}: engine healthy")

    def notify_unmet(self, me: EntityId, now: float) -> None:
        """An engine has lost a requirement it cannot replace.

        Serving DEGRADED output from such an engine would silently drop
        part of what the need asked for, so the binding is severed
        outright and supervision re-requests composition on its normal
        backoff.
        """
        for binding in self.bindings.values():
            if binding.me == me:
                binding.me = None
                binding.token = None
                if binding.mark(now, BindingHealth.LOST):
                    self.log.append(
                        f"{binding.need.name}: requirement unmet, unbound")

    # -- reads --------------------------------------------------------------------

    def read(self, need_name: str, t0: int, t1: int) -> List[dict]:
        """Aggregate rows for one need; honest about unavailability."""
        binding = self.bindings.get(need_name)
        if binding is None:
            raise NotFound(f"{self.id.wire} declares no need {need_name!r}")
        if binding.me is None or binding.health is BindingHealth.LOST:
            raise Unavailable(f"{need_name} has no healthy engine bound")
        token = binding.token
        resp = self.send(encode_query_get(
            binding.me, None, (t0, t1),
            key=None if token is None else _bare_key(binding.me, token)))
        if not resp.ok:
            raise Unavailable(f"{need_name}: engine read failed"
                              f" ({resp.status})")
        return resp.json()

    def health(self) -> Dict[str, str]:
        return {name: b.health.value for name, b in self.bindings.items()}


def _bare_key(subject: EntityId, token: str):
    """Wrap a raw token so the query encoder can attach it."""
    from .model import AccessKey, AccessTier
    return AccessKey(subject=subject, tier=AccessTier.PUBLIC, token=token,
                     holder=subject)


def boot_service(spec: ServiceSpec, send: Send, now: float = 0.0) -> ServiceRuntime:
    svc = ServiceRuntime(spec, send)
    svc.boot(now)
    return svc
