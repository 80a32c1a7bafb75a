"""Single-process platform: every layer behind one request dispatcher.

The hub owns the registries, the VO and ME execution environments, the
composition manager, and the resident services, and exposes exactly one
entry point: ``dispatch(HttpRequest) -> HttpResponse``. Components talk
to each other through that dispatcher even in-process, so the wire
contract is exercised end to end; the network server in serve.py is a
thin socket adapter over the same call.
"""
from __future__ import annotations

from typing import Dict, List, Optional

from .me import (
    CompositionManager,
    MEDescriptor,
    MEInstance,
    MERegistry,
    ReconfigureOutcome,
)
from .model import (
    ANONYMOUS,
    AccessKey,
    AccessTier,
    EntityId,
    EntityKind,
    NotFound,
    PlatformError,
    VisibilityMap,
    VOStatus,
)
from .registry import ADMIN, VODescriptor, VORegistry
from .services import ServiceRuntime, ServiceSpec
from .vo import VOInstance
from . import wire
from .wire import HttpRequest, HttpResponse, error_response, json_response


class Platform:
    """Hosts registries, virtual objects, engines, and services."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.now_s: float = 0.0
        self.vo_registry = VORegistry(seed, access_updater=self._vo_grant)
        self.me_registry = MERegistry(seed, access_updater=self._me_grant)
        self.vos: Dict[str, VOInstance] = {}
        self.mes: Dict[str, MEInstance] = {}
        self.services: Dict[str, ServiceRuntime] = {}
        self.composer = CompositionManager(
            self.vo_registry, self.me_registry, self.dispatch, self._create_me)
        self.status_log: List[tuple] = []  # (now, entity, state)
        self.alert_log: List[tuple] = []  # (now, me, vo, state, outcome)

    # -- provisioning (in-process; a real deployment would do this at the
    # -- site hosting each object) -------------------------------------------

    def add_vo(self, descriptor: VODescriptor, visibility: VisibilityMap,
               cadence_s: int = 60) -> VOInstance:
        self.vo_registry.register(descriptor)
        vo = VOInstance(descriptor, visibility, cadence_s=cadence_s,
                        send=self.dispatch)
        self.vos[descriptor.id.name] = vo
        return vo

    def add_service(self, spec: ServiceSpec) -> ServiceRuntime:
        svc = ServiceRuntime(spec, self.dispatch)
        self.services[spec.id.name] = svc
        return svc

    def _create_me(self, descriptor: MEDescriptor, credentials: tuple) -> MEInstance:
        me = MEInstance(descriptor, send=self.dispatch, credentials=credentials)
        self.mes[descriptor.id.name] = me
        return me

    def _vo_grant(self, target: EntityId, key: AccessKey, priority: int) -> None:
        vo = self.vos.get(target.name)
        if vo is not None:
            vo.update_grant(key, priority)

    def _me_grant(self, target: EntityId, key: AccessKey, priority: int) -> None:
        me = self.mes.get(target.name)
        if me is not None:
            me.access.update_grant(key, priority)

    def _vo(self, name: str) -> VOInstance:
        vo = self.vos.get(name)
        if vo is None:
            raise NotFound(f"no virtual object hosted at /vo/{name}")
        return vo

    def _me(self, name: str) -> MEInstance:
        me = self.mes.get(name)
        if me is None:
            raise NotFound(f"no engine hosted at /me/{name}")
        return me

    # -- time ------------------------------------------------------------------

    def tick(self, now_s: float) -> None:
        """Advance platform housekeeping to ``now_s`` (seconds)."""
        self.now_s = now_s
        for vo in list(self.vos.values()):
            vo.close_window(now_s)
            vo.monitor_tick(int(now_s))
        for me in list(self.mes.values()):
            for member in me.members:
                if member.vo_id in me.pull_members:
                    me.poll_member(member, int(now_s))
        for svc in list(self.services.values()):
            svc.supervise_tick(now_s, self._me_status)

    def _me_status(self, target: EntityId) -> Optional[VOStatus]:
        try:
            return self.me_registry.get(target).status
        except NotFound:
            return None

    # -- the one front door -----------------------------------------------------

    def dispatch(self, request: HttpRequest) -> HttpResponse:
        try:
            call = wire.decode_and_route(request)
            return json_response(self._handle(call))
        except PlatformError as e:
            return error_response(e)

    def _handle(self, call) -> object:
        if isinstance(call, wire.ObservationPost):
            return self._vo(call.vo_name).ingest(call.observation,
                                                 int(self.now_s))

        if isinstance(call, wire.DataQuery):
            if call.target.kind is EntityKind.VO:
                return self._vo(call.target.name).query(
                    call.token, call.t0, call.t1, call.fields, call.view)
            return self._me(call.target.name).me_query(
                call.token, call.t0, call.t1, call.fields, call.view)

        if isinstance(call, wire.PolicyPost):
            if call.target.kind is EntityKind.VO:
                return self._vo(call.target.name).apply_policy(
                    call.token, call.command)
            return self._me(call.target.name).apply_policy(
                call.token, call.command)

        if isinstance(call, wire.ActuatePost):
            return self._vo(call.vo_name).actuate(
                call.token, call.command, self.now_s)

        if isinstance(call, wire.GrantUpdatePost):
            if call.target.kind is EntityKind.VO:
                self._vo_grant(call.target, call.key, call.priority)
            else:
                self._me_grant(call.target, call.key, call.priority)
            return {"granted": call.target.wire}

        if isinstance(call, wire.RegisterVOPost):
            return self.vo_registry.register(
                VODescriptor.from_wire(call.descriptor))

        if isinstance(call, wire.RegisterMEPost):
            return self.me_registry.register(
                MEDescriptor.from_wire(call.descriptor))

        if isinstance(call, wire.StatusPost):
            registry = (self.vo_registry
                        if call.target.kind is EntityKind.VO
                        else self.me_registry)
            out = registry.update_status(call.target, call.status)
            self.status_log.append(
                (self.now_s, call.target, call.status.state))
            if call.target.kind is EntityKind.VO:
                # engines that merely poll a member hold no push policy on
                # it, so the registry relays source-state changes to every
                # engine listing the VO as a member
                for me in list(self.mes.values()):
                    if any(m.vo_id == call.target for m in me.members):
                        self.dispatch(wire.encode_alert_post(
                            me.id.name, call.target, call.status))
            return out

        if isinstance(call, wire.SearchQuery):
            hits = self.vo_registry.search(call.requirements, call.requester,
                                           call.tokens, call.include_offline)
            return [{"descriptor": d.to_wire(), "tier": t.wire}
                    for d, t in hits]

        if isinstance(call, wire.GrantMintPost):
            registry = (self.vo_registry
                        if call.target.kind is EntityKind.VO
                        else self.me_registry)
            caller, proof = ANONYMOUS, None
            if call.token is not None:
                key = registry.minter.resolve(call.token)
                if key is not None:
                    caller, proof = key.holder, call.token
            minted = registry.grant_access(call.target, call.holder,
                                           call.tier, call.priority,
                                           caller, proof)
            return {"key": minted.to_wire(), "priority": call.priority}

        if isinstance(call, wire.ComposePost):
            exposure = (VisibilityMap.from_wire(call.exposure)
                        if call.exposure is not None else None)
            desc, created = self.composer.compose(
                call.requirements, call.view, call.owner, call.tokens,
                call.name, call.priority, exposure, int(self.now_s))
            out = {"descriptor": desc.to_wire(), "created": created}
            instance = self.mes.get(desc.id.name)
            if instance is not None and call.owner not in instance.subscribers:
                # composing implies caring about the engine's fate
                instance.subscribers.append(call.owner)
            if created or call.owner == desc.owner:
                # the requester that caused (or owns) the engine gets a key
                # sized to the widest field its exposure ever reveals; a
                # reusing stranger keeps whatever admitted them instead
                tier = max(desc.exposure.entries.values(),
                           default=AccessTier.PRIVATE)
                key = self.me_registry.grant_access(
                    desc.id, call.owner, tier, desc.priority, caller=ADMIN)
                out["key"] = key.to_wire()
            return out

        if isinstance(call, wire.AlertPost):
            me = self._me(call.me_name)
            result = self.composer.handle_vo_alert(
                me, call.vo, call.status, int(self.now_s))
            self.alert_log.append((self.now_s, me.id, call.vo,
                                   call.status.state, result.outcome))
            if result.outcome is ReconfigureOutcome.REQUIREMENT_UNMET:
                for subscriber in list(me.subscribers):
                    svc = self.services.get(subscriber.name)
                    if svc is not None:
                        svc.notify_unmet(me.id, self.now_s)
            return result.to_wire()

        if isinstance(call, wire.PushPost):
            return self._me(call.me_name).ingest_push(call.observation)

        raise NotFound(f"unhandled endpoint call {type(call).__name__}")
