"""Service bindings: boot, supervision, honest unavailability."""
import pytest

from gridvo.devices import BASE_TS
from gridvo.hub import Platform
from gridvo.model import (
    AccessTier,
    GroupBy,
    NotFound,
    Observation,
    Reduce,
    Unavailable,
    ViewSpec,
    VisibilityMap,
    VOState,
    VOStatus,
    me_id,
    rwo_id,
    service_id,
    vo_id,
)
from gridvo.registry import VODescriptor
from gridvo.services import (
    REBIND_BACKOFF_S,
    BindingHealth,
    Need,
    ServiceSpec,
)
from gridvo import wire


def obs(source, ts, **fields):
    return Observation(source=rwo_id(source), timestamp=ts,
                       fields=fields, quality=1.0)


def add_meter(platform, name, tag, tier=AccessTier.PUBLIC):
    desc = VODescriptor(
        id=vo_id(name), owner=service_id("op"), location="lab",
        functionalities=("measure:energy_kwh", tag),
        endpoint=f"/vo/{name}", status=VOStatus(VOState.OFFLINE, 0),
        default_tier=tier)
    platform.add_vo(desc, VisibilityMap({"energy_kwh": AccessTier.PUBLIC}))
    return desc


VIEW = ViewSpec(60, GroupBy.PER_SOURCE, Reduce.SUM, ("energy_kwh",))


def need(name="load", tag="site:main", engine="load-eng", exposure=None):
    return Need(name=name, requirements=(tag,), view=VIEW,
                me_name=engine, exposure=exposure)


def online_platform(*vo_names, tag="site:main"):
    platform = Platform(seed=11)
    for name in vo_names:
        add_meter(platform, name, tag)
        platform.dispatch(wire.encode_observation_post(
            obs(name, BASE_TS, energy_kwh=1.0)))
    platform.tick(BASE_TS + 1.0)
    return platform


class TestBoot:
    def test_boot_binds_and_reads(self):
        platform = online_platform("m1", "m2")
        svc = platform.add_service(ServiceSpec(service_id("ops"), (need(),)))
        health = svc.boot(platform.now_s)
        assert health == {"load": BindingHealth.OK}
        binding = svc.bindings["load"]
        assert binding.me == me_id("load-eng")

        platform.dispatch(wire.encode_observation_post(
            obs("m1", BASE_TS + 60, energy_kwh=2.0)))
        platform.tick(BASE_TS + 61.0)  # keyless membership is served by polls
        rows = svc.read("load", BASE_TS, BASE_TS + 120)
        got = {(r["group"], r["bucket_start"]): r["values"]["energy_kwh"]
               for r in rows}
        assert got[("rwo:m1", BASE_TS)] == 1.0
        assert got[("rwo:m1", BASE_TS + 60)] == 2.0

    def test_partial_boot_keeps_good_bindings(self):
        platform = online_platform("m1")
        spec = ServiceSpec(service_id("ops"), (
            need(),
            need(name="ghost", tag="nowhere:at-all", engine="ghost-eng"),
        ))
        svc = platform.add_service(spec)
        health = svc.boot(platform.now_s)
        assert health["load"] is BindingHealth.OK
        assert health["ghost"] is BindingHealth.LOST
        assert any("composition refused" in line for line in svc.log)
        # the good need still serves
        assert svc.read("load", BASE_TS, BASE_TS + 60)

    def test_unknown_need_read_raises(self):
        platform = online_platform("m1")
        svc = platform.add_service(ServiceSpec(service_id("ops"), (need(),)))
        svc.boot(platform.now_s)
        with pytest.raises(NotFound):
            svc.read("imaginary", 0, 1)

    def test_lost_need_read_is_unavailable(self):
        platform = online_platform("m1")
        spec = ServiceSpec(service_id("ops"), (
            need(name="ghost", tag="nowhere:at-all", engine="ghost-eng"),))
        svc = platform.add_service(spec)
        svc.boot(platform.now_s)
        with pytest.raises(Unavailable):
            svc.read("ghost", 0, 1)


class TestComposeKeys:
    def test_creator_key_sized_to_widest_exposure(self):
        exposure = VisibilityMap({"energy_kwh": AccessTier.PRIVATE})
        platform = online_platform("m1")
        svc = platform.add_service(ServiceSpec(
            service_id("ops"), (need(exposure=exposure),)))
        svc.boot(platform.now_s)
        token = svc.bindings["load"].token
        key = platform.me_registry.minter.resolve(token)
        assert key.tier is AccessTier.PRIVATE
        assert key.holder == service_id("ops")

    def test_public_exposure_gets_public_key(self):
        exposure = VisibilityMap({"energy_kwh": AccessTier.PUBLIC})
        platform = online_platform("m1")
        svc = platform.add_service(ServiceSpec(
            service_id("ops"), (need(exposure=exposure),)))
        svc.boot(platform.now_s)
        key = platform.me_registry.minter.resolve(svc.bindings["load"].token)
        assert key.tier is AccessTier.PUBLIC

    def test_reuser_binds_same_engine_without_new_key(self):
        exposure = VisibilityMap({"energy_kwh": AccessTier.PUBLIC})
        platform = online_platform("m1")
        first = platform.add_service(ServiceSpec(
            service_id("ops"), (need(exposure=exposure),)))
        first.boot(platform.now_s)
        second = platform.add_service(ServiceSpec(
            service_id("tenant"), (need(exposure=exposure),)))
        second.boot(platform.now_s)
        assert second.bindings["load"].me == first.bindings["load"].me
        assert second.bindings["load"].token is None
        # both are now subscribed to the shared engine
        me = platform.mes["load-eng"]
        assert service_id("ops") in me.subscribers
        assert service_id("tenant") in me.subscribers
        # the public-tier reuser still reads the public exposure
        assert second.read("load", BASE_TS, BASE_TS + 60)


class TestSupervision:
    def test_degraded_engine_marks_binding_degraded(self):
        platform = online_platform("m1")
        svc = platform.add_service(ServiceSpec(service_id("ops"), (need(),)))
        svc.boot(platform.now_s)
        platform.me_registry.update_status(
            me_id("load-eng"), VOStatus(VOState.DEGRADED, BASE_TS + 50))
        platform.tick(BASE_TS + 50.0)
        assert svc.health() == {"load": "degraded"}
        # degraded still serves data
        assert svc.read("load", BASE_TS, BASE_TS + 60)
        # recovery goes back to ok
        platform.me_registry.update_status(
            me_id("load-eng"), VOStatus(VOState.ONLINE, BASE_TS + 55))
        platform.tick(BASE_TS + 55.0)
        assert svc.health() == {"load": "ok"}

    def test_offline_engine_is_rebound_on_backoff(self):
        platform = online_platform("m1")
        svc = platform.add_service(ServiceSpec(service_id("ops"), (need(),)))
        svc.boot(platform.now_s)  # last_attempt = BASE_TS + 1
        platform.me_registry.update_status(
            me_id("load-eng"), VOStatus(VOState.OFFLINE, BASE_TS + 90))
        platform.tick(BASE_TS + 90.0)
        # marked lost and, with the backoff elapsed since boot, immediately
        # re-requested; the member VO is still fine so composition succeeds
        assert svc.health() == {"load": "ok"}
        assert any("engine lost" in line for line in svc.log)
        assert any(line.count("bound to me:load-eng") for line in svc.log[1:])

    def test_rebind_attempts_respect_backoff(self):
        platform = online_platform("m1")
        svc = platform.add_service(ServiceSpec(service_id("ops"), (need(),)))
        svc.boot(platform.now_s)
        # kill both the engine and the only candidate member, so every
        # re-request is refused
        platform.me_registry.update_status(
            me_id("load-eng"), VOStatus(VOState.OFFLINE, BASE_TS + 70))
        platform.vo_registry.update_status(
            vo_id("m1"), VOStatus(VOState.OFFLINE, BASE_TS + 70))

        refusals = lambda: sum("composition refused" in l for l in svc.log)
        platform.tick(BASE_TS + 70.0)
        assert refusals() == 1
        platform.tick(BASE_TS + 100.0)  # 30 s later: inside the backoff
        assert refusals() == 1
        platform.tick(BASE_TS + 131.0)  # past the backoff: one more try
        assert refusals() == 2
        assert svc.health() == {"load": "lost"}

    def test_notify_unmet_unbinds_and_read_is_honest(self):
        platform = online_platform("m1")
        svc = platform.add_service(ServiceSpec(service_id("ops"), (need(),)))
        svc.boot(platform.now_s)
        svc.notify_unmet(me_id("load-eng"), platform.now_s)
        binding = svc.bindings["load"]
        assert binding.me is None
        assert binding.token is None
        assert binding.health is BindingHealth.LOST
        assert any("requirement unmet" in line for line in svc.log)
        with pytest.raises(Unavailable):
            svc.read("load", BASE_TS, BASE_TS + 60)

    def test_notify_unmet_for_other_engine_is_ignored(self):
        platform = online_platform("m1")
        svc = platform.add_service(ServiceSpec(service_id("ops"), (need(),)))
        svc.boot(platform.now_s)
        svc.notify_unmet(me_id("somebody-else"), platform.now_s)
        assert svc.health() == {"load": "ok"}


class TestBackoffConstant:
    def test_backoff_is_a_minute(self):
        # several tests above encode 60 s waits; keep them honest
        assert REBIND_BACKOFF_S == 60.0
