"""Protocol round-trips, status mapping, and router totality."""
from __future__ import annotations

import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from gridvo.model import (
    ANONYMOUS,
    AccessKey,
    AccessTier,
    BadRequest,
    ConflictRejected,
    EntityId,
    EntityKind,
    Forbidden,
    GroupBy,
    NotFound,
    Observation,
    Reduce,
    Unauthorized,
    Unavailable,
    ViewSpec,
    VOState,
    VOStatus,
    me_id,
    service_id,
    vo_id,
)
from gridvo.wire import (
    ActuatePost,
    ActuationCommand,
    AlertPost,
    ComposePost,
    DataQuery,
    ERROR_STATUS,
    GrantMintPost,
    GrantUpdatePost,
    HttpRequest,
    ObservationPost,
    PolicyPost,
    PushPost,
    RegisterMEPost,
    RegisterVOPost,
    SearchQuery,
    StatusPost,
    UpdateCommand,
    UpdateVerb,
    WireError,
    decode_and_route,
    encode_actuate_post,
    encode_alert_post,
    encode_compose_post,
    encode_grant_post,
    encode_observation_post,
    encode_policy_post,
    encode_push_post,
    encode_query_get,
    encode_register_me,
    encode_register_vo,
    encode_search_get,
    encode_status_post,
    error_response,
    parse_raw_request,
    route_or_error,
    route_raw,
)

TOKEN = "cd" * 32
KEY = AccessKey(vo_id("sm-home-b"), AccessTier.FRIEND, TOKEN, service_id("billing"))
OBS = Observation(EntityId(EntityKind.RWO, "sm-home-b"), 1464739260,
                  {"energy_kwh": 0.021}, quality=1.0, location="home-b")


# ---------------------------------------------------------------------------
# Error code to HTTP status mapping
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("err,status", [
    (Unauthorized("no key"), 401),
    (Forbidden("tier too low"), 403),
    (NotFound("no such vo"), 404),
    (ConflictRejected("outranked"), 409),
    (BadRequest("bad field"), 400),
    (Unavailable("no members"), 503),
])
def test_error_status_mapping(err, status):
    resp = error_response(err)
    assert resp.status == status
    body = resp.json()
    assert body["code"] == err.code
    assert ERROR_STATUS[body["code"]] == status


def test_error_body_shape():
    resp = error_response(WireError("not_found", "gone"))
    assert resp.json() == {"code": "not_found", "detail": "gone"}


# ---------------------------------------------------------------------------
# Encoder/decoder round-trips, one per endpoint
# ---------------------------------------------------------------------------

def test_observation_post_round_trip():
    req = encode_observation_post(OBS, key=KEY)
    assert req.method == "POST" and req.path == "/vo/sm-home-b/observations"
    call = decode_and_route(req)
    assert isinstance(call, ObservationPost)
    assert call.vo_name == "sm-home-b"
    assert call.observation == OBS
    assert call.token == TOKEN


def test_observation_post_without_key():
    call = decode_and_route(encode_observation_post(OBS))
    assert call.token is None


def test_query_round_trip_plain():
    req = encode_query_get(vo_id("sm-home-b"), None, (100, 200), key=KEY,
                           fields=["energy_kwh"])
    call = decode_and_route(req)
    assert isinstance(call, DataQuery)
    assert call.target == vo_id("sm-home-b")
    assert (call.t0, call.t1) == (100, 200)
    assert call.fields == ("energy_kwh",)
    assert call.view is None and call.token == TOKEN


def test_query_round_trip_with_view():
    view = ViewSpec(60, GroupBy.ALL_SOURCES, Reduce.SUM, ["energy_kwh"])
    req = encode_query_get(me_id("gen-and-load"), view, (0, 3600))
    call = decode_and_route(req)
    assert call.target == me_id("gen-and-load")
    assert call.view == view


def test_query_rejects_inverted_range():
    with pytest.raises(BadRequest):
        encode_query_get(vo_id("x"), None, (200, 100))
    req = HttpRequest("GET", "/vo/x/data", query=(("from", "200"), ("to", "100")))
    with pytest.raises(BadRequest):
        decode_and_route(req)


def test_policy_round_trip():
    cmd = UpdateCommand(UpdateVerb.START_PERIODIC, 60, ("energy_kwh",))
    call = decode_and_route(encode_policy_post(vo_id("sm-home-b"), cmd, key=KEY))
    assert isinstance(call, PolicyPost)
    assert call.target == vo_id("sm-home-b") and call.command == cmd

    stop = UpdateCommand(UpdateVerb.STOP_PERIODIC)
    call = decode_and_route(encode_policy_post(me_id("weather"), stop))
    assert call.target == me_id("weather") and call.command == stop


def test_update_command_validation():
    with pytest.raises(BadRequest):
        UpdateCommand(UpdateVerb.START_PERIODIC)  # missing period and fields
    with pytest.raises(BadRequest):
        UpdateCommand(UpdateVerb.START_PERIODIC, 0, ("x",))
    with pytest.raises(BadRequest):
        UpdateCommand(UpdateVerb.STOP_PERIODIC, 60)


def test_actuate_round_trip():
    cmd = ActuationCommand(vo_id("der-unit-1"), "set_mode", {"mode": "islanded"},
                           service_id("grid-ops"), priority=7, issued_at=1464739260)
    call = decode_and_route(encode_actuate_post(cmd, key=KEY))
    assert isinstance(call, ActuatePost)
    assert call.vo_name == "der-unit-1" and call.command == cmd


def test_register_and_status_round_trip():
    desc = {"vo_id": "vo:sm-home-b", "anything": [1, 2]}
    call = decode_and_route(encode_register_vo(desc))
    assert isinstance(call, RegisterVOPost) and call.descriptor == desc

    call = decode_and_route(encode_register_me({"me_id": "me:weather"}))
    assert isinstance(call, RegisterMEPost)

    status = VOStatus(VOState.DEGRADED, 1464739500, 12.5)
    call = decode_and_route(encode_status_post(vo_id("sm-home-b"), status))
    assert isinstance(call, StatusPost)
    assert call.target == vo_id("sm-home-b") and call.status == status

    call = decode_and_route(encode_status_post(me_id("weather"), status))
    assert call.target == me_id("weather")


def test_search_round_trip():
    req = encode_search_get(["measure:energy_kwh", "actuate:set_mode"],
                            requester=service_id("billing"), keys=(KEY,))
    call = decode_and_route(req)
    assert isinstance(call, SearchQuery)
    assert call.requirements == ("measure:energy_kwh", "actuate:set_mode")
    assert call.requester == service_id("billing")
    assert call.tokens == (TOKEN,)
    assert call.include_offline is False


def test_search_defaults_to_anonymous():
    call = decode_and_route(encode_search_get(["measure:energy_kwh"]))
    assert call.requester == ANONYMOUS and call.tokens == ()


def test_grant_mint_round_trip():
    req = encode_grant_post(vo_id("sm-home-b"), service_id("billing"),
                            AccessTier.FRIEND, priority=3, key=KEY)
    call = decode_and_route(req)
    assert isinstance(call, GrantMintPost)
    assert call.target == vo_id("sm-home-b")
    assert call.holder == service_id("billing")
    assert call.tier is AccessTier.FRIEND
    assert call.priority == 3 and call.token == TOKEN


def test_grant_update_round_trip():
    req = HttpRequest("POST", "/vo/sm-home-b/grants",
                      body=json.dumps({"key": KEY.to_wire(), "priority": 2}).encode())
    call = decode_and_route(req)
    assert isinstance(call, GrantUpdatePost)
    assert call.key == KEY and call.priority == 2


def test_compose_round_trip():
    view = ViewSpec(2592000, GroupBy.PER_SOURCE, Reduce.SUM, ["energy_kwh"])
    req = encode_compose_post(["measure:energy_kwh"], view, service_id("billing"),
                              tokens=(TOKEN,), name="one-month-consumption",
                              priority=1, exposure_wire={"entries": {"energy_kwh": "friend"}})
    call = decode_and_route(req)
    assert isinstance(call, ComposePost)
    assert call.requirements == ("measure:energy_kwh",)
    assert call.view == view and call.owner == service_id("billing")
    assert call.tokens == (TOKEN,) and call.name == "one-month-consumption"
    assert call.priority == 1
    assert call.exposure == {"entries": {"energy_kwh": "friend"}}


def test_alert_and_push_round_trip():
    status = VOStatus(VOState.OFFLINE, 1464741000)
    call = decode_and_route(encode_alert_post("weather", vo_id("weather-home-b"), status))
    assert isinstance(call, AlertPost)
    assert call.me_name == "weather" and call.vo == vo_id("weather-home-b")
    assert call.status == status

    call = decode_and_route(encode_push_post("gen-and-load", OBS, key=KEY))
    assert isinstance(call, PushPost)
    assert call.me_name == "gen-and-load" and call.observation == OBS
    assert call.token == TOKEN


# ---------------------------------------------------------------------------
# Routing failures map to typed errors, never exceptions
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("req,code", [
    (HttpRequest("GET", "/nope"), "not_found"),
    (HttpRequest("DELETE", "/vo/sm-home-b/data"), "not_found"),
    (HttpRequest("POST", "/vo/UPPER/observations"), "not_found"),
    (HttpRequest("POST", "/vo/sm-home-b/observations", body=b"not json"), "bad_request"),
    (HttpRequest("POST", "/vo/sm-home-b/observations", body=b"[1,2]"), "bad_request"),
    (HttpRequest("GET", "/vo/sm-home-b/data"), "bad_request"),  # missing range
    (HttpRequest("GET", "/vo/sm-home-b/data", query=(("from", "x"), ("to", "1"))), "bad_request"),
    (HttpRequest("POST", "/me/compose", body=b"{}"), "bad_request"),
    (HttpRequest("POST", "/vo/sm-home-b/observations",
                 headers={"Authorization": "Basic zzz"},
                 body=json.dumps(OBS.to_wire()).encode()), "bad_request"),
])
def test_route_failures(req, code):
    out = route_or_error(req)
    assert isinstance(out, WireError)
    assert out.code == code
    assert ERROR_STATUS[out.code] in (400, 404)


# ---------------------------------------------------------------------------
# Raw parsing and totality
# ---------------------------------------------------------------------------

def test_parse_raw_request_well_formed():
    raw = (b"GET /vo/sm-home-b/data?from=0&to=9 HTTP/1.1\r\n"
           b"Authorization: Bearer " + TOKEN.encode() + b"\r\n"
           b"\r\n")
    req = parse_raw_request(raw)
    assert req.method == "GET" and req.path == "/vo/sm-home-b/data"
    assert ("from", "0") in req.query and ("to", "9") in req.query
    call = decode_and_route(req)
    assert isinstance(call, DataQuery) and call.token == TOKEN


def test_raw_round_trip_through_serialization():
    req = encode_observation_post(OBS, key=KEY)
    raw = (f"{req.method} {req.url} HTTP/1.1\r\n".encode()
           + b"".join(f"{k}: {v}\r\n".encode() for k, v in req.headers.items())
           + b"\r\n" + req.body)
    call = route_raw(raw)
    assert isinstance(call, ObservationPost) and call.observation == OBS


def test_router_totality_seeded_fuzz():
    rng = random.Random("wire-fuzz")
    for _ in range(2000):
        blob = bytes(rng.randrange(256) for _ in range(rng.randrange(0, 200)))
        out = route_raw(blob)
        assert isinstance(out, WireError) or out is not None


@settings(max_examples=300)
@given(st.binary(max_size=300))
def test_router_totality_property(blob):
    route_raw(blob)  # must never raise


@settings(max_examples=200)
@given(st.text(max_size=120), st.text(max_size=120))
def test_router_totality_structured_garbage(method, path):
    route_or_error(HttpRequest(method, path, body=b"{}"))
