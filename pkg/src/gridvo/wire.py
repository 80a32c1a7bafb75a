"""REST/JSON protocol spoken between devices, VOs, MEs, registries and services.

Routes:
    POST /vo/{name}/observations        device ingest
    GET  /vo/{name}/data                stored observations, tier filtered
    POST /vo/{name}/policy              periodic-update command
    POST /vo/{name}/actuate             actuation command
    POST /vo/{name}/grants              access-controller grant update (management plane)
    POST /registry/vo                   register / upsert descriptor
    POST /registry/vo/{name}/status     status update
    GET  /registry/vo/search            discovery (?req=...&req=...&key=...)
    POST /registry/vo/{name}/grants     mint an access key
    POST /registry/me                   register descriptor
    POST /registry/me/{name}/status     status update
    POST /registry/me/{name}/grants     mint an access key
    POST /me/compose                    find-or-create an aggregation
    GET  /me/{name}/data                aggregate rows, exposure filtered
    POST /me/{name}/policy              periodic-update command
    POST /me/{name}/alerts              member VO status alert
    POST /me/{name}/observations        push delivery from a member VO

Every non-2xx body is exactly one WireError object. The router is total:
any input yields a routed call or a WireError, never an exception escape.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Optional, Union
from urllib.parse import parse_qsl, quote, urlencode

from .model import (
    AccessKey,
    AccessTier,
    ANONYMOUS,
    BadRequest,
    EntityId,
    EntityKind,
    GroupBy,
    Observation,
    PlatformError,
    Reduce,
    ViewSpec,
    VOStatus,
    parse_entity_id,
    _req_str,
)

# ---------------------------------------------------------------------------
# Command envelopes
# ---------------------------------------------------------------------------

class UpdateVerb(Enum):
    START_PERIODIC = "start_periodic"
    STOP_PERIODIC = "stop_periodic"
    CHANGE_PERIODIC = "change_periodic"


@dataclass(frozen=True)
class UpdateCommand:
    """Subscribe-style control of periodic pushes from a VO or ME."""

    verb: UpdateVerb
    period_s: Optional[int] = None
    fields: Optional[tuple] = None

    def __post_init__(self):
        if self.fields is not None:
            object.__setattr__(self, "fields", tuple(self.fields))
        if self.verb is UpdateVerb.STOP_PERIODIC:
            if self.period_s is not None or self.fields is not None:
                raise BadRequest("stop_periodic carries neither period nor fields")
        else:
            if self.period_s is None or self.period_s <= 0:
                raise BadRequest(f"{self.verb.value} requires period_s > 0")
            if not self.fields:
                raise BadRequest(f"{self.verb.value} requires a field list")

    def to_wire(self) -> dict:
        out: dict = {"verb": self.verb.value}
        if self.period_s is not None:
            out["period_s"] = self.period_s
        if self.fields is not None:
            out["fields"] = list(self.fields)
        return out

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> "UpdateCommand":
        try:
            verb = UpdateVerb(_req_str(data, "verb"))
        except ValueError:
            raise BadRequest(f"unknown update verb {data.get('verb')!r}") from None
        period = data.get("period_s")
        if period is not None and (not isinstance(period, int) or isinstance(period, bool)):
            raise BadRequest("period_s must be an integer")
        fields = data.get("fields")
        if fields is not None:
            if not isinstance(fields, list) or not all(isinstance(f, str) for f in fields):
                raise BadRequest("fields must be a list of strings")
            fields = tuple(fields)
        return cls(verb, period, fields)


@dataclass(frozen=True)
class ActuationCommand:
    """Request to drive an actuator behind a VO.

    ``priority`` is stamped from the issuer's grant at the VO, never
    trusted from the request body.
    """

    target: EntityId
    action: str
    args: Mapping[str, Any]
    issuer: EntityId
    priority: int
    issued_at: int

    def __post_init__(self):
        if self.priority < 0:
            raise BadRequest("actuation priority must be >= 0")

    def to_wire(self) -> dict:
        return {
            "target": self.target.wire,
            "action": self.action,
            "args": dict(self.args),
            "issuer": self.issuer.wire,
            "priority": self.priority,
            "issued_at": self.issued_at,
        }

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> "ActuationCommand":
        args = data.get("args", {})
        if not isinstance(args, Mapping):
            raise BadRequest("actuation args must be an object")
        priority = data.get("priority", 0)
        if not isinstance(priority, int) or isinstance(priority, bool):
            raise BadRequest("priority must be an integer")
        issued_at = data.get("issued_at", 0)
        if not isinstance(issued_at, int) or isinstance(issued_at, bool):
            raise BadRequest("issued_at must be an integer")
        return cls(
            target=parse_entity_id(_req_str(data, "target")),
            action=_req_str(data, "action"),
            args=dict(args),
            issuer=parse_entity_id(_req_str(data, "issuer")),
            priority=priority,
            issued_at=issued_at,
        )


@dataclass(frozen=True)
class WireError:
    code: str
    detail: str = ""

    def to_wire(self) -> dict:
        return {"code": self.code, "detail": self.detail}


ERROR_STATUS = {
    "unauthorized": 401,
    "forbidden": 403,
    "not_found": 404,
    "conflict_rejected": 409,
    "bad_request": 400,
    "unavailable": 503,
}


# ---------------------------------------------------------------------------
# HTTP request/response descriptions (transport-agnostic)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HttpRequest:
    method: str
    path: str
    query: tuple = ()  # ordered (key, value) pairs
    headers: Mapping[str, str] = field(default_factory=dict)
    body: bytes = b""

    def header(self, name: str) -> Optional[str]:
        for k, v in self.headers.items():
            if k.lower() == name.lower():
                return v
        return None

    @property
    def url(self) -> str:
        if not self.query:
            return self.path
        return f"{self.path}?{urlencode(list(self.query))}"


@dataclass(frozen=True)
class HttpResponse:
    status: int
    body: bytes = b""

    def json(self) -> Any:
        return json.loads(self.body.decode("utf-8"))

    @property
    def ok(self) -> bool:
        return 200 <= self.status < 300


def json_response(payload: Any, status: int = 200) -> HttpResponse:
    return HttpResponse(status, json.dumps(payload).encode("utf-8"))


def error_response(err: Union[WireError, PlatformError]) -> HttpResponse:
    if isinstance(err, PlatformError):
        err = WireError(err.code, err.detail)
    return json_response(err.to_wire(), ERROR_STATUS[err.code])


def _bearer(key: Optional[AccessKey]) -> dict:
    if key is None:
        return {}
    return {"Authorization": f"Bearer {key.token}"}


def _json_body(payload: Any) -> bytes:
    return json.dumps(payload).encode("utf-8")


# ---------------------------------------------------------------------------
# Encoders (pure functions from typed values to request descriptions)
# ---------------------------------------------------------------------------

def encode_observation_post(obs: Observation, key: Optional[AccessKey] = None,
                            vo_name: Optional[str] = None) -> HttpRequest:
    """POST an observation to its VO.

    The VO name defaults to the source entity's name: in this platform a
    VO mirrors the name of the single device it virtualizes.
    """
    name = vo_name if vo_name is not None else obs.source.name
    return HttpRequest(
        method="POST",
        path=f"/vo/{quote(name)}/observations",
        headers=_bearer(key),
        body=_json_body(obs.to_wire()),
    )


def encode_query_get(target: EntityId, view: Optional[ViewSpec],
                     time_range: tuple, key: Optional[AccessKey] = None,
                     fields: Optional[list] = None) -> HttpRequest:
    """GET stored data from a VO or aggregate rows from an ME.

    The query string carries the range, the optional field filter and the
    flattened view parameters; the access token travels in the
    Authorization header.
    """
    t0, t1 = time_range
    if t0 > t1:
        raise BadRequest(f"inverted time range [{t0}, {t1}]")
    if target.kind not in (EntityKind.VO, EntityKind.ME):
        raise BadRequest("data queries target a VO or ME")
    query = [("from", str(t0)), ("to", str(t1))]
    if view is not None:
        query += [
            ("bucket", str(view.time_bucket_s)),
            ("group", view.group_by.value),
            ("reduce", view.reduce.value),
        ]
        if view.fields:
            query.append(("view_fields", ",".join(view.fields)))
    if fields:
        query.append(("fields", ",".join(fields)))
    return HttpRequest(
        method="GET",
        path=f"/{target.kind.value}/{quote(target.name)}/data",
        query=tuple(query),
        headers=_bearer(key),
    )


def encode_policy_post(target: EntityId, cmd: UpdateCommand,
                       key: Optional[AccessKey] = None) -> HttpRequest:
    return HttpRequest(
        method="POST",
        path=f"/{target.kind.value}/{quote(target.name)}/policy",
        headers=_bearer(key),
        body=_json_body(cmd.to_wire()),
    )


def encode_actuate_post(cmd: ActuationCommand, key: Optional[AccessKey] = None) -> HttpRequest:
    return HttpRequest(
        method="POST",
        path=f"/vo/{quote(cmd.target.name)}/actuate",
        headers=_bearer(key),
        body=_json_body(cmd.to_wire()),
    )


def encode_register_vo(descriptor_wire: Mapping[str, Any]) -> HttpRequest:
    return HttpRequest("POST", "/registry/vo", body=_json_body(dict(descriptor_wire)))


def encode_status_post(target: EntityId, status: VOStatus) -> HttpRequest:
    return HttpRequest(
        method="POST",
        path=f"/registry/{target.kind.value}/{quote(target.name)}/status",
        body=_json_body(status.to_wire()),
    )


def encode_search_get(requirements: list, requester: EntityId = ANONYMOUS,
                      keys: tuple = (), include_offline: bool = False) -> HttpRequest:
    query = [("req", r) for r in requirements]
    query.append(("requester", requester.wire))
    query += [("key", k.token) for k in keys]
    if include_offline:
        query.append(("include_offline", "1"))
    return HttpRequest("GET", "/registry/vo/search", query=tuple(query))


def encode_grant_post(target: EntityId, holder: EntityId, tier: AccessTier,
                      priority: int, key: Optional[AccessKey] = None) -> HttpRequest:
    return HttpRequest(
        method="POST",
        path=f"/registry/{target.kind.value}/{quote(target.name)}/grants",
        headers=_bearer(key),
        body=_json_body({"holder": holder.wire, "tier": tier.wire, "priority": priority}),
    )


def encode_register_me(descriptor_wire: Mapping[str, Any]) -> HttpRequest:
    return HttpRequest("POST", "/registry/me", body=_json_body(dict(descriptor_wire)))


def encode_compose_post(requirements: list, view: ViewSpec, owner: EntityId,
                        tokens: tuple = (), name: Optional[str] = None,
                        priority: int = 0,
                        exposure_wire: Optional[Mapping[str, Any]] = None) -> HttpRequest:
    body: dict = {
        "requirements": list(requirements),
        "view": view.to_wire(),
        "owner": owner.wire,
        "keys": list(tokens),
        "priority": priority,
    }
    if name is not None:
        body["name"] = name
    if exposure_wire is not None:
        body["exposure"] = dict(exposure_wire)
    return HttpRequest("POST", "/me/compose", body=_json_body(body))


def encode_alert_post(me_name: str, vo: EntityId, status: VOStatus) -> HttpRequest:
    return HttpRequest(
        method="POST",
        path=f"/me/{quote(me_name)}/alerts",
        body=_json_body({"vo_id": vo.wire, "status": status.to_wire()}),
    )


def encode_push_post(me_name: str, obs: Observation, key: Optional[AccessKey] = None) -> HttpRequest:
    return HttpRequest(
        method="POST",
        path=f"/me/{quote(me_name)}/observations",
        headers=_bearer(key),
        body=_json_body(obs.to_wire()),
    )


# ---------------------------------------------------------------------------
# Routed calls (typed decode of every endpoint)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObservationPost:
    vo_name: str
    observation: Observation
    token: Optional[str]


@dataclass(frozen=True)
class DataQuery:
    target: EntityId
    t0: int
    t1: int
    fields: Optional[tuple]
    view: Optional[ViewSpec]
    token: Optional[str]


@dataclass(frozen=True)
class PolicyPost:
    target: EntityId
    command: UpdateCommand
    token: Optional[str]


@dataclass(frozen=True)
class ActuatePost:
    vo_name: str
    command: ActuationCommand
    token: Optional[str]


@dataclass(frozen=True)
class GrantUpdatePost:
    """Management-plane push of a grant into a VO/ME access controller."""

    target: EntityId
    key: AccessKey
    priority: int


@dataclass(frozen=True)
class RegisterVOPost:
    descriptor: dict


@dataclass(frozen=True)
class StatusPost:
    target: EntityId
    status: VOStatus


@dataclass(frozen=True)
class SearchQuery:
    requirements: tuple
    requester: EntityId
    tokens: tuple
    include_offline: bool


@dataclass(frozen=True)
class GrantMintPost:
    target: EntityId
    holder: EntityId
    tier: AccessTier
    priority: int
    token: Optional[str]


@dataclass(frozen=True)
class RegisterMEPost:
    descriptor: dict


@dataclass(frozen=True)
class ComposePost:
    requirements: tuple
    view: ViewSpec
    owner: EntityId
    tokens: tuple
    name: Optional[str]
    priority: int
    exposure: Optional[dict]


@dataclass(frozen=True)
class AlertPost:
    me_name: str
    vo: EntityId
    status: VOStatus


@dataclass(frozen=True)
class PushPost:
    me_name: str
    observation: Observation
    token: Optional[str]


RoutedCall = Union[
    ObservationPost, DataQuery, PolicyPost, ActuatePost, GrantUpdatePost,
    RegisterVOPost, StatusPost, SearchQuery, GrantMintPost,
    RegisterMEPost, ComposePost, AlertPost, PushPost,
]


# ---------------------------------------------------------------------------
# Router
# ---------------------------------------------------------------------------

_NAME_SEG = re.compile(r"^[a-z0-9-]+$")


def _decode_json(body: bytes) -> Any:
    try:
        data = json.loads(body.decode("utf-8"))
    except (ValueError, UnicodeDecodeError):
        raise BadRequest("request body is not valid JSON") from None
    if not isinstance(data, Mapping):
        raise BadRequest("request body must be a JSON object")
    return data


def _token_from(req: HttpRequest) -> Optional[str]:
    auth = req.header("authorization")
    if auth is None:
        return None
    scheme, _, token = auth.partition(" ")
    if scheme.lower() != "bearer" or not token:
        raise BadRequest("authorization header must be 'Bearer <token>'")
    return token.strip()


def _qdict(req: HttpRequest) -> dict:
    """First value per key; repeated keys handled by callers that need them."""
    out: dict = {}
    for k, v in req.query:
        out.setdefault(k, v)
    return out


def _qint(q: dict, key: str) -> int:
    raw = q.get(key)
    if raw is None:
        raise BadRequest(f"missing query parameter {key!r}")
    try:
        return int(raw)
    except ValueError:
        raise BadRequest(f"query parameter {key!r} must be an integer") from None


def _maybe_view(q: dict) -> Optional[ViewSpec]:
    if "bucket" not in q and "group" not in q and "reduce" not in q:
        return None
    try:
        bucket = int(q.get("bucket", ""))
    except ValueError:
        raise BadRequest("view bucket must be an integer") from None
    try:
        group = GroupBy(q.get("group", ""))
        reduce_ = Reduce(q.get("reduce", ""))
    except ValueError as e:
        raise BadRequest(f"bad view parameter: {e}") from None
    fields = tuple(f for f in q.get("view_fields", "").split(",") if f)
    return ViewSpec(bucket, group, reduce_, fields)


def _split_path(path: str) -> list:
    if not path.startswith("/"):
        raise NotFoundPath(path)
    return [seg for seg in path.split("/") if seg]


class NotFoundPath(PlatformError):
    code = "not_found"


def _name_seg(seg: str) -> str:
    if not _NAME_SEG.match(seg):
        raise NotFoundPath(f"no such resource segment {seg!r}")
    return seg


def decode_and_route(req: HttpRequest) -> RoutedCall:
    """Decode a request description into a typed endpoint call.

    Raises PlatformError subclasses for anything malformed; callers that
    need totality use :func:`route_or_error`.
    """
    segs = _split_path(req.path)
    method = req.method.upper()

    if len(segs) == 3 and segs[0] in ("vo", "me"):
        kind = EntityKind(segs[0])
        name = _name_seg(segs[1])
        tail = segs[2]
        if kind is EntityKind.VO and tail == "observations" and method == "POST":
            return ObservationPost(name, Observation.from_wire(_decode_json(req.body)),
                                   _token_from(req))
        if tail == "data" and method == "GET":
            q = _qdict(req)
            t0, t1 = _qint(q, "from"), _qint(q, "to")
            if t0 > t1:
                raise BadRequest(f"inverted time range [{t0}, {t1}]")
            fields = None
            if "fields" in q:
                fields = tuple(f for f in q["fields"].split(",") if f)
            return DataQuery(EntityId(kind, name), t0, t1, fields,
                             _maybe_view(q), _token_from(req))
        if tail == "policy" and method == "POST":
            return PolicyPost(EntityId(kind, name),
                              UpdateCommand.from_wire(_decode_json(req.body)),
                              _token_from(req))
        if kind is EntityKind.VO and tail == "actuate" and method == "POST":
            return ActuatePost(name, ActuationCommand.from_wire(_decode_json(req.body)),
                               _token_from(req))
        if kind is EntityKind.VO and tail == "grants" and method == "POST":
            data = _decode_json(req.body)
            priority = data.get("priority", 0)
            if not isinstance(priority, int) or isinstance(priority, bool):
                raise BadRequest("priority must be an integer")
            return GrantUpdatePost(EntityId(kind, name),
                                   AccessKey.from_wire(data.get("key", {})), priority)
        if kind is EntityKind.ME and tail == "alerts" and method == "POST":
            data = _decode_json(req.body)
            return AlertPost(name, parse_entity_id(_req_str(data, "vo_id")),
                             VOStatus.from_wire(data.get("status", {})))
        if kind is EntityKind.ME and tail == "observations" and method == "POST":
            return PushPost(name, Observation.from_wire(_decode_json(req.body)),
                            _token_from(req))

    if segs[:1] == ["me"] and len(segs) == 2 and segs[1] == "compose" and method == "POST":
        data = _decode_json(req.body)
        reqs = data.get("requirements")
        if not isinstance(reqs, list) or not all(isinstance(r, str) for r in reqs):
            raise BadRequest("requirements must be a list of strings")
        view_data = data.get("view")
        if not isinstance(view_data, Mapping):
            raise BadRequest("compose needs a 'view' object")
        tokens = data.get("keys", [])
        if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
            raise BadRequest("keys must be a list of token strings")
        name = data.get("name")
        if name is not None and not isinstance(name, str):
            raise BadRequest("name must be a string")
        priority = data.get("priority", 0)
        if not isinstance(priority, int) or isinstance(priority, bool):
            raise BadRequest("priority must be an integer")
        exposure = data.get("exposure")
        if exposure is not None and not isinstance(exposure, Mapping):
            raise BadRequest("exposure must be an object")
        return ComposePost(tuple(reqs), ViewSpec.from_wire(view_data),
                           parse_entity_id(_req_str(data, "owner")),
                           tuple(tokens), name, priority,
                           dict(exposure) if exposure is not None else None)

    if segs[:1] == ["registry"] and len(segs) >= 2 and segs[1] in ("vo", "me"):
        kind = EntityKind(segs[1])
        if len(segs) == 2 and method == "POST":
            data = _decode_json(req.body)
            call = RegisterVOPost if kind is EntityKind.VO else RegisterMEPost
            return call(dict(data))
        if len(segs) == 3 and segs[2] == "search" and kind is EntityKind.VO and method == "GET":
            reqs = tuple(v for k, v in req.query if k == "req")
            tokens = tuple(v for k, v in req.query if k == "key")
            q = _qdict(req)
            requester = ANONYMOUS
            if "requester" in q:
                requester = parse_entity_id(q["requester"])
            return SearchQuery(reqs, requester, tokens, q.get("include_offline") == "1")
        if len(segs) == 4 and segs[3] == "status" and method == "POST":
            name = _name_seg(segs[2])
            return StatusPost(EntityId(kind, name),
                              VOStatus.from_wire(_decode_json(req.body)))
        if len(segs) == 4 and segs[3] == "grants" and method == "POST":
            name = _name_seg(segs[2])
            data = _decode_json(req.body)
            priority = data.get("priority", 0)
            if not isinstance(priority, int) or isinstance(priority, bool):
                raise BadRequest("priority must be an integer")
            return GrantMintPost(EntityId(kind, name),
                                 parse_entity_id(_req_str(data, "holder")),
                                 AccessTier.from_wire(_req_str(data, "tier")),
                                 priority, _token_from(req))

    raise NotFoundPath(f"no route for {method} {req.path}")


def route_or_error(req: HttpRequest) -> Union[RoutedCall, WireError]:
    """Total routing: any request yields a call or a WireError."""
    try:
        return decode_and_route(req)
    except PlatformError as e:
        return WireError(e.code, e.detail)
    except Exception as e:  # defensive: the router must never crash
        return WireError("bad_request", f"unparseable request: {e}")


# ---------------------------------------------------------------------------
# Raw byte-level entry (for fuzzing and minimal transports)
# ---------------------------------------------------------------------------

def parse_raw_request(data: bytes) -> HttpRequest:
    """Parse a raw HTTP/1.x request byte string.

    Raises BadRequest on anything that is not a well-formed request; never
    raises anything else, whatever the bytes.
    """
    try:
        head, _, body = data.partition(b"\r\n\r\n")
        lines = head.split(b"\r\n")
        parts = lines[0].decode("latin-1").split(" ")
        if len(parts) != 3 or not parts[0].isalpha():
            raise BadRequest("malformed request line")
        method, target = parts[0], parts[1]
        path, _, query_s = target.partition("?")
        query = tuple(parse_qsl(query_s, keep_blank_values=True))
        headers = {}
        for line in lines[1:]:
            name, sep, value = line.decode("latin-1").partition(":")
            if not sep or not name.strip():
                raise BadRequest(f"malformed header line {line!r}")
            headers[name.strip()] = value.strip()
        return HttpRequest(method=method, path=path, query=query,
                           headers=headers, body=body)
    except PlatformError:
        raise
    except Exception as e:
        raise BadRequest(f"malformed raw request: {e}") from None


def route_raw(data: bytes) -> Union[RoutedCall, WireError]:
    """Byte-level total router used by fuzz tests and thin transports."""
    try:
        req = parse_raw_request(data)
    except PlatformError as e:
        return WireError(e.code, e.detail)
    return route_or_error(req)
