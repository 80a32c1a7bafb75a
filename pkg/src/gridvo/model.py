"""Shared domain types for the grid virtualization platform.

Everything here is an immutable value object: safe to share between
concurrent tasks without coordination. The JSON encodings produced by
``to_wire``/``from_wire`` are the canonical wire contract used by the
protocol layer.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Any, Mapping, Optional, Union

Scalar = Union[int, float, str, bool]


# ---------------------------------------------------------------------------
# Errors. Each carries a wire code so the protocol layer can map it to an
# HTTP status without inspecting types.
# ---------------------------------------------------------------------------

class PlatformError(Exception):
    """Base error; ``code`` is one of the wire error codes."""

    code = "bad_request"

    def __init__(self, detail: str = ""):
        super().__init__(detail)
        self.detail = detail


class BadRequest(PlatformError):
    code = "bad_request"


class MalformedId(BadRequest):
    """Entity id text does not match the ``<kind>:<name>`` grammar."""


class Unauthorized(PlatformError):
    code = "unauthorized"


class Forbidden(PlatformError):
    code = "forbidden"


class NotFound(PlatformError):
    code = "not_found"


class ConflictRejected(PlatformError):
    code = "conflict_rejected"


class Unavailable(PlatformError):
    code = "unavailable"


# ---------------------------------------------------------------------------
# Identity
# ---------------------------------------------------------------------------

class EntityKind(Enum):
    VO = "vo"
    ME = "me"
    SERVICE = "service"
    RWO = "rwo"


_NAME_RE = re.compile(r"^[a-z0-9-]+$")


@dataclass(frozen=True)
class EntityId:
    """Platform-wide identifier, serialized as ``<kind>:<name>``.

    Names are unique within their kind for one deployment; the serialized
    form round-trips losslessly through :func:`parse_entity_id`.
    """

    kind: EntityKind
    name: str

    def __post_init__(self):
        if not _NAME_RE.match(self.name):
            raise MalformedId(f"illegal entity name {self.name!r}")

    def __lt__(self, other: "EntityId") -> bool:
        if not isinstance(other, EntityId):
            return NotImplemented
        return (self.kind.value, self.name) < (other.kind.value, other.name)

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.name}"

    @property
    def wire(self) -> str:
        return str(self)


def parse_entity_id(text: str) -> EntityId:
    """Parse ``<kind>:<name>`` into an :class:`EntityId`.

    Raises :class:`MalformedId` on an unknown kind or illegal characters.
    """
    kind_s, sep, name = text.partition(":")
    if not sep:
        raise MalformedId(f"missing kind separator in {text!r}")
    try:
        kind = EntityKind(kind_s)
    except ValueError:
        raise MalformedId(f"unknown entity kind {kind_s!r}") from None
    return EntityId(kind, name)


def vo_id(name: str) -> EntityId:
    return EntityId(EntityKind.VO, name)


def me_id(name: str) -> EntityId:
    return EntityId(EntityKind.ME, name)


def service_id(name: str) -> EntityId:
    return EntityId(EntityKind.SERVICE, name)


def rwo_id(name: str) -> EntityId:
    return EntityId(EntityKind.RWO, name)


ANONYMOUS = EntityId(EntityKind.SERVICE, "anonymous")


# ---------------------------------------------------------------------------
# Access control
# ---------------------------------------------------------------------------

class AccessTier(IntEnum):
    """Visibility tiers, totally ordered PUBLIC < FRIEND < PRIVATE."""

    PUBLIC = 0
    FRIEND = 1
    PRIVATE = 2

    @property
    def wire(self) -> str:
        return self.name.lower()

    @classmethod
    def from_wire(cls, text: str) -> "AccessTier":
        try:
            return cls[text.upper()]
        except KeyError:
            raise BadRequest(f"unknown access tier {text!r}") from None


def tier_allows(key_tier: AccessTier, field_tier: AccessTier) -> bool:
    """True iff a key of ``key_tier`` may read a field of ``field_tier``."""
    return field_tier <= key_tier


_TOKEN_RE = re.compile(r"^[0-9a-f]{64}$")


@dataclass(frozen=True)
class AccessKey:
    """Bearer capability opening ``subject`` at ``tier`` for ``holder``.

    The token is 32 random bytes, hex encoded; minted from a seeded PRNG
    in simulation mode and from OS entropy in live mode.
    """

    subject: EntityId
    tier: AccessTier
    token: str
    holder: EntityId

    def __post_init__(self):
        if not _TOKEN_RE.match(self.token):
            raise BadRequest("access token must be 32 bytes hex encoded")

    def to_wire(self) -> dict:
        return {
            "subject": self.subject.wire,
            "tier": self.tier.wire,
            "token": self.token,
            "holder": self.holder.wire,
        }

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> "AccessKey":
        return cls(
            subject=parse_entity_id(_req_str(data, "subject")),
            tier=AccessTier.from_wire(_req_str(data, "tier")),
            token=_req_str(data, "token"),
            holder=parse_entity_id(_req_str(data, "holder")),
        )


@dataclass(frozen=True)
class VisibilityMap:
    """Per-field access tiers. Fields absent from the map are PRIVATE."""

    entries: Mapping[str, AccessTier] = field(default_factory=dict)

    def tier_for(self, field_name: str) -> AccessTier:
        return self.entries.get(field_name, AccessTier.PRIVATE)

    def allows(self, key_tier: AccessTier, field_name: str) -> bool:
        return tier_allows(key_tier, self.tier_for(field_name))

    def min_tier(self) -> AccessTier:
        """Lowest tier of any mapped field; PRIVATE when the map is empty."""
        if not self.entries:
            return AccessTier.PRIVATE
        return min(self.entries.values())

    def to_wire(self) -> dict:
        return {"entries": {k: v.wire for k, v in self.entries.items()}}

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> "VisibilityMap":
        entries = data.get("entries")
        if not isinstance(entries, Mapping):
            raise BadRequest("visibility map needs an 'entries' object")
        return cls({str(k): AccessTier.from_wire(str(v)) for k, v in entries.items()})


# ---------------------------------------------------------------------------
# Measurements
# ---------------------------------------------------------------------------

def _is_scalar(v: Any) -> bool:
    return isinstance(v, (int, float, str, bool))


@dataclass(frozen=True)
class Observation:
    """One timestamped key-value measurement record.

    ``fields`` is an ordered map of flat scalars; ``quality`` defaults to
    1.0 when the HAL supplies none. Two observations from the same source
    carry identical key sets unless the device description changed.
    """

    source: EntityId
    timestamp: int
    fields: Mapping[str, Scalar]
    quality: float = 1.0
    location: Optional[str] = None

    def __post_init__(self):
        if self.timestamp <= 0:
            raise BadRequest("observation timestamp must be > 0")
        if not self.fields:
            raise BadRequest("observation fields must be non-empty")
        for k, v in self.fields.items():
            if not _is_scalar(v):
                raise BadRequest(f"observation field {k!r} is not a scalar")
        if not 0.0 <= self.quality <= 1.0:
            raise BadRequest("observation quality must be in [0, 1]")

    def restrict(self, names) -> Optional["Observation"]:
        """Copy with fields limited to ``names``; None if nothing remains."""
        kept = {k: v for k, v in self.fields.items() if k in names}
        if not kept:
            return None
        return Observation(self.source, self.timestamp, kept, self.quality, self.location)

    def to_wire(self) -> dict:
        out: dict = {
            "source": self.source.wire,
            "timestamp": self.timestamp,
            "fields": dict(self.fields),
            "quality": self.quality,
        }
        if self.location is not None:
            out["location"] = self.location
        return out

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> "Observation":
        ts = data.get("timestamp")
        if not isinstance(ts, int) or isinstance(ts, bool):
            raise BadRequest("observation timestamp must be an integer")
        fields = data.get("fields")
        if not isinstance(fields, Mapping):
            raise BadRequest("observation needs a 'fields' object")
        quality = data.get("quality", 1.0)
        if not isinstance(quality, (int, float)) or isinstance(quality, bool):
            raise BadRequest("observation quality must be a number")
        location = data.get("location")
        if location is not None and not isinstance(location, str):
            raise BadRequest("observation location must be a string")
        return cls(
            source=parse_entity_id(_req_str(data, "source")),
            timestamp=ts,
            fields=dict(fields),
            quality=float(quality),
            location=location,
        )


# ---------------------------------------------------------------------------
# Status
# ---------------------------------------------------------------------------

class VOState(Enum):
    ONLINE = "online"
    DEGRADED = "degraded"
    OFFLINE = "offline"


@dataclass(frozen=True)
class VOStatus:
    state: VOState
    last_seen: int
    qos_latency_ms: float = 0.0

    def __post_init__(self):
        if self.qos_latency_ms < 0:
            raise BadRequest("qos_latency_ms must be >= 0")

    def to_wire(self) -> dict:
        return {
            "state": self.state.value,
            "last_seen": self.last_seen,
            "qos_latency_ms": self.qos_latency_ms,
        }

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> "VOStatus":
        try:
            state = VOState(_req_str(data, "state"))
        except ValueError:
            raise BadRequest(f"unknown vo state {data.get('state')!r}") from None
        last_seen = data.get("last_seen")
        if not isinstance(last_seen, int) or isinstance(last_seen, bool):
            raise BadRequest("last_seen must be an integer")
        qos = data.get("qos_latency_ms", 0.0)
        if not isinstance(qos, (int, float)) or isinstance(qos, bool):
            raise BadRequest("qos_latency_ms must be a number")
        return cls(state=state, last_seen=last_seen, qos_latency_ms=float(qos))


# ---------------------------------------------------------------------------
# Aggregation views
# ---------------------------------------------------------------------------

class GroupBy(Enum):
    PER_SOURCE = "per_source"
    ALL_SOURCES = "all_sources"


class Reduce(Enum):
    SUM = "sum"
    MEAN = "mean"
    MIN = "min"
    MAX = "max"
    LAST = "last"


@dataclass(frozen=True)
class ViewSpec:
    """Aggregation window, grouping and reduction over named fields.

    The two canonical smart-grid views are (60 s, ALL_SOURCES, SUM) for
    operations and (2592000 s, PER_SOURCE, SUM) for billing.
    """

    time_bucket_s: int
    group_by: GroupBy
    reduce: Reduce
    fields: tuple

    def __init__(self, time_bucket_s: int, group_by: GroupBy, reduce: Reduce, fields):
        if time_bucket_s <= 0:
            raise BadRequest("time_bucket_s must be > 0")
        fields = tuple(fields)
        if not fields:
            raise BadRequest("view needs at least one field")
        object.__setattr__(self, "time_bucket_s", time_bucket_s)
        object.__setattr__(self, "group_by", group_by)
        object.__setattr__(self, "reduce", reduce)
        object.__setattr__(self, "fields", fields)

    def bucket_start(self, timestamp: int) -> int:
        return timestamp - timestamp % self.time_bucket_s

    def to_wire(self) -> dict:
        return {
            "time_bucket_s": self.time_bucket_s,
            "group_by": self.group_by.value,
            "reduce": self.reduce.value,
            "fields": list(self.fields),
        }

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> "ViewSpec":
        bucket = data.get("time_bucket_s")
        if not isinstance(bucket, int) or isinstance(bucket, bool):
            raise BadRequest("time_bucket_s must be an integer")
        try:
            group = GroupBy(_req_str(data, "group_by"))
            reduce_ = Reduce(_req_str(data, "reduce"))
        except ValueError as e:
            raise BadRequest(str(e)) from None
        fields = data.get("fields")
        if not isinstance(fields, list) or not all(isinstance(f, str) for f in fields):
            raise BadRequest("view fields must be a list of strings")
        return cls(bucket, group, reduce_, fields)


MONTH_BUCKET_S = 30 * 86400  # fixed-width month; calendar months stay unaligned


def _req_str(data: Mapping[str, Any], key: str) -> str:
    v = data.get(key)
    if not isinstance(v, str):
        raise BadRequest(f"missing or non-string field {key!r}")
    return v
