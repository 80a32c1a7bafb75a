"""Simulated field devices: CSV replay through a HAL, plus corpus generation.

Physical smart meters, weather units and generation sites are stood in
for by CSV time series. The HAL translates vendor rows (arbitrary column
names, string cells) into canonical Observations; replay paces them
against a clock and delivers to a sink.

CSV contract: header row; first column ``timestamp`` (Unix seconds);
remaining columns carry measurements; comma separated, ``.`` decimal
point, UTF-8, LF line endings.
"""
from __future__ import annotations

import csv
import json
import math
import os
import random
import time
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Mapping, Optional

from .model import BadRequest, EntityId, Observation, PlatformError, rwo_id


class DeviceKind(Enum):
    SMART_METER = "smart_meter"
    WEATHER_UNIT = "weather_unit"
    DER = "der"


# canonical measurement fields per device kind: (required, optional)
FIELD_CATALOGS = {
    DeviceKind.SMART_METER: (
        ("energy_kwh",),
        (),
    ),
    DeviceKind.WEATHER_UNIT: (
        ("outside_temp_c", "outside_humidity_pct", "wind_speed_ms",
         "wind_dir_deg", "wind_gust_ms", "heat_index_c"),
        ("inside_temp_c", "inside_humidity_pct"),
    ),
    DeviceKind.DER: (
        ("gen_wind_w", "gen_pv_w", "battery_level_pct"),
        (),
    ),
}

TIME_COLUMN = "timestamp"


class BadRow(ValueError):
    """A CSV row the HAL cannot translate; replay skips and counts it."""


class FileUnreadable(PlatformError):
    code = "unavailable"


@dataclass(frozen=True)
class DeviceProfile:
    """Binds one CSV source to one RWO identity.

    ``column_map`` renames vendor CSV columns to canonical field names;
    its value set must cover the kind's required fields exactly, plus
    any declared optional ones (the Home B weather unit declares the two
    indoor fields, Home C does not).
    """

    device_kind: DeviceKind
    rwo_id: EntityId
    csv_path: str
    column_map: Mapping[str, str]
    cadence_s: int = 60
    location: Optional[str] = None

    def __post_init__(self):
        if self.cadence_s <= 0:
            raise BadRequest("cadence_s must be > 0")
        values = list(self.column_map.values())
        if len(set(values)) != len(values):
            raise BadRequest("column_map must be injective")
        required, optional = FIELD_CATALOGS[self.device_kind]
        mapped = set(values)
        missing = set(required) - mapped
        if missing:
            raise BadRequest(f"column_map lacks required fields {sorted(missing)}")
        extra = mapped - set(required) - set(optional)
        if extra:
            raise BadRequest(f"column_map names unknown fields {sorted(extra)}")

    @property
    def fields(self) -> tuple:
        """Canonical field names this device emits, in catalog order."""
        required, optional = FIELD_CATALOGS[self.device_kind]
        mapped = set(self.column_map.values())
        return tuple(f for f in required + optional if f in mapped)


def identity_profile(kind: DeviceKind, rwo_id: EntityId, csv_path: str,
                     indoor: bool = False, location: Optional[str] = None) -> DeviceProfile:
    """Profile whose CSV already uses canonical column names."""
    required, optional = FIELD_CATALOGS[kind]
    names = required + (optional if indoor else ())
    return DeviceProfile(kind, rwo_id, csv_path, {n: n for n in names},
                         location=location)


def functionality_tags(profile: DeviceProfile) -> tuple:
    return tuple(f"measure:{f}" for f in profile.fields)


# ---------------------------------------------------------------------------
# HAL translation
# ---------------------------------------------------------------------------

def hal_translate(raw_row: Mapping[str, str], profile: DeviceProfile) -> Observation:
    """Vendor CSV row to canonical Observation.

    Raises BadRow on a missing column or a cell that does not parse; the
    caller decides whether that is fatal (replay counts and continues).
    """
    raw_ts = raw_row.get(TIME_COLUMN)
    if raw_ts is None:
        raise BadRow(f"row lacks {TIME_COLUMN!r} column")
    try:
        ts = int(raw_ts)
    except (TypeError, ValueError):
        raise BadRow(f"unparseable timestamp {raw_ts!r}") from None
    fields = {}
    for column, canonical in profile.column_map.items():
        cell = raw_row.get(column)
        if cell is None or cell == "":
            raise BadRow(f"missing value for column {column!r}")
        try:
            fields[canonical] = float(cell)
        except ValueError:
            raise BadRow(f"unparseable value {cell!r} in column {column!r}") from None
    try:
        return Observation(source=profile.rwo_id, timestamp=ts, fields=fields,
                           quality=1.0, location=profile.location)
    except BadRequest as e:
        raise BadRow(str(e)) from None


# ---------------------------------------------------------------------------
# Clocks
# ---------------------------------------------------------------------------

class SimClock:
    """Simulated clock in integer Unix seconds; never moves backwards."""

    def __init__(self, start: int = 0):
        self._now = start

    def now(self) -> int:
        return self._now

    def advance_to(self, t: int) -> None:
        if t > self._now:
            self._now = t

    def advance(self, dt: int) -> None:
        if dt > 0:
            self._now += dt


class WallClock:
    def now(self) -> int:
        return int(time.time())

    def advance_to(self, t: int) -> None:
        delay = t - time.time()
        if delay > 0:
            time.sleep(delay)

    def advance(self, dt: int) -> None:
        if dt > 0:
            time.sleep(dt)


@dataclass(frozen=True)
class ReplayReport:
    rows_sent: int
    rows_skipped: int


def replay(profile: DeviceProfile, clock, sink: Callable[[Observation], None]) -> ReplayReport:
    """Send every translatable CSV row to the sink, pacing by the clock."""
    try:
        f = open(profile.csv_path, "r", encoding="utf-8", newline="")
    except OSError as e:
        raise FileUnreadable(f"cannot open {profile.csv_path}: {e}") from None
    sent = skipped = 0
    with f:
        for raw_row in csv.DictReader(f):
            try:
                obs = hal_translate(raw_row, profile)
            except BadRow:
                skipped += 1
                continue
            clock.advance_to(obs.timestamp)
            sink(obs)
            sent += 1
    return ReplayReport(rows_sent=sent, rows_skipped=skipped)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

BASE_TS = 1464739200  # 2016-06-01T00:00:00Z

_ALPHA = "abcdefghijklmnopqrstuvwxyz"


def home_label(index: int) -> str:
    """Stable home names: b, c, ..., z, aa, ab, ... (index 0 is "b")."""
    n = index + 2  # home 0 is the second letter
    out = ""
    while n > 0:
        n, rem = divmod(n - 1, 26)
        out = _ALPHA[rem] + out
    return out


def _fmt(value: float, decimals: int) -> str:
    return f"{value:.{decimals}f}"


def _write_csv(path: str, columns: List[str], rows: List[List[str]]) -> int:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([TIME_COLUMN] + columns)
        w.writerows(rows)
    return len(rows)


def generate_synthetic_corpus(seed: int, homes: int, minutes: int, out_dir) -> dict:
    """Write a deterministic device corpus and its manifest.

    One meter and one weather file per home plus one shared generation
    site; only the first home's weather unit carries indoor sensors.
    Each file is generated from its own seeded stream, so contents
    depend only on (seed, file), never on generation order. The manifest
    records per-file row counts and per-meter energy totals for use as
    an independent aggregation oracle.
    """
    if homes < 1 or minutes < 1:
        raise BadRequest("homes and minutes must be >= 1")
    out_dir = str(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    stamps = [BASE_TS + 60 * i for i in range(minutes)]
    files = []

    for h in range(homes):
        home = home_label(h)

        name = f"sm-home-{home}.csv"
        rng = random.Random(f"{seed}/{name}")
        total = 0.0
        rows = []
        for ts in stamps:
            cell = _fmt(rng.lognormvariate(math.log(0.02), 0.3), 6)
            total += float(cell)
            rows.append([str(ts), cell])
        count = _write_csv(os.path.join(out_dir, name), ["energy_kwh"], rows)
        files.append({"path": name, "rows": count, "total_energy_kwh": total})

        name = f"weather-home-{home}.csv"
        rng = random.Random(f"{seed}/{name}")
        indoor = h == 0
        columns = list(FIELD_CATALOGS[DeviceKind.WEATHER_UNIT][0])
        if indoor:
            columns += list(FIELD_CATALOGS[DeviceKind.WEATHER_UNIT][1])
        rows = []
        for ts in stamps:
            temp = rng.gauss(18.0, 6.0)
            humidity = rng.uniform(20.0, 95.0)
            wind = abs(rng.gauss(4.0, 2.0))
            row = [str(ts),
                   _fmt(temp, 2),
                   _fmt(humidity, 1),
                   _fmt(wind, 2),
                   _fmt(rng.uniform(0.0, 360.0), 1),
                   _fmt(wind + abs(rng.gauss(1.5, 1.0)), 2),
                   _fmt(temp + max(0.0, (humidity - 40.0) / 25.0), 2)]
            if indoor:
                row += [_fmt(rng.gauss(21.0, 1.2), 2),
                        _fmt(rng.uniform(35.0, 55.0), 1)]
            rows.append(row)
        count = _write_csv(os.path.join(out_dir, name), columns, rows)
        files.append({"path": name, "rows": count})

    name = "der-unit.csv"
    rng = random.Random(f"{seed}/{name}")
    battery = 50.0
    rows = []
    for ts in stamps:
        battery = min(100.0, max(0.0, battery + rng.gauss(0.0, 2.0)))
        rows.append([str(ts),
                     _fmt(abs(rng.gauss(800.0, 250.0)), 1),
                     _fmt(abs(rng.gauss(600.0, 200.0)), 1),
                     _fmt(battery, 1)])
    count = _write_csv(os.path.join(out_dir, name),
                       list(FIELD_CATALOGS[DeviceKind.DER][0]), rows)
    files.append({"path": name, "rows": count})

    manifest = {"files": files, "seed": seed, "homes": homes, "minutes": minutes}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def corpus_profiles(out_dir, homes: int) -> List[DeviceProfile]:
    """Device profiles matching :func:`generate_synthetic_corpus` layout."""
    out_dir = str(out_dir)
    profiles = []
    for h in range(homes):
        home = home_label(h)
        profiles.append(identity_profile(
            DeviceKind.SMART_METER, rwo_id(f"sm-home-{home}"),
            os.path.join(out_dir, f"sm-home-{home}.csv"), location=f"home-{home}"))
        profiles.append(identity_profile(
            DeviceKind.WEATHER_UNIT, rwo_id(f"weather-home-{home}"),
            os.path.join(out_dir, f"weather-home-{home}.csv"),
            indoor=(h == 0), location=f"home-{home}"))
    profiles.append(identity_profile(
        DeviceKind.DER, rwo_id("der-unit"),
        os.path.join(out_dir, "der-unit.csv"), location="microgrid"))
    return profiles


# ---------------------------------------------------------------------------
# Batch load generation
# ---------------------------------------------------------------------------

def batch_post(profiles: List[DeviceProfile], at: int, target) -> List[tuple]:
    """Fire one observation per profile into the target at one instant.

    ``target`` is anything with ``submit(arrival_ms, requests) ->
    LatencyRecord list`` (an instance pool adapter or a live endpoint
    driver). Returns (send_time_ms, completion_time_ms) pairs.
    """
    from .wire import encode_observation_post

    requests = []
    for p in profiles:
        fields = {f: 0.0 for f in p.fields}
        obs = Observation(source=p.rwo_id, timestamp=max(at, 1), fields=fields,
                          location=p.location)
        requests.append(encode_observation_post(obs))
    records = target.submit(float(at) * 1000.0, requests)
    return [(r.arrival, r.completion) for r in records]


class PoolBatchTarget:
    """Feeds batches to an instance pool, optionally forwarding each
    request to a real dispatcher for end-to-end runs."""

    def __init__(self, pool, forward: Optional[Callable] = None):
        self.pool = pool
        self.forward = forward

    def submit(self, arrival_ms: float, requests) -> list:
        if self.forward is not None:
            for req in requests:
                self.forward(req)
        return self.pool.run_batch(len(requests), arrival_ms)
