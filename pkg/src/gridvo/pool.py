"""Deterministic discrete-event model of request-serving instance pools.

Instances are clones of one virtual entity behind a shared address. A
pool is either static (fixed count) or dynamic (demand-driven count
within [min, max]). The model is single-threaded and event-ordered:
identical inputs give identical latency records, which is what lets the
scaling experiments run in CI at all.

Rules applied at every event boundary, in order:
    1. arrivals join the FIFO queue
    2. idle instances take queued requests (lowest instance id first)
    3. dynamic pools spawn while queue >= threshold and count < max
       (new instances become ready cold_start_ms later)
    4. dynamic pools retire instances idle longer than
       scale_down_idle_ms, longest-idle first, while count > min

Because rules run only at event boundaries, an instance that goes idle
after a batch stays warm until the next request actually arrives; a
pool sized by one batch therefore serves the next batch at full
strength. Retirement still happens whenever a later event finds
instances past their idle threshold.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, List, Optional

from .model import BadRequest


class PoolMode(Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


@dataclass(frozen=True)
class InstancePoolConfig:
    mode: PoolMode
    min_instances: int
    max_instances: int
    service_time_ms: float = 125.0
    cold_start_ms: float = 2000.0
    scale_up_queue_threshold: int = 5
    scale_down_idle_ms: float = 30000.0

    def __post_init__(self):
        if self.mode is PoolMode.STATIC:
            if self.min_instances != self.max_instances or self.min_instances < 1:
                raise BadRequest("static pool needs a fixed count >= 1")
        else:
            if self.min_instances < 0 or self.max_instances < self.min_instances:
                raise BadRequest("dynamic pool needs 0 <= min <= max")
        if self.service_time_ms <= 0:
            raise BadRequest("service_time_ms must be > 0")
        if self.cold_start_ms < 0:
            raise BadRequest("cold_start_ms must be >= 0")
        if self.scale_up_queue_threshold < 1:
            raise BadRequest("scale_up_queue_threshold must be >= 1")

    @classmethod
    def static(cls, n: int, **kw) -> "InstancePoolConfig":
        return cls(PoolMode.STATIC, n, n, **kw)

    @classmethod
    def dynamic(cls, lo: int, hi: int, **kw) -> "InstancePoolConfig":
        return cls(PoolMode.DYNAMIC, lo, hi, **kw)

    @property
    def label(self) -> str:
        if self.mode is PoolMode.STATIC:
            return f"static-{self.min_instances}"
        return f"dynamic-{self.min_instances}-{self.max_instances}"


@dataclass(frozen=True)
class LatencyRecord:
    request_id: int
    arrival: float
    start: float
    completion: float
    instance_id: int

    def __post_init__(self):
        if not self.arrival <= self.start <= self.completion:
            raise BadRequest("latency record out of order")

    @property
    def latency_ms(self) -> float:
        return self.completion - self.arrival


@dataclass
class _Instance:
    id: int
    idle_since: float
    busy_until: Optional[float] = None


class InstancePool:
    """Event-driven pool whose state persists across batches."""

    def __init__(self, config: InstancePoolConfig, start_ms: float = 0.0):
        self.config = config
        self.now = start_ms
        self._next_instance_id = 0
        self._next_request_id = 0
        self.instances: List[_Instance] = []
        self.pending_spawns: List[tuple] = []  # (ready_at, instance_id)
        self.queue: List[tuple] = []  # (request_id, arrival)
        for _ in range(config.min_instances):
            self._add_instance(start_ms)

    def _add_instance(self, now: float) -> None:
        self.instances.append(_Instance(self._next_instance_id, idle_since=now))
        self._next_instance_id += 1

    # -- rule application ---------------------------------------------------

    def _dispatch(self, records: List[LatencyRecord]) -> None:
        idle = sorted((i for i in self.instances if i.busy_until is None),
                      key=lambda i: i.id)
        for inst in idle:
            if not self.queue:
                break
            req_id, arrival = self.queue.pop(0)
            inst.busy_until = self.now + self.config.service_time_ms
            records.append(LatencyRecord(req_id, arrival, self.now,
                                         inst.busy_until, inst.id))

    def _spawn(self) -> None:
        if self.config.mode is not PoolMode.DYNAMIC:
            return
        # scale-from-zero: a queue with nothing live or pending must not strand
        if (self.queue and not self.instances and not self.pending_spawns
                and self.config.max_instances >= 1):
            self.pending_spawns.append((self.now + self.config.cold_start_ms,
                                        self._next_instance_id))
            self._next_instance_id += 1
        while (len(self.queue) >= self.config.scale_up_queue_threshold
               and len(self.instances) + len(self.pending_spawns) < self.config.max_instances):
            self.pending_spawns.append((self.now + self.config.cold_start_ms,
                                        self._next_instance_id))
            self._next_instance_id += 1

    def _retire(self) -> None:
        if self.config.mode is not PoolMode.DYNAMIC:
            return
        idle = sorted((i for i in self.instances if i.busy_until is None),
                      key=lambda i: (i.idle_since, i.id))
        for inst in idle:
            if len(self.instances) <= self.config.min_instances:
                break
            if self.now - inst.idle_since > self.config.scale_down_idle_ms:
                self.instances.remove(inst)

    def _check_bounds(self) -> None:
        live = len(self.instances)
        assert live >= self.config.min_instances, "pool under min"
        assert live + len(self.pending_spawns) <= self.config.max_instances, "pool over max"
        if self.queue:
            assert all(i.busy_until is not None for i in self.instances), \
                "idle instance with non-empty queue"

    # -- event loop ----------------------------------------------------------

    def run_batch(self, batch_size: int, arrival: float) -> List[LatencyRecord]:
        """Serve one batch arriving all at once; returns records in request order."""
        if batch_size < 0:
            raise BadRequest("batch_size must be >= 0")
        if batch_size == 0:
            return []
        if self.config.max_instances == 0:
            raise BadRequest("pool with max 0 instances can never serve")
        if arrival < self.now:
            raise BadRequest("batch arrival before current pool time")
        arrivals = [(arrival, self._next_request_id + k) for k in range(batch_size)]
        self._next_request_id += batch_size
        records: List[LatencyRecord] = []
        while arrivals or self.queue or any(i.busy_until is not None for i in self.instances):
            times = [t for t, _ in arrivals]
            times += [i.busy_until for i in self.instances if i.busy_until is not None]
            times += [t for t, _ in self.pending_spawns]
            self.now = min(times)
            # completions free instances first, then spawns land, then arrivals queue
            for inst in self.instances:
                if inst.busy_until == self.now:
                    inst.busy_until = None
                    inst.idle_since = self.now
            landed = [s for s in self.pending_spawns if s[0] == self.now]
            for ready_at, inst_id in landed:
                self.pending_spawns.remove((ready_at, inst_id))
                self.instances.append(_Instance(inst_id, idle_since=self.now))
            while arrivals and arrivals[0][0] == self.now:
                t, req_id = arrivals.pop(0)
                self.queue.append((req_id, t))
            self._dispatch(records)
            self._spawn()
            self._retire()
            self._check_bounds()
        records.sort(key=lambda r: r.request_id)
        return records


# ---------------------------------------------------------------------------
# Experiment entry points
# ---------------------------------------------------------------------------

MINUTE_MS = 60000.0


def simulate_batch(config: InstancePoolConfig, batch_size: int,
                   arrival: float = 0.0) -> List[LatencyRecord]:
    """One batch against a fresh pool (dynamic pools start at min)."""
    return InstancePool(config, start_ms=arrival).run_batch(batch_size, arrival)


def run_minutes(config: InstancePoolConfig, batch_size: int,
                minutes: int) -> List[List[LatencyRecord]]:
    """Batches at consecutive minute boundaries against one persistent pool."""
    if minutes < 1:
        raise BadRequest("minutes must be >= 1")
    pool = InstancePool(config, start_ms=0.0)
    out = []
    for m in range(minutes):
        out.append(pool.run_batch(batch_size, m * MINUTE_MS))
    return out


def makespan(records: Iterable[LatencyRecord]) -> float:
    records = list(records)
    if not records:
        return 0.0
    arrival = min(r.arrival for r in records)
    return max(r.completion for r in records) - arrival


def simulate_minutes(config: InstancePoolConfig, batch_size: int,
                     minutes: int) -> List[float]:
    return [makespan(batch) for batch in run_minutes(config, batch_size, minutes)]


def _percentile(sorted_values: List[float], p: float) -> float:
    # nearest-rank: smallest value with at least p% of the sample at or below it
    if not sorted_values:
        return 0.0
    rank = max(1, math.ceil(p / 100.0 * len(sorted_values)))
    return sorted_values[rank - 1]


CSV_HEADER = "config,minute,makespan_ms,mean_ms,p50_ms,p95_ms"


def latency_summary(records: List[LatencyRecord]) -> dict:
    lat = sorted(r.latency_ms for r in records)
    return {
        "makespan_ms": makespan(records),
        "mean_ms": sum(lat) / len(lat) if lat else 0.0,
        "p50_ms": _percentile(lat, 50),
        "p95_ms": _percentile(lat, 95),
    }


def emit_latency_csv(configs: List[InstancePoolConfig], out_path,
                   batch_size: int = 400, minutes: int = 5) -> str:
    """Per-minute latency summary CSV for a set of pool configs."""
    lines = [CSV_HEADER]
    for config in configs:
        for minute, batch in enumerate(run_minutes(config, batch_size, minutes), start=1):
            s = latency_summary(batch)
            lines.append(f"{config.label},{minute},{s['makespan_ms']},"
                         f"{s['mean_ms']},{s['p50_ms']},{s['p95_ms']}")
    text = "\n".join(lines) + "\n"
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8", newline="") as f:
            f.write(text)
    return text
