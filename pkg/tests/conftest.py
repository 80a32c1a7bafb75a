"""Shared test oracles: independent re-derivations the suites check against."""
import random
from collections import defaultdict

from gridvo.me import ALL_GROUP, MIN_QUALITY, AggregateRow
from gridvo.model import GroupBy, Observation, Reduce, rwo_id


def reference_aggregate(observations, view):
    """Straight-line restatement of the aggregation contract.

    Deliberately structured differently from the production code:
    group first, then reduce field by field over explicit lists.
    """
    entries = defaultdict(list)
    for index, obs in enumerate(observations):
        if obs.quality < MIN_QUALITY:
            continue
        bucket = (obs.timestamp // view.time_bucket_s) * view.time_bucket_s
        group = (obs.source.wire if view.group_by is GroupBy.PER_SOURCE
                 else ALL_GROUP)
        entries[(bucket, group)].append((index, obs))

    rows = []
    for bucket, group in sorted(entries):
        cell = entries[(bucket, group)]
        values = {}
        contributors = set()
        for f in view.fields:
            have = [(i, o) for i, o in cell if f in o.fields]
            if not have:
                continue
            vals = [float(o.fields[f]) for _, o in have]
            if view.reduce is Reduce.SUM:
                out = sum(vals)
            elif view.reduce is Reduce.MEAN:
                out = sum(vals) / len(vals)
            elif view.reduce is Reduce.MIN:
                out = min(vals)
            elif view.reduce is Reduce.MAX:
                out = max(vals)
            else:  # LAST: latest timestamp, arrival order breaking ties
                winner = max(have, key=lambda p: (p[1].timestamp, p[0]))
                out = float(winner[1].fields[f])
            values[f] = out
            contributors |= {o.source for _, o in have}
        if values:
            rows.append(AggregateRow(bucket, group, values, len(contributors)))
    return rows


FIELD_POOL = ("energy_kwh", "gen_pv_w", "outside_temp_c")


def random_observations(rng: random.Random, max_count: int = 1000):
    """One random aggregation instance: observation list with gaps,
    duplicate timestamps, and low-quality rows mixed in."""
    sources = [rwo_id(f"dev-{i}") for i in range(rng.randrange(1, 6))]
    out = []
    for _ in range(rng.randrange(1, max_count + 1)):
        fields = {f: round(rng.uniform(-50, 50), 3)
                  for f in FIELD_POOL if rng.random() < 0.7}
        if not fields:
            fields = {"energy_kwh": 1.0}
        out.append(Observation(
            source=rng.choice(sources),
            timestamp=rng.randrange(1, 5000),
            fields=fields,
            quality=rng.choice((1.0, 1.0, 1.0, 0.9, 0.5, 0.49, 0.1))))
    return out
