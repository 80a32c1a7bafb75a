"""Scripted neighbourhood run: five devices, four services, one outage.

The runner reads a TOML topology, generates the matching device corpus,
drives the platform minute by minute through its single dispatch
endpoint, kills one device partway, and ends with a reproducible JSON
report of every state transition, every reconfiguration, and every
service read — including a scan proving no private field ever reached a
reader below PRIVATE tier.

Running it twice with the same seed yields byte-identical reports.
"""
from __future__ import annotations

import csv
import json
import os
import tempfile
from contextlib import contextmanager
from typing import Dict, List, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .devices import (
    BASE_TS,
    FileUnreadable,
    corpus_profiles,
    functionality_tags,
    generate_synthetic_corpus,
    hal_translate,
)
from .hub import Platform
from .model import (
    AccessTier,
    PlatformError,
    ViewSpec,
    VisibilityMap,
    VOState,
    VOStatus,
    service_id,
    vo_id,
)
from .registry import VODescriptor
from .services import BindingHealth, Need, ServiceSpec
from . import wire

DEFAULT_CONFIG = os.path.join(os.path.dirname(__file__), "data",
                              "smart_homes.toml")


class ScenarioError(Exception):
    """A case-study step failed; the message names the step."""

    def __init__(self, step: str, detail: str):
        self.step = step
        self.detail = detail
        super().__init__(f"{step}: {detail}")


@contextmanager
def _guard(step: str):
    """Turn any failure inside one step into a named ScenarioError."""
    try:
        yield
    except ScenarioError:
        raise
    except Exception as e:
        raise ScenarioError(step, str(e)) from e


def load_config(path: Optional[str] = None) -> dict:
    path = DEFAULT_CONFIG if path is None else str(path)
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except OSError as e:
        raise ScenarioError("load-config", f"cannot open {path}: {e}")
    except tomllib.TOMLDecodeError as e:
        raise ScenarioError("load-config", f"{path}: {e}")


def _tier(text) -> AccessTier:
    return AccessTier.from_wire(str(text))


def _visibility(table) -> VisibilityMap:
    return VisibilityMap({str(k): _tier(v) for k, v in dict(table).items()})


def _service_spec(cfg: dict, tokens: Dict[str, List[str]]) -> ServiceSpec:
    needs = []
    for n in cfg.get("needs", ()):
        exposure = _visibility(n["exposure"]) if "exposure" in n else None
        needs.append(Need(
            name=n["name"],
            requirements=tuple(n["requirements"]),
            view=ViewSpec.from_wire(n["view"]),
            me_name=n.get("engine"),
            priority=int(n.get("priority", 0)),
            exposure=exposure,
        ))
    if not needs:
        raise ScenarioError("read-config",
                            f"service {cfg.get('name')!r} declares no needs")
    return ServiceSpec(service_id(cfg["name"]), tuple(needs),
                       tuple(tokens.get(cfg["name"], ())))


def register_objects(platform: Platform, vo_cfgs: list,
                     profiles: Dict[str, object]) -> set:
    """Register the configured virtual objects; returns the set of field
    names any of them marks PRIVATE."""
    private_fields: set = set()
    for cfg in vo_cfgs:
        name = cfg["name"]
        profile = profiles.get(name)
        if profile is None:
            raise ScenarioError("register-objects",
                                f"virtual object {name!r} has no device file"
                                f" in the corpus")
        tags = functionality_tags(profile) + tuple(cfg.get("tags", ()))
        descriptor = VODescriptor(
            id=vo_id(name),
            owner=service_id(cfg["owner"]),
            location=profile.location or "unknown",
            functionalities=tags,
            endpoint=f"/vo/{name}",
            status=VOStatus(VOState.OFFLINE, 0),
            default_tier=_tier(cfg.get("default_tier", "private")),
        )
        visibility = _visibility(cfg.get("visibility", {}))
        private_fields |= {f for f, t in visibility.entries.items()
                           if t is AccessTier.PRIVATE}
        platform.add_vo(descriptor, visibility, cadence_s=profile.cadence_s)
    return private_fields


def issue_grants(platform: Platform, grant_cfgs: list):
    """Let each configured owner mint the listed keys; returns the token
    pool per holder plus a loggable summary."""
    tokens_by_service: Dict[str, List[str]] = {}
    grant_log = []
    for g in grant_cfgs:
        target = vo_id(g["target"])
        holder = service_id(g["holder"])
        owner = platform.vo_registry.get(target).owner
        key = platform.vo_registry.grant_access(
            target, holder, _tier(g["tier"]), int(g.get("priority", 0)),
            caller=owner)
        tokens_by_service.setdefault(g["holder"], []).append(key.token)
        grant_log.append({"target": target.wire, "holder": holder.wire,
                          "tier": key.tier.wire})
    return tokens_by_service, grant_log


def run_case_study(config: Optional[dict] = None, corpus_dir=None,
                   seed: Optional[int] = None,
                   reuse_corpus: bool = False) -> dict:
    """Execute the configured neighbourhood run and return its report.

    ``seed`` overrides the config's seed; the run then has the same
    structure (same topology, same outage, same row counts) over
    different measurement values and tokens. With ``reuse_corpus`` the
    device CSVs in ``corpus_dir`` are replayed as found instead of being
    regenerated, so a missing file is an error rather than silently
    papered over. A failed step raises :class:`ScenarioError` naming
    that step.
    """
    if config is None:
        config = load_config()

    with _guard("read-config"):
        eff_seed = int(config["seed"] if seed is None else seed)
        homes = int(config.get("homes", 2))
        minutes = int(config.get("minutes", 60))
        read_minutes = sorted({int(m) for m in
                               config.get("read_at_minutes", [minutes])
                               if 1 <= int(m) <= minutes})
        kill_cfg = dict(config.get("kill") or {})
        kill_device = kill_cfg.get("device")
        kill_minute = int(kill_cfg["at_minute"]) if kill_device else minutes
        vo_cfgs = list(config.get("virtual_objects") or ())
        grant_cfgs = list(config.get("grants") or ())
        service_cfgs = list(config.get("services") or ())
        if not vo_cfgs:
            raise ValueError("config declares no virtual_objects")
        if not service_cfgs:
            raise ValueError("config declares no services")

    with _guard("generate-corpus"):
        if corpus_dir is None:
            if reuse_corpus:
                raise ValueError("reusing a corpus requires its directory")
            corpus_dir = tempfile.mkdtemp(prefix="gridvo-corpus-")
        if reuse_corpus:
            manifest_path = os.path.join(str(corpus_dir), "manifest.json")
            try:
                with open(manifest_path, encoding="utf-8") as f:
                    manifest = json.load(f)
            except OSError as e:
                raise FileUnreadable(f"cannot open {manifest_path}: {e}")
        else:
            manifest = generate_synthetic_corpus(eff_seed, homes, minutes,
                                                 corpus_dir)

    with _guard("load-readings"):
        profiles = {p.rwo_id.name: p for p in corpus_profiles(corpus_dir, homes)}
        rows_by_device: Dict[str, list] = {}
        for name, profile in profiles.items():
            try:
                handle = open(profile.csv_path, newline="", encoding="utf-8")
            except OSError as e:
                raise FileUnreadable(f"cannot open {profile.csv_path}: {e}")
            with handle:
                rows_by_device[name] = [hal_translate(row, profile)
                                        for row in csv.DictReader(handle)]

    platform = Platform(eff_seed)

    with _guard("register-objects"):
        private_fields = register_objects(platform, vo_cfgs, profiles)
        if kill_device is not None and kill_device not in platform.vos:
            raise ValueError(f"kill target {kill_device!r} is not a"
                             f" configured virtual object")

    with _guard("issue-grants"):
        tokens_by_service, grant_log = issue_grants(platform, grant_cfgs)

    def post_minute(m: int) -> None:
        for name, observations in rows_by_device.items():
            if name == kill_device and m >= kill_minute:
                continue
            if m >= len(observations):
                continue
            resp = platform.dispatch(wire.encode_observation_post(
                observations[m], vo_name=name))
            if not resp.ok:
                raise ScenarioError(
                    "replay", f"minute {m}: {name} rejected the reading"
                    f" ({resp.status}) {resp.json().get('detail', '')}")

    reads: List[dict] = []
    boot_health: Dict[str, dict] = {}

    with _guard("first-minute"):
        post_minute(0)
        platform.tick(BASE_TS + 1.0)

    with _guard("boot-services"):
        for cfg in service_cfgs:
            spec = _service_spec(cfg, tokens_by_service)
            svc = platform.add_service(spec)
            svc.boot(platform.now_s)
            health = svc.health()
            boot_health[spec.id.name] = dict(health)
            dead = sorted(n for n, h in health.items() if h == "lost")
            if dead:
                raise ValueError(f"{spec.id.wire} failed to bind"
                                 f" {', '.join(dead)}: {'; '.join(svc.log)}")

    with _guard("replay"):
        for m in range(1, minutes):
            post_minute(m)
            platform.tick(BASE_TS + 60 * m + 1.0)
            if (m + 1) in read_minutes:
                _read_pass(platform, m + 1, reads)
        if 1 in read_minutes:  # minute 1 closes before the loop starts
            _read_pass(platform, 1, reads)

    with _guard("assemble-report"):
        report = _assemble(platform, manifest, grant_log, boot_health, reads,
                           eff_seed, homes, minutes, kill_device, kill_minute,
                           read_minutes)

    with _guard("privacy-scan"):
        authorized = sorted({g["holder"] for g in grant_cfgs
                             if _tier(g["tier"]) is AccessTier.PRIVATE})
        leaks = []
        for entry in reads:
            if entry["service"] in authorized:
                continue
            blob = json.dumps(entry.get("rows", []), sort_keys=True)
            hits = sorted(f for f in private_fields if f'"{f}"' in blob)
            if hits:
                leaks.append({"service": entry["service"],
                              "need": entry["need"],
                              "at_minute": entry["at_minute"],
                              "fields": hits})
        report["privacy"] = {
            "private_fields": sorted(private_fields),
            "authorized_private_readers": authorized,
            "responses_scanned": len(reads),
            "leaks": leaks,
        }
        if leaks:
            raise ValueError(f"private fields reached unauthorized readers:"
                             f" {leaks}")

    return report


def _read_pass(platform: Platform, minute: int, reads: List[dict]) -> None:
    t0, t1 = BASE_TS, BASE_TS + 60 * minute
    for svc_name in sorted(platform.services):
        svc = platform.services[svc_name]
        for need_name, binding in svc.bindings.items():
            entry: dict = {
                "at_minute": minute,
                "service": svc_name,
                "need": need_name,
                "engine": binding.me.wire if binding.me is not None else None,
                "tier": _read_tier(platform, binding.token),
            }
            try:
                rows = svc.read(need_name, t0, t1)
            except PlatformError as e:
                entry["error"] = type(e).__name__.lower()
                entry["detail"] = str(e)
            else:
                entry["rows"] = rows
                entry["row_count"] = len(rows)
                entry["fields_returned"] = sorted(
                    {f for r in rows for f in r.get("values", {})})
            reads.append(entry)


def _read_tier(platform: Platform, token: Optional[str]) -> str:
    if token is None:
        return AccessTier.PUBLIC.wire
    key = platform.me_registry.minter.resolve(token)
    return key.tier.wire if key is not None else AccessTier.PUBLIC.wire


def _assemble(platform: Platform, manifest: dict, grant_log: list,
              boot_health: dict, reads: list, seed: int, homes: int,
              minutes: int, kill_device: Optional[str], kill_minute: int,
              read_minutes: list) -> dict:
    vo_section = {}
    for name in sorted(platform.vos):
        vo = platform.vos[name]
        vo_section[name] = {
            "owner": vo.descriptor.owner.wire,
            "default_tier": vo.descriptor.default_tier.wire,
            "state": vo.state.value,
            "observations_stored": len(vo.store),
            "stale_skipped": vo.skipped_stale,
            "push_policies": sorted(s.wire for s in vo.push_policies),
        }

    engine_section = {}
    for name in sorted(platform.mes):
        me = platform.mes[name]
        engine_section[name] = {
            "owner": me.descriptor.owner.wire,
            "state": me.state.value,
            "members": sorted(m.vo_id.wire for m in me.members),
            "polled_members": sorted(v.wire for v in me.pull_members),
            "requirements": sorted(me.descriptor.requirements),
            "view": me.descriptor.view.to_wire(),
            "observations_stored": len(me.store),
            "subscribers": sorted(s.wire for s in me.subscribers),
            "notes": list(me.notes),
        }

    service_section = {}
    for name in sorted(platform.services):
        svc = platform.services[name]
        service_section[name] = {
            "boot": boot_health[name],
            "final": svc.health(),
            "bindings": {n: (b.me.wire if b.me is not None else None)
                         for n, b in svc.bindings.items()},
            "log": list(svc.log),
        }

    events = [{"at_s": int(now), "entity": target.wire, "state": state.value}
              for now, target, state in platform.status_log]
    alerts = [{"at_s": int(now), "engine": me.wire, "vo": vo.wire,
               "state": state.value, "outcome": outcome.value}
              for now, me, vo, state, outcome in platform.alert_log]

    return {
        "config": {
            "seed": seed,
            "homes": homes,
            "minutes": minutes,
            "read_at_minutes": list(read_minutes),
            "kill": ({"device": kill_device, "at_minute": kill_minute}
                     if kill_device is not None else None),
        },
        "corpus": manifest,
        "grants": grant_log,
        "virtual_objects": vo_section,
        "engines": engine_section,
        "services": service_section,
        "events": events,
        "alerts": alerts,
        "reads": reads,
    }


def render_report(report: dict) -> str:
    """Canonical JSON text; identical runs produce identical bytes."""
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def summarize(report: dict) -> str:
    """Short human-readable digest of a case-study report."""
    lines = []
    cfg = report["config"]
    kill = cfg.get("kill")
    lines.append(f"seed {cfg['seed']}, {cfg['homes']} homes,"
                 f" {cfg['minutes']} minutes"
                 + (f", {kill['device']} dies at minute {kill['at_minute']}"
                    if kill else ""))
    for name, vo in report["virtual_objects"].items():
        lines.append(f"  vo {name}: {vo['state']},"
                     f" {vo['observations_stored']} readings")
    for name, me in report["engines"].items():
        members = ", ".join(m.split(":", 1)[1] for m in me["members"])
        lines.append(f"  engine {name}: {me['state']},"
                     f" {me['observations_stored']} readings"
                     f" from [{members}]")
    for name, svc in report["services"].items():
        health = ", ".join(f"{n}={h}" for n, h in sorted(svc["final"].items()))
        lines.append(f"  service {name}: {health}")
    for alert in report["alerts"]:
        if alert["outcome"] != "unchanged":
            lines.append(f"  alert t={alert['at_s']}: {alert['engine']}"
                         f" saw {alert['vo']} {alert['state']}"
                         f" -> {alert['outcome']}")
    privacy = report["privacy"]
    lines.append(f"  privacy: {privacy['responses_scanned']} responses"
                 f" scanned, {len(privacy['leaks'])} leaks")
    return "\n".join(lines)
