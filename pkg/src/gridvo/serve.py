"""Network front door: a stdlib HTTP server around the dispatcher.

Every route the platform understands is served from one port. In
simulated-clock mode (the default) platform time advances only when an
observation arrives, driven by the observation's own timestamp, so a
served run is as deterministic as its request stream. Wall-clock mode
ticks once a second for live demonstrations.
"""
from __future__ import annotations

import json
import logging
import signal
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import parse_qsl, urlsplit

from .hub import Platform
from .wire import HttpRequest

log = logging.getLogger("gridvo.serve")

# which path prefixes each layer flag exposes; None means everything
LAYER_PREFIXES = {
    "all": None,
    "vo": ("/vo/",),
    "me": ("/me/",),
    "registry": ("/registry/",),
}


class PlatformServer(ThreadingHTTPServer):
    """One platform behind one port.

    Requests are handled on worker threads but dispatched under a single
    lock: the platform itself stays single-threaded and event-ordered.
    """

    daemon_threads = True

    def __init__(self, address, platform: Platform, layer: str = "all",
                 wall_clock: bool = False):
        self.platform = platform
        self.dispatch_lock = threading.Lock()
        self.prefixes = LAYER_PREFIXES[layer]
        self.wall_clock = wall_clock
        self.closing = threading.Event()
        super().__init__(address, _Handler)
        if wall_clock:
            threading.Thread(target=self._wall_ticker, daemon=True).start()

    def _wall_ticker(self) -> None:
        while not self.closing.wait(1.0):
            with self.dispatch_lock:
                self.platform.tick(time.time())

    def note_observation(self, request: HttpRequest) -> None:
        """Advance simulated time to the newest observation timestamp."""
        if self.wall_clock or not request.path.endswith("/observations"):
            return
        try:
            ts = float(json.loads(request.body)["timestamp"])
        except (ValueError, KeyError, TypeError):
            return
        if ts > self.platform.now_s:
            self.platform.tick(ts)


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "gridvo"

    def log_message(self, fmt, *args):
        log.debug("%s %s", self.address_string(), fmt % args)

    def _serve(self) -> None:
        split = urlsplit(self.path)
        server: PlatformServer = self.server  # type: ignore[assignment]
        if server.prefixes is not None and not any(
                split.path.startswith(p) for p in server.prefixes):
            body = json.dumps({"code": "not_found",
                               "detail": "layer not served here"}).encode()
            self._reply(404, body)
            return
        length = int(self.headers.get("Content-Length") or 0)
        payload = self.rfile.read(length) if length else b""
        request = HttpRequest(
            method=self.command,
            path=split.path,
            query=tuple(parse_qsl(split.query, keep_blank_values=True)),
            headers={k: v for k, v in self.headers.items()},
            body=payload,
        )
        with server.dispatch_lock:
            response = server.platform.dispatch(request)
            if response.ok:
                server.note_observation(request)
        self._reply(response.status, response.body)

    def _reply(self, status: int, body: bytes) -> None:
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    do_GET = _serve
    do_POST = _serve
    do_PUT = _serve
    do_DELETE = _serve


def snapshot(platform: Platform) -> dict:
    """Serializable summary of live platform state."""
    return {
        "now_s": platform.now_s,
        "virtual_objects": {
            name: {"state": vo.state.value,
                   "observations_stored": len(vo.store),
                   "push_policies": sorted(s.wire for s in vo.push_policies)}
            for name, vo in sorted(platform.vos.items())
        },
        "engines": {
            name: {"state": me.state.value,
                   "observations_stored": len(me.store),
                   "members": sorted(m.vo_id.wire for m in me.members)}
            for name, me in sorted(platform.mes.items())
        },
        "services": {name: svc.health()
                     for name, svc in sorted(platform.services.items())},
        "registered": {"vo": len(platform.vo_registry),
                       "me": len(platform.me_registry)},
    }


def write_snapshot(platform: Platform, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(snapshot(platform), f, indent=2, sort_keys=True)
        f.write("\n")


def parse_bind(bind: str) -> tuple:
    host, _, port_text = bind.rpartition(":")
    if not host:
        host = "127.0.0.1"
    try:
        port = int(port_text)
    except ValueError:
        raise ValueError(f"bind address {bind!r} needs the form host:port")
    if not 0 <= port <= 65535:
        raise ValueError(f"port {port} out of range")
    return host, port


def serve(bind: str, seed: int = 0, layer: str = "all",
          wall_clock: bool = False,
          snapshot_path: Optional[str] = None,
          scenario_config: Optional[str] = None,
          ready: Optional[threading.Event] = None) -> int:
    """Run the server until interrupted; returns a process exit code."""
    host, port = parse_bind(bind)
    platform = Platform(seed)

    if scenario_config is not None:
        # preload topology so the registry answers from the first request;
        # devices are expected to POST their observations themselves
        from .scenario import load_config, register_objects, issue_grants
        from .devices import corpus_profiles, generate_synthetic_corpus
        import tempfile
        config = load_config(scenario_config)
        corpus_dir = tempfile.mkdtemp(prefix="gridvo-serve-")
        generate_synthetic_corpus(seed, int(config.get("homes", 2)),
                                  int(config.get("minutes", 60)), corpus_dir)
        profiles = {p.rwo_id.name: p
                    for p in corpus_profiles(corpus_dir, int(config.get("homes", 2)))}
        register_objects(platform, list(config.get("virtual_objects") or ()),
                         profiles)
        issue_grants(platform, list(config.get("grants") or ()))

    try:
        server = PlatformServer((host, port), platform, layer, wall_clock)
    except OSError as e:
        log.error("cannot bind %s:%d: %s", host, port, e)
        print(f"gridvo serve: cannot bind {host}:{port}: {e.strerror or e}")
        return 2

    log.info("serving on %s:%d (layer=%s, %s clock)", host, port, layer,
             "wall" if wall_clock else "simulated")
    def _interrupt(signum, frame):
        raise KeyboardInterrupt

    try:
        # restore interruptibility even when launched as a background job,
        # where the shell leaves SIGINT ignored
        signal.signal(signal.SIGINT, _interrupt)
    except ValueError:
        pass  # not the main thread; the caller stops us via shutdown()
    if ready is not None:
        ready.set()
    try:
        server.serve_forever(poll_interval=0.1)
    except KeyboardInterrupt:
        pass
    finally:
        server.closing.set()
        server.server_close()
        if snapshot_path is not None:
            write_snapshot(platform, snapshot_path)
            log.info("snapshot written to %s", snapshot_path)
    return 0
