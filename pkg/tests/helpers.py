"""Shared test plumbing: in-process HTTP wiring and failure injection."""

from __future__ import annotations

import threading

import httpx

from lcq.httpserve import respond


def inprocess_http(services: dict, extra_apps: dict = None) -> httpx.Client:
    """httpx client that routes each service's logical host to its WSGI app
    without opening sockets."""
    mounts = {}
    for sid, service in services.items():
        app = extra_apps[sid] if extra_apps and sid in extra_apps else service.wsgi_app
        mounts[f"http://{sid}.tc.example"] = httpx.WSGITransport(app=app)
    return httpx.Client(mounts=mounts)


class FlakyApp:
    """WSGI middleware that fails selected paths with 500 a set number of
    times (-1 = forever), then passes through."""

    def __init__(self, app):
        self.app = app
        self._lock = threading.Lock()
        self._failures: dict = {}  # path -> remaining failure count

    def fail(self, path: str, times: int = -1) -> None:
        with self._lock:
            self._failures[path] = times

    def heal(self, path: str) -> None:
        with self._lock:
            self._failures.pop(path, None)

    def __call__(self, environ, start_response):
        path = environ.get("PATH_INFO", "")
        with self._lock:
            remaining = self._failures.get(path)
            if remaining is not None and remaining != 0:
                if remaining > 0:
                    self._failures[path] = remaining - 1
                return respond(start_response, "500 Internal Server Error", "boom", "text/plain")
        return self.app(environ, start_response)


def datasets_equal(a, b) -> bool:
    return a.snapshot() == b.snapshot()


def wait_until(predicate, timeout: float = 5.0, step: float = 0.01) -> bool:
    import time

    deadline = time.monotonic() + timeout
    while not predicate():
        if time.monotonic() > deadline:
            return False
        time.sleep(step)
    return True
