"""Tracked Resource Set server: ordered change log, paged base, rebase.

Any resource-hosting service embeds one TrsServer per tracked set. The
server records change events with densely increasing order numbers, serves
the base and the change log as paged JSON documents, and can rebase: the
base becomes a snapshot of the live resource set, the cutoff order moves to
the newest recorded order, and older log entries are dropped. A client
that replays events newer than the cutoff on top of the base reconstructs
the live set exactly.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Optional

from lcq.rdfmodel import Iri


class ChangeKind(str, Enum):
    CREATION = "Creation"
    MODIFICATION = "Modification"
    DELETION = "Deletion"


@dataclass(frozen=True)
class ChangeEvent:
    order: int
    uri: str
    kind: ChangeKind
    ts: int  # milliseconds since epoch, server clock

    def __post_init__(self) -> None:
        if self.order < 1:
            raise ValueError("event order must be a positive integer")
        Iri(self.uri)  # must be an absolute IRI

    def to_json_dict(self) -> dict:
        return {"order": self.order, "uri": self.uri, "kind": self.kind.value, "ts": self.ts}

    @classmethod
    def from_json_dict(cls, d: dict) -> "ChangeEvent":
        try:
            kind = ChangeKind(d["kind"])
            return cls(order=int(d["order"]), uri=str(d["uri"]), kind=kind, ts=int(d["ts"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed change event: {exc}") from exc


def now_ms() -> int:
    return int(time.time() * 1000)


class TrsServer:
    """Change log plus base snapshot for one service.

    record_change is serialized by an internal lock; page reads take the
    same lock briefly to slice a consistent snapshot, so a reader never
    observes order k+1 without k.
    """

    def __init__(
        self,
        server_id: str,
        base_url: str = "",
        page_size: int = 50,
        rebase_every: int = 0,
        live_provider: Optional[Callable[[], Iterable[str]]] = None,
    ):
        if page_size < 1:
            raise ValueError("page_size must be positive")
        self.server_id = server_id
        self.base_url = base_url.rstrip("/")
        self.page_size = page_size
        self.rebase_every = rebase_every
        self.live_provider = live_provider
        self._lock = threading.RLock()
        self._log: list = []  # ChangeEvent, ascending order; starts at cutoff+1
        self._base: list = []  # sorted resource URIs snapshotted at last rebase
        self._cutoff_order = 0
        self._next_order = 1

    # -- recording --

    def record_change(self, uri: str, kind: ChangeKind, ts: Optional[int] = None) -> ChangeEvent:
        with self._lock:
            event = ChangeEvent(self._next_order, uri, kind, now_ms() if ts is None else ts)
            self._next_order += 1
            self._log.append(event)
            if (
                self.rebase_every > 0
                and self.live_provider is not None
                and event.order % self.rebase_every == 0
            ):
                self.rebase(self.live_provider())
            return event

    def rebase(self, live_resources: Iterable[str]) -> None:
        """Snapshot the live set as the new base and truncate the log.

        Events at or below the new cutoff are dropped; newer ones (none at
        call time, but callers may race with record_change) are kept.
        """
        with self._lock:
            self._base = sorted(str(u) for u in live_resources)
            self._cutoff_order = self._next_order - 1
            self._log = [e for e in self._log if e.order > self._cutoff_order]

    # -- serving --

    @property
    def cutoff_order(self) -> int:
        with self._lock:
            return self._cutoff_order

    def max_order(self) -> int:
        with self._lock:
            return self._next_order - 1

    def _page_url(self, collection: str, n: int) -> str:
        return f"{self.base_url}/trs/{collection}?page={n}"

    def document(self) -> dict:
        with self._lock:
            return {
                "base": self._page_url("base", 0),
                "changeLog": self._page_url("changelog", 0),
                "cutoffOrder": self._cutoff_order,
            }

    def base_page(self, n: int) -> dict:
        if n < 0:
            raise ValueError("page index must be >= 0")
        with self._lock:
            members = self._base[n * self.page_size : (n + 1) * self.page_size]
            has_more = (n + 1) * self.page_size < len(self._base)
        return {
            "base": members,
            "next": self._page_url("base", n + 1) if has_more else None,
        }

    def changelog_page(self, n: int) -> dict:
        """Page n of the change log, newest first."""
        if n < 0:
            raise ValueError("page index must be >= 0")
        with self._lock:
            newest_first = list(reversed(self._log))
            events = newest_first[n * self.page_size : (n + 1) * self.page_size]
            has_more = (n + 1) * self.page_size < len(newest_first)
        return {
            "changeLog": [e.to_json_dict() for e in events],
            "next": self._page_url("changelog", n + 1) if has_more else None,
        }
