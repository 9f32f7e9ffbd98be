"""Polling directory watcher.

New files are found by diffing successive directory snapshots. A file is only
emitted once its size has stopped changing (debounce), so half-copied images
never reach the OCR stage. Detection state lives in plain values (snapshot +
pending ledger) handed back to the caller, which makes the poll step itself
deterministic and easy to test.
"""

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

logger = logging.getLogger("lmrpa.watcher")

DEFAULT_IMAGE_EXTENSIONS = frozenset({"png", "jpg", "jpeg", "tif", "tiff", "bmp"})

# pending ledger: path -> (last seen size, consecutive polls with that size)
PendingLedger = dict[Path, tuple[int, int]]
LogFn = Callable[[dict], None]


class DirectoryUnreadable(Exception):
    """The watched directory vanished or lost read permission; retry next poll."""


@dataclass(frozen=True)
class WatchConfig:
    directory: Path
    poll_interval_ms: int = 1000
    image_extensions: frozenset[str] = DEFAULT_IMAGE_EXTENSIONS
    stability_polls: int = 1

    def __post_init__(self):
        object.__setattr__(self, "directory", Path(self.directory))
        exts = frozenset(str(e).lower().lstrip(".") for e in self.image_extensions)
        object.__setattr__(self, "image_extensions", exts)
        if self.poll_interval_ms < 1:
            raise ValueError("poll_interval_ms must be >= 1")
        if not exts:
            raise ValueError("image_extensions must not be empty")
        if self.stability_polls < 0:
            raise ValueError("stability_polls must be >= 0")


@dataclass(frozen=True)
class FileSnapshot:
    """Contents of the watched directory at one instant: path -> (size, mtime)."""

    taken_at: float
    entries: dict[Path, tuple[int, float]] = field(default_factory=dict)

    @classmethod
    def empty(cls) -> "FileSnapshot":
        return cls(taken_at=0.0, entries={})


@dataclass(frozen=True)
class FileEvent:
    """A stable new image file, ready for processing."""

    path: Path
    size_bytes: int
    detected_at: float
    content_hash: str  # sha256 hex of the file bytes at emit time


def snapshot(config: WatchConfig) -> FileSnapshot:
    """Take a snapshot of the regular files directly inside the watched directory.

    Non-recursive by design; subdirectories are ignored. Raises
    DirectoryUnreadable when the directory itself cannot be listed.
    """
    taken_at = time.monotonic()
    entries: dict[Path, tuple[int, float]] = {}
    try:
        children = list(config.directory.iterdir())
    except OSError as exc:
        raise DirectoryUnreadable(f"{config.directory}: {exc}") from exc
    for child in children:
        try:
            if not child.is_file():
                continue
            st = child.stat()
        except OSError:
            # File vanished between listing and stat; it will be picked up
            # next poll if it reappears.
            continue
        entries[child] = (st.st_size, st.st_mtime)
    return FileSnapshot(taken_at=taken_at, entries=entries)


def diff(prev: FileSnapshot, curr: FileSnapshot) -> set[Path]:
    """Paths present in curr and absent in prev. Deletions/modifications are not reported."""
    return set(curr.entries) - set(prev.entries)


def is_image(path: Path, config: WatchConfig) -> bool:
    """Case-insensitive extension membership test. Extensionless files are not images."""
    ext = Path(path).suffix.lower().lstrip(".")
    return bool(ext) and ext in config.image_extensions


def _default_log(decision: dict) -> None:
    logger.info(json.dumps(decision))


def _make_event(path: Path, detected_at: float) -> FileEvent | None:
    try:
        data = path.read_bytes()
    except OSError:
        return None
    digest = hashlib.sha256(data).hexdigest()
    return FileEvent(
        path=path,
        size_bytes=len(data),
        detected_at=detected_at,
        content_hash=digest,
    )


def poll_once(
    config: WatchConfig,
    prev: FileSnapshot,
    pending: PendingLedger,
    log: LogFn | None = None,
) -> tuple[list[FileEvent], FileSnapshot, PendingLedger]:
    """Run one poll step: snapshot, diff, debounce, emit.

    A new image path is emitted only after its size has been observed
    unchanged for ``stability_polls`` consecutive polls (0 means emit on
    first sighting). Non-image paths are dropped with a logged ignore
    decision. Returns the events, the snapshot to use as ``prev`` next
    time, and the updated pending ledger.
    """
    emit_log = log or _default_log
    curr = snapshot(config)
    events: list[FileEvent] = []
    next_pending: PendingLedger = {}

    # Age existing pending entries first so older files emit before newer ones.
    for path in sorted(pending):
        if path not in curr.entries:
            emit_log({"event": "ignored", "path": str(path), "reason": "vanished before stabilizing"})
            continue
        last_size, stable = pending[path]
        size = curr.entries[path][0]
        if size == last_size:
            stable += 1
            if stable >= config.stability_polls:
                event = _make_event(path, curr.taken_at)
                if event is None:
                    emit_log({"event": "ignored", "path": str(path), "reason": "vanished before hashing"})
                    continue
                events.append(event)
                emit_log({"event": "detected", "path": str(path), "reason": "stable image file"})
            else:
                next_pending[path] = (size, stable)
        else:
            next_pending[path] = (size, 0)

    for path in sorted(diff(prev, curr)):
        if not is_image(path, config):
            emit_log({"event": "ignored", "path": str(path), "reason": "not an image"})
            continue
        size = curr.entries[path][0]
        if config.stability_polls == 0:
            event = _make_event(path, curr.taken_at)
            if event is None:
                emit_log({"event": "ignored", "path": str(path), "reason": "vanished before hashing"})
                continue
            events.append(event)
            emit_log({"event": "detected", "path": str(path), "reason": "stable image file"})
        else:
            next_pending[path] = (size, 0)

    return events, curr, next_pending
