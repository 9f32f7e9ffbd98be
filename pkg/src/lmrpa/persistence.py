"""Idempotent record store and processing journal.

Storage is two append-only line-delimited JSON files. The journal records
status transitions per content hash (last writer wins on fold); the records
file holds at most one structured record per hash. One execution context owns
all writes; the files are the only durable state the pipeline has, so a failed
write aborts the run rather than risk divergence.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .errors import IoFailure
from .structurer import InvoiceRecord

logger = logging.getLogger("lmrpa.persistence")

STATUSES = ("detected", "ocr_done", "structured", "reported", "failed", "quarantined")
TERMINAL = frozenset({"reported", "failed", "quarantined"})
_RANK = {"detected": 0, "ocr_done": 1, "structured": 2, "reported": 3}
_TIMING_KEYS = frozenset({"ocr", "llm", "report"})


class StoreCorrupt(Exception):
    """A journal or records line failed to parse; refuse to guess at state."""


class IllegalTransition(Exception):
    """Entry violates the status-transition relation for its record_id."""


@dataclass
class JournalEntry:
    record_id: str
    path: str
    status: str
    updated_at: str
    engine_id: int | None = None
    timings: dict = field(default_factory=dict)
    error: str | None = None

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        bad = set(self.timings) - _TIMING_KEYS
        if bad:
            raise ValueError(f"unknown timing keys {sorted(bad)}")

    def to_json_dict(self) -> dict:
        out = {
            "record_id": self.record_id,
            "path": self.path,
            "status": self.status,
            "updated_at": self.updated_at,
        }
        if self.engine_id is not None:
            out["engine_id"] = self.engine_id
        if self.timings:
            out["timings"] = self.timings
        if self.error is not None:
            out["error"] = self.error
        return out

    @classmethod
    def from_json_dict(cls, data: dict) -> "JournalEntry":
        return cls(
            record_id=data["record_id"],
            path=data.get("path", ""),
            status=data["status"],
            updated_at=data.get("updated_at", ""),
            engine_id=data.get("engine_id"),
            timings=data.get("timings", {}),
            error=data.get("error"),
        )


def transition_legal(current: str | None, new: str) -> bool:
    """Status-transition relation for one record_id.

    First entry must be `detected`. Terminal states accept nothing further.
    Otherwise: failure states are reachable from any pre-terminal state, a
    same-rank entry refreshes in place, and progress moves exactly one step.
    """
    if current is None:
        return new == "detected"
    if current in TERMINAL:
        return False
    if new in ("failed", "quarantined"):
        return True
    return _RANK[new] in (_RANK[current], _RANK[current] + 1)


def fold_journal(lines) -> dict[str, JournalEntry]:
    """Pure last-writer-wins fold of journal lines into per-id state."""
    state: dict[str, JournalEntry] = {}
    for n, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            entry = JournalEntry.from_json_dict(json.loads(line))
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
            raise StoreCorrupt(f"journal line {n}: {exc}") from exc
        state[entry.record_id] = entry
    return state


class RecordStore:
    def __init__(self, journal_path: Path, records_path: Path):
        self.journal_path = Path(journal_path)
        self.records_path = Path(records_path)
        self.journal_path.parent.mkdir(parents=True, exist_ok=True)
        self.records_path.parent.mkdir(parents=True, exist_ok=True)
        self._state = self._load_journal()
        self._saved_ids = self._load_saved_ids()
        # Kept open for the store's lifetime; every append is flushed before
        # the call returns so a crash can lose at most the in-flight line.
        try:
            self._journal_fh = open(self.journal_path, "a", encoding="utf-8", newline="\n")
            self._records_fh = open(self.records_path, "a", encoding="utf-8", newline="\n")
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    def _load_journal(self) -> dict[str, JournalEntry]:
        if not self.journal_path.exists():
            return {}
        try:
            with open(self.journal_path, encoding="utf-8") as fh:
                return fold_journal(fh)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    def _load_saved_ids(self) -> set[str]:
        ids: set[str] = set()
        if not self.records_path.exists():
            return ids
        try:
            with open(self.records_path, encoding="utf-8") as fh:
                for n, line in enumerate(fh, start=1):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        data = json.loads(line)
                        ids.add(data["source_hash"])
                    except (json.JSONDecodeError, KeyError, TypeError) as exc:
                        raise StoreCorrupt(f"records line {n}: {exc}") from exc
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        return ids

    def close(self):
        self._journal_fh.close()
        self._records_fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    # -- journal ---------------------------------------------------------

    def get(self, record_id: str) -> JournalEntry | None:
        return self._state.get(record_id)

    def status_of(self, record_id: str) -> str | None:
        entry = self._state.get(record_id)
        return entry.status if entry else None

    def entries(self) -> dict[str, JournalEntry]:
        return dict(self._state)

    def already_processed(self, content_hash: str) -> bool:
        entry = self._state.get(content_hash)
        return entry is not None and entry.status in TERMINAL

    def journal_append(self, entry: JournalEntry) -> None:
        current = self.status_of(entry.record_id)
        if not transition_legal(current, entry.status):
            raise IllegalTransition(
                f"{entry.record_id[:12]}: {current} -> {entry.status} is not allowed"
            )
        line = json.dumps(entry.to_json_dict(), ensure_ascii=False)
        try:
            self._journal_fh.write(line + "\n")
            self._journal_fh.flush()
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        self._state[entry.record_id] = entry

    # -- records ---------------------------------------------------------

    def save_record(self, record: InvoiceRecord) -> None:
        if record.source_hash in self._saved_ids:
            logger.warning("duplicate save ignored for %s", record.source_hash[:12])
            return
        line = json.dumps(record.to_json_dict(), ensure_ascii=False)
        try:
            self._records_fh.write(line + "\n")
            self._records_fh.flush()
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        self._saved_ids.add(record.source_hash)

    def load_records(self) -> list[InvoiceRecord]:
        if not self.records_path.exists():
            return []
        self._records_fh.flush()
        records: list[InvoiceRecord] = []
        try:
            with open(self.records_path, encoding="utf-8") as fh:
                for n, line in enumerate(fh, start=1):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        records.append(InvoiceRecord.from_json_dict(json.loads(line)))
                    except (json.JSONDecodeError, KeyError, TypeError) as exc:
                        raise StoreCorrupt(f"records line {n}: {exc}") from exc
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        return records


def retry_failed(journal_path: Path) -> int:
    """Drop every journal line for ids whose current status is failed.

    Explicit maintenance for the `--retry-failed` CLI flag; the journal is
    otherwise append-only. Must run before the store is opened. Returns the
    number of record ids cleared.
    """
    journal_path = Path(journal_path)
    if not journal_path.exists():
        return 0
    try:
        with open(journal_path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    state = fold_journal(lines)
    failed_ids = {rid for rid, e in state.items() if e.status == "failed"}
    if not failed_ids:
        return 0
    kept = []
    for line in lines:
        stripped = line.strip()
        if not stripped:
            continue
        if json.loads(stripped).get("record_id") in failed_ids:
            continue
        kept.append(stripped)
    tmp = journal_path.with_suffix(".tmp")
    try:
        tmp.write_text("".join(k + "\n" for k in kept), encoding="utf-8")
        tmp.replace(journal_path)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    logger.info("cleared %d failed entries for retry", len(failed_ids))
    return len(failed_ids)


def already_processed(store: RecordStore, content_hash: str) -> bool:
    return store.already_processed(content_hash)


def journal_append(store: RecordStore, entry: JournalEntry) -> None:
    store.journal_append(entry)


def save_record(store: RecordStore, record: InvoiceRecord) -> None:
    store.save_record(record)
