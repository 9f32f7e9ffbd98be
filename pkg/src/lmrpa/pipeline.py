"""Staged executor for the watch, OCR, structure, persist, report loop.

Two modes share the same stage implementations. Sequential mode runs the loop
literally: poll, then fully process each new file before the next poll.
Pipelined mode connects one watcher context, workers_ocr OCR contexts, one
structurer context (sole LLM caller and sole store writer), and one renderer
context through bounded queues; render completions flow back to the structurer
so the 'reported' journal entry is still written by the store owner.
"""

import logging
import queue
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .engines import EngineError, EngineSpec, OcrResult, make_engine, normalize_text
from .errors import ConfigError
from .persistence import TERMINAL, JournalEntry, RecordStore, transition_legal
from .reporting import (
    ReportTemplate,
    map_line_items_to_sheet,
    map_to_sheet,
    render_document,
    write_document,
    write_sheet,
)
from .structurer import (
    DETERMINISTIC_TS,
    InvoiceRecord,
    InvoiceSchema,
    LlmClientConfig,
    RateLimiter,
    StructuringFailure,
    make_client,
    now_wall_iso,
    structure,
)
from .watcher import FileEvent, WatchConfig, FileSnapshot, poll_once

logger = logging.getLogger("lmrpa.pipeline")

# Failure kinds that mean "the input is bad", as opposed to "the run is sick".
QUARANTINE_KINDS = frozenset({"EmptyInput", "UnparseableJson", "SchemaViolations"})

STAGES = ("ocr", "llm", "report")

_TICK = 0.05  # seconds; granularity of abort/idle checks on blocking queue ops


class DrainTimeout(Exception):
    """Graceful drain did not finish in time; the run was force-stopped."""


@dataclass
class StageStat:
    count: int = 0
    total_ms: float = 0.0
    max_ms: float = 0.0

    @property
    def mean_ms(self) -> float:
        return self.total_ms / self.count if self.count else 0.0


@dataclass
class StageMetrics:
    stages: dict[str, StageStat] = field(
        default_factory=lambda: {name: StageStat() for name in STAGES}
    )
    files_detected: int = 0
    files_ignored: int = 0
    files_skipped: int = 0
    files_failed: int = 0
    wall_clock_ms: float = 0.0
    forced_stop: bool = False

    def to_json_dict(self) -> dict:
        return {
            "stages": {
                name: {
                    "count": s.count,
                    "total_ms": round(s.total_ms, 3),
                    "mean_ms": round(s.mean_ms, 3),
                    "max_ms": round(s.max_ms, 3),
                }
                for name, s in self.stages.items()
            },
            "files_detected": self.files_detected,
            "files_ignored": self.files_ignored,
            "files_skipped": self.files_skipped,
            "files_failed": self.files_failed,
            "wall_clock_ms": round(self.wall_clock_ms, 3),
            "forced_stop": self.forced_stop,
        }


class _Metrics:
    """Thread-safe collector behind StageMetrics."""

    def __init__(self):
        self._lock = threading.Lock()
        self.data = StageMetrics()

    def record(self, stage: str, ms: float) -> None:
        with self._lock:
            s = self.data.stages[stage]
            s.count += 1
            s.total_ms += ms
            s.max_ms = max(s.max_ms, ms)

    def bump(self, counter: str, by: int = 1) -> None:
        with self._lock:
            setattr(self.data, counter, getattr(self.data, counter) + by)


@dataclass(frozen=True)
class RunConfig:
    watch: WatchConfig
    engine: EngineSpec
    llm: LlmClientConfig
    journal_path: Path
    records_path: Path
    schema: InvoiceSchema | None = None
    template_path: Path | None = None
    sheet_path: Path | None = None
    report_path: Path | None = None
    line_items_path: Path | None = None
    mode: str = "pipelined"
    queue_capacity: int = 8
    workers_ocr: int = 1
    run_duration: float | str = "until-signal"
    drain_timeout_ms: int = 30000
    render_every: int = 1
    render_latency_ms: int = 0

    def __post_init__(self):
        if self.mode not in ("pipelined", "sequential"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.queue_capacity < 1:
            raise ConfigError("queue_capacity must be >= 1")
        if self.workers_ocr < 1:
            raise ConfigError("workers_ocr must be >= 1")
        if self.render_every < 1:
            raise ConfigError("render_every must be >= 1")
        if self.drain_timeout_ms < 0:
            raise ConfigError("drain_timeout_ms must be >= 0")
        if isinstance(self.run_duration, str):
            if self.run_duration not in ("until-signal", "until-idle"):
                raise ConfigError(f"unknown run_duration {self.run_duration!r}")
        elif self.run_duration <= 0:
            raise ConfigError("run_duration seconds must be > 0")
        if self.mode == "sequential" and self.workers_ocr != 1:
            object.__setattr__(self, "workers_ocr", 1)
        object.__setattr__(self, "journal_path", Path(self.journal_path))
        object.__setattr__(self, "records_path", Path(self.records_path))
        out_dir = Path(self.records_path).parent
        if self.sheet_path is None:
            object.__setattr__(self, "sheet_path", out_dir / "sheet.csv")
        if self.report_path is None:
            object.__setattr__(self, "report_path", out_dir / "report.md")
        if self.schema is None:
            object.__setattr__(self, "schema", InvoiceSchema.default())


def config_from_dict(data: dict, base_dir: Path | None = None) -> RunConfig:
    """Build a RunConfig from a parsed JSON config document.

    Relative paths resolve against base_dir (the config file's directory).
    Raises ConfigError on anything malformed; the CLI maps that to exit 2.
    """
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    base = Path(base_dir) if base_dir else Path.cwd()

    def rpath(value) -> Path:
        p = Path(value)
        return p if p.is_absolute() else base / p

    def opt_path(section: dict, key: str) -> Path | None:
        return rpath(section[key]) if section.get(key) is not None else None

    try:
        w = dict(data["watch"])
        w["directory"] = rpath(w["directory"])
        if "image_extensions" in w:
            w["image_extensions"] = frozenset(w["image_extensions"])
        watch = WatchConfig(**w)

        e = dict(data["engine"])
        if e.get("fixture_dir") is not None:
            e["fixture_dir"] = rpath(e["fixture_dir"])
        engine = EngineSpec(**e)

        llm_raw = dict(data.get("llm", {"mode": "mock", "mock_dir": "mock"}))
        if llm_raw.get("mock_dir") is not None:
            llm_raw["mock_dir"] = rpath(llm_raw["mock_dir"])
        llm = LlmClientConfig(**llm_raw)

        store = data["store"]
        schema_path = data.get("schema_path")
        schema = InvoiceSchema.load(rpath(schema_path)) if schema_path else None
        return RunConfig(
            watch=watch,
            engine=engine,
            llm=llm,
            journal_path=rpath(store["journal_path"]),
            records_path=rpath(store["records_path"]),
            schema=schema,
            template_path=opt_path(data, "template_path"),
            sheet_path=opt_path(data, "sheet_path"),
            report_path=opt_path(data, "report_path"),
            line_items_path=opt_path(data, "line_items_path"),
            mode=data.get("mode", "pipelined"),
            queue_capacity=data.get("queue_capacity", 8),
            workers_ocr=data.get("workers_ocr", 1),
            run_duration=data.get("run_duration", "until-signal"),
            drain_timeout_ms=data.get("drain_timeout_ms", 30000),
            render_every=data.get("render_every", 1),
            render_latency_ms=data.get("render_latency_ms", 0),
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad config: {exc}") from exc


def failure_status(kind: str) -> str:
    """Quarantine bad inputs; everything else is a run-side failure."""
    return "quarantined" if kind in QUARANTINE_KINDS else "failed"


class _Stages:
    """Stage implementations shared by sequential and pipelined modes.

    Owns no threads. The caller decides which context runs which method; the
    store-touching methods must stay on a single context (the store owner).
    """

    def __init__(self, config: RunConfig, store: RecordStore, metrics: _Metrics,
                 engine=None, client=None, limiter=None):
        self.config = config
        self.store = store
        self.metrics = metrics
        self.engine = engine
        self.limiter = limiter or RateLimiter(config.llm.min_request_interval_ms)
        self.client = client or make_client(config.llm, config.schema)
        self.template = (
            ReportTemplate.load(config.template_path)
            if config.template_path
            else ReportTemplate.default()
        )
        # Deterministic clock in mock mode so reruns and crash-resume produce
        # byte-identical records.
        self.clock = (lambda: DETERMINISTIC_TS) if config.llm.mode == "mock" else now_wall_iso
        self.records: list[InvoiceRecord] = store.load_records()

    def journal(self, record_id: str, path, status: str, *, engine_id=None,
                timings=None, error=None, only_if_legal=False) -> JournalEntry | None:
        if only_if_legal and not transition_legal(self.store.status_of(record_id), status):
            # Resuming a file whose previous run got further than this stage;
            # the journal already reflects more progress, so don't move back.
            return None
        entry = JournalEntry(
            record_id=record_id,
            path=str(path),
            status=status,
            updated_at=self.clock(),
            engine_id=engine_id,
            timings=dict(timings or {}),
            error=error,
        )
        self.store.journal_append(entry)
        return entry

    def run_ocr(self, event: FileEvent):
        """Returns (OcrResult | None, error string | None, duration_ms)."""
        t0 = time.perf_counter()
        try:
            result = self.engine.recognize(event)
        except EngineError as exc:
            ms = (time.perf_counter() - t0) * 1000.0
            self.metrics.record("ocr", ms)
            return None, f"{type(exc).__name__}: {exc}", ms
        self.metrics.record("ocr", result.duration_ms)
        return result, None, float(result.duration_ms)

    def run_structure(self, event: FileEvent, ocr: OcrResult):
        """Returns (record | None, failure | None, duration_ms)."""
        t0 = time.perf_counter()
        outcome = structure(
            ocr.text,
            self.config.llm,
            self.config.schema,
            limiter=self.limiter,
            client=self.client,
            source_hash=event.content_hash,
            engine_id=ocr.engine_id,
            now_iso=self.clock,
        )
        ms = (time.perf_counter() - t0) * 1000.0
        self.metrics.record("llm", ms)
        if isinstance(outcome, StructuringFailure):
            return None, outcome, ms
        return outcome, None, ms

    def render(self, records: list[InvoiceRecord]) -> float:
        """Re-render sheet and report from all records; returns duration_ms."""
        t0 = time.perf_counter()
        if self.config.render_latency_ms:
            time.sleep(self.config.render_latency_ms / 1000.0)
        sheet = map_to_sheet(records)
        write_sheet(sheet, self.config.sheet_path)
        if self.config.line_items_path:
            write_sheet(map_line_items_to_sheet(records), self.config.line_items_path)
        write_document(render_document(sheet, self.template), self.config.report_path)
        ms = (time.perf_counter() - t0) * 1000.0
        self.metrics.record("report", ms)
        return ms

    def journal_failure(self, event: FileEvent, kind: str, detail: str, *,
                        timings=None, engine_id=None) -> JournalEntry:
        status = failure_status(kind)
        self.metrics.bump("files_failed")
        return self.journal(
            event.content_hash,
            event.path,
            status,
            engine_id=engine_id,
            timings=timings,
            error=f"{kind}: {detail}",
        )


def process_file(event: FileEvent, config: RunConfig, store: RecordStore, *,
                 stages: _Stages | None = None) -> JournalEntry:
    """Run one file through every stage, journaling each transition.

    No error escapes: every failure becomes a terminal journal entry. Used by
    sequential mode and the process-one CLI; pipelined mode runs the same
    stage methods spread across contexts.
    """
    own_engine = None
    if stages is None:
        metrics = _Metrics()
        own_engine = make_engine(config.engine)
        stages = _Stages(config, store, metrics, engine=own_engine)
    try:
        timings: dict = {}
        stages.journal(event.content_hash, event.path, "detected", only_if_legal=True)

        ocr, err, ms = stages.run_ocr(event)
        timings["ocr"] = round(ms, 3)
        if ocr is None:
            kind, _, detail = err.partition(": ")
            return stages.journal_failure(event, kind, detail, timings=timings)
        stages.journal(event.content_hash, event.path, "ocr_done",
                       engine_id=ocr.engine_id, timings=timings, only_if_legal=True)

        record, failure, ms = stages.run_structure(event, ocr)
        timings["llm"] = round(ms, 3)
        if record is None:
            return stages.journal_failure(event, failure.kind, failure.detail,
                                          timings=timings, engine_id=ocr.engine_id)
        store.save_record(record)
        stages.records.append(record)
        stages.journal(event.content_hash, event.path, "structured",
                       engine_id=ocr.engine_id, timings=timings)

        ms = stages.render(list(stages.records))
        timings["report"] = round(ms, 3)
        return stages.journal(event.content_hash, event.path, "reported",
                              engine_id=ocr.engine_id, timings=timings)
    finally:
        if own_engine is not None:
            own_engine.close()


# --------------------------------------------------------------------------
# run coordination


class RunHandle:
    """Owns the threads of one run; hand it to shutdown() to stop early."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.metrics = _Metrics()
        self.stop_admissions = threading.Event()  # graceful: stop watching
        self.abort = threading.Event()            # force: drop in-flight work
        self.idle = threading.Event()             # watcher saw a drained, quiet system
        self.watcher_done = threading.Event()
        self._lock = threading.Lock()
        self.admitted: dict[str, str] = {}        # hash -> path, this run
        self.finished = 0                         # terminal journal entries, this run
        self._threads: list[threading.Thread] = []
        self._result: StageMetrics | None = None
        self._fatal: BaseException | None = None

    def admit(self, event: FileEvent) -> None:
        with self._lock:
            self.admitted[event.content_hash] = str(event.path)

    def mark_finished(self) -> None:
        with self._lock:
            self.finished += 1

    def counts(self) -> tuple[int, int]:
        with self._lock:
            return len(self.admitted), self.finished

    def drained(self) -> bool:
        admitted, finished = self.counts()
        return finished >= admitted

    def request_stop(self) -> None:
        self.stop_admissions.set()

    def wait(self, timeout: float | None = None) -> bool:
        deadline = None if timeout is None else time.monotonic() + timeout
        for t in self._threads:
            t.join(None if deadline is None else max(0.0, deadline - time.monotonic()))
        return not any(t.is_alive() for t in self._threads)


def _abortable_put(q: queue.Queue, item, abort: threading.Event) -> bool:
    while not abort.is_set():
        try:
            q.put(item, timeout=_TICK)
            return True
        except queue.Full:
            continue
    return False


def run_loop(config: RunConfig) -> StageMetrics:
    """Run to completion per config.run_duration; returns final metrics.

    A numeric run_duration is a wall-clock bound in seconds. "until-idle"
    stops once the watch directory has been quiet for two polls and all
    admitted work is terminal. "until-signal" runs until request_stop() is
    called on the handle (the CLI wires signals to it).
    """
    handle = start_run(config)
    wait_run(handle)
    return shutdown(handle)


def wait_run(handle: RunHandle) -> None:
    """Block until the run's configured end condition (or a stop request)."""
    config = handle.config
    try:
        if isinstance(config.run_duration, (int, float)):
            deadline = time.monotonic() + float(config.run_duration)
            while time.monotonic() < deadline and not handle.wait(timeout=_TICK):
                if handle.stop_admissions.is_set():
                    break
        elif config.run_duration == "until-idle":
            while not handle.idle.is_set() and not handle.wait(timeout=_TICK):
                if handle.stop_admissions.is_set():
                    break
        else:
            while not handle.stop_admissions.is_set() and not handle.wait(timeout=_TICK):
                pass
    except KeyboardInterrupt:
        logger.info("interrupt received; draining")


def start_run(config: RunConfig) -> RunHandle:
    handle = RunHandle(config)
    runner = _run_sequential if config.mode == "sequential" else _run_pipelined
    t = threading.Thread(target=_guard, args=(runner, handle), name="lmrpa-run")
    t.start()
    handle._threads.append(t)
    return handle


def _guard(runner, handle: RunHandle) -> None:
    try:
        handle._result = runner(handle)
    except BaseException as exc:  # surfaced to the caller in shutdown()
        handle._fatal = exc
        handle.abort.set()


def shutdown(handle: RunHandle) -> StageMetrics:
    """Stop admissions, drain in-flight work, force-stop past the deadline."""
    config = handle.config
    handle.request_stop()
    drain_s = config.drain_timeout_ms / 1000.0
    if not handle.wait(timeout=drain_s):
        logger.warning("drain timeout (%d ms) hit; force-stopping", config.drain_timeout_ms)
        handle.abort.set()
        handle.wait(timeout=None)
        handle.metrics.data.forced_stop = True
    if handle._fatal is not None:
        raise handle._fatal
    return handle._result if handle._result is not None else handle.metrics.data


# --------------------------------------------------------------------------
# sequential mode


def _watch_log(metrics: _Metrics):
    def log(decision: dict) -> None:
        if decision.get("event") == "ignored":
            metrics.bump("files_ignored")
        logger.info("%s", decision)
    return log


def _should_admit(event: FileEvent, handle: RunHandle, terminal_at_start: frozenset) -> bool:
    if event.content_hash in terminal_at_start or event.content_hash in handle.admitted:
        logger.info("skipping %s: content already processed", event.path)
        handle.metrics.bump("files_skipped")
        return False
    return True


def _run_sequential(handle: RunHandle) -> StageMetrics:
    config, metrics = handle.config, handle.metrics
    t_start = time.perf_counter()
    with RecordStore(config.journal_path, config.records_path) as store:
        terminal_at_start = frozenset(
            rid for rid, e in store.entries().items() if e.status in TERMINAL
        )
        engine = make_engine(config.engine)
        stages = _Stages(config, store, metrics, engine=engine)
        prev, pending = FileSnapshot.empty(), {}
        quiet_polls = 0
        log = _watch_log(metrics)
        try:
            while not handle.stop_admissions.is_set() and not handle.abort.is_set():
                events, prev, pending = poll_once(config.watch, prev, pending, log=log)
                admitted_events = []
                for event in events:
                    if _should_admit(event, handle, terminal_at_start):
                        handle.admit(event)
                        metrics.bump("files_detected")
                        admitted_events.append(event)
                for event in admitted_events:
                    if handle.abort.is_set():
                        break
                    entry = process_file(event, config, store, stages=stages)
                    handle.mark_finished()
                    if entry.status != "reported":
                        logger.info("file %s ended %s", event.path, entry.status)
                if admitted_events or pending:
                    quiet_polls = 0
                else:
                    quiet_polls += 1
                    if quiet_polls >= 2 and handle.drained():
                        handle.idle.set()
                        if config.run_duration == "until-idle":
                            break
                handle.stop_admissions.wait(config.watch.poll_interval_ms / 1000.0)
            _interrupt_sweep(handle, stages)
        finally:
            engine.close()
    metrics.data.wall_clock_ms = (time.perf_counter() - t_start) * 1000.0
    return metrics.data


def _interrupt_sweep(handle: RunHandle, stages: _Stages) -> None:
    """Journal failed(Interrupted) for every admitted file not yet terminal."""
    with handle._lock:
        admitted = dict(handle.admitted)
    for record_id, path in admitted.items():
        entry = stages.store.get(record_id)
        if entry is not None and entry.status in TERMINAL:
            continue
        if entry is None:
            stages.journal(record_id, path, "detected")
        stages.journal(record_id, path, "failed",
                       error="Interrupted: shutdown before completion")
        stages.metrics.bump("files_failed")
        handle.mark_finished()


# --------------------------------------------------------------------------
# pipelined mode


_OCR_STOP = object()
_RENDER_STOP = object()


def _stage(fn, handle: RunHandle, *args):
    """Run one stage context; a crash aborts the whole run, not just a thread."""

    def run():
        try:
            fn(handle, *args)
        except BaseException as exc:
            logger.error("stage %s failed: %s", fn.__name__, exc)
            handle._fatal = exc
            handle.abort.set()

    return run


def _run_pipelined(handle: RunHandle) -> StageMetrics:
    config, metrics = handle.config, handle.metrics
    t_start = time.perf_counter()
    q_events: queue.Queue = queue.Queue(maxsize=max(1, config.queue_capacity - 1))
    q_ocr_out: queue.Queue = queue.Queue(maxsize=1)
    q_render: queue.Queue = queue.Queue(maxsize=config.queue_capacity)
    q_done: queue.Queue = queue.Queue()  # unbounded: completions must never block

    with RecordStore(config.journal_path, config.records_path) as store:
        terminal_at_start = frozenset(
            rid for rid, e in store.entries().items() if e.status in TERMINAL
        )
        engine = make_engine(config.engine)
        stages = _Stages(config, store, metrics, engine=engine)
        threads = [
            threading.Thread(
                target=_stage(_watcher_thread, handle, q_events, terminal_at_start),
                name="lmrpa-watcher",
            ),
            threading.Thread(
                target=_stage(_structurer_thread, handle, stages, q_ocr_out, q_render, q_done),
                name="lmrpa-structurer",
            ),
            threading.Thread(
                target=_stage(_renderer_thread, handle, stages, q_render, q_done),
                name="lmrpa-renderer",
            ),
        ]
        workers = [
            threading.Thread(
                target=_stage(_ocr_worker, handle, stages, q_events, q_ocr_out),
                name=f"lmrpa-ocr-{i}",
            )
            for i in range(config.workers_ocr)
        ]
        for t in threads + workers:
            t.start()
        try:
            for t in [threads[0]] + workers:
                t.join()
            # OCR stage is finished; unblock the structurer once everything
            # in flight has terminal status, then stop the renderer.
            handle.watcher_done.set()
            threads[1].join()
            _abortable_put(q_render, _RENDER_STOP, handle.abort)
            threads[2].join(timeout=5.0)
        finally:
            engine.close()
    metrics.data.wall_clock_ms = (time.perf_counter() - t_start) * 1000.0
    return metrics.data


def _watcher_thread(handle: RunHandle, q_events: queue.Queue,
                    terminal_at_start: frozenset) -> None:
    config, metrics = handle.config, handle.metrics
    prev, pending = FileSnapshot.empty(), {}
    quiet_polls = 0
    log = _watch_log(metrics)
    while not handle.stop_admissions.is_set() and not handle.abort.is_set():
        events, prev, pending = poll_once(config.watch, prev, pending, log=log)
        admitted_any = False
        for event in events:
            if not _should_admit(event, handle, terminal_at_start):
                continue
            handle.admit(event)
            metrics.bump("files_detected")
            admitted_any = True
            if not _abortable_put(q_events, event, handle.abort):
                break
        if admitted_any or pending:
            quiet_polls = 0
        else:
            quiet_polls += 1
            if quiet_polls >= 2 and handle.drained():
                handle.idle.set()
                if config.run_duration == "until-idle":
                    break
        handle.stop_admissions.wait(config.watch.poll_interval_ms / 1000.0)
    for _ in range(config.workers_ocr):
        _abortable_put(q_events, _OCR_STOP, handle.abort)


def _ocr_worker(handle: RunHandle, stages: _Stages, q_events: queue.Queue,
                q_ocr_out: queue.Queue) -> None:
    while not handle.abort.is_set():
        try:
            item = q_events.get(timeout=_TICK)
        except queue.Empty:
            continue
        if item is _OCR_STOP:
            return
        result, err, ms = stages.run_ocr(item)
        if not _abortable_put(q_ocr_out, (item, result, err, ms), handle.abort):
            return


def _structurer_thread(handle: RunHandle, stages: _Stages, q_ocr_out: queue.Queue,
                       q_render: queue.Queue, q_done: queue.Queue) -> None:
    """Sole store writer: journals every transition, calls the LLM, persists.

    Render jobs go out with a records snapshot; completions come back on
    q_done and get journaled 'reported' here, keeping the single-writer rule.
    """
    config = handle.config
    timings: dict[str, dict] = {}   # record_id -> accumulated stage timings
    engine_ids: dict[str, int] = {}
    unrendered: list[tuple[str, str]] = []  # (record_id, path) awaiting render
    renders_out = 0

    def fold_done() -> int:
        nonlocal renders_out
        folded = 0
        while True:
            try:
                covered, ms = q_done.get_nowait()
            except queue.Empty:
                return folded
            renders_out -= 1
            folded += 1
            for record_id, path in covered:
                t = timings.get(record_id, {})
                t["report"] = round(ms, 3)
                stages.journal(record_id, path, "reported",
                               engine_id=engine_ids.get(record_id), timings=t)
                handle.mark_finished()
                timings.pop(record_id, None)

    while True:
        fold_done()
        if handle.abort.is_set():
            _interrupt_sweep(handle, stages)
            return
        if handle.watcher_done.is_set() and handle.drained() and renders_out == 0 \
                and not unrendered:
            return
        # Flush a partial render batch whenever the renderer is idle and no
        # OCR output is waiting; render_every caps batch size, it is not a
        # quota (waiting for a full batch could stall idle detection).
        if unrendered and renders_out == 0 and q_ocr_out.empty():
            if _abortable_put(q_render, (list(unrendered), list(stages.records)),
                              handle.abort):
                renders_out += 1
                unrendered.clear()
            continue
        try:
            event, ocr, err, ms = q_ocr_out.get(timeout=_TICK)
        except queue.Empty:
            continue

        t = {"ocr": round(ms, 3)}
        stages.journal(event.content_hash, event.path, "detected", only_if_legal=True)
        if ocr is None:
            kind, _, detail = err.partition(": ")
            stages.journal_failure(event, kind, detail, timings=t)
            handle.mark_finished()
            continue
        stages.journal(event.content_hash, event.path, "ocr_done",
                       engine_id=ocr.engine_id, timings=t, only_if_legal=True)

        record, failure, ms_llm = stages.run_structure(event, ocr)
        t["llm"] = round(ms_llm, 3)
        if record is None:
            stages.journal_failure(event, failure.kind, failure.detail,
                                   timings=t, engine_id=ocr.engine_id)
            handle.mark_finished()
            continue
        stages.store.save_record(record)
        stages.records.append(record)
        stages.journal(event.content_hash, event.path, "structured",
                       engine_id=ocr.engine_id, timings=t)
        timings[event.content_hash] = t
        engine_ids[event.content_hash] = ocr.engine_id

        unrendered.append((event.content_hash, str(event.path)))
        if len(unrendered) >= config.render_every:
            if _abortable_put(q_render, (list(unrendered), list(stages.records)),
                              handle.abort):
                renders_out += 1
                unrendered.clear()


def _renderer_thread(handle: RunHandle, stages: _Stages, q_render: queue.Queue,
                     q_done: queue.Queue) -> None:
    while not handle.abort.is_set():
        try:
            item = q_render.get(timeout=_TICK)
        except queue.Empty:
            continue
        if item is _RENDER_STOP:
            return
        covered, records = item
        ms = stages.render(records)
        q_done.put((covered, ms))


def render_outputs(config: RunConfig) -> tuple[int, Path]:
    """Re-render sheet and report from the store; returns (records, report path)."""
    with RecordStore(config.journal_path, config.records_path) as store:
        stages = _Stages(config, store, _Metrics())
        records = stages.records
        stages.render(records)
    return len(records), config.report_path
