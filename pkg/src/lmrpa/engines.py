"""OCR engine adapters behind one interface.

Three kinds:

* ``command``: shells out to an external binary (tesseract-style) and reads
  recovered text from stdout. Engine id 1 is reserved for this kind.
* ``sidecar``: a long-lived helper process in another ecosystem, spoken to
  over line-delimited JSON on stdin/stdout. Engine id 2 is reserved.
* ``fixture``: canned text keyed by the input file's content hash, with an
  optional synthetic latency. Deterministic; used by tests and benchmarks.

All adapters normalize output the same way (LF newlines, per-line rstrip), so
for the same underlying text source they return byte-identical text.
"""

import json
import queue
import shlex
import subprocess
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from lmrpa.watcher import FileEvent

COMMAND_ENGINE_ID = 1
SIDECAR_ENGINE_ID = 2

_KINDS = ("command", "sidecar", "fixture")


class EngineError(Exception):
    """Base for per-file OCR failures; the pipeline journals these and moves on."""


class EngineUnavailable(EngineError):
    """Binary or sidecar missing, or the sidecar failed to start."""


class EngineTimeout(EngineError):
    """The engine exceeded timeout_ms for one image."""


class EngineCrashed(EngineError):
    """Nonzero exit, closed stream, or a malformed/mismatched protocol reply."""


class FixtureMissing(EngineError):
    """No canned text for this content hash: a corpus/setup bug, not an input problem."""


@dataclass(frozen=True)
class EngineSpec:
    engine_id: int
    kind: str
    command_template: str | None = None
    sidecar_launch: str | None = None
    fixture_dir: Path | None = None
    timeout_ms: int = 30_000
    fixture_latency_ms: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown engine kind {self.kind!r}")
        if self.timeout_ms < 1:
            raise ValueError("timeout_ms must be >= 1")
        wanted = {
            "command": self.command_template is not None,
            "sidecar": self.sidecar_launch is not None,
            "fixture": self.fixture_dir is not None,
        }
        if not wanted[self.kind]:
            raise ValueError(f"{self.kind} engine is missing its required field")
        set_fields = [k for k, present in wanted.items() if present]
        if set_fields != [self.kind]:
            raise ValueError(
                f"{self.kind} engine must set exactly its own field, got {set_fields}"
            )
        if self.kind == "command" and "{input}" not in self.command_template:
            raise ValueError("command_template must contain the {input} placeholder")
        if self.kind != "fixture" and self.fixture_latency_ms:
            raise ValueError("fixture_latency_ms only applies to fixture engines")
        if self.fixture_latency_ms < 0:
            raise ValueError("fixture_latency_ms must be >= 0")
        if self.engine_id == COMMAND_ENGINE_ID and self.kind != "command":
            raise ValueError("engine_id 1 is reserved for the command engine")
        if self.engine_id == SIDECAR_ENGINE_ID and self.kind != "sidecar":
            raise ValueError("engine_id 2 is reserved for the sidecar engine")
        if self.fixture_dir is not None:
            object.__setattr__(self, "fixture_dir", Path(self.fixture_dir))


@dataclass
class OcrResult:
    text: str
    engine_id: int
    duration_ms: int
    warnings: list[str] = field(default_factory=list)


def validate_registry(specs: list[EngineSpec]) -> None:
    """Engine ids must map to adapters injectively."""
    seen: dict[int, str] = {}
    for spec in specs:
        if spec.engine_id in seen:
            raise ValueError(f"duplicate engine_id {spec.engine_id}")
        seen[spec.engine_id] = spec.kind


def normalize_text(raw: str) -> str:
    """One newline convention: LF, trailing whitespace stripped per line."""
    unified = raw.replace("\r\n", "\n").replace("\r", "\n")
    return "\n".join(line.rstrip() for line in unified.split("\n"))


def fixture_lookup(fixture_dir: Path, content_hash: str, latency_ms: int = 0) -> str:
    """Return the canned text for a content hash, after the synthetic latency."""
    path = Path(fixture_dir) / f"{content_hash}.txt"
    if not path.is_file():
        raise FixtureMissing(f"no canned text for {content_hash} in {fixture_dir}")
    if latency_ms:
        time.sleep(latency_ms / 1000.0)
    return path.read_text(encoding="utf-8")


def _finish(text: str, engine_id: int, duration_ms: int) -> OcrResult:
    text = normalize_text(text)
    warnings = [] if text.strip() else ["empty OCR output"]
    return OcrResult(text=text, engine_id=engine_id, duration_ms=duration_ms, warnings=warnings)


class FixtureEngine:
    def __init__(self, spec: EngineSpec):
        self.spec = spec

    def recognize(self, event: FileEvent) -> OcrResult:
        start = time.monotonic()
        text = fixture_lookup(self.spec.fixture_dir, event.content_hash, self.spec.fixture_latency_ms)
        duration_ms = int((time.monotonic() - start) * 1000)
        return _finish(text, self.spec.engine_id, duration_ms)

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class CommandEngine:
    """One subprocess per call; concurrent calls cannot interleave output."""

    def __init__(self, spec: EngineSpec):
        self.spec = spec

    def recognize(self, event: FileEvent) -> OcrResult:
        argv = [
            str(event.path) if token == "{input}" else token
            for token in shlex.split(self.spec.command_template)
        ]
        start = time.monotonic()
        try:
            proc = subprocess.run(
                argv,
                capture_output=True,
                timeout=self.spec.timeout_ms / 1000.0,
            )
        except FileNotFoundError as exc:
            raise EngineUnavailable(f"{argv[0]}: not found") from exc
        except PermissionError as exc:
            raise EngineUnavailable(f"{argv[0]}: not executable") from exc
        except subprocess.TimeoutExpired as exc:
            raise EngineTimeout(f"{argv[0]} exceeded {self.spec.timeout_ms} ms") from exc
        duration_ms = int((time.monotonic() - start) * 1000)
        if proc.returncode != 0:
            stderr = proc.stderr.decode("utf-8", "replace").strip()
            raise EngineCrashed(f"{argv[0]} exited {proc.returncode}: {stderr[:200]}")
        return _finish(proc.stdout.decode("utf-8", "replace"), self.spec.engine_id, duration_ms)

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class SidecarEngine:
    """Adapter for a line-delimited JSON sidecar process.

    Wire protocol (UTF-8, one JSON object per line, LF):
      hello (sidecar speaks first):
        {"op":"hello","engine":"<name>","version":"<string>","ok":true}
      requests:
        {"id":"<string>","op":"ping"}
        {"id":"<string>","op":"ocr","image_path":"<absolute path>"}
      responses:
        {"id":"<same>","ok":true}
        {"id":"<same>","ok":true,"text":"<string>","duration_ms":<int>}
        {"id":"<same>","ok":false,"error":"<string>"}
    Closing the sidecar's stdin requests a clean exit. Requests are
    serialized: at most one outstanding request on the stream.
    """

    def __init__(self, spec: EngineSpec):
        self.spec = spec
        self._lock = threading.Lock()
        self._next_id = 0
        self._lines: queue.Queue[str | None] = queue.Queue()
        try:
            self._proc = subprocess.Popen(
                shlex.split(spec.sidecar_launch),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
        except (FileNotFoundError, PermissionError) as exc:
            raise EngineUnavailable(f"sidecar launch failed: {exc}") from exc
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()
        hello = self._read_line()
        try:
            msg = json.loads(hello)
        except json.JSONDecodeError as exc:
            self.close()
            raise EngineUnavailable(f"bad hello line: {hello!r}") from exc
        if msg.get("op") != "hello" or msg.get("ok") is not True:
            self.close()
            raise EngineUnavailable(f"sidecar refused to start: {hello!r}")
        self.engine_name = msg.get("engine", "")
        self.engine_version = msg.get("version", "")

    def _read_loop(self) -> None:
        for line in self._proc.stdout:
            self._lines.put(line.rstrip("\n"))
        self._lines.put(None)

    def _read_line(self) -> str:
        try:
            line = self._lines.get(timeout=self.spec.timeout_ms / 1000.0)
        except queue.Empty:
            raise EngineTimeout(f"sidecar reply exceeded {self.spec.timeout_ms} ms")
        if line is None:
            raise EngineCrashed("sidecar stream closed")
        return line

    def call(self, request: dict) -> dict:
        """Send one request line, read one response line, check id and ok."""
        with self._lock:
            if self._proc.poll() is not None:
                raise EngineCrashed(f"sidecar exited with code {self._proc.returncode}")
            try:
                self._proc.stdin.write(json.dumps(request, separators=(",", ":")) + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise EngineCrashed("sidecar stdin closed") from exc
            line = self._read_line()
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as exc:
            raise EngineCrashed(f"invalid JSON reply: {line!r}") from exc
        if reply.get("id") != request.get("id"):
            raise EngineCrashed(
                f"reply id {reply.get('id')!r} does not match request id {request.get('id')!r}"
            )
        if reply.get("ok") is not True:
            raise EngineCrashed(str(reply.get("error", "unknown sidecar error")))
        return reply

    def ping(self) -> None:
        self.call({"id": self._take_id(), "op": "ping"})

    def _take_id(self) -> str:
        self._next_id += 1
        return str(self._next_id)

    def recognize(self, event: FileEvent) -> OcrResult:
        request = {
            "id": self._take_id(),
            "op": "ocr",
            "image_path": str(Path(event.path).resolve()),
        }
        start = time.monotonic()
        reply = self.call(request)
        duration_ms = int((time.monotonic() - start) * 1000)
        return _finish(str(reply.get("text", "")), self.spec.engine_id, duration_ms)

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def sidecar_call(engine: SidecarEngine, request: dict) -> dict:
    return engine.call(request)


def make_engine(spec: EngineSpec):
    if spec.kind == "fixture":
        return FixtureEngine(spec)
    if spec.kind == "command":
        return CommandEngine(spec)
    return SidecarEngine(spec)


def recognize(spec: EngineSpec, event: FileEvent) -> OcrResult:
    """One-shot convenience. Long-running callers should hold a made engine
    instead, so a sidecar process is reused across files."""
    with make_engine(spec) as engine:
        return engine.recognize(event)
