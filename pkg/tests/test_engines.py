import hashlib
import json
import shutil
import subprocess
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import pytest

from lmrpa.engines import (
    EngineCrashed,
    EngineSpec,
    EngineTimeout,
    EngineUnavailable,
    FixtureMissing,
    SidecarEngine,
    fixture_lookup,
    make_engine,
    normalize_text,
    recognize,
    sidecar_call,
    validate_registry,
)
from lmrpa.watcher import FileEvent

from .conftest import ECHO_SIDECAR, GOLDEN_DIR, sidecar_launch

FAKE_CMD = Path(__file__).parent / "helpers" / "fake_ocr_cmd.py"


def make_event(path: Path) -> FileEvent:
    data = path.read_bytes()
    return FileEvent(
        path=path,
        size_bytes=len(data),
        detected_at=datetime.now(timezone.utc).isoformat(),
        content_hash=hashlib.sha256(data).hexdigest(),
    )


def command_template(*flags: str) -> str:
    parts = [sys.executable, str(FAKE_CMD), *flags, "{input}"]
    return " ".join(parts)


# -- spec validation ---------------------------------------------------------


def test_engine_spec_requires_exactly_its_kind_field(tmp_path):
    with pytest.raises(ValueError):
        EngineSpec(engine_id=5, kind="command")  # missing template
    with pytest.raises(ValueError):
        EngineSpec(engine_id=5, kind="fixture", fixture_dir=tmp_path,
                   command_template="x {input}")
    with pytest.raises(ValueError):
        EngineSpec(engine_id=5, kind="command", command_template="no placeholder")


def test_engine_spec_reserved_ids(tmp_path):
    with pytest.raises(ValueError):
        EngineSpec(engine_id=1, kind="fixture", fixture_dir=tmp_path)
    with pytest.raises(ValueError):
        EngineSpec(engine_id=2, kind="command", command_template="x {input}")
    # the right kinds may use them
    EngineSpec(engine_id=1, kind="command", command_template="x {input}")
    EngineSpec(engine_id=2, kind="sidecar", sidecar_launch="x")


def test_validate_registry_rejects_duplicate_ids(tmp_path):
    a = EngineSpec(engine_id=9, kind="fixture", fixture_dir=tmp_path)
    b = EngineSpec(engine_id=9, kind="command", command_template="x {input}")
    with pytest.raises(ValueError):
        validate_registry([a, b])
    validate_registry([a])


# -- fixture engine ----------------------------------------------------------


def test_fixture_lookup_returns_exact_contents(tmp_path):
    (tmp_path / "abc123.txt").write_text("INVOICE 0001 TOTAL 42.00", encoding="utf-8")
    assert fixture_lookup(tmp_path, "abc123") == "INVOICE 0001 TOTAL 42.00"


def test_fixture_lookup_missing_hash(tmp_path):
    with pytest.raises(FixtureMissing):
        fixture_lookup(tmp_path, "nope")


def test_fixture_latency_lower_bounds_duration(tmp_path):
    img = tmp_path / "a.png"
    img.write_bytes(b"img")
    event = make_event(img)
    (tmp_path / f"{event.content_hash}.txt").write_text("text", encoding="utf-8")
    spec = EngineSpec(engine_id=9, kind="fixture", fixture_dir=tmp_path,
                      fixture_latency_ms=50)
    result = recognize(spec, event)
    assert result.duration_ms >= 50
    assert result.text == "text"


def test_empty_ocr_output_is_warning_not_error(tmp_path):
    img = tmp_path / "blank.png"
    img.write_bytes(b"blank")
    event = make_event(img)
    (tmp_path / f"{event.content_hash}.txt").write_text("   \n  \n", encoding="utf-8")
    result = recognize(EngineSpec(engine_id=9, kind="fixture", fixture_dir=tmp_path), event)
    assert result.text.strip() == ""
    assert result.warnings == ["empty OCR output"]


def test_normalize_text_newlines_and_trailing_space():
    assert normalize_text("a \r\nb\t\rc  ") == "a\nb\nc"


# -- command engine ----------------------------------------------------------


def test_command_engine_reads_stdout(tmp_path):
    img = tmp_path / "inv.png"
    img.write_text("INVOICE 0001 TOTAL 42.00", encoding="utf-8")
    spec = EngineSpec(engine_id=1, kind="command", command_template=command_template())
    result = recognize(spec, make_event(img))
    assert result.text == "INVOICE 0001 TOTAL 42.00"
    assert result.engine_id == 1
    assert result.duration_ms >= 0


def test_command_engine_missing_binary(tmp_path):
    img = tmp_path / "a.png"
    img.write_bytes(b"x")
    spec = EngineSpec(engine_id=1, kind="command",
                      command_template="/nonexistent/ocr-binary {input}")
    with pytest.raises(EngineUnavailable):
        recognize(spec, make_event(img))


def test_command_engine_nonzero_exit(tmp_path):
    img = tmp_path / "a.png"
    img.write_bytes(b"x")
    spec = EngineSpec(engine_id=1, kind="command",
                      command_template=command_template("--fail"))
    with pytest.raises(EngineCrashed) as err:
        recognize(spec, make_event(img))
    assert "simulated engine crash" in str(err.value)


def test_command_engine_timeout(tmp_path):
    img = tmp_path / "a.png"
    img.write_bytes(b"x")
    spec = EngineSpec(engine_id=1, kind="command",
                      command_template=command_template("--sleep-ms", "2000"),
                      timeout_ms=150)
    t0 = time.monotonic()
    with pytest.raises(EngineTimeout):
        recognize(spec, make_event(img))
    assert time.monotonic() - t0 < 1.5


# -- sidecar engine ----------------------------------------------------------


def test_sidecar_ping_and_echo(tmp_path):
    spec = EngineSpec(engine_id=2, kind="sidecar", sidecar_launch=sidecar_launch())
    img = tmp_path / "a.png"
    img.write_bytes(b"x")
    with make_engine(spec) as engine:
        engine.ping()
        result = engine.recognize(make_event(img))
    assert result.text == "ECHO a.png"
    assert result.engine_id == 2


def test_sidecar_call_roundtrip():
    spec = EngineSpec(engine_id=2, kind="sidecar", sidecar_launch=sidecar_launch())
    with make_engine(spec) as engine:
        reply = sidecar_call(engine, {"id": "1", "op": "ping"})
        assert reply == {"id": "1", "ok": True}
        reply = sidecar_call(engine, {"id": "2", "op": "ocr", "image_path": "/x/a.png"})
        assert reply["text"] == "ECHO a.png" and reply["duration_ms"] >= 0


def test_sidecar_fixture_mode_matches_fixture_engine(tmp_path):
    # adapter equivalence: same text source, same OcrResult.text
    img = tmp_path / "inv.png"
    img.write_bytes(b"image-payload")
    event = make_event(img)
    fdir = tmp_path / "ocr"
    fdir.mkdir()
    (fdir / f"{event.content_hash}.txt").write_text("Total: 9.99 \r\n", encoding="utf-8")
    fixture_spec = EngineSpec(engine_id=9, kind="fixture", fixture_dir=fdir)
    sidecar_spec = EngineSpec(
        engine_id=2, kind="sidecar",
        sidecar_launch=sidecar_launch("--mode", "fixture", "--fixture-dir", str(fdir)),
    )
    command_spec = EngineSpec(engine_id=1, kind="command",
                              command_template=command_template())
    texts = set()
    texts.add(recognize(fixture_spec, event).text)
    texts.add(recognize(sidecar_spec, event).text)
    # command engine reads the image file itself; write the same payload text
    img2 = tmp_path / "astext.png"
    img2.write_text("Total: 9.99 \r\n", encoding="utf-8")
    texts.add(recognize(command_spec, make_event(img2)).text)
    assert texts == {"Total: 9.99\n"}  # identical across adapters, LF only


def test_sidecar_missing_image_in_fixture_mode(tmp_path):
    fdir = tmp_path / "ocr"
    fdir.mkdir()
    spec = EngineSpec(
        engine_id=2, kind="sidecar",
        sidecar_launch=sidecar_launch("--mode", "fixture", "--fixture-dir", str(fdir)),
    )
    img = tmp_path / "a.png"
    img.write_bytes(b"x")
    with make_engine(spec) as engine:
        with pytest.raises(EngineCrashed) as err:
            engine.recognize(make_event(img))
    assert "not_found" in str(err.value)


def test_sidecar_bad_hello(tmp_path):
    spec = EngineSpec(engine_id=2, kind="sidecar",
                      sidecar_launch=sidecar_launch("--bad-hello"))
    with pytest.raises(EngineUnavailable):
        make_engine(spec)


def test_sidecar_launch_missing_binary():
    spec = EngineSpec(engine_id=2, kind="sidecar",
                      sidecar_launch="/nonexistent/sidecar --mode echo")
    with pytest.raises(EngineUnavailable):
        make_engine(spec)


def test_sidecar_wrong_reply_id(tmp_path):
    spec = EngineSpec(engine_id=2, kind="sidecar",
                      sidecar_launch=sidecar_launch("--wrong-id"))
    img = tmp_path / "a.png"
    img.write_bytes(b"x")
    with make_engine(spec) as engine:
        with pytest.raises(EngineCrashed):
            engine.recognize(make_event(img))


def test_sidecar_garbage_reply(tmp_path):
    spec = EngineSpec(engine_id=2, kind="sidecar",
                      sidecar_launch=sidecar_launch("--garbage-reply"))
    img = tmp_path / "a.png"
    img.write_bytes(b"x")
    with make_engine(spec) as engine:
        with pytest.raises(EngineCrashed):
            engine.recognize(make_event(img))


def test_sidecar_timeout(tmp_path):
    spec = EngineSpec(engine_id=2, kind="sidecar",
                      sidecar_launch=sidecar_launch("--sleep-ms", "2000"),
                      timeout_ms=150)
    img = tmp_path / "a.png"
    img.write_bytes(b"x")
    engine = make_engine(spec)
    try:
        t0 = time.monotonic()
        with pytest.raises(EngineTimeout):
            engine.recognize(make_event(img))
        # the recognize call itself must respect timeout_ms (close may wait)
        assert time.monotonic() - t0 < 1.5
    finally:
        engine.close()


def test_sidecar_stream_close_is_crash(tmp_path):
    spec = EngineSpec(engine_id=2, kind="sidecar",
                      sidecar_launch=sidecar_launch("--exit-after-hello"))
    img = tmp_path / "a.png"
    img.write_bytes(b"x")
    engine = make_engine(spec)
    try:
        with pytest.raises(EngineCrashed):
            engine.recognize(make_event(img))
    finally:
        engine.close()


# -- golden transcript (shared conformance surface) --------------------------


def drive_transcript(argv: list[str]) -> None:
    """Drive the raw pipes and compare every sidecar line byte-for-byte."""
    transcript = (GOLDEN_DIR / "sidecar_echo_transcript.txt").read_text(encoding="utf-8")
    lines = [l for l in transcript.splitlines() if l]
    proc = subprocess.Popen(
        argv,
        stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True,
        encoding="utf-8", bufsize=1,
    )
    try:
        for line in lines:
            tag, payload = line[0], line[2:]
            if tag == ">":
                proc.stdin.write(payload + "\n")
                proc.stdin.flush()
            else:
                got = proc.stdout.readline().rstrip("\n")
                assert got == payload
        proc.stdin.close()
        assert proc.wait(timeout=5) == 0
    finally:
        if proc.poll() is None:
            proc.kill()


def test_echo_sidecar_matches_golden_transcript():
    drive_transcript([sys.executable, str(ECHO_SIDECAR), "--mode", "echo"])


def test_sidecar_engine_ids_follow_transcript_sequence(tmp_path):
    # the adapter's id sequence is 1, 2, 3... as recorded in the transcript
    spec = EngineSpec(engine_id=2, kind="sidecar", sidecar_launch=sidecar_launch())
    img_a, img_b = tmp_path / "a.png", tmp_path / "b.png"
    img_a.write_bytes(b"a")
    img_b.write_bytes(b"b")
    with make_engine(spec) as engine:
        engine.ping()  # id 1
        assert engine.recognize(make_event(img_a)).text == "ECHO a.png"  # id 2
        assert engine.recognize(make_event(img_b)).text == "ECHO b.png"  # id 3
        assert engine._next_id == 3


# -- compiled sidecar (cross-implementation conformance) ----------------------

NODE = shutil.which("node")
SIDECAR_DIST = Path(__file__).parent.parent / "sidecar" / "dist" / "main.js"

needs_compiled_sidecar = pytest.mark.skipif(
    NODE is None or not SIDECAR_DIST.exists(),
    reason="compiled ocr-sidecar not built (run npm test in sidecar/)",
)


def compiled_launch(*flags: str) -> str:
    return " ".join([NODE, str(SIDECAR_DIST), *flags])


@needs_compiled_sidecar
def test_compiled_sidecar_matches_golden_transcript():
    drive_transcript([NODE, str(SIDECAR_DIST), "--mode", "echo"])


@needs_compiled_sidecar
def test_compiled_sidecar_through_adapter(tmp_path):
    img = tmp_path / "inv.png"
    img.write_bytes(b"image-payload")
    event = make_event(img)
    fdir = tmp_path / "ocr"
    fdir.mkdir()
    (fdir / f"{event.content_hash}.txt").write_text("Total: 9.99 \r\n", encoding="utf-8")
    spec = EngineSpec(
        engine_id=2, kind="sidecar",
        sidecar_launch=compiled_launch("--mode", "fixture", "--fixture-dir", str(fdir)),
    )
    with make_engine(spec) as engine:
        engine.ping()
        assert engine.recognize(event).text == "Total: 9.99\n"
        missing = tmp_path / "missing.png"
        missing.write_bytes(b"other")
        with pytest.raises(EngineCrashed) as err:
            engine.recognize(make_event(missing))
    assert "not_found" in str(err.value)
