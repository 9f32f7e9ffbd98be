import json
import shutil
import sys
from pathlib import Path

import pytest

from lmrpa.bench import generate_corpus
from lmrpa.engines import EngineSpec
from lmrpa.pipeline import RunConfig
from lmrpa.structurer import InvoiceSchema, LlmClientConfig
from lmrpa.watcher import WatchConfig

TESTS_DIR = Path(__file__).parent
GOLDEN_DIR = TESTS_DIR / "golden"
ECHO_SIDECAR = TESTS_DIR / "helpers" / "echo_sidecar.py"


def sidecar_launch(*flags: str) -> str:
    return " ".join([sys.executable, str(ECHO_SIDECAR), *flags])


@pytest.fixture(scope="session")
def schema() -> InvoiceSchema:
    return InvoiceSchema.default()


@pytest.fixture(scope="session")
def corpus5(tmp_path_factory) -> Path:
    """Five synthetic invoices shared across tests that never mutate them."""
    out = tmp_path_factory.mktemp("corpus5")
    generate_corpus(5, out, seed=7)
    return out


def make_run_config(base: Path, corpus: Path, **overrides) -> RunConfig:
    """Fixture-engine, mock-LLM config rooted at base (watch/ and store/)."""
    watch_dir = base / "watch"
    store_dir = base / "store"
    watch_dir.mkdir(parents=True, exist_ok=True)
    store_dir.mkdir(parents=True, exist_ok=True)
    defaults = dict(
        watch=WatchConfig(directory=watch_dir, poll_interval_ms=40, stability_polls=0),
        engine=EngineSpec(engine_id=9, kind="fixture", fixture_dir=corpus / "ocr"),
        llm=LlmClientConfig(mode="mock", mock_dir=corpus / "mock"),
        journal_path=store_dir / "journal.jsonl",
        records_path=store_dir / "records.jsonl",
        mode="pipelined",
        run_duration="until-idle",
        drain_timeout_ms=20000,
    )
    defaults.update(overrides)
    return RunConfig(**defaults)


def drop_corpus_images(corpus: Path, watch_dir: Path) -> list[Path]:
    dropped = []
    for src in sorted((corpus / "images").iterdir()):
        dst = watch_dir / src.name
        shutil.copy2(src, dst)
        dropped.append(dst)
    return dropped


def load_expected(corpus: Path) -> dict[str, dict]:
    out = {}
    for f in (corpus / "expected").glob("*.json"):
        data = json.loads(f.read_text(encoding="utf-8"))
        out[data["source_hash"]] = data
    return out
