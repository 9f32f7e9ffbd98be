"""Timed batch runs per engine plus the derived-percentage oracles.

The benchmark copies corpus batches into a clean watch directory per cell,
runs the pipeline to idle with a fresh store, and reports per-cell wall and
per-file seconds. Fixture OCR and mock LLM are the default so results are
machine-local and deterministic; published reference timings live in a data
file and are only used to cross-check derived percentages, never presented
as measured here.
"""

import json
import logging
import platform
import shlex
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from decimal import Decimal, ROUND_HALF_UP
from fractions import Fraction
from importlib import resources
from pathlib import Path

from .engines import EngineSpec, EngineUnavailable, make_engine
from .errors import ConfigError, IoFailure
from .persistence import RecordStore
from .pipeline import RunConfig, run_loop
from .structurer import (
    DETERMINISTIC_TS,
    InvoiceRecord,
    InvoiceSchema,
    LineItem,
    LlmClientConfig,
    format_money,
    split_batches,
    text_digest,
)
from .watcher import WatchConfig

logger = logging.getLogger("lmrpa.bench")

MODES = ("sequential", "pipelined")


class NonpositiveBaseline(ValueError):
    """Percentage baselines must be > 0."""


def _pct(value: Fraction, dp: int) -> Decimal:
    quantum = Decimal(1).scaleb(-dp)
    return (Decimal(value.numerator) / Decimal(value.denominator)).quantize(
        quantum, rounding=ROUND_HALF_UP
    )


def compute_reduction(baseline_s, ours_s, dp: int = 1) -> Decimal:
    """100*(baseline-ours)/baseline, half-up at dp fraction digits."""
    b, o = Fraction(str(baseline_s)), Fraction(str(ours_s))
    if b <= 0:
        raise NonpositiveBaseline(f"baseline must be > 0, got {baseline_s}")
    return _pct(100 * (b - o) / b, dp)


def compute_ratio(baseline_s, ours_s, dp: int = 1) -> Decimal:
    """100*ours/baseline, half-up at dp fraction digits."""
    b, o = Fraction(str(baseline_s)), Fraction(str(ours_s))
    if b <= 0:
        raise NonpositiveBaseline(f"baseline must be > 0, got {baseline_s}")
    return _pct(100 * o / b, dp)


@dataclass(frozen=True)
class DerivedMetric:
    name: str  # reduction_pct | ratio_pct
    baseline_s: str
    ours_s: str
    value_pct: str
    label: str = ""

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "baseline_s": self.baseline_s,
            "ours_s": self.ours_s,
            "value_pct": self.value_pct,
            "label": self.label,
        }


def load_reference_timings() -> dict:
    text = resources.files("lmrpa.data").joinpath("reference_timings.json").read_text("utf-8")
    return json.loads(text)


def reference_derived_metrics() -> list[DerivedMetric]:
    """Re-derive the percentage family from the published reference timings."""
    ref = load_reference_timings()
    manual = ref["manual_s"]
    out: list[DerivedMetric] = []

    def add(name, baseline, ours, label, dp=1):
        fn = compute_reduction if name == "reduction_pct" else compute_ratio
        out.append(
            DerivedMetric(
                name=name,
                baseline_s=str(baseline),
                ours_s=str(ours),
                value_pct=str(fn(baseline, ours, dp)),
                label=label,
            )
        )

    for engine, batches in ref["times_s"].items():
        for batch, times in batches.items():
            ours = times["lmrpa"]
            dp = 2 if (engine, batch) == ("doctr", "batch2") else 1
            add("reduction_pct", manual, ours, f"{engine}/{batch} vs manual", dp)
            for rival in ("uipath", "automation_anywhere"):
                add("ratio_pct", times[rival], ours, f"{engine}/{batch} vs {rival}")
                add("reduction_pct", times[rival], ours, f"{engine}/{batch} vs {rival}")
    return out


@dataclass(frozen=True)
class BenchConfig:
    corpus_dir: Path
    engines: tuple[EngineSpec, ...] = ()
    batch_limit: int = 1500
    batches: int = 1
    mode_pairs: tuple[str, ...] = MODES
    synthetic_latency_ms: dict = field(
        default_factory=lambda: {"ocr": 0, "llm": 0, "report": 0}
    )
    repetitions: int = 1
    poll_interval_ms: int = 50
    queue_capacity: int = 8
    workers_ocr: int = 1

    def __post_init__(self):
        object.__setattr__(self, "corpus_dir", Path(self.corpus_dir))
        object.__setattr__(self, "engines", tuple(self.engines))
        object.__setattr__(self, "mode_pairs", tuple(self.mode_pairs))
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.batch_limit < 1:
            raise ConfigError("batch_limit must be >= 1")
        if self.batches < 1:
            raise ConfigError("batches must be >= 1")
        for mode in self.mode_pairs:
            if mode not in MODES:
                raise ConfigError(f"unknown mode {mode!r}")
        unknown = set(self.synthetic_latency_ms) - {"ocr", "llm", "report"}
        if unknown:
            raise ConfigError(f"unknown synthetic latency keys {sorted(unknown)}")


@dataclass
class BenchCell:
    engine_id: int
    engine_kind: str
    batch_index: int  # 1-based
    mode: str
    files: int = 0
    total_wall_s: float | None = None
    mean_per_file_s: float | None = None
    skipped: bool = False
    reason: str = ""

    def to_json_dict(self) -> dict:
        return {
            "engine_id": self.engine_id,
            "engine_kind": self.engine_kind,
            "batch": self.batch_index,
            "mode": self.mode,
            "files": self.files,
            "total_wall_s": None if self.total_wall_s is None else round(self.total_wall_s, 3),
            "mean_per_file_s": None
            if self.mean_per_file_s is None
            else round(self.mean_per_file_s, 4),
            "skipped": self.skipped,
            "reason": self.reason,
        }


@dataclass
class BenchReport:
    cells: list[BenchCell]
    metadata: dict
    derived: list[DerivedMetric]

    def cell(self, engine_id: int, batch_index: int, mode: str) -> BenchCell:
        for c in self.cells:
            if (c.engine_id, c.batch_index, c.mode) == (engine_id, batch_index, mode):
                return c
        raise KeyError((engine_id, batch_index, mode))

    def to_json_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "cells": [c.to_json_dict() for c in self.cells],
            "derived": [d.to_json_dict() for d in self.derived],
        }


def _engine_available(spec: EngineSpec) -> tuple[bool, str]:
    if spec.kind == "fixture":
        if spec.fixture_dir and Path(spec.fixture_dir).is_dir():
            return True, ""
        return False, f"fixture_dir {spec.fixture_dir} missing"
    if spec.kind == "command":
        argv0 = shlex.split(spec.command_template)[0]
        if shutil.which(argv0):
            return True, ""
        return False, f"command {argv0!r} not found"
    try:
        engine = make_engine(spec)
    except EngineUnavailable as exc:
        return False, str(exc)
    except Exception as exc:  # launch string problems, missing binaries
        return False, f"{type(exc).__name__}: {exc}"
    try:
        engine.ping()
        return True, ""
    except Exception as exc:
        return False, f"{type(exc).__name__}: {exc}"
    finally:
        engine.close()


def _run_cell(config: BenchConfig, spec: EngineSpec, batch: list[Path],
              mode: str, work_dir: Path) -> float:
    """One timed run: clean store and watch dir, run to idle, return wall seconds."""
    watch_dir = work_dir / "watch"
    store_dir = work_dir / "store"
    watch_dir.mkdir(parents=True)
    store_dir.mkdir(parents=True)
    for src in batch:
        shutil.copy2(src, watch_dir / src.name)
    lat = config.synthetic_latency_ms
    if spec.kind == "fixture":
        spec = EngineSpec(
            engine_id=spec.engine_id,
            kind="fixture",
            fixture_dir=spec.fixture_dir,
            timeout_ms=spec.timeout_ms,
            fixture_latency_ms=int(lat.get("ocr", 0)),
        )
    run = RunConfig(
        watch=WatchConfig(directory=watch_dir, poll_interval_ms=config.poll_interval_ms,
                          stability_polls=0),
        engine=spec,
        llm=LlmClientConfig(
            mode="mock",
            mock_dir=config.corpus_dir / "mock",
            min_request_interval_ms=0,
            mock_latency_ms=int(lat.get("llm", 0)),
        ),
        journal_path=store_dir / "journal.jsonl",
        records_path=store_dir / "records.jsonl",
        mode=mode,
        queue_capacity=config.queue_capacity,
        workers_ocr=config.workers_ocr,
        run_duration="until-idle",
        render_latency_ms=int(lat.get("report", 0)),
    )
    metrics = run_loop(run)
    wall_s = metrics.wall_clock_ms / 1000.0
    if spec.kind == "fixture":
        # Isolation invariant: every batch file must have produced a record.
        with RecordStore(run.journal_path, run.records_path) as store:
            n = len(store.load_records())
        if n != len(batch):
            raise RuntimeError(f"benchmark cell produced {n} records for {len(batch)} files")
    return wall_s


def run_benchmark(config: BenchConfig) -> BenchReport:
    images_dir = config.corpus_dir / "images"
    images = sorted(p for p in images_dir.iterdir() if p.is_file())
    if not images:
        raise ConfigError(f"no corpus images under {images_dir}")
    batches = split_batches(images, config.batch_limit)[: config.batches]
    engines = config.engines or (default_fixture_engine(config.corpus_dir),)
    cells: list[BenchCell] = []
    for spec in engines:
        ok, reason = _engine_available(spec)
        for b_idx, batch in enumerate(batches, start=1):
            for mode in config.mode_pairs:
                cell = BenchCell(
                    engine_id=spec.engine_id,
                    engine_kind=spec.kind,
                    batch_index=b_idx,
                    mode=mode,
                    files=len(batch),
                )
                if not ok:
                    cell.skipped = True
                    cell.reason = reason
                    logger.warning("skipping engine %d cell: %s", spec.engine_id, reason)
                    cells.append(cell)
                    continue
                walls = []
                for _ in range(config.repetitions):
                    with tempfile.TemporaryDirectory(prefix="lmrpa-bench-") as tmp:
                        walls.append(_run_cell(config, spec, batch, mode, Path(tmp)))
                cell.total_wall_s = sum(walls) / len(walls)
                cell.mean_per_file_s = cell.total_wall_s / len(batch)
                cells.append(cell)
    metadata = {
        "host": platform.node(),
        "platform": platform.platform(),
        "python": platform.python_version(),
        "generated_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "repetitions": config.repetitions,
        "synthetic_latency_ms": dict(config.synthetic_latency_ms),
    }
    return BenchReport(cells=cells, metadata=metadata, derived=reference_derived_metrics())


def default_fixture_engine(corpus_dir: Path, engine_id: int = 9) -> EngineSpec:
    return EngineSpec(engine_id=engine_id, kind="fixture", fixture_dir=Path(corpus_dir) / "ocr")


def format_table(report: BenchReport) -> str:
    """Render the comparison as text: rows = mode, columns = engine x batch."""
    col_keys = sorted({(c.engine_id, c.batch_index) for c in report.cells})
    headers = ["mode"] + [f"engine {e} / batch {b}" for e, b in col_keys]
    modes = []
    for c in report.cells:
        if c.mode not in modes:
            modes.append(c.mode)
    rows = []
    for mode in modes:
        row = [mode]
        for e, b in col_keys:
            cell = report.cell(e, b, mode)
            if cell.skipped or cell.total_wall_s is None:
                row.append("—")
            else:
                row.append(f"{cell.total_wall_s:.1f} sec")
        rows.append(row)
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    def line(cols):
        return "  ".join(col.ljust(w) for col, w in zip(cols, widths)).rstrip()
    out = [line(headers), line(["-" * w for w in widths])]
    out += [line(r) for r in rows]
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# synthetic corpus


_VENDORS = (
    "ACME Supplies",
    "Globex Corporation",
    "Initech LLC",
    "Umbrella Logistics",
    "Stark Industrial",
    "Wayne Enterprises",
    "Tyrell Paper Co",
    "Soylent Foods",
)
_ITEMS = (
    "Widget", "Gadget", "Bracket", "Flange", "Gasket", "Sprocket",
    "Cable tie", "Hinge", "Toner cartridge", "Label roll",
)
_CURRENCIES = ("USD", "EUR", "GBP")
_TAX_RATES = (Decimal("0.05"), Decimal("0.08"), Decimal("0.10"))


def _invoice_fields(i: int, rng) -> dict:
    n_items = rng.randint(1, 3)
    line_items = []
    subtotal = Decimal("0")
    for _ in range(n_items):
        qty = rng.randint(1, 5)
        unit = Decimal(rng.randint(100, 9999)) / 100
        amount = unit * qty
        subtotal += amount
        line_items.append(
            {"description": rng.choice(_ITEMS), "quantity": qty,
             "unit_price": unit, "amount": amount}
        )
    rate = rng.choice(_TAX_RATES)
    tax = (subtotal * rate).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return {
        "invoice_number": f"{i + 1:04d}",
        "date": f"2024-{rng.randint(1, 12):02d}-{rng.randint(1, 28):02d}",
        "vendor": rng.choice(_VENDORS),
        "currency": rng.choice(_CURRENCIES),
        "line_items": line_items,
        "subtotal": subtotal,
        "tax": tax,
        "total": subtotal + tax,
    }


def _invoice_text(fields: dict) -> str:
    lines = [
        f"Invoice No: {fields['invoice_number']}",
        f"Date: {fields['date']}",
        f"Vendor: {fields['vendor']}",
        f"Currency: {fields['currency']}",
    ]
    for li in fields["line_items"]:
        lines.append(
            f"{li['quantity']} x {li['description']} @ {format_money(li['unit_price'])}"
            f" = {format_money(li['amount'])}"
        )
    lines += [
        f"Subtotal: {format_money(fields['subtotal'])}",
        f"Tax: {format_money(fields['tax'])}",
        f"Total: {format_money(fields['total'])}",
    ]
    return "\n".join(lines) + "\n"


def _render_raster(text: str):
    from PIL import Image, ImageDraw

    lines = text.rstrip("\n").split("\n")
    width = 16 + 7 * max(len(line) for line in lines)
    height = 16 + 14 * len(lines)
    img = Image.new("L", (max(width, 200), height), color=255)
    draw = ImageDraw.Draw(img)
    y = 8
    for line in lines:
        draw.text((8, y), line, fill=0)
        y += 14
    return img


def expected_record(fields: dict, source_hash: str) -> dict:
    """Ground truth the structurer must reproduce for this invoice."""
    return {
        "invoice_number": fields["invoice_number"],
        "date": fields["date"],
        "vendor": fields["vendor"],
        "total": format_money(fields["total"]),
        "subtotal": format_money(fields["subtotal"]),
        "tax": format_money(fields["tax"]),
        "currency": fields["currency"],
        "line_items": [
            {
                "description": li["description"],
                "quantity": str(li["quantity"]),
                "unit_price": format_money(li["unit_price"]),
                "amount": format_money(li["amount"]),
            }
            for li in fields["line_items"]
        ],
        "source_hash": source_hash,
    }


def generate_corpus(n: int, out_dir: Path, seed: int) -> list[Path]:
    """Emit n synthetic invoice rasters plus ground truth, deterministic in seed.

    Layout under out_dir: images/ (png), ocr/<hash>.txt (canned OCR text),
    mock/ (canned LLM replies, empty by default), expected/<hash>.json
    (ground-truth records), manifest.json.
    """
    import hashlib
    import random

    if n < 1:
        raise ValueError("n must be >= 1")
    out_dir = Path(out_dir)
    rng = random.Random(seed)
    dirs = {name: out_dir / name for name in ("images", "ocr", "mock", "expected")}
    try:
        for d in dirs.values():
            d.mkdir(parents=True, exist_ok=True)
        manifest = []
        paths = []
        for i in range(n):
            fields = _invoice_fields(i, rng)
            text = _invoice_text(fields)
            img = _render_raster(text)
            img_path = dirs["images"] / f"inv-{i + 1:04d}.png"
            img.save(img_path, format="PNG")
            content_hash = hashlib.sha256(img_path.read_bytes()).hexdigest()
            (dirs["ocr"] / f"{content_hash}.txt").write_text(text, encoding="utf-8")
            expected = expected_record(fields, content_hash)
            (dirs["expected"] / f"{content_hash}.json").write_text(
                json.dumps(expected, indent=2) + "\n", encoding="utf-8"
            )
            manifest.append({"image": img_path.name, "content_hash": content_hash,
                             "ocr_digest": text_digest(text)})
            paths.append(img_path)
        (out_dir / "manifest.json").write_text(
            json.dumps({"n": n, "seed": seed, "files": manifest}, indent=2) + "\n",
            encoding="utf-8",
        )
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return paths
