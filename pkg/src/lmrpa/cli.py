"""Command line entry points.

Exit codes: 0 clean, 1 fatal store/IO problem, 2 bad configuration or usage.
Per-file OCR/LLM failures are normal operation (they land in the journal as
failed/quarantined) and do not change the exit code.
"""

import argparse
import hashlib
import json
import logging
import signal
import sys
import time
from pathlib import Path

from . import bench as bench_mod
from . import pipeline
from .engines import EngineSpec
from .errors import ConfigError, IoFailure
from .persistence import RecordStore, StoreCorrupt, retry_failed
from .watcher import FileEvent

logger = logging.getLogger("lmrpa.cli")


def _load_json(path: Path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc


def _run_config(path_str: str) -> pipeline.RunConfig:
    path = Path(path_str)
    return pipeline.config_from_dict(_load_json(path), base_dir=path.parent)


def _cmd_run(args) -> int:
    config = _run_config(args.config)
    if args.retry_failed:
        cleared = retry_failed(config.journal_path)
        print(f"cleared {cleared} failed entries", file=sys.stderr)
    handle = pipeline.start_run(config)

    def _stop(signum, frame):
        logger.info("signal %d: draining", signum)
        handle.request_stop()

    signal.signal(signal.SIGINT, _stop)
    signal.signal(signal.SIGTERM, _stop)
    pipeline.wait_run(handle)
    metrics = pipeline.shutdown(handle)
    json.dump(metrics.to_json_dict(), sys.stdout, indent=2)
    print()
    return 0


def _cmd_process_one(args) -> int:
    config = _run_config(args.config)
    image = Path(args.image)
    try:
        data = image.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read image {image}: {exc}") from exc
    event = FileEvent(
        path=image,
        size_bytes=len(data),
        detected_at=time.time(),
        content_hash=hashlib.sha256(data).hexdigest(),
    )
    with RecordStore(config.journal_path, config.records_path) as store:
        if store.already_processed(event.content_hash):
            entry = store.get(event.content_hash)
            print(f"already processed ({entry.status})", file=sys.stderr)
        else:
            entry = pipeline.process_file(event, config, store)
        if entry.status == "reported" or entry.status == "structured":
            for record in store.load_records():
                if record.source_hash == event.content_hash:
                    json.dump(record.to_json_dict(), sys.stdout, indent=2)
                    print()
                    return 0
        json.dump(
            {"status": entry.status, "error": entry.error, "record_id": entry.record_id},
            sys.stdout,
            indent=2,
        )
        print()
        return 0


def _cmd_report(args) -> int:
    config = _run_config(args.config)
    count, report_path = pipeline.render_outputs(config)
    print(f"rendered {count} records to {config.sheet_path} and {report_path}")
    return 0


def _bench_config(path_str: str) -> bench_mod.BenchConfig:
    path = Path(path_str)
    data = _load_json(path)
    base = path.parent

    def rpath(v):
        p = Path(v)
        return p if p.is_absolute() else base / p

    try:
        engines = []
        for e in data.get("engines", []):
            e = dict(e)
            if e.get("fixture_dir") is not None:
                e["fixture_dir"] = rpath(e["fixture_dir"])
            engines.append(EngineSpec(**e))
        return bench_mod.BenchConfig(
            corpus_dir=rpath(data["corpus_dir"]),
            engines=tuple(engines),
            batch_limit=data.get("batch_limit", 1500),
            batches=data.get("batches", 1),
            mode_pairs=tuple(data.get("mode_pairs", bench_mod.MODES)),
            synthetic_latency_ms=data.get(
                "synthetic_latency_ms", {"ocr": 0, "llm": 0, "report": 0}
            ),
            repetitions=data.get("repetitions", 1),
            poll_interval_ms=data.get("poll_interval_ms", 50),
            queue_capacity=data.get("queue_capacity", 8),
            workers_ocr=data.get("workers_ocr", 1),
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad bench config: {exc}") from exc


def _cmd_bench(args) -> int:
    config = _bench_config(args.config)
    report = bench_mod.run_benchmark(config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = bench_mod.format_table(report)
    try:
        (out_dir / "bench_report.json").write_text(
            json.dumps(report.to_json_dict(), indent=2) + "\n", encoding="utf-8"
        )
        (out_dir / "bench_table.txt").write_text(table, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    sys.stdout.write(table)
    return 0


def _cmd_gen_corpus(args) -> int:
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    paths = bench_mod.generate_corpus(args.n, Path(args.out), args.seed)
    print(f"wrote {len(paths)} images under {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lmrpa",
        description="Watch a directory, OCR invoice images, structure them "
        "with an LLM, and render sheet + report outputs.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the processing loop")
    p.add_argument("--config", required=True, help="path to JSON run config")
    p.add_argument("--retry-failed", action="store_true",
                   help="clear failed journal entries so those files reprocess")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("process-one", help="process a single image and print its record")
    p.add_argument("image", help="path to the image file")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=_cmd_process_one)

    p = sub.add_parser("report", help="re-render sheet and report from the store")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=_cmd_report)

    p = sub.add_parser("bench", help="run timed batch comparisons")
    p.add_argument("--config", required=True, help="path to JSON bench config")
    p.add_argument("--out-dir", default=".", help="where to write bench_report.json")
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("gen-corpus", help="generate a synthetic invoice corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen_corpus)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (StoreCorrupt, IoFailure) as exc:
        print(f"fatal: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
