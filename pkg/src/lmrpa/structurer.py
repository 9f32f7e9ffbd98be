"""Turn raw OCR text into schema-validated invoice records.

The happy path is prompt -> LLM client -> JSON extraction -> validation, with
one repair retry that feeds the violation list back into the prompt. The mock
client makes the whole path deterministic and offline: it replays canned
responses keyed by the digest of the input text and falls back to a rule-based
extractor when no canned file exists.
"""

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timezone
from decimal import Decimal, InvalidOperation, ROUND_HALF_UP
from importlib import resources
from pathlib import Path
from typing import Callable

import requests

logger = logging.getLogger("lmrpa.structurer")

CANONICAL_FIELDS = (
    "invoice_number",
    "date",
    "vendor",
    "total",
    "subtotal",
    "tax",
    "currency",
    "line_items",
)
MONEY_FIELDS = {"total", "subtotal", "tax"}
ARITHMETIC_TOLERANCE = Decimal("0.01")

# Timestamp used instead of the wall clock when the client runs in mock mode,
# so repeated runs produce byte-identical records.
DETERMINISTIC_TS = "1970-01-01T00:00:00+00:00"

_CURRENCY_SIGNS = {"$": "USD", "€": "EUR", "£": "GBP"}


class UnparseableJson(Exception):
    """No balanced JSON object could be parsed out of the response."""


class LlmTransportError(Exception):
    """HTTP-level failure talking to the model endpoint."""


@dataclass(frozen=True)
class FieldSpec:
    name: str
    type: str  # string | date | decimal | currency | line_items
    required: bool
    fraction_digits: int | None = None


@dataclass(frozen=True)
class InvoiceSchema:
    fields: tuple[FieldSpec, ...]

    def __post_init__(self):
        names = [f.name for f in self.fields]
        if len(names) != len(set(names)):
            raise ValueError("schema field names must be unique")

    @property
    def required(self) -> tuple[FieldSpec, ...]:
        return tuple(f for f in self.fields if f.required)

    @classmethod
    def from_dict(cls, data: dict) -> "InvoiceSchema":
        fields = tuple(
            FieldSpec(
                name=f["name"],
                type=f["type"],
                required=bool(f["required"]),
                fraction_digits=f.get("fraction_digits"),
            )
            for f in data["fields"]
        )
        return cls(fields=fields)

    @classmethod
    def load(cls, path: Path) -> "InvoiceSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def default(cls) -> "InvoiceSchema":
        text = resources.files("lmrpa.data").joinpath("invoice_schema.json").read_text("utf-8")
        return cls.from_dict(json.loads(text))


@dataclass
class LineItem:
    description: str
    quantity: Decimal
    unit_price: Decimal
    amount: Decimal


@dataclass
class InvoiceRecord:
    invoice_number: str = ""
    date: str = ""
    vendor: str = ""
    total: Decimal | None = None
    subtotal: Decimal | None = None
    tax: Decimal | None = None
    currency: str | None = None
    line_items: list[LineItem] | None = None
    extras: dict = field(default_factory=dict)
    source_hash: str = ""
    engine_id: int = 0
    structured_at: str = ""

    def to_json_dict(self) -> dict:
        out: dict = {
            "invoice_number": self.invoice_number,
            "date": self.date,
            "vendor": self.vendor,
            "total": format_money(self.total) if self.total is not None else None,
            "subtotal": format_money(self.subtotal) if self.subtotal is not None else None,
            "tax": format_money(self.tax) if self.tax is not None else None,
            "currency": self.currency,
            "line_items": None
            if self.line_items is None
            else [
                {
                    "description": li.description,
                    "quantity": str(li.quantity),
                    "unit_price": format_money(li.unit_price),
                    "amount": format_money(li.amount),
                }
                for li in self.line_items
            ],
        }
        out.update(self.extras)
        out["source_hash"] = self.source_hash
        out["engine_id"] = self.engine_id
        out["structured_at"] = self.structured_at
        return out

    @classmethod
    def from_json_dict(cls, data: dict) -> "InvoiceRecord":
        data = dict(data)
        kwargs: dict = {
            "source_hash": data.pop("source_hash", ""),
            "engine_id": data.pop("engine_id", 0),
            "structured_at": data.pop("structured_at", ""),
        }
        for name in ("invoice_number", "date", "vendor"):
            kwargs[name] = data.pop(name, "")
        for name in ("total", "subtotal", "tax"):
            raw = data.pop(name, None)
            kwargs[name] = None if raw is None else Decimal(str(raw))
        kwargs["currency"] = data.pop("currency", None)
        items = data.pop("line_items", None)
        kwargs["line_items"] = None if items is None else [
            LineItem(
                description=i["description"],
                quantity=Decimal(str(i["quantity"])),
                unit_price=Decimal(str(i["unit_price"])),
                amount=Decimal(str(i["amount"])),
            )
            for i in items
        ]
        kwargs["extras"] = data
        return cls(**kwargs)


@dataclass
class SchemaViolations:
    """Validation outcome carrying every violated field, not just the first."""

    violations: list[str]


@dataclass
class StructuringFailure:
    kind: str  # EmptyInput | UnparseableJson | SchemaViolations | LlmTransport
    detail: str
    raw_response: str = ""


@dataclass(frozen=True)
class LlmClientConfig:
    mode: str = "mock"
    endpoint_url: str | None = None
    api_key_env: str = "LMRPA_API_KEY"
    min_request_interval_ms: int = 0
    max_retries: int = 1
    mock_dir: Path | None = None
    mock_latency_ms: int = 0

    def __post_init__(self):
        if self.mode not in ("http", "mock"):
            raise ValueError(f"unknown llm mode {self.mode!r}")
        if self.mode == "http" and not self.endpoint_url:
            raise ValueError("http mode requires endpoint_url")
        if self.mode == "mock" and self.mock_dir is None:
            raise ValueError("mock mode requires mock_dir")
        if self.min_request_interval_ms < 0:
            raise ValueError("min_request_interval_ms must be >= 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.mock_dir is not None:
            object.__setattr__(self, "mock_dir", Path(self.mock_dir))


def format_money(value: Decimal) -> str:
    """Render a decimal with exactly 2 fraction digits, rounding half-up."""
    return str(value.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def parse_money(value) -> Decimal:
    """Parse a monetary amount exactly, without binary floating point.

    Strings may carry currency symbols and either "1,234.56" or "1.234,56"
    grouping; the last separator is treated as the decimal point.
    """
    if isinstance(value, bool):
        raise ValueError("boolean is not a monetary value")
    if isinstance(value, Decimal):
        return value
    if isinstance(value, int):
        return Decimal(value)
    if isinstance(value, float):
        return Decimal(repr(value))
    if not isinstance(value, str):
        raise ValueError(f"cannot parse {type(value).__name__} as money")
    s = re.sub(r"[^\d.,\-]", "", value.strip())
    if not s or s == "-":
        raise ValueError(f"cannot parse {value!r} as money")
    last_dot, last_comma = s.rfind("."), s.rfind(",")
    sep_pos = max(last_dot, last_comma)
    if sep_pos != -1:
        digits_only = s[:sep_pos].replace(".", "").replace(",", "")
        s = digits_only + "." + s[sep_pos + 1 :].replace(".", "").replace(",", "")
    try:
        return Decimal(s)
    except InvalidOperation as exc:
        raise ValueError(f"cannot parse {value!r} as money") from exc


def build_prompt(text: str, schema: InvoiceSchema) -> str:
    """Deterministic prompt: schema description plus the OCR text, delimited."""
    lines = [
        "You extract structured invoice data from raw OCR text.",
        "Return exactly one JSON object and nothing else: no prose, no code fences.",
        "Fields:",
    ]
    for f in schema.fields:
        req = "required" if f.required else "optional"
        lines.append(f"  - {f.name} ({f.type}, {req})")
    lines += [
        "Use null for optional fields that are not present in the text.",
        "Dates must be ISO-8601 (YYYY-MM-DD). Monetary values are plain decimals.",
        "-----BEGIN OCR TEXT-----",
        text,
        "-----END OCR TEXT-----",
    ]
    return "\n".join(lines)


def extract_json(response: str) -> dict:
    """Parse the first balanced top-level JSON object out of a model reply.

    Code fences and surrounding prose need no special handling: scanning
    starts at each '{' and tracks string/escape state, so only a brace-balanced
    span that actually parses is accepted.
    """
    i = response.find("{")
    while i != -1:
        depth = 0
        in_str = False
        esc = False
        for j in range(i, len(response)):
            c = response[j]
            if in_str:
                if esc:
                    esc = False
                elif c == "\\":
                    esc = True
                elif c == '"':
                    in_str = False
                continue
            if c == '"':
                in_str = True
            elif c == "{":
                depth += 1
            elif c == "}":
                depth -= 1
                if depth == 0:
                    try:
                        parsed = json.loads(response[i : j + 1])
                    except json.JSONDecodeError:
                        break
                    if isinstance(parsed, dict):
                        return parsed
                    break
        i = response.find("{", i + 1)
    raise UnparseableJson("no balanced JSON object found in response")


def _check_money(name: str, raw, fraction_digits, violations: list[str]) -> Decimal | None:
    try:
        value = parse_money(raw)
    except ValueError:
        violations.append(f"{name}: invalid decimal value {raw!r}")
        return None
    if fraction_digits is not None:
        exponent = value.normalize().as_tuple().exponent
        if isinstance(exponent, int) and -exponent > fraction_digits:
            violations.append(f"{name}: more than {fraction_digits} fraction digits")
            return None
    return value


def validate(value, schema: InvoiceSchema):
    """Validate a parsed JSON value against the schema.

    Returns an InvoiceRecord on success, otherwise SchemaViolations listing
    every problem (missing fields, bad types, arithmetic mismatch).
    """
    if not isinstance(value, dict):
        return SchemaViolations(["root: expected a JSON object"])
    violations: list[str] = []
    parsed: dict = {}
    for f in schema.fields:
        raw = value.get(f.name)
        if raw is None:
            if f.required:
                violations.append(f"{f.name}: missing required field")
            else:
                parsed[f.name] = None
            continue
        if f.type == "string":
            if isinstance(raw, str):
                parsed[f.name] = raw
            else:
                violations.append(f"{f.name}: expected a string, got {type(raw).__name__}")
        elif f.type == "date":
            if isinstance(raw, str):
                try:
                    date.fromisoformat(raw)
                    parsed[f.name] = raw
                except ValueError:
                    violations.append(f"{f.name}: invalid ISO-8601 date {raw!r}")
            else:
                violations.append(f"{f.name}: expected an ISO-8601 date string")
        elif f.type == "decimal":
            money = _check_money(f.name, raw, f.fraction_digits, violations)
            if money is not None:
                parsed[f.name] = money
        elif f.type == "currency":
            if isinstance(raw, str) and re.fullmatch(r"[A-Za-z]{3}", raw):
                parsed[f.name] = raw.upper()
            else:
                violations.append(f"{f.name}: expected a 3-letter currency code, got {raw!r}")
        elif f.type == "line_items":
            parsed[f.name] = _validate_line_items(f.name, raw, violations)
        else:
            violations.append(f"{f.name}: unknown schema type {f.type!r}")
    subtotal, tax, total = parsed.get("subtotal"), parsed.get("tax"), parsed.get("total")
    if subtotal is not None and tax is not None and total is not None:
        expected = subtotal + tax
        if abs(expected - total) > ARITHMETIC_TOLERANCE:
            violations.append(f"total: arithmetic mismatch (expected {format_money(expected)})")
    if violations:
        return SchemaViolations(violations)
    extras = {k: v for k, v in parsed.items() if k not in CANONICAL_FIELDS}
    kwargs = {k: parsed[k] for k in CANONICAL_FIELDS if k in parsed}
    return InvoiceRecord(**kwargs, extras=extras)


def _validate_line_items(name: str, raw, violations: list[str]) -> list[LineItem] | None:
    if not isinstance(raw, list):
        violations.append(f"{name}: expected a list")
        return None
    items: list[LineItem] = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict):
            violations.append(f"{name}[{i}]: expected an object")
            continue
        desc = item.get("description")
        if not isinstance(desc, str):
            violations.append(f"{name}[{i}].description: expected a string")
            desc = ""
        numbers = {}
        for key in ("quantity", "unit_price", "amount"):
            if item.get(key) is None:
                violations.append(f"{name}[{i}].{key}: missing required field")
                continue
            numbers[key] = _check_money(f"{name}[{i}].{key}", item[key], None, violations)
        if len(numbers) == 3 and all(v is not None for v in numbers.values()):
            items.append(LineItem(description=desc, **numbers))
    return items


class RateLimiter:
    """Spaces request starts at least min_request_interval_ms apart.

    Shared across workers; reserve() is the pure state step (returns the wait
    a caller must observe), acquire() reserves and sleeps.
    """

    def __init__(self, min_interval_ms: int):
        self._interval = min_interval_ms / 1000.0
        self._next_start: float | None = None
        self._lock = threading.Lock()

    def reserve(self, now: float) -> float:
        with self._lock:
            wait = 0.0 if self._next_start is None else max(0.0, self._next_start - now)
            self._next_start = now + wait + self._interval
            return wait

    def acquire(self) -> float:
        wait = self.reserve(time.monotonic())
        if wait > 0:
            time.sleep(wait)
        return wait


def rate_limit_acquire(limiter: RateLimiter, now: float) -> float:
    """Reserve a request slot; returns the wait (seconds) before it may start."""
    return limiter.reserve(now)


def split_batches(items: list, limit: int) -> list[list]:
    """Order-preserving partition into chunks of `limit` (last may be short)."""
    if limit < 1:
        raise ValueError("limit must be >= 1")
    return [items[i : i + limit] for i in range(0, len(items), limit)]


_LINE_ITEM_RE = re.compile(r"^\s*(\d+)\s*x\s+(.+?)\s+@\s+(\S+)\s*=\s*(\S+)\s*$")


def rule_based_extract(text: str, schema: InvoiceSchema) -> dict:
    """Deterministic pattern-driven extraction over labeled invoice lines.

    This is the mock client's fallback and the offline oracle; its output may
    legitimately fail validation (e.g. for garbage input).
    """
    out: dict = {}
    items: list[dict] = []
    currency: str | None = None
    for line in text.splitlines():
        stripped = line.strip()
        lowered = stripped.lower()
        rest = stripped.split(":", 1)[1].strip() if ":" in stripped else ""
        if lowered.startswith(("invoice no", "invoice number", "invoice #")) and rest:
            out.setdefault("invoice_number", rest.split()[0])
        elif lowered.startswith("date") and rest:
            m = re.search(r"\d{4}-\d{2}-\d{2}", rest)
            if m:
                out.setdefault("date", m.group(0))
        elif lowered.startswith("vendor") and rest:
            out.setdefault("vendor", rest)
        elif lowered.startswith("currency") and rest:
            m = re.fullmatch(r"[A-Za-z]{3}", rest)
            if m:
                currency = rest.upper()
        elif lowered.startswith(("subtotal", "sub-total", "sub total")) and rest:
            _put_money(out, "subtotal", rest)
        elif lowered.startswith("tax") and rest:
            _put_money(out, "tax", rest)
        elif lowered.startswith("total") and rest:
            _put_money(out, "total", rest)
            for sign, code in _CURRENCY_SIGNS.items():
                if sign in rest:
                    currency = currency or code
        else:
            m = _LINE_ITEM_RE.match(stripped)
            if m:
                try:
                    items.append(
                        {
                            "description": m.group(2),
                            "quantity": m.group(1),
                            "unit_price": str(parse_money(m.group(3))),
                            "amount": str(parse_money(m.group(4))),
                        }
                    )
                except ValueError:
                    pass
    if currency:
        out["currency"] = currency
    if items:
        out["line_items"] = items
    return out


def _put_money(out: dict, key: str, raw: str) -> None:
    if key in out:
        return
    try:
        out[key] = str(parse_money(raw))
    except ValueError:
        pass


def text_digest(text: str) -> str:
    """Key used for canned mock responses: sha256 of the trimmed input text."""
    import hashlib

    return hashlib.sha256(text.strip().encode("utf-8")).hexdigest()


class MockLlmClient:
    """Replays canned responses from mock_dir, else rule-based extraction.

    Canned files are named <sha256(trimmed input text)>.txt and contain raw
    model output (prose, fences and all). Retries therefore see the same
    response every time, which keeps failure corpora deterministic.
    """

    def __init__(self, config: LlmClientConfig, schema: InvoiceSchema):
        self.mock_dir = Path(config.mock_dir)
        self.latency = config.mock_latency_ms / 1000.0
        self.schema = schema

    def complete(self, prompt: str, *, cache_key: str = "", source_text: str = "") -> str:
        if self.latency:
            time.sleep(self.latency)
        canned = self.mock_dir / f"{cache_key}.txt"
        if canned.is_file():
            return canned.read_text(encoding="utf-8")
        return json.dumps(rule_based_extract(source_text, self.schema))


class HttpLlmClient:
    """Generic JSON-over-HTTP completion client.

    POST endpoint_url with {"prompt": ...}; expects {"text": ...} back.
    """

    def __init__(self, config: LlmClientConfig):
        self.config = config

    def complete(self, prompt: str, *, cache_key: str = "", source_text: str = "") -> str:
        headers = {}
        key = os.environ.get(self.config.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            resp = requests.post(
                self.config.endpoint_url,
                json={"prompt": prompt},
                headers=headers,
                timeout=60,
            )
        except requests.RequestException as exc:
            raise LlmTransportError(str(exc)) from exc
        if not 200 <= resp.status_code < 300:
            raise LlmTransportError(f"HTTP {resp.status_code}")
        try:
            body = resp.json()
        except ValueError as exc:
            raise LlmTransportError("response body is not JSON") from exc
        if not isinstance(body, dict) or not isinstance(body.get("text"), str):
            raise LlmTransportError('response body missing "text"')
        return body["text"]


def make_client(config: LlmClientConfig, schema: InvoiceSchema):
    if config.mode == "mock":
        return MockLlmClient(config, schema)
    return HttpLlmClient(config)


def now_wall_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


def structure(
    text: str,
    config: LlmClientConfig,
    schema: InvoiceSchema,
    *,
    limiter: RateLimiter | None = None,
    client=None,
    source_hash: str = "",
    engine_id: int = 0,
    now_iso: Callable[[], str] | None = None,
):
    """Run the full structuring path for one OCR text.

    Returns an InvoiceRecord or a StructuringFailure. Empty input
    short-circuits without consuming a rate-limit slot; JSON/schema failures
    get max_retries repair attempts with the problem appended to the prompt.
    """
    trimmed = text.strip()
    if not trimmed:
        return StructuringFailure(kind="EmptyInput", detail="empty OCR text")
    if limiter is None:
        limiter = RateLimiter(config.min_request_interval_ms)
    if client is None:
        client = make_client(config, schema)
    if now_iso is None:
        now_iso = _default_clock(config)
    cache_key = text_digest(trimmed)
    prompt = build_prompt(text, schema)
    attempts = 1 + config.max_retries
    last_kind, last_detail, last_raw = "LlmTransport", "no attempt made", ""
    for _ in range(attempts):
        limiter.acquire()
        try:
            raw = client.complete(prompt, cache_key=cache_key, source_text=text)
        except LlmTransportError as exc:
            last_kind, last_detail, last_raw = "LlmTransport", str(exc), ""
            continue
        try:
            value = extract_json(raw)
        except UnparseableJson as exc:
            last_kind, last_detail, last_raw = "UnparseableJson", str(exc), raw
            prompt = _repair_prompt(prompt, "your reply did not contain a valid JSON object")
            continue
        outcome = validate(value, schema)
        if isinstance(outcome, SchemaViolations):
            detail = "; ".join(outcome.violations)
            last_kind, last_detail, last_raw = "SchemaViolations", detail, raw
            prompt = _repair_prompt(prompt, f"your reply violated the schema: {detail}")
            continue
        return replace(
            outcome,
            source_hash=source_hash,
            engine_id=engine_id,
            structured_at=now_iso(),
        )
    return StructuringFailure(kind=last_kind, detail=last_detail, raw_response=last_raw)


def _repair_prompt(prompt: str, problem: str) -> str:
    return prompt + f"\n\nYour previous reply was rejected: {problem}. " \
        "Reply again with only the corrected JSON object."


def _default_clock(config: LlmClientConfig) -> Callable[[], str]:
    if config.mode == "mock":
        return lambda: DETERMINISTIC_TS
    return now_wall_iso
