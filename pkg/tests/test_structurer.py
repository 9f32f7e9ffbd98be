import json
import time
from decimal import Decimal
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmrpa.structurer import (
    InvoiceRecord,
    InvoiceSchema,
    LlmClientConfig,
    MockLlmClient,
    RateLimiter,
    SchemaViolations,
    StructuringFailure,
    UnparseableJson,
    build_prompt,
    extract_json,
    format_money,
    parse_money,
    rate_limit_acquire,
    rule_based_extract,
    split_batches,
    structure,
    text_digest,
    validate,
)

VALID_OBJ = {
    "invoice_number": "0001",
    "date": "2024-01-31",
    "vendor": "ACME",
    "subtotal": "10.00",
    "tax": "1.40",
    "total": "11.40",
    "currency": "USD",
}


def mock_config(tmp_path: Path, **kw) -> LlmClientConfig:
    mock_dir = tmp_path / "mock"
    mock_dir.mkdir(exist_ok=True)
    kw.setdefault("mode", "mock")
    kw.setdefault("mock_dir", mock_dir)
    return LlmClientConfig(**kw)


def put_canned(config: LlmClientConfig, text: str, response: str) -> None:
    (config.mock_dir / f"{text_digest(text)}.txt").write_text(response, encoding="utf-8")


# -- money parsing -----------------------------------------------------------


def test_parse_money_separator_styles():
    assert parse_money("1.234,56") == Decimal("1234.56")
    assert parse_money("1,234.56") == Decimal("1234.56")
    assert parse_money("42,00") == Decimal("42.00")
    assert parse_money("$42.00") == Decimal("42.00")
    assert parse_money("€ 1.234,5") == Decimal("1234.5")
    assert parse_money("-3,50") == Decimal("-3.50")
    assert parse_money(7) == Decimal("7")


def test_parse_money_rejects_garbage():
    for bad in ("", "abc", None, [], True):
        with pytest.raises(ValueError):
            parse_money(bad)


def test_format_money_half_up():
    assert format_money(Decimal("11.4")) == "11.40"
    assert format_money(Decimal("2.005")) == "2.01"
    assert format_money(Decimal("2.004")) == "2.00"


# -- prompt ------------------------------------------------------------------


def test_build_prompt_deterministic_and_mentions_fields(schema):
    p1 = build_prompt("Total: 5", schema)
    p2 = build_prompt("Total: 5", schema)
    assert p1 == p2
    for f in schema.fields:
        assert f.name in p1
    assert "Total: 5" in p1


def test_build_prompt_survives_fence_markers(schema):
    text = "```\nTotal: 5\n```"
    prompt = build_prompt(text, schema)
    assert text in prompt  # delimited verbatim, not interpolated


# -- extract_json ------------------------------------------------------------


def test_extract_json_identity():
    assert extract_json('{"a":1}') == {"a": 1}


def test_extract_json_fenced():
    assert extract_json('Here it is:\n```json\n{"a":1}\n```') == {"a": 1}


def test_extract_json_no_json():
    with pytest.raises(UnparseableJson):
        extract_json("no json here")


def test_extract_json_braces_inside_strings():
    raw = 'prose {"vendor":"ACME {braces} Inc","n":{"x":1}} trailing'
    assert extract_json(raw) == {"vendor": "ACME {braces} Inc", "n": {"x": 1}}


def test_extract_json_skips_unbalanced_prefix():
    assert extract_json('{oops {"a":2}') == {"a": 2}


def test_extract_json_inverse_of_serializer(schema):
    record = validate(VALID_OBJ, schema)
    payload = record.to_json_dict()
    assert extract_json(json.dumps(payload)) == json.loads(json.dumps(payload))


# -- validate ----------------------------------------------------------------


def test_validate_success(schema):
    record = validate(VALID_OBJ, schema)
    assert isinstance(record, InvoiceRecord)
    assert record.total == Decimal("11.40")
    assert record.currency == "USD"


def test_validate_missing_total(schema):
    obj = {k: v for k, v in VALID_OBJ.items() if k != "total"}
    out = validate(obj, schema)
    assert isinstance(out, SchemaViolations)
    assert "total: missing required field" in out.violations


def test_validate_arithmetic_mismatch_message(schema):
    obj = dict(VALID_OBJ, total="99.00")
    out = validate(obj, schema)
    assert isinstance(out, SchemaViolations)
    assert "total: arithmetic mismatch (expected 11.40)" in out.violations


def test_validate_lists_every_violation(schema):
    out = validate({"vendor": 7, "date": "not-a-date"}, schema)
    assert isinstance(out, SchemaViolations)
    joined = "\n".join(out.violations)
    assert "invoice_number: missing required field" in joined
    assert "total: missing required field" in joined
    assert "date: invalid ISO-8601 date" in joined
    assert "vendor: expected a string" in joined


def test_validate_arithmetic_within_one_cent_passes(schema):
    obj = dict(VALID_OBJ, total="11.41")
    assert isinstance(validate(obj, schema), InvoiceRecord)


def test_validate_currency_code_shape(schema):
    assert isinstance(validate(dict(VALID_OBJ, currency="usd"), schema), InvoiceRecord)
    out = validate(dict(VALID_OBJ, currency="US"), schema)
    assert isinstance(out, SchemaViolations)


def test_validate_total_fraction_digits(schema):
    obj = {k: v for k, v in VALID_OBJ.items() if k not in ("subtotal", "tax")}
    out = validate(dict(obj, total="11.401"), schema)
    assert isinstance(out, SchemaViolations)
    assert any("fraction digits" in v for v in out.violations)


def test_validate_line_items(schema):
    obj = dict(
        VALID_OBJ,
        line_items=[
            {"description": "Widget", "quantity": 2, "unit_price": "5.00", "amount": "10.00"}
        ],
    )
    record = validate(obj, schema)
    assert isinstance(record, InvoiceRecord)
    assert record.line_items[0].amount == Decimal("10.00")
    bad = validate(dict(VALID_OBJ, line_items=[{"description": 1}]), schema)
    assert isinstance(bad, SchemaViolations)


def test_validate_round_trip_idempotent(schema):
    record = validate(VALID_OBJ, schema)
    again = validate(record.to_json_dict(), schema)
    assert isinstance(again, InvoiceRecord)
    assert again.to_json_dict() == record.to_json_dict()


def test_record_json_round_trip(schema):
    record = validate(
        dict(VALID_OBJ, line_items=[
            {"description": "W", "quantity": "2", "unit_price": "5.00", "amount": "10.00"}
        ]),
        schema,
    )
    data = record.to_json_dict()
    back = InvoiceRecord.from_json_dict(json.loads(json.dumps(data)))
    assert back.to_json_dict() == data


# -- rate limiter ------------------------------------------------------------


def test_rate_limiter_first_call_no_wait():
    limiter = RateLimiter(5000)
    assert rate_limit_acquire(limiter, now=100.0) == 0.0


def test_rate_limiter_three_back_to_back():
    limiter = RateLimiter(5000)
    waits = [rate_limit_acquire(limiter, now=100.0) for _ in range(3)]
    assert waits[0] == 0.0
    assert sum(waits) >= 10.0  # (K-1)*d with K=3, d=5s


def test_rate_limiter_zero_interval():
    limiter = RateLimiter(0)
    assert [rate_limit_acquire(limiter, now=1.0) for _ in range(5)] == [0.0] * 5


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(min_value=0, max_value=10), min_size=1, max_size=20))
def test_rate_limiter_spacing_invariant(gaps):
    # simulated clock: consecutive start times never closer than the interval
    interval_ms = 70
    limiter = RateLimiter(interval_ms)
    now = 0.0
    starts = []
    for gap in gaps:
        now += gap
        wait = limiter.reserve(now)
        starts.append(now + wait)
    for a, b in zip(starts, starts[1:]):
        assert b - a >= interval_ms / 1000.0 - 1e-9


# -- split_batches -----------------------------------------------------------


def test_split_batches_examples():
    ids = list(range(3000))
    batches = split_batches(ids, 1500)
    assert [len(b) for b in batches] == [1500, 1500]
    assert split_batches([], 1500) == []
    assert [len(b) for b in split_batches(list(range(1501)), 1500)] == [1500, 1]
    with pytest.raises(ValueError):
        split_batches([1], 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(), max_size=200), st.integers(min_value=1, max_value=50))
def test_split_batches_partition_property(items, limit):
    batches = split_batches(items, limit)
    flat = [x for b in batches for x in b]
    assert flat == items
    assert all(len(b) == limit for b in batches[:-1])
    if batches:
        assert 1 <= len(batches[-1]) <= limit


# -- rule-based extraction ---------------------------------------------------


def test_rule_based_extract_pinned_example(schema):
    text = "Invoice No: 0001\nDate: 2024-01-31\nVendor: ACME\nTotal: $42.00"
    assert rule_based_extract(text, schema) == {
        "invoice_number": "0001",
        "date": "2024-01-31",
        "vendor": "ACME",
        "total": "42.00",
        "currency": "USD",
    }


def test_rule_based_extract_garbage_fails_validate(schema):
    out = rule_based_extract("garbage", schema)
    assert isinstance(validate(out, schema), SchemaViolations)


def test_rule_based_extract_comma_decimals(schema):
    out = rule_based_extract("Total: 42,00", schema)
    assert out["total"] == "42.00"


def test_rule_based_extract_line_items_and_subtotal(schema):
    text = (
        "Invoice No: 7\nDate: 2024-02-02\nVendor: V\n"
        "2 x Widget @ 12.50 = 25.00\nSubtotal: 25.00\nTax: 2.50\nTotal: 27.50\n"
        "Currency: EUR\n"
    )
    out = rule_based_extract(text, schema)
    assert out["subtotal"] == "25.00" and out["tax"] == "2.50" and out["total"] == "27.50"
    assert out["currency"] == "EUR"
    assert out["line_items"] == [
        {"description": "Widget", "quantity": "2", "unit_price": "12.50", "amount": "25.00"}
    ]
    record = validate(out, schema)
    assert isinstance(record, InvoiceRecord)


# -- structure() -------------------------------------------------------------


def test_structure_canned_valid_response(tmp_path, schema):
    config = mock_config(tmp_path)
    text = "Invoice No: 0001\nDate: 2024-01-31\nVendor: ACME\nTotal: 11.40"
    put_canned(config, text, json.dumps(VALID_OBJ))
    out = structure(text, config, schema, source_hash="h1", engine_id=9)
    assert isinstance(out, InvoiceRecord)
    assert out.source_hash == "h1" and out.engine_id == 9
    assert out.total == Decimal("11.40")


def test_structure_empty_input_short_circuits(tmp_path, schema):
    config = mock_config(tmp_path)

    class Spy:
        calls = 0

        def reserve(self, now):
            Spy.calls += 1
            return 0.0

        def acquire(self):
            Spy.calls += 1
            return 0.0

    out = structure("   \n ", config, schema, limiter=Spy())
    assert isinstance(out, StructuringFailure) and out.kind == "EmptyInput"
    assert Spy.calls == 0  # no rate-limit slot consumed


def test_structure_fenced_response(tmp_path, schema):
    config = mock_config(tmp_path)
    text = "some ocr text"
    put_canned(config, text, "```json\n" + json.dumps(VALID_OBJ) + "\n```")
    out = structure(text, config, schema)
    assert isinstance(out, InvoiceRecord)


def test_structure_unparseable_after_retries(tmp_path, schema):
    config = mock_config(tmp_path)
    text = "bad response case"
    put_canned(config, text, "the model rambles with no json")
    calls = []

    class Counting(MockLlmClient):
        def complete(self, prompt, *, cache_key="", source_text=""):
            calls.append(prompt)
            return super().complete(prompt, cache_key=cache_key, source_text=source_text)

    out = structure(text, config, schema, client=Counting(config, schema))
    assert isinstance(out, StructuringFailure)
    assert out.kind == "UnparseableJson"
    assert out.raw_response == "the model rambles with no json"
    assert len(calls) == 1 + config.max_retries
    assert "rejected" in calls[1]  # re-prompt carries the repair instruction


def test_structure_schema_violations_detail_lists_all(tmp_path, schema):
    config = mock_config(tmp_path)
    text = "violating response"
    put_canned(config, text, json.dumps({"vendor": "V"}))
    out = structure(text, config, schema)
    assert isinstance(out, StructuringFailure) and out.kind == "SchemaViolations"
    assert "invoice_number: missing required field" in out.detail
    assert "total: missing required field" in out.detail


def test_structure_repair_retry_recovers(tmp_path, schema):
    config = mock_config(tmp_path)

    class FlakyClient:
        def __init__(self):
            self.n = 0

        def complete(self, prompt, *, cache_key="", source_text=""):
            self.n += 1
            if self.n == 1:
                return json.dumps({"vendor": "V"})  # violates schema
            return json.dumps(VALID_OBJ)

    out = structure("txt", config, schema, client=FlakyClient())
    assert isinstance(out, InvoiceRecord)


def test_structure_transport_error(tmp_path, schema):
    from lmrpa.structurer import LlmTransportError

    config = mock_config(tmp_path)

    class Down:
        def complete(self, prompt, *, cache_key="", source_text=""):
            raise LlmTransportError("connection refused")

    out = structure("txt", config, schema, client=Down())
    assert isinstance(out, StructuringFailure) and out.kind == "LlmTransport"
    assert "connection refused" in out.detail


def test_structure_mock_fallback_uses_rule_extractor(tmp_path, schema):
    config = mock_config(tmp_path)  # no canned file present
    text = "Invoice No: 0002\nDate: 2024-03-01\nVendor: V\nTotal: 5.00"
    out = structure(text, config, schema)
    assert isinstance(out, InvoiceRecord)
    assert out.invoice_number == "0002" and out.total == Decimal("5.00")


def test_structure_mock_mode_is_deterministic(tmp_path, schema):
    config = mock_config(tmp_path)
    text = "Invoice No: 3\nDate: 2024-01-01\nVendor: V\nTotal: 1.00"
    a = structure(text, config, schema, source_hash="s", engine_id=9)
    b = structure(text, config, schema, source_hash="s", engine_id=9)
    assert a.to_json_dict() == b.to_json_dict()
    assert a.structured_at == b.structured_at  # frozen clock in mock mode


def test_mock_latency_is_observed(tmp_path, schema):
    config = mock_config(tmp_path, mock_latency_ms=60)
    client = MockLlmClient(config, schema)
    t0 = time.monotonic()
    client.complete("p", cache_key="k", source_text="Total: 1.00")
    assert time.monotonic() - t0 >= 0.06


def test_llm_client_config_validation(tmp_path):
    with pytest.raises(ValueError):
        LlmClientConfig(mode="http")  # endpoint required
    with pytest.raises(ValueError):
        LlmClientConfig(mode="mock")  # mock_dir required
    with pytest.raises(ValueError):
        LlmClientConfig(mode="nope", mock_dir=tmp_path)
