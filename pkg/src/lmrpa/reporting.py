"""Map validated records to a tabular sheet and render templated reports.

Both transforms are pure: same records in, byte-identical CSV and document
out. CSV is RFC 4180 (CRLF, minimal quoting); the report template is plain
text with {{placeholder}} fields and one optional {{#rows}}...{{/rows}}
repeating section.
"""

import csv
import logging
import re
from dataclasses import dataclass
from decimal import Decimal
from importlib import resources
from pathlib import Path

from .errors import IoFailure
from .structurer import InvoiceRecord, format_money

logger = logging.getLogger("lmrpa.reporting")

SHEET_COLUMNS = (
    "invoice_number",
    "date",
    "vendor",
    "subtotal",
    "tax",
    "total",
    "currency",
    "source_hash",
)
LINE_ITEM_COLUMNS = ("invoice_number", "description", "quantity", "unit_price", "amount")
AGGREGATE_NAMES = ("count", "sum_total")


class UnknownPlaceholder(Exception):
    """Template names a column/aggregate that does not exist; never render blanks."""


@dataclass
class Sheet:
    columns: tuple[str, ...]
    rows: list[list[str]]

    def __post_init__(self):
        self.columns = tuple(self.columns)
        for row in self.rows:
            if len(row) != len(self.columns):
                raise ValueError("row length must equal column count")


@dataclass(frozen=True)
class ReportTemplate:
    body: str

    @classmethod
    def load(cls, path: Path) -> "ReportTemplate":
        return cls(body=Path(path).read_text(encoding="utf-8"))

    @classmethod
    def default(cls) -> "ReportTemplate":
        body = resources.files("lmrpa.data").joinpath("default_report_template.md").read_text("utf-8")
        return cls(body=body)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, Decimal):
        return format_money(value)
    return str(value)


def map_to_sheet(records: list[InvoiceRecord]) -> Sheet:
    rows = [
        [
            r.invoice_number,
            r.date,
            r.vendor,
            _cell(r.subtotal),
            _cell(r.tax),
            _cell(r.total),
            _cell(r.currency),
            r.source_hash,
        ]
        for r in records
    ]
    return Sheet(columns=SHEET_COLUMNS, rows=rows)


def map_line_items_to_sheet(records: list[InvoiceRecord]) -> Sheet:
    """Secondary sheet: one row per line item, in record then item order."""
    rows = []
    for r in records:
        for li in r.line_items or []:
            rows.append(
                [
                    r.invoice_number,
                    li.description,
                    str(li.quantity),
                    format_money(li.unit_price),
                    format_money(li.amount),
                ]
            )
    return Sheet(columns=LINE_ITEM_COLUMNS, rows=rows)


def compute_aggregates(sheet: Sheet) -> dict[str, str]:
    total = Decimal("0")
    if "total" in sheet.columns:
        idx = sheet.columns.index("total")
        for row in sheet.rows:
            if row[idx]:
                total += Decimal(row[idx])
    return {"count": str(len(sheet.rows)), "sum_total": format_money(total)}


_SECTION_RE = re.compile(r"\{\{#rows\}\}\n?(.*?)\{\{/rows\}\}\n?", re.DOTALL)
_PLACEHOLDER_RE = re.compile(r"\{\{([A-Za-z_][A-Za-z0-9_]*)\}\}")


def render_document(sheet: Sheet, template: ReportTemplate) -> str:
    """Expand the repeating section once per row, then fill aggregates.

    Inside {{#rows}} both column names and aggregates resolve; outside, only
    aggregates. Unknown names raise instead of rendering blanks.
    """
    aggregates = compute_aggregates(sheet)

    def fill(text: str, values: dict[str, str]) -> str:
        def sub(m: re.Match) -> str:
            name = m.group(1)
            if name not in values:
                raise UnknownPlaceholder(f"unknown placeholder {{{{{name}}}}}")
            return values[name]

        return _PLACEHOLDER_RE.sub(sub, text)

    def expand(m: re.Match) -> str:
        body = m.group(1)
        parts = []
        for row in sheet.rows:
            values = dict(zip(sheet.columns, row))
            values.update(aggregates)
            parts.append(fill(body, values))
        return "".join(parts)

    expanded = _SECTION_RE.sub(expand, template.body)
    return fill(expanded, aggregates)


def write_sheet(sheet: Sheet, path: Path) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
            writer.writerow(sheet.columns)
            writer.writerows(sheet.rows)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_sheet(path: Path) -> Sheet:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            rows = list(reader)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if not rows:
        raise ValueError(f"{path}: empty sheet file")
    return Sheet(columns=tuple(rows[0]), rows=[list(r) for r in rows[1:]])


def write_document(text: str, path: Path) -> None:
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
