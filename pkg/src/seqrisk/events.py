"""Behavior taxonomy and ingestion of raw event/profile data.

Raw mobile-banking operation codes (hundreds of them) are merged into a small
closed set of behavior kinds before any modeling: product-item clicks grouped
by product class, amount-bearing transform operations grouped by operation
class, and a single bucket for business-neutral widget clicks. The merge is
driven by a taxonomy file so alternative granularities are just data.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from enum import Enum

import numpy as np

log = logging.getLogger(__name__)

PROFILE_TRAILER = ["applied_item_id", "loan_ts", "label"]


class Category(str, Enum):
    ITEM_CLICK = "item_click"
    TRANSFORM_OP = "transform_op"
    FUNCTION_WIDGET = "function_widget"


@dataclass(frozen=True, slots=True)
class BehaviorKind:
    """A merged behavior: a product-class item click, an amount-bearing
    operation class, or the shared function-widget bucket."""

    category: Category
    cls: str = ""

    @property
    def key(self):
        return f"{self.category.value}:{self.cls}" if self.cls else self.category.value


WIDGET = BehaviorKind(Category.FUNCTION_WIDGET)


@dataclass(slots=True)
class BehaviorEvent:
    user_id: str
    ts: int
    kind: BehaviorKind
    item_id: str | None = None
    amount: float | None = None
    week_day: int = 0
    month_day: int = 0


@dataclass(slots=True)
class ProfileRecord:
    user_id: str
    features: np.ndarray
    applied_item_id: str
    loan_ts: int
    label: int | None


class TaxonomyError(ValueError):
    pass


class IngestError(ValueError):
    pass


def derive_time_period(ts, tz_offset_minutes=0):
    """Calendar tags for a unix timestamp: (week_day 1..7 Monday=1, month_day 1..31)."""
    if ts < 0:
        raise ValueError(f"negative timestamp {ts}")
    tz = timezone(timedelta(minutes=tz_offset_minutes))
    dt = datetime.fromtimestamp(ts, tz=tz)
    return dt.isoweekday(), dt.day


@dataclass
class TaxonomyConfig:
    """Total mapping from raw operation codes to merged kinds.

    With ``merge_enabled`` off every raw code becomes its own kind (keeping
    its category, which still governs the amount/item invariants). Resolving
    an already-merged kind key returns that kind unchanged, so applying the
    taxonomy twice is a no-op.
    """

    mapping: dict[str, BehaviorKind]
    merge_enabled: bool = True
    _effective: dict[str, BehaviorKind] = field(init=False, repr=False)
    _by_key: dict[str, BehaviorKind] = field(init=False, repr=False)

    def __post_init__(self):
        if self.merge_enabled:
            self._effective = dict(self.mapping)
        else:
            self._effective = {
                code: BehaviorKind(kind.category, code) for code, kind in self.mapping.items()
            }
        self._by_key = {k.key: k for k in self._effective.values()}

    def resolve(self, code):
        kind = self._effective.get(code)
        if kind is not None:
            return kind
        return self._by_key.get(code)

    def kinds(self):
        """Distinct merged kinds, sorted by key."""
        return sorted(set(self._effective.values()), key=lambda k: k.key)

    @classmethod
    def from_csv(cls, source, merge_enabled=True):
        """Load rows ``raw_code,kind,product_class_or_op_class``."""
        mapping = {}
        with _open_text(source) as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header[:3]] != [
                "raw_code",
                "kind",
                "product_class_or_op_class",
            ]:
                raise TaxonomyError(f"bad taxonomy header: {header}")
            for i, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) < 3:
                    raise TaxonomyError(f"row {i}: expected 3 columns")
                code, cat, klass = row[0].strip(), row[1].strip(), row[2].strip()
                try:
                    category = Category(cat)
                except ValueError:
                    raise TaxonomyError(f"row {i}: unknown kind {cat!r}") from None
                if category is Category.FUNCTION_WIDGET:
                    kind = WIDGET
                elif not klass:
                    raise TaxonomyError(f"row {i}: missing class for {cat}")
                else:
                    kind = BehaviorKind(category, klass)
                if code in mapping:
                    raise TaxonomyError(f"row {i}: duplicate raw code {code!r}")
                mapping[code] = kind
        return cls(mapping, merge_enabled=merge_enabled)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["raw_code", "kind", "product_class_or_op_class"])
            for code in sorted(self.mapping):
                kind = self.mapping[code]
                writer.writerow([code, kind.category.value, kind.cls])


def make_merge_taxonomy(n_raw_codes, n_op_classes):
    """Deterministic many-to-few taxonomy for merge-granularity experiments.

    Every third raw code is a widget code (all collapsing into the single
    widget kind); the rest are amount operations spread round-robin over
    ``n_op_classes`` classes, so the merged inventory has n_op_classes + 1
    kinds.
    """
    mapping = {}
    op_seq = 0
    for i in range(n_raw_codes):
        code = f"raw_{i:04d}"
        if i % 3 == 0:
            mapping[code] = WIDGET
        else:
            mapping[code] = BehaviorKind(Category.TRANSFORM_OP, f"op_{op_seq % n_op_classes:03d}")
            op_seq += 1
    return TaxonomyConfig(mapping)


@dataclass
class IngestReport:
    total_lines: int = 0
    events: int = 0
    malformed: int = 0
    unknown_codes: int = 0
    first_errors: list = field(default_factory=list)

    def note(self, line_no, message):
        if len(self.first_errors) < 10:
            self.first_errors.append(f"line {line_no}: {message}")


def _open_text(source):
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        return open(source, "r", encoding="utf-8", newline="")
    if isinstance(source, io.IOBase):
        return source
    # iterable of lines
    return io.StringIO("\n".join(source))


def _parse_event_line(line, line_no, taxonomy, tz_offset_minutes, strict, report):
    try:
        rec = json.loads(line)
        user_id = str(rec["user_id"])
        ts = rec["ts"]
        code = str(rec["code"])
    except (KeyError, ValueError, TypeError) as exc:
        if strict:
            raise IngestError(f"line {line_no}: {exc}") from None
        report.malformed += 1
        report.note(line_no, "unparseable record")
        return None
    if not isinstance(ts, int) or ts < 0:
        if strict:
            raise IngestError(f"line {line_no}: bad timestamp {ts!r}")
        report.malformed += 1
        report.note(line_no, f"bad timestamp {ts!r}")
        return None

    kind = taxonomy.resolve(code)
    if kind is None:
        if strict:
            raise IngestError(f"line {line_no}: unknown code {code!r}")
        report.unknown_codes += 1
        kind = WIDGET

    item_id = rec.get("item_id")
    amount = rec.get("amount")
    if kind.category is Category.TRANSFORM_OP:
        if amount is None or not isinstance(amount, (int, float)) or amount <= 0:
            if strict:
                raise IngestError(f"line {line_no}: transform op requires amount > 0")
            report.malformed += 1
            report.note(line_no, "transform op without positive amount")
            return None
        item_id = None
    elif kind.category is Category.ITEM_CLICK:
        if item_id is None or amount is not None:
            if strict:
                raise IngestError(f"line {line_no}: item click requires item_id and no amount")
            report.malformed += 1
            report.note(line_no, "item click missing item_id or carrying amount")
            return None
        amount = None
    else:
        if amount is not None:
            if strict:
                raise IngestError(f"line {line_no}: widget event carrying amount")
            report.malformed += 1
            report.note(line_no, "widget event carrying amount")
            return None
        item_id = None

    week_day, month_day = derive_time_period(ts, tz_offset_minutes)
    return BehaviorEvent(
        user_id=user_id,
        ts=ts,
        kind=kind,
        item_id=None if item_id is None else str(item_id),
        amount=None if amount is None else float(amount),
        week_day=week_day,
        month_day=month_day,
    )


def ingest_events(source, taxonomy, tz_offset_minutes=0, strict=False):
    """Parse line-delimited event records into time-sorted per-user lists.

    Returns ``(events_by_user, report)``. In non-strict mode malformed lines
    are counted and skipped and unknown codes fall back to the widget kind;
    strict mode raises on the first offense, naming the line.
    """
    events_by_user = {}
    report = IngestReport()
    with _open_text(source) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            report.total_lines += 1
            ev = _parse_event_line(line, line_no, taxonomy, tz_offset_minutes, strict, report)
            if ev is None:
                continue
            events_by_user.setdefault(ev.user_id, []).append(ev)
            report.events += 1
    for user_events in events_by_user.values():
        user_events.sort(key=lambda e: e.ts)
    if report.unknown_codes:
        log.warning("ingest: %d events had unknown codes, mapped to widget", report.unknown_codes)
    return events_by_user, report


def ingest_profiles(source, expected_features=None):
    """Parse the profile CSV ``user_id,f1..fP,applied_item_id,loan_ts,label``.

    Rows with an empty label come back unlabeled (scoring only). A row whose
    width disagrees with the header is a hard error naming the row.
    """
    records = []
    with _open_text(source) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 5 or header[0] != "user_id" or header[-3:] != PROFILE_TRAILER:
            raise IngestError(f"bad profile header: {header}")
        p = len(header) - 4
        expected_names = [f"f{i + 1}" for i in range(p)]
        if header[1 : 1 + p] != expected_names:
            raise IngestError(f"bad profile feature columns: {header[1:1 + p]}")
        if expected_features is not None and p != expected_features:
            raise IngestError(f"profile schema has {p} features, expected {expected_features}")
        for i, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != p + 4:
                raise IngestError(f"row {i}: expected {p} features")
            try:
                features = np.array([float(v) for v in row[1 : 1 + p]], dtype=np.float64)
                loan_ts = int(row[-2])
            except ValueError as exc:
                raise IngestError(f"row {i}: {exc}") from None
            raw_label = row[-1].strip()
            if raw_label == "":
                label = None
            elif raw_label in ("0", "1"):
                label = int(raw_label)
            else:
                raise IngestError(f"row {i}: label must be 0, 1 or empty, got {raw_label!r}")
            records.append(
                ProfileRecord(
                    user_id=row[0],
                    features=features,
                    applied_item_id=row[-3],
                    loan_ts=loan_ts,
                    label=label,
                )
            )
    return records


def write_profiles(path, records):
    if not records:
        raise ValueError("no profile records to write")
    p = len(records[0].features)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user_id"] + [f"f{i + 1}" for i in range(p)] + PROFILE_TRAILER)
        for r in records:
            writer.writerow(
                [r.user_id]
                + [repr(float(v)) for v in r.features]
                + [r.applied_item_id, r.loan_ts, "" if r.label is None else r.label]
            )


def write_events(path, events_by_user):
    with open(path, "w") as fh:
        for user_id in sorted(events_by_user):
            for ev in events_by_user[user_id]:
                rec = {"user_id": ev.user_id, "ts": ev.ts, "code": ev.kind.key}
                if ev.item_id is not None:
                    rec["item_id"] = ev.item_id
                if ev.amount is not None:
                    rec["amount"] = ev.amount
                fh.write(json.dumps(rec) + "\n")
