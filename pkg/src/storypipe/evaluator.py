"""Multiple-choice QA evaluation of a long-video description.

An external answerer reads the whole description and picks one option per
question; accuracy is reported per question category and overall.
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from storypipe.backend import OPTION_LABELS, AnswerRequest, Backend, DescribeResponse, Event
from storypipe.errors import BackendError, ValidationError
from storypipe.segmenter import ClipSet
from storypipe.timeline import check_list, check_record, dump_json, format_mmss, read_json

logger = logging.getLogger(__name__)

CATEGORIES = ("Character", "Action", "Plot")

_ANSWER_MARK = re.compile(r"\[\s*answer\s*\]", re.IGNORECASE)
_ANY_CASE_LETTER = re.compile(r"(?<![A-Za-z0-9])([A-Da-d])(?![A-Za-z0-9])")
_UPPER_LETTER = re.compile(r"(?<![A-Za-z0-9])([A-D])(?![A-Za-z0-9])")


# ---------------------------------------------------------------------------
# Description assembly
# ---------------------------------------------------------------------------


def render_event(start_ms: int, end_ms: int, text: str) -> str:
    return f"{format_mmss(start_ms)}~{format_mmss(end_ms)} {' '.join(text.split())}"


def concat_descriptions(
    clips: ClipSet, responses: Sequence[DescribeResponse] | Mapping[int, DescribeResponse]
) -> str:
    """Merge every clip's events into one ``mm:ss~mm:ss text`` line per event.

    ``responses`` is either aligned with ``clips`` or keyed by clip id.
    """
    if not isinstance(responses, Mapping):
        if len(responses) != len(clips):
            raise ValidationError(f"expected {len(clips)} clip responses, got {len(responses)}")
        responses = {c.id: r for c, r in zip(clips, responses)}
    missing = [c.id for c in clips if c.id not in responses]
    if missing:
        raise ValidationError(f"no description for clip(s) {missing}")
    events = []
    for clip in clips:
        for pos, ev in enumerate(responses[clip.id].events):
            events.append((ev.start, ev.end, clip.id, pos, ev.text))
    events.sort()
    return "\n".join(render_event(s, e, text) for s, e, _, _, text in events)


# ---------------------------------------------------------------------------
# Answer parsing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Choice:
    value: str | None  # "A".."D", or None when unparsable
    raw: str = ""

    @property
    def parsed(self) -> bool:
        return self.value is not None

    def __str__(self) -> str:
        return self.value or "Unparsable"


def parse_answer(raw: Any) -> Choice:
    """Extract the chosen option letter from a free-text reply. Never raises."""
    if isinstance(raw, (bytes, bytearray)):
        text = bytes(raw).decode("utf-8", errors="replace")
    elif isinstance(raw, str):
        text = raw
    else:
        text = "" if raw is None else str(raw)

    marks = list(_ANSWER_MARK.finditer(text))
    if marks:
        m = _ANY_CASE_LETTER.search(text, marks[-1].end())
        if m:
            return Choice(m.group(1).upper(), text)
    letters = {m.group(1) for m in _UPPER_LETTER.finditer(text)}
    if len(letters) == 1:
        return Choice(letters.pop(), text)
    return Choice(None, text)


# ---------------------------------------------------------------------------
# QA items and reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QAItem:
    id: Any
    category: str
    question: str
    options: Mapping[str, str]
    gold: str

    def __post_init__(self) -> None:
        if self.category not in CATEGORIES:
            raise ValidationError(f"QA item {self.id}: unknown category {self.category!r}")
        if set(self.options) != set(OPTION_LABELS):
            raise ValidationError(f"QA item {self.id}: options must be exactly A, B, C, D")
        if len(set(self.options.values())) != 4:
            raise ValidationError(f"QA item {self.id}: options must be distinct")
        if self.gold not in OPTION_LABELS:
            raise ValidationError(f"QA item {self.id}: gold must be one of A-D, got {self.gold!r}")


@dataclass(frozen=True)
class ItemRecord:
    id: Any
    category: str
    gold: str
    choice: Choice

    @property
    def correct(self) -> bool:
        return self.choice.value == self.gold

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "category": self.category,
            "gold": self.gold,
            "choice": str(self.choice),
            "correct": self.correct,
            "raw": self.choice.raw,
        }


@dataclass(frozen=True)
class Tally:
    correct: int = 0
    total: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    def to_json(self) -> dict[str, Any]:
        return {"correct": self.correct, "total": self.total, "accuracy": self.accuracy}


def _id_key(record: ItemRecord) -> tuple:
    rid = record.id
    return (0, rid, "") if isinstance(rid, int) and not isinstance(rid, bool) else (1, 0, str(rid))


@dataclass
class EvalReport:
    categories: dict[str, Tally]
    overall: Tally
    unparsable_count: int
    items: list[ItemRecord] = field(default_factory=list)

    @classmethod
    def from_records(cls, records: Sequence[ItemRecord]) -> EvalReport:
        records = sorted(records, key=_id_key)
        cats = {}
        for cat in CATEGORIES:
            mine = [r for r in records if r.category == cat]
            cats[cat] = Tally(sum(r.correct for r in mine), len(mine))
        overall = Tally(sum(r.correct for r in records), len(records))
        unparsable = sum(1 for r in records if not r.choice.parsed)
        return cls(cats, overall, unparsable, list(records))

    def to_json(self) -> dict[str, Any]:
        return {
            "categories": {k: v.to_json() for k, v in self.categories.items()},
            "overall": self.overall.to_json(),
            "unparsable_count": self.unparsable_count,
            "items": [r.to_json() for r in self.items],
        }

    def summary(self) -> str:
        parts = [f"{k} {v.accuracy:.3f}" for k, v in self.categories.items()]
        return " | ".join(parts + [f"Total {self.overall.accuracy:.3f} ({self.overall.correct}/{self.overall.total})"])


def dump_report(report: EvalReport) -> bytes:
    return dump_json(report.to_json())


def load_qa(data: bytes | str, *, strict: bool = False) -> list[QAItem]:
    doc = check_record(read_json(data, "qa"), "QA file", ["items"], strict=strict)
    items, seen = [], set()
    for i, rec in enumerate(check_list(doc["items"], "QA items")):
        check_record(rec, f"QA item #{i}", ["id", "category", "question", "options", "gold"], strict=strict)
        if rec["id"] in seen:
            raise ValidationError(f"duplicate QA item id {rec['id']!r}")
        seen.add(rec["id"])
        opts = check_record(rec["options"], f"QA item {rec['id']} options", OPTION_LABELS, strict=True)
        items.append(QAItem(rec["id"], rec["category"], rec["question"], dict(opts), rec["gold"]))
    return items


def score_qa(description: str, items: Sequence[QAItem], answerer: Backend, *, max_workers: int = 4) -> EvalReport:
    """Ask one question per item and tally the parsed choices against gold.

    A backend failure aborts the evaluation; the raised error carries the
    report built from the items answered so far in ``partial``.
    """
    if not items:
        raise ValidationError("no QA items to evaluate")
    if len({it.id for it in items}) != len(items):
        raise ValidationError("QA item ids must be unique")

    def ask(item: QAItem) -> ItemRecord:
        resp = answerer.answer_question(AnswerRequest(description, item.question, item.options))
        return ItemRecord(item.id, item.category, item.gold, parse_answer(resp.raw))

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        futures = [pool.submit(ask, it) for it in items]
    records, failure = [], None
    for fut in futures:
        try:
            records.append(fut.result())
        except BackendError as exc:
            failure = failure or exc
    if failure is not None:
        failure.partial = EvalReport.from_records(records)
        raise failure
    return EvalReport.from_records(records)


def dump_descriptions(responses: Mapping[int, DescribeResponse]) -> bytes:
    return dump_json({"clips": [{"id": cid, **responses[cid].to_json()} for cid in sorted(responses)]})


def load_descriptions(data: bytes | str) -> dict[int, DescribeResponse]:
    doc = check_record(read_json(data, "descriptions"), "descriptions file", ["clips"])
    out = {}
    for i, rec in enumerate(check_list(doc["clips"], "descriptions clips")):
        check_record(rec, f"description record #{i}", ["id", "events"])
        events = []
        for j, ev in enumerate(check_list(rec["events"], f"clip {rec['id']} events")):
            check_record(ev, f"clip {rec['id']} event #{j}", ["start_ms", "end_ms", "text"])
            events.append(Event(ev["start_ms"], ev["end_ms"], ev["text"]))
        out[rec["id"]] = DescribeResponse(tuple(events))
    return out
