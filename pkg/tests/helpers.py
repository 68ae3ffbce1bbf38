"""Builders shared across the test modules."""

from __future__ import annotations

import json
import math
from typing import Any, Callable, Mapping

from storypipe.backend import CallableBackend
from storypipe.segmenter import Clip, ClipSet
from storypipe.timeline import CastList, CastMember, GlobalSpeakerId, SubtitleLine, SubtitleTrack


def subs_bytes(lines, duration=None) -> bytes:
    doc: dict[str, Any] = {"lines": [
        {"index": i, "start_ms": s, "end_ms": e, "text": t} for i, s, e, t in lines
    ]}
    if duration is not None:
        doc["duration_ms"] = duration
    return json.dumps(doc).encode()


def track_of(spans, duration, ids=None) -> SubtitleTrack:
    """Track from (start, end) spans; ``ids`` optionally gives each line's speaker ordinal."""
    lines = []
    for k, (s, e) in enumerate(spans, start=1):
        gid = GlobalSpeakerId(ids[k - 1]) if ids else None
        lines.append(SubtitleLine(k, s, e, f"line {k}", global_id=gid))
    return SubtitleTrack(tuple(lines), duration)


def cast_of(*names: str) -> CastList:
    return CastList(tuple(CastMember(n, f"{n.lower().replace(' ', '_')}.png") for n in names))


def clipset_of(bounds, members, duration) -> ClipSet:
    clips = [Clip(k, s, e, tuple(m)) for k, ((s, e), m) in enumerate(zip(bounds, members), start=1)]
    return ClipSet(tuple(clips), duration)


def table_backend(
    table: Mapping[tuple[int, str], Mapping[str, list[float]]],
    names: Mapping[str, str] | None = None,
    seen: list | None = None,
    delay: Callable[[dict], None] | None = None,
) -> CallableBackend:
    """Scorer answering from ``table[(clip_id, "C<n>")]``; records payloads in ``seen``."""

    def score(payload):
        if seen is not None:
            seen.append(payload)
        if delay is not None:
            delay(payload)
        return {"token_logprobs": {c: list(v) for c, v in table[(payload["clip_id"], payload["target_id"])].items()}}

    def speaker_name(payload):
        if seen is not None:
            seen.append({"op": "speaker_name", **payload})
        return {"name": (names or {}).get(payload["target_id"], "A man")}

    return CallableBackend({"score": score, "speaker_name": speaker_name}, backoff=0.0)


def ln(p: float) -> float:
    return math.log(p)


# ten QA items: Character x4, Action x3, Plot x3
EVAL_ITEMS = [
    ("q01", "Character", "A"), ("q02", "Character", "B"), ("q03", "Character", "C"), ("q04", "Character", "D"),
    ("q05", "Action", "A"), ("q06", "Action", "B"), ("q07", "Action", "C"),
    ("q08", "Plot", "D"), ("q09", "Plot", "A"), ("q10", "Plot", "B"),
]

# scripted replies: q04 wrong, q07 unparsable, q10 wrong -> 3/4, 2/3, 2/3
EVAL_REPLIES = {
    "q01": "[Reason]: She is seen first.\n[Answer]: A",
    "q02": "[Answer]: (b)",
    "q03": "[Reason]: The text says so.\n[Answer]: C.",
    "q04": "[Reason]: Hard to say.\n[Answer]: A",
    "q05": "A",
    "q06": "[Reason]: Option A is wrong.\n[Answer]: B",
    "q07": "I cannot determine this.",
    "q08": "[Answer]: D",
    "q09": "[answer] a",
    "q10": "[Reason]: ...\n[Answer]: C",
}


def eval_items():
    from storypipe.evaluator import QAItem

    return [
        QAItem(qid, cat, f"Question {qid}?", {k: f"{qid} option {k}" for k in "ABCD"}, gold)
        for qid, cat, gold in EVAL_ITEMS
    ]


def eval_fixture(description: str):
    """Scripted answerer covering every item in ``eval_items``."""
    from storypipe.backend import AnswerRequest, ScriptedBackend, fixture_entry

    entries = {}
    for item in eval_items():
        req = AnswerRequest(description, item.question, item.options)
        e = fixture_entry("answer", req.to_json(), {"text": EVAL_REPLIES[item.id]})
        entries[e["digest"]] = e["response"]
    return ScriptedBackend(entries)
