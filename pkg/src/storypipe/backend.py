"""Client interface to the external neural services, plus deterministic mocks.

Four operations cross the wire, each as a JSON request/response pair:

* ``score``            forced-decoding token log-probs of every candidate name
* ``speaker_name``     one free-text label for a speaker outside the cast
* ``describe``         timestamped events for one clip
* ``answer``           raw reply to one multiple-choice question

A :class:`Backend` owns retries, response validation, the in-flight cap and
the optional audit log; subclasses only implement :meth:`Backend._transport`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from storypipe.errors import BackendError, FixtureMissError, ProtocolError, ValidationError
from storypipe.timeline import (
    CastList,
    GlobalSpeakerId,
    SubtitleLine,
    check_list,
    check_record,
    read_json,
)

logger = logging.getLogger(__name__)

ENV_BACKEND = "STORYPIPE_BACKEND"

ANSWER_PROMPT = """[Movie Plot Description]

{text}

[Multiple-Choice Question]

{question}

Using the information in the [Movie Plot Description], please answer the [Mulitple-Choice Question]. Only one of options (A, B, C, D) is correct. Your response should follow this format:

[Reason]: Explain your reasoning.

[Answer]: Generate only one character from the options (A, B, C, D)."""

OPTION_LABELS = ("A", "B", "C", "D")


def canonical_bytes(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False).encode("utf-8")


def request_digest(op: str, payload: Mapping[str, Any]) -> str:
    """SHA-256 over the canonical serialization of ``{op, request}``."""
    return hashlib.sha256(canonical_bytes({"op": op, "request": payload})).hexdigest()


def _line_json(ln: SubtitleLine) -> dict[str, Any]:
    rec: dict[str, Any] = {"index": ln.index, "start_ms": ln.start, "end_ms": ln.end, "text": ln.text}
    if ln.global_id is not None:
        rec["global_id"] = str(ln.global_id)
    if ln.resolved_name is not None:
        rec["resolved_name"] = ln.resolved_name.to_json()
    return rec


def _cast_json(cast: CastList) -> list[dict[str, str]]:
    return [{"name": m.name, "photo": m.photo_ref} for m in cast]


# ---------------------------------------------------------------------------
# Requests and responses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScoreRequest:
    clip_id: int
    clip_media_ref: str
    cast: CastList
    subtitles: tuple[SubtitleLine, ...]
    fixed_assignments: Mapping[GlobalSpeakerId, str]
    target_id: GlobalSpeakerId
    candidates: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "subtitles", tuple(self.subtitles))
        object.__setattr__(self, "candidates", tuple(self.candidates))
        object.__setattr__(self, "fixed_assignments", dict(sorted(self.fixed_assignments.items())))
        if not any(ln.global_id == self.target_id for ln in self.subtitles):
            raise ValidationError(f"clip {self.clip_id}: target {self.target_id} has no line in the clip")
        late = [str(g) for g in self.fixed_assignments if g >= self.target_id]
        if late:
            raise ValidationError(f"fixed assignments {late} are not below target {self.target_id}")
        if len(set(self.candidates)) != len(self.candidates) or not self.candidates:
            raise ValidationError("candidate list must be non-empty and duplicate-free")

    def to_json(self) -> dict[str, Any]:
        return {
            "clip_id": self.clip_id,
            "clip_media_ref": self.clip_media_ref,
            "cast": _cast_json(self.cast),
            "subtitles": [_line_json(ln) for ln in self.subtitles],
            "fixed_assignments": {str(g): name for g, name in self.fixed_assignments.items()},
            "target_id": str(self.target_id),
            "candidates": list(self.candidates),
        }


@dataclass(frozen=True)
class ScoreResponse:
    token_logprobs: dict[str, tuple[float, ...]]


@dataclass(frozen=True)
class DescribeRequest:
    clip_id: int
    clip_media_ref: str
    start: int
    end: int
    cast: CastList
    subtitles: tuple[SubtitleLine, ...]

    def to_json(self) -> dict[str, Any]:
        return {
            "clip_id": self.clip_id,
            "clip_media_ref": self.clip_media_ref,
            "start_ms": self.start,
            "end_ms": self.end,
            "cast": _cast_json(self.cast),
            "subtitles": [_line_json(ln) for ln in self.subtitles],
        }


@dataclass(frozen=True)
class Event:
    start: int
    end: int
    text: str

    def to_json(self) -> dict[str, Any]:
        return {"start_ms": self.start, "end_ms": self.end, "text": self.text}


@dataclass(frozen=True)
class DescribeResponse:
    events: tuple[Event, ...] = ()

    def to_json(self) -> dict[str, Any]:
        return {"events": [e.to_json() for e in self.events]}


@dataclass(frozen=True)
class AnswerRequest:
    description: str
    question: str
    options: Mapping[str, str]

    def rendered_question(self) -> str:
        return "\n".join([self.question, *(f"{k}. {self.options[k]}" for k in OPTION_LABELS)])

    def prompt(self) -> str:
        return ANSWER_PROMPT.replace("{text}", self.description).replace("{question}", self.rendered_question())

    def to_json(self) -> dict[str, Any]:
        return {
            "description": self.description,
            "question": self.question,
            "options": {k: self.options[k] for k in OPTION_LABELS},
            "prompt": self.prompt(),
        }


@dataclass(frozen=True)
class AnswerResponse:
    raw: str


# ---------------------------------------------------------------------------
# Validators (shared by every backend)
# ---------------------------------------------------------------------------


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ProtocolError(msg)


def parse_score_response(req: ScoreRequest, raw: Any) -> ScoreResponse:
    _require(isinstance(raw, dict) and isinstance(raw.get("token_logprobs"), dict),
             "score response must be {token_logprobs: {candidate: [...]}}")
    table = raw["token_logprobs"]
    missing = [c for c in req.candidates if c not in table]
    extra = [c for c in table if c not in req.candidates]
    _require(not missing, f"score response missing candidate(s) {missing}")
    _require(not extra, f"score response has unrequested candidate(s) {extra}")
    out = {}
    for cand in req.candidates:
        vals = table[cand]
        _require(isinstance(vals, list) and len(vals) > 0, f"candidate {cand!r}: token list must be non-empty")
        for v in vals:
            _require(isinstance(v, (int, float)) and not isinstance(v, bool), f"candidate {cand!r}: non-numeric logprob")
            _require(math.isfinite(v) and v <= 0, f"candidate {cand!r}: logprob {v} must be finite and <= 0")
        out[cand] = tuple(float(v) for v in vals)
    return ScoreResponse(out)


def parse_describe_response(req: DescribeRequest, raw: Any) -> DescribeResponse:
    _require(isinstance(raw, dict) and isinstance(raw.get("events"), list), "describe response must be {events: [...]}")
    events = []
    prev = (req.start, req.start)
    for i, ev in enumerate(raw["events"]):
        _require(isinstance(ev, dict) and {"start_ms", "end_ms", "text"} <= set(ev), f"event #{i} malformed")
        s, e, text = ev["start_ms"], ev["end_ms"], ev["text"]
        _require(all(isinstance(x, int) and not isinstance(x, bool) for x in (s, e)), f"event #{i}: non-integer time")
        _require(isinstance(text, str), f"event #{i}: text must be a string")
        _require(s < e, f"event #{i}: start {s} must be < end {e}")
        _require(req.start <= s and e <= req.end, f"event #{i}: [{s},{e}) outside clip [{req.start},{req.end})")
        _require((s, e) >= prev, f"event #{i}: events out of order")
        prev = (s, e)
        events.append(Event(s, e, text))
    return DescribeResponse(tuple(events))


def parse_answer_response(raw: Any) -> AnswerResponse:
    _require(isinstance(raw, dict) and isinstance(raw.get("text"), str), "answer response must be {text: str}")
    return AnswerResponse(raw["text"])


def parse_name_response(raw: Any) -> str:
    _require(isinstance(raw, dict) and isinstance(raw.get("name"), str), "speaker_name response must be {name: str}")
    return raw["name"]


# ---------------------------------------------------------------------------
# Backend base
# ---------------------------------------------------------------------------


class Backend:
    """Retrying, validating, optionally audited client.

    Subclasses implement ``_transport(op, payload, digest) -> dict``.
    Transport failures should raise :class:`BackendError` (retried);
    :class:`ProtocolError` and :class:`FixtureMissError` are never retried.
    """

    name = "backend"

    def __init__(
        self,
        *,
        max_attempts: int = 3,
        backoff: float = 0.5,
        max_in_flight: int = 4,
        audit_log: str | os.PathLike | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.max_in_flight = max_in_flight
        self.audit_log = Path(audit_log) if audit_log else None
        self.retry_log: list[dict[str, Any]] = []
        self._sleep = sleep
        self._gate = threading.BoundedSemaphore(max_in_flight)
        self._lock = threading.Lock()

    def describe_uri(self) -> str:
        return self.name

    def _transport(self, op: str, payload: dict[str, Any], digest: str) -> Any:
        raise NotImplementedError

    def _audit(self, record: dict[str, Any]) -> None:
        if self.audit_log is None:
            return
        line = json.dumps(record, sort_keys=True, ensure_ascii=False)
        with self._lock, open(self.audit_log, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    def call(self, op: str, payload: dict[str, Any], parse: Callable[[Any], Any]) -> Any:
        digest = request_digest(op, payload)
        for attempt in range(1, self.max_attempts + 1):
            try:
                with self._gate:
                    raw = self._transport(op, payload, digest)
                result = parse(raw)
            except BackendError as exc:
                self._audit({"op": op, "digest": digest, "attempt": attempt, "request": payload, "error": str(exc)})
                if not exc.retryable or attempt == self.max_attempts:
                    raise
                with self._lock:
                    self.retry_log.append({"op": op, "digest": digest, "attempt": attempt, "error": str(exc)})
                logger.warning("%s %s failed (attempt %d): %s", op, digest[:12], attempt, exc)
                self._sleep(self.backoff * 2 ** (attempt - 1))
                continue
            self._audit({"op": op, "digest": digest, "attempt": attempt, "request": payload, "response": raw})
            logger.debug("%s %s ok", op, digest[:12])
            return result
        raise AssertionError("unreachable")

    def score_candidates(self, req: ScoreRequest) -> ScoreResponse:
        return self.call("score", req.to_json(), lambda raw: parse_score_response(req, raw))

    def speaker_name(self, req: ScoreRequest) -> str:
        """Greedy descriptive label for ``req.target_id`` in this clip."""
        return self.call("speaker_name", req.to_json(), parse_name_response)

    def generate_description(self, req: DescribeRequest) -> DescribeResponse:
        return self.call("describe", req.to_json(), lambda raw: parse_describe_response(req, raw))

    def answer_question(self, req: AnswerRequest) -> AnswerResponse:
        return self.call("answer", req.to_json(), parse_answer_response)


# ---------------------------------------------------------------------------
# Seeded mock
# ---------------------------------------------------------------------------

_MOCK_LABELS = ("A policeman", "A man", "A woman", "A waiter", "A little girl", "A driver")
_MOCK_SCENES = (
    "The camera lingers on the room",
    "Someone glances toward the door",
    "The lights flicker briefly",
    "A car passes outside",
    "The scene cuts to a close-up",
)


class _KeyedStream:
    """Platform-independent pseudo-random stream keyed by (seed, digest)."""

    def __init__(self, seed: int, digest: str):
        self._key = hashlib.sha256(f"storypipe-mock:{seed}".encode()).digest()
        self._digest = digest.encode()
        self._n = 0

    def next_int(self) -> int:
        h = hashlib.blake2b(self._digest + self._n.to_bytes(8, "big"), key=self._key, digest_size=8)
        self._n += 1
        return int.from_bytes(h.digest(), "big")

    def below(self, n: int) -> int:
        return self.next_int() % n

    def logprob(self) -> float:
        # exact decimal in [-4, 0]
        return -(self.next_int() % 4_000_001) / 1_000_000


class SeededMockBackend(Backend):
    """Responses are a pure function of ``(seed, request digest)``.

    The request body only shapes the response (which candidates, which clip
    bounds); every value inside it comes from the keyed stream.
    """

    name = "mock"

    def __init__(self, seed: int = 0, **kwargs):
        super().__init__(**kwargs)
        self.seed = seed

    def describe_uri(self) -> str:
        return f"mock:{self.seed}"

    def _transport(self, op: str, payload: dict[str, Any], digest: str) -> Any:
        rnd = _KeyedStream(self.seed, digest)
        if op == "score":
            table = {}
            for cand in payload["candidates"]:
                n = 1 if cand == "Others" else 1 + rnd.below(3)
                table[cand] = [rnd.logprob() for _ in range(n)]
            return {"token_logprobs": table}
        if op == "speaker_name":
            return {"name": _MOCK_LABELS[rnd.below(len(_MOCK_LABELS))]}
        if op == "describe":
            return {"events": _mock_events(payload, rnd)}
        if op == "answer":
            letter = OPTION_LABELS[rnd.below(4)]
            return {"text": f"[Reason]: The description mentions the relevant events.\n[Answer]: {letter}"}
        raise ProtocolError(f"unknown operation {op!r}")


def _mock_events(payload: dict[str, Any], rnd: _KeyedStream) -> list[dict[str, Any]]:
    lo, hi = payload["start_ms"], payload["end_ms"]
    events = []
    scene_end = min(hi, lo + 1000 + rnd.below(4000))
    events.append({"start_ms": lo, "end_ms": scene_end, "text": _MOCK_SCENES[rnd.below(len(_MOCK_SCENES))] + "."})
    for ln in payload["subtitles"]:
        s, e = max(lo, ln["start_ms"]), min(hi, ln["end_ms"])
        if s >= e:
            continue
        who = ln.get("resolved_name", {}).get("name") or ln.get("global_id") or "Someone"
        events.append({"start_ms": s, "end_ms": e, "text": f'{who} says "{ln["text"]}".'})
    events.sort(key=lambda ev: (ev["start_ms"], ev["end_ms"]))
    return events


# ---------------------------------------------------------------------------
# Scripted fixtures
# ---------------------------------------------------------------------------


def load_fixture(data: bytes | str) -> dict[str, Any]:
    doc = check_record(read_json(data, "fixture"), "fixture file", ["entries"])
    table = {}
    for i, rec in enumerate(check_list(doc["entries"], "fixture entries")):
        check_record(rec, f"fixture entry #{i}", ["digest", "response"], ["op", "request"])
        table[rec["digest"]] = rec["response"]
    return table


class ScriptedBackend(Backend):
    """Canned responses keyed by request digest; unknown digests fail.

    With ``pending_path`` set, every miss is also appended to that file as a
    line-delimited ``{op, digest, request}`` record. Feeding those to a real
    model offline and collecting the answers into a fixture file gives an
    air-gapped batch mode.
    """

    name = "scripted"

    def __init__(self, entries: Mapping[str, Any], *, pending_path: str | os.PathLike | None = None,
                 source: str = "", **kwargs):
        super().__init__(**kwargs)
        self.entries = dict(entries)
        self.pending_path = Path(pending_path) if pending_path else None
        self.source = source

    @classmethod
    def from_file(cls, path: str | os.PathLike, **kwargs) -> ScriptedBackend:
        return cls(load_fixture(Path(path).read_bytes()), source=str(path), **kwargs)

    def describe_uri(self) -> str:
        digest = hashlib.sha256(canonical_bytes(self.entries)).hexdigest()[:16]
        return f"scripted:{digest}"

    def _transport(self, op: str, payload: dict[str, Any], digest: str) -> Any:
        if digest in self.entries:
            return self.entries[digest]
        if self.pending_path is not None:
            with self._lock, open(self.pending_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"op": op, "digest": digest, "request": payload}, sort_keys=True,
                                    ensure_ascii=False) + "\n")
        raise FixtureMissError(digest, op)


def fixture_entry(op: str, payload: Mapping[str, Any], response: Any) -> dict[str, Any]:
    return {"op": op, "digest": request_digest(op, payload), "response": response}


class CallableBackend(Backend):
    """Dispatches each operation to a Python callable ``fn(payload) -> dict``."""

    name = "callable"

    def __init__(self, handlers: Mapping[str, Callable[[dict[str, Any]], Any]], **kwargs):
        super().__init__(**kwargs)
        self.handlers = dict(handlers)

    def _transport(self, op: str, payload: dict[str, Any], digest: str) -> Any:
        if op not in self.handlers:
            raise ProtocolError(f"no handler for operation {op!r}")
        return self.handlers[op](payload)


# ---------------------------------------------------------------------------
# HTTP transport
# ---------------------------------------------------------------------------


class HttpBackend(Backend):
    """POSTs ``{op, digest, request}`` to ``<base>/<op>`` and expects JSON back."""

    name = "http"

    def __init__(self, base_url: str, *, token: str | None = None, timeout: float = 60.0, **kwargs):
        super().__init__(**kwargs)
        self.base_url = base_url.rstrip("/")
        self.token = token
        self.timeout = timeout

    def describe_uri(self) -> str:
        return self.base_url

    def _transport(self, op: str, payload: dict[str, Any], digest: str) -> Any:
        body = json.dumps({"op": op, "digest": digest, "request": payload}, ensure_ascii=False).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        req = urllib.request.Request(f"{self.base_url}/{op}", data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                data = resp.read()
        except urllib.error.HTTPError as exc:
            if 400 <= exc.code < 500:
                raise ProtocolError(f"{op}: HTTP {exc.code}") from exc
            raise BackendError(f"{op}: HTTP {exc.code}") from exc
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise BackendError(f"{op}: transport failure: {exc}") from exc
        try:
            return json.loads(data.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ProtocolError(f"{op}: response is not JSON") from exc


def open_backend(uri: str | None = None, **kwargs) -> Backend:
    """Build a backend from a URI.

    ``mock:<seed>``, ``scripted:<fixture path>``, ``http(s)://host[:port]/prefix``.
    Falls back to the ``STORYPIPE_BACKEND`` environment variable.
    """
    uri = uri or os.environ.get(ENV_BACKEND)
    if not uri:
        raise ValidationError(f"no backend configured (use --backend or set {ENV_BACKEND})")
    if uri.startswith("mock:") or uri == "mock":
        seed_text = uri[5:].removeprefix("seed=") or "0"
        try:
            return SeededMockBackend(int(seed_text), **kwargs)
        except ValueError as exc:
            raise ValidationError(f"bad mock seed in {uri!r}") from exc
    if uri.startswith("scripted:"):
        return ScriptedBackend.from_file(uri[len("scripted:"):], **kwargs)
    if uri.startswith(("http://", "https://")):
        return HttpBackend(uri, token=os.environ.get("STORYPIPE_TOKEN"), **kwargs)
    raise ValidationError(f"unrecognised backend uri {uri!r}")


def media_fragment(video_ref: str, start_ms: int, end_ms: int) -> str:
    """Opaque clip reference using the media-fragment time syntax."""
    return f"{video_ref}#t={start_ms / 1000:.3f},{end_ms / 1000:.3f}"


def clip_lines(lines: Sequence[SubtitleLine], indices: Sequence[int]) -> tuple[SubtitleLine, ...]:
    wanted = set(indices)
    return tuple(ln for ln in lines if ln.index in wanted)
