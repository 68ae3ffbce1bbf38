"""Canonical data model and file I/O for subtitles, shot cuts and cast lists.

All timestamps are integer milliseconds from the start of the video. Every
loader is a pure function of its input bytes and returns immutable objects;
anything that reaches the later stages has already been validated here.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Iterator

from storypipe.errors import ParseError, ValidationError

logger = logging.getLogger(__name__)

OTHERS = "Others"

_ID_RE = re.compile(r"C([1-9][0-9]*)")
_MMSS_RE = re.compile(r"(\d{2,}):([0-5]\d)")


# ---------------------------------------------------------------------------
# Time helpers
# ---------------------------------------------------------------------------


def format_mmss(ms: int) -> str:
    """Render milliseconds as zero-padded ``mm:ss``, flooring to whole seconds."""
    seconds = ms // 1000
    return f"{seconds // 60:02d}:{seconds % 60:02d}"


def parse_mmss(text: str) -> int:
    """Parse ``mm:ss`` back to whole seconds."""
    m = _MMSS_RE.fullmatch(text.strip())
    if not m:
        raise ValueError(f"not an mm:ss timestamp: {text!r}")
    return int(m.group(1)) * 60 + int(m.group(2))


def check_time(value: Any, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(f"{where}: timestamp must be an integer number of ms, got {value!r}")
    if value < 0:
        raise ValidationError(f"{where}: timestamp must be non-negative, got {value}")
    return value


# ---------------------------------------------------------------------------
# Identifiers and names
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class GlobalSpeakerId:
    """Cluster label for one speaker across the whole video, rendered ``C<n>``."""

    ordinal: int

    def __post_init__(self) -> None:
        if isinstance(self.ordinal, bool) or not isinstance(self.ordinal, int) or self.ordinal < 1:
            raise ValidationError(f"global speaker ordinal must be a positive integer, got {self.ordinal!r}")

    def __str__(self) -> str:
        return f"C{self.ordinal}"

    @classmethod
    def parse(cls, text: str) -> GlobalSpeakerId:
        m = _ID_RE.fullmatch(text) if isinstance(text, str) else None
        if not m:
            raise ValidationError(f"malformed global speaker id {text!r} (expected C<positive int>)")
        return cls(int(m.group(1)))


@dataclass(frozen=True)
class ResolvedName:
    """Final name for a speaker: a cast member or a free-text description."""

    kind: str  # "cast" | "descriptive"
    text: str

    def __post_init__(self) -> None:
        if self.kind not in ("cast", "descriptive"):
            raise ValidationError(f"resolved name kind must be 'cast' or 'descriptive', got {self.kind!r}")
        if not isinstance(self.text, str) or not self.text.strip():
            raise ValidationError("resolved name text must be non-empty")

    @classmethod
    def cast(cls, name: str) -> ResolvedName:
        return cls("cast", name)

    @classmethod
    def descriptive(cls, text: str) -> ResolvedName:
        return cls("descriptive", text)

    def __str__(self) -> str:
        return self.text

    def to_json(self) -> dict[str, str]:
        return {"kind": self.kind, "name": self.text}

    @classmethod
    def from_json(cls, obj: Any, where: str) -> ResolvedName:
        if isinstance(obj, str):
            return cls.cast(obj)
        if not isinstance(obj, dict) or set(obj) != {"kind", "name"}:
            raise ValidationError(f"{where}: resolved_name must be a string or {{kind, name}}")
        return cls(obj["kind"], obj["name"])


# ---------------------------------------------------------------------------
# Subtitles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubtitleLine:
    index: int
    start: int
    end: int
    text: str
    global_id: GlobalSpeakerId | None = None
    resolved_name: ResolvedName | None = None

    def __post_init__(self) -> None:
        where = f"subtitle line {self.index}"
        if isinstance(self.index, bool) or not isinstance(self.index, int) or self.index < 1:
            raise ValidationError(f"subtitle index must be a positive integer, got {self.index!r}")
        check_time(self.start, where + " start_ms")
        check_time(self.end, where + " end_ms")
        if self.start >= self.end:
            raise ValidationError(f"{where}: start_ms {self.start} must be < end_ms {self.end}")
        if not isinstance(self.text, str):
            raise ValidationError(f"{where}: text must be a string")

    @property
    def sort_key(self) -> tuple[int, int, int]:
        return (self.start, self.end, self.index)


@dataclass(frozen=True)
class SubtitleTrack:
    """Time-ordered dialogue lines; overlapping lines are allowed."""

    lines: tuple[SubtitleLine, ...]
    duration: int
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        check_time(self.duration, "subtitle track duration_ms")
        lines = tuple(sorted(self.lines, key=lambda ln: ln.sort_key))
        object.__setattr__(self, "lines", lines)
        seen: set[int] = set()
        for ln in lines:
            if ln.index in seen:
                raise ValidationError(f"duplicate subtitle index {ln.index}")
            seen.add(ln.index)
            if ln.end > self.duration:
                raise ValidationError(
                    f"subtitle line {ln.index}: end_ms {ln.end} exceeds duration_ms {self.duration}"
                )

    def __iter__(self) -> Iterator[SubtitleLine]:
        return iter(self.lines)

    def __len__(self) -> int:
        return len(self.lines)

    def by_index(self) -> dict[int, SubtitleLine]:
        return {ln.index: ln for ln in self.lines}

    def indices(self) -> list[int]:
        return [ln.index for ln in self.lines]

    def replace_lines(self, lines: Iterable[SubtitleLine]) -> SubtitleTrack:
        return replace(self, lines=tuple(lines))


# ---------------------------------------------------------------------------
# Cuts and cast
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CutList:
    """Strictly increasing cut points, each strictly inside (0, duration)."""

    cuts: tuple[int, ...]
    duration: int
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        check_time(self.duration, "cut list duration_ms")
        object.__setattr__(self, "cuts", tuple(self.cuts))
        prev = 0
        for i, c in enumerate(self.cuts):
            check_time(c, f"cut #{i}")
            if not prev < c < self.duration:
                raise ValidationError(
                    f"cut #{i} ({c} ms) must be strictly increasing and inside (0, {self.duration})"
                )
            prev = c

    def __iter__(self) -> Iterator[int]:
        return iter(self.cuts)

    def __len__(self) -> int:
        return len(self.cuts)


@dataclass(frozen=True)
class CastMember:
    name: str
    photo_ref: str


@dataclass(frozen=True)
class CastList:
    members: tuple[CastMember, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "members", tuple(self.members))
        seen: set[str] = set()
        for i, m in enumerate(self.members):
            if not isinstance(m.name, str) or not m.name.strip():
                raise ValidationError(f"cast member #{i}: name must be a non-empty string")
            if m.name == OTHERS:
                raise ValidationError(f"cast member #{i}: {OTHERS!r} is a reserved name")
            if m.name in seen:
                raise ValidationError(f"cast member #{i}: duplicate name {m.name!r}")
            if not isinstance(m.photo_ref, str):
                raise ValidationError(f"cast member #{i}: photo must be a string")
            seen.add(m.name)

    def __iter__(self) -> Iterator[CastMember]:
        return iter(self.members)

    def __len__(self) -> int:
        return len(self.members)

    def names(self) -> list[str]:
        return [m.name for m in self.members]


# ---------------------------------------------------------------------------
# Structured-text plumbing shared by all file schemas
# ---------------------------------------------------------------------------


def read_json(data: bytes | str, what: str) -> Any:
    """Decode UTF-8 JSON, mapping syntax problems to :class:`ParseError`."""
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"{what}: invalid UTF-8 at byte offset {exc.start}") from exc
    try:
        return json.loads(data)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{what}: {exc.msg}", exc.lineno, exc.colno) from exc


def dump_json(obj: Any) -> bytes:
    """Canonical serialization used for every artifact and digest."""
    return (json.dumps(obj, indent=2, ensure_ascii=False, allow_nan=False) + "\n").encode("utf-8")


def check_record(
    record: Any,
    where: str,
    required: Iterable[str],
    optional: Iterable[str] = (),
    *,
    strict: bool = False,
    warnings: list[str] | None = None,
) -> dict[str, Any]:
    if not isinstance(record, dict):
        raise ValidationError(f"{where}: expected an object, got {type(record).__name__}")
    required = tuple(required)
    missing = [k for k in required if k not in record]
    if missing:
        raise ValidationError(f"{where}: missing field(s) {', '.join(missing)}")
    unknown = sorted(set(record) - set(required) - set(optional))
    if unknown:
        msg = f"{where}: unknown field(s) {', '.join(unknown)}"
        if strict:
            raise ValidationError(msg)
        logger.warning("%s (ignored)", msg)
        if warnings is not None:
            warnings.append(msg + " (ignored)")
    return record


def check_list(value: Any, where: str) -> list:
    if not isinstance(value, list):
        raise ValidationError(f"{where}: expected a list, got {type(value).__name__}")
    return value


# ---------------------------------------------------------------------------
# Loaders / serializers
# ---------------------------------------------------------------------------


def load_subtitles(data: bytes | str, *, strict: bool = False) -> SubtitleTrack:
    """Parse a subtitles file ``{duration_ms?, lines: [...]}``.

    Lines are re-sorted by (start, end, index). When ``duration_ms`` is absent
    the track ends at the latest line end.
    """
    warnings: list[str] = []
    doc = check_record(read_json(data, "subtitles"), "subtitles file", ["lines"], ["duration_ms"],
                       strict=strict, warnings=warnings)
    lines = []
    for pos, rec in enumerate(check_list(doc["lines"], "subtitles file lines")):
        where = f"subtitle record #{pos}"
        if isinstance(rec, dict) and "index" in rec:
            where = f"subtitle line {rec['index']}"
        check_record(rec, where, ["index", "start_ms", "end_ms", "text"], ["global_id", "resolved_name"],
                     strict=strict, warnings=warnings)
        gid = rec.get("global_id")
        name = rec.get("resolved_name")
        lines.append(
            SubtitleLine(
                index=rec["index"],
                start=rec["start_ms"],
                end=rec["end_ms"],
                text=rec["text"],
                global_id=GlobalSpeakerId.parse(gid) if gid is not None else None,
                resolved_name=ResolvedName.from_json(name, where) if name is not None else None,
            )
        )
    duration = doc.get("duration_ms")
    if duration is None:
        duration = max((ln.end for ln in lines), default=0)
    return SubtitleTrack(tuple(lines), duration, tuple(warnings))


def subtitles_to_json(track: SubtitleTrack) -> dict[str, Any]:
    out = []
    for ln in track.lines:
        rec: dict[str, Any] = {"index": ln.index, "start_ms": ln.start, "end_ms": ln.end, "text": ln.text}
        if ln.global_id is not None:
            rec["global_id"] = str(ln.global_id)
        if ln.resolved_name is not None:
            rec["resolved_name"] = ln.resolved_name.to_json()
        out.append(rec)
    return {"duration_ms": track.duration, "lines": out}


def dump_subtitles(track: SubtitleTrack) -> bytes:
    return dump_json(subtitles_to_json(track))


def load_cuts(data: bytes | str, *, strict: bool = False) -> CutList:
    """Parse a cuts file. Duplicates collapse, order is restored, and cuts at
    exactly 0 or the duration are dropped with a warning."""
    warnings: list[str] = []
    doc = check_record(read_json(data, "cuts"), "cuts file", ["duration_ms", "cuts_ms"],
                       strict=strict, warnings=warnings)
    duration = check_time(doc["duration_ms"], "cuts file duration_ms")
    raw = [check_time(c, f"cut #{i}") for i, c in enumerate(check_list(doc["cuts_ms"], "cuts_ms"))]
    kept = []
    for c in sorted(set(raw)):
        if c > duration:
            raise ValidationError(f"cut {c} ms lies beyond duration_ms {duration}")
        if c in (0, duration):
            msg = f"boundary cut {c} ms dropped"
            logger.warning(msg)
            warnings.append(msg)
            continue
        kept.append(c)
    return CutList(tuple(kept), duration, tuple(warnings))


def dump_cuts(cuts: CutList) -> bytes:
    return dump_json({"duration_ms": cuts.duration, "cuts_ms": list(cuts.cuts)})


def load_cast(data: bytes | str, *, strict: bool = False) -> CastList:
    doc = check_record(read_json(data, "cast"), "cast file", ["members"], strict=strict)
    members = []
    for i, rec in enumerate(check_list(doc["members"], "cast file members")):
        check_record(rec, f"cast member #{i}", ["name", "photo"], strict=strict)
        members.append(CastMember(rec["name"], rec["photo"]))
    return CastList(tuple(members))


def dump_cast(cast: CastList) -> bytes:
    return dump_json({"members": [{"name": m.name, "photo": m.photo_ref} for m in cast]})
