"""Dialogue-aware clip segmentation.

Shot cuts that fall strictly inside a dialogue are discarded, then extra cuts
are inserted into the silence between dialogues so that each clip holds at
most two of them. Every cut produced here lies on a dialogue boundary or in a
silent gap, so no dialogue is ever split.
"""

from __future__ import annotations

import bisect
import logging
import random
from dataclasses import dataclass
from typing import Any

from storypipe.errors import ContractError, ValidationError
from storypipe.timeline import (
    CutList,
    SubtitleLine,
    SubtitleTrack,
    check_list,
    check_record,
    check_time,
    dump_json,
    read_json,
)

logger = logging.getLogger(__name__)

DIALOGUE_BUDGET = 2


@dataclass(frozen=True)
class SplitPolicy:
    """Where to place an inserted cut inside a silent gap."""

    mode: str = "midpoint"  # "midpoint" | "seeded_random"
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("midpoint", "seeded_random"):
            raise ValidationError(f"unknown split policy mode {self.mode!r}")
        if self.mode == "seeded_random" and self.seed is None:
            raise ValidationError("seeded_random split policy requires a seed")
        if self.seed is not None and not (-(2**63) <= self.seed < 2**64):
            raise ValidationError("seed must fit in 64 bits")


@dataclass(frozen=True)
class Clip:
    id: int
    start: int
    end: int
    dialogue_indices: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.start >= self.end:
            raise ValidationError(f"clip {self.id}: start {self.start} must be < end {self.end}")
        object.__setattr__(self, "dialogue_indices", tuple(sorted(self.dialogue_indices)))


@dataclass(frozen=True)
class ClipSet:
    clips: tuple[Clip, ...]
    duration: int
    fallback_flags: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "clips", tuple(self.clips))
        object.__setattr__(self, "fallback_flags", tuple(sorted(self.fallback_flags)))
        pos = 0
        for k, clip in enumerate(self.clips, start=1):
            if clip.id != k:
                raise ValidationError(f"clip ids must run 1..n in temporal order; found {clip.id} at {k}")
            if clip.start != pos:
                raise ValidationError(f"clip {clip.id} starts at {clip.start}, expected {pos}")
            pos = clip.end
        if self.clips and pos != self.duration:
            raise ValidationError(f"clips end at {pos}, expected duration {self.duration}")

    def __iter__(self):
        return iter(self.clips)

    def __len__(self) -> int:
        return len(self.clips)

    def cuts(self) -> CutList:
        return CutList(tuple(c.start for c in self.clips[1:]), self.duration)

    def clip_of(self) -> dict[int, int]:
        """Subtitle index -> owning clip id."""
        return {i: c.id for c in self.clips for i in c.dialogue_indices}


def _splits(cut: int, line: SubtitleLine) -> bool:
    return line.start < cut < line.end


def filter_cuts(cuts: CutList, track: SubtitleTrack) -> CutList:
    """Drop every cut lying strictly inside some dialogue interval."""
    if cuts.duration != track.duration:
        raise ValidationError(f"cut list duration {cuts.duration} != subtitle duration {track.duration}")
    kept = []
    for c in cuts:
        hit = next((ln for ln in track if _splits(c, ln)), None)
        if hit is not None:
            logger.debug("cut %d dropped: inside dialogue %d", c, hit.index)
            continue
        kept.append(c)
    return CutList(tuple(kept), cuts.duration, cuts.warnings)


def _segments(cuts: CutList) -> list[tuple[int, int]]:
    bounds = [0, *cuts.cuts, cuts.duration]
    return list(zip(bounds, bounds[1:]))


def _owner(line: SubtitleLine, starts: list[int]) -> int:
    # segment holding the dialogue's start
    return bisect.bisect_right(starts, line.start) - 1


def _pick(gap_start: int, gap_end: int, policy: SplitPolicy, rng: random.Random | None) -> int:
    if policy.mode == "seeded_random" and gap_end - gap_start >= 2:
        return rng.randint(gap_start + 1, gap_end - 1)
    return (gap_start + gap_end) // 2


def enforce_dialogue_budget(cuts: CutList, track: SubtitleTrack, policy: SplitPolicy = SplitPolicy()) -> CutList:
    """Insert cuts so that every segment holds at most two dialogues.

    Dialogues inside a segment are walked in (start, end, index) order. Once
    two have been collected and another follows, a cut goes into the gap
    between the latest end seen so far and the next start. When that gap is
    empty (overlapping speech) the walk continues and the next gap is tried;
    the resulting over-budget clip is flagged later by :func:`build_clips`.
    """
    if cuts.duration != track.duration:
        raise ContractError("cut list and subtitle track durations differ")
    for c in cuts:
        for ln in track:
            if _splits(c, ln):
                raise ContractError(f"cut {c} splits dialogue {ln.index}; run filter_cuts first")

    rng = random.Random(policy.seed) if policy.mode == "seeded_random" else None
    segments = _segments(cuts)
    starts = [a for a, _ in segments]
    per_segment: list[list[SubtitleLine]] = [[] for _ in segments]
    for ln in track:
        per_segment[_owner(ln, starts)].append(ln)

    added: list[int] = []
    for (seg_start, seg_end), lines in zip(segments, per_segment):
        if len(lines) <= DIALOGUE_BUDGET:
            continue
        count = 0
        reach = seg_start
        for cur, nxt in zip(lines, lines[1:]):
            count += 1
            reach = max(reach, cur.end)
            if count < DIALOGUE_BUDGET:
                continue
            if reach <= nxt.start:
                cut = _pick(reach, nxt.start, policy, rng)
                if seg_start < cut < seg_end:
                    added.append(cut)
                    count = 0
                    continue
            logger.info("no silent gap after dialogue %d in segment [%d,%d)", cur.index, seg_start, seg_end)

    merged = tuple(sorted(set(cuts.cuts) | set(added)))
    return CutList(merged, cuts.duration, cuts.warnings)


def build_clips(cuts: CutList, track: SubtitleTrack) -> ClipSet:
    """Turn cut points into clips and assign each dialogue to a clip.

    A dialogue is assigned to the clip containing its start. Clips holding
    more than two dialogues, or a dialogue that runs past the clip end, are
    flagged.
    """
    if cuts.duration != track.duration:
        raise ContractError("cut list and subtitle track durations differ")
    if cuts.duration == 0:
        return ClipSet((), 0)
    segments = _segments(cuts)
    starts = [a for a, _ in segments]
    members: list[list[int]] = [[] for _ in segments]
    flagged: set[int] = set()
    for ln in track:
        k = _owner(ln, starts)
        members[k].append(ln.index)
        if ln.end > segments[k][1]:
            flagged.add(k + 1)
    clips = []
    for k, ((a, b), idx) in enumerate(zip(segments, members), start=1):
        if len(idx) > DIALOGUE_BUDGET:
            flagged.add(k)
        clips.append(Clip(k, a, b, tuple(idx)))
    return ClipSet(tuple(clips), cuts.duration, tuple(sorted(flagged)))


def segment(cuts: CutList, track: SubtitleTrack, policy: SplitPolicy = SplitPolicy()) -> ClipSet:
    """Full segmentation: filter, enforce budget, build clips."""
    filtered = filter_cuts(cuts, track)
    return build_clips(enforce_dialogue_budget(filtered, track, policy), track)


# ---------------------------------------------------------------------------
# clips file
# ---------------------------------------------------------------------------


def clips_to_json(clips: ClipSet) -> dict[str, Any]:
    flags = set(clips.fallback_flags)
    return {
        "duration_ms": clips.duration,
        "clips": [
            {
                "id": c.id,
                "start_ms": c.start,
                "end_ms": c.end,
                "dialogue_indices": list(c.dialogue_indices),
                "flagged": c.id in flags,
            }
            for c in clips
        ],
    }


def dump_clips(clips: ClipSet) -> bytes:
    return dump_json(clips_to_json(clips))


def load_clips(data: bytes | str, *, strict: bool = False) -> ClipSet:
    doc = check_record(read_json(data, "clips"), "clips file", ["duration_ms", "clips"], strict=strict)
    duration = check_time(doc["duration_ms"], "clips file duration_ms")
    clips, flags = [], []
    for i, rec in enumerate(check_list(doc["clips"], "clips")):
        check_record(rec, f"clip record #{i}", ["id", "start_ms", "end_ms", "dialogue_indices"], ["flagged"],
                     strict=strict)
        clip = Clip(rec["id"], check_time(rec["start_ms"], f"clip {rec['id']}"),
                    check_time(rec["end_ms"], f"clip {rec['id']}"),
                    tuple(check_list(rec["dialogue_indices"], f"clip {rec['id']} dialogue_indices")))
        clips.append(clip)
        if rec.get("flagged"):
            flags.append(clip.id)
    return ClipSet(tuple(clips), duration, tuple(flags))
