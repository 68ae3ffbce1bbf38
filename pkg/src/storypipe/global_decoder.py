"""Global name decoding for speaker IDs.

For a speaker ID appearing in several clips, the per-clip log-probability of
each candidate name (the sum of its token log-probs under forced decoding) is
summed across those clips, and the candidate with the largest total wins.
IDs are decoded one at a time in ascending order; when scoring ID ``x`` in a
clip, the names already chosen for lower IDs in that clip are passed along as
fixed context.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

from storypipe.backend import Backend, ScoreRequest, media_fragment
from storypipe.errors import BackendError, ValidationError
from storypipe.segmenter import Clip, ClipSet
from storypipe.timeline import (
    OTHERS,
    CastList,
    GlobalSpeakerId,
    ResolvedName,
    SubtitleTrack,
    check_list,
    check_record,
    dump_json,
    read_json,
)

logger = logging.getLogger(__name__)


def candidate_set(cast: CastList) -> tuple[str, ...]:
    """Cast names in file order followed by the reserved ``Others``."""
    return (*cast.names(), OTHERS)


def clip_name_logprob(token_logprobs: Sequence[float]) -> float:
    """Log-probability of a whole name: the sum of its token log-probs."""
    if len(token_logprobs) == 0:
        raise ValidationError("a candidate name needs at least one token log-prob")
    for v in token_logprobs:
        if not math.isfinite(v) or v > 0:
            raise ValidationError(f"token log-prob {v} must be finite and <= 0")
    return math.fsum(token_logprobs)


@dataclass(frozen=True)
class ClipNameScore:
    clip_id: int
    global_id: GlobalSpeakerId
    scores: Mapping[str, float]
    token_logprobs: Mapping[str, tuple[float, ...]] | None = None

    def __post_init__(self) -> None:
        if self.token_logprobs is not None:
            for cand, toks in self.token_logprobs.items():
                if self.scores.get(cand) != clip_name_logprob(toks):
                    raise ValidationError(f"clip {self.clip_id}: score for {cand!r} is not the sum of its tokens")

    @classmethod
    def from_tokens(cls, clip_id: int, global_id: GlobalSpeakerId,
                    token_logprobs: Mapping[str, Sequence[float]]) -> ClipNameScore:
        toks = {c: tuple(v) for c, v in token_logprobs.items()}
        return cls(clip_id, global_id, {c: clip_name_logprob(v) for c, v in toks.items()}, toks)


@dataclass(frozen=True)
class GlobalNameScore:
    global_id: GlobalSpeakerId
    totals: Mapping[str, float]
    clip_scores: tuple[ClipNameScore, ...] = field(default=(), compare=False)


def global_name_scores(global_id: GlobalSpeakerId, clip_scores: Sequence[ClipNameScore]) -> GlobalNameScore:
    """Sum each candidate's per-clip log-probability over every clip."""
    if not clip_scores:
        raise ValidationError(f"{global_id}: no clip scores to aggregate")
    ordered = sorted(clip_scores, key=lambda s: s.clip_id)
    names = list(ordered[0].scores)
    for s in ordered:
        if s.global_id != global_id:
            raise ValidationError(f"clip {s.clip_id} scores {s.global_id}, expected {global_id}")
        if set(s.scores) != set(names):
            raise ValidationError(f"clip {s.clip_id}: candidate set differs from clip {ordered[0].clip_id}")
    totals = {c: math.fsum(s.scores[c] for s in ordered) for c in names}
    return GlobalNameScore(global_id, totals, tuple(ordered))


def _rank_key(name: str, score: float) -> tuple:
    # max score first, then lexicographically smallest, Others after any cast name
    return (-score, name == OTHERS, name)


def best_candidate(scores: Mapping[str, float]) -> str:
    return min(scores, key=lambda c: _rank_key(c, scores[c]))


@dataclass
class Assignment:
    mapping: dict[GlobalSpeakerId, ResolvedName] = field(default_factory=dict)
    audit: dict[GlobalSpeakerId, GlobalNameScore] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    mode: str = "global"

    def to_json(self) -> dict[str, Any]:
        rows = []
        for gid in sorted(self.mapping):
            name = self.mapping[gid]
            audit = self.audit.get(gid)
            rows.append({
                "global_id": str(gid),
                "kind": name.kind,
                "name": name.text,
                "totals": dict(audit.totals) if audit else {},
            })
        return {"mode": self.mode, "assignments": rows, "warnings": list(self.warnings)}


def dump_assignment(assignment: Assignment) -> bytes:
    return dump_json(assignment.to_json())


def load_assignment(data: bytes | str) -> Assignment:
    doc = check_record(read_json(data, "assignment"), "assignment file", ["assignments"], ["mode", "warnings"])
    out = Assignment(mode=doc.get("mode", "global"), warnings=list(doc.get("warnings", [])))
    for i, rec in enumerate(check_list(doc["assignments"], "assignments")):
        check_record(rec, f"assignment #{i}", ["global_id", "kind", "name"], ["totals"])
        gid = GlobalSpeakerId.parse(rec["global_id"])
        if gid in out.mapping:
            raise ValidationError(f"assignment file lists {gid} twice")
        out.mapping[gid] = ResolvedName(rec["kind"], rec["name"])
        if rec.get("totals"):
            out.audit[gid] = GlobalNameScore(gid, dict(rec["totals"]))
    return out


def _clips_by_id(clips: ClipSet, track: SubtitleTrack) -> dict[GlobalSpeakerId, list[Clip]]:
    lines = track.by_index()
    found: dict[GlobalSpeakerId, list[Clip]] = {}
    for clip in clips:
        seen = set()
        for idx in clip.dialogue_indices:
            if idx not in lines:
                raise ValidationError(f"clip {clip.id} references unknown subtitle {idx}")
            gid = lines[idx].global_id
            if gid is None:
                raise ValidationError(f"subtitle {idx} has no global speaker id; run linking first")
            if gid not in seen:
                seen.add(gid)
                found.setdefault(gid, []).append(clip)
    return found


class GlobalDecoder:
    """Sequential ascending-ID decoder with per-ID parallel clip scoring.

    ``local_only`` replaces the global sum with a per-clip argmax followed by
    a majority vote across clips (ties go to the name first chosen in the
    earliest clip).
    """

    def __init__(
        self,
        clips: ClipSet,
        track: SubtitleTrack,
        cast: CastList,
        backend: Backend,
        *,
        video_ref: str = "media:video",
        local_only: bool = False,
        max_workers: int = 4,
    ):
        self.clips = clips
        self.track = track
        self.cast = cast
        self.backend = backend
        self.video_ref = video_ref
        self.local_only = local_only
        self.max_workers = max_workers
        self.candidates = candidate_set(cast)
        self.occurrences = _clips_by_id(clips, track)
        self._lines = track.by_index()

    def _request(self, clip: Clip, gid: GlobalSpeakerId, decided: Mapping[GlobalSpeakerId, ResolvedName]) -> ScoreRequest:
        lines = tuple(sorted((self._lines[i] for i in clip.dialogue_indices), key=lambda ln: ln.sort_key))
        present = {ln.global_id for ln in lines}
        fixed = {g: decided[g].text for g in sorted(present) if g < gid and g in decided}
        return ScoreRequest(
            clip_id=clip.id,
            clip_media_ref=media_fragment(self.video_ref, clip.start, clip.end),
            cast=self.cast,
            subtitles=lines,
            fixed_assignments=fixed,
            target_id=gid,
            candidates=self.candidates,
        )

    def _score_clips(self, requests: Sequence[ScoreRequest], gid: GlobalSpeakerId) -> list[ClipNameScore]:
        def one(req: ScoreRequest) -> ClipNameScore:
            resp = self.backend.score_candidates(req)
            return ClipNameScore.from_tokens(req.clip_id, gid, resp.token_logprobs)

        if self.max_workers <= 1 or len(requests) == 1:
            results = [one(r) for r in requests]
        else:
            with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
                results = list(pool.map(one, requests))
        return sorted(results, key=lambda s: s.clip_id)

    def decide(self, gid: GlobalSpeakerId, clip_scores: Sequence[ClipNameScore]) -> tuple[str, GlobalNameScore]:
        audit = global_name_scores(gid, clip_scores)
        if not self.local_only:
            return best_candidate(audit.totals), audit
        return local_vote(clip_scores), audit

    def decode(self, ids: Iterable[GlobalSpeakerId] | None = None) -> Assignment:
        ids = sorted(self.occurrences if ids is None else set(ids))
        result = Assignment(mode="local_only" if self.local_only else "global")
        for gid in ids:
            clips = self.occurrences.get(gid)
            if not clips:
                raise ValidationError(f"{gid} does not occur in any clip")
            requests = [self._request(c, gid, result.mapping) for c in clips]
            try:
                scores = self._score_clips(requests, gid)
                choice, audit = self.decide(gid, scores)
                result.audit[gid] = audit
                if choice == OTHERS:
                    name = resolve_descriptive_name(gid, scores, requests, self.backend, result.warnings)
                else:
                    name = ResolvedName.cast(choice)
            except BackendError as exc:
                exc.global_id, exc.partial = gid, result
                raise
            result.mapping[gid] = name
            logger.info("%s -> %s", gid, name.text)
        return result


def local_vote(clip_scores: Sequence[ClipNameScore]) -> str:
    """Majority vote over per-clip argmax names; ties go to the earliest clip's pick."""
    ordered = sorted(clip_scores, key=lambda s: s.clip_id)
    picks = [best_candidate(s.scores) for s in ordered]
    counts = Counter(picks)
    top = max(counts.values())
    return next(p for p in picks if counts[p] == top)


def decode_assignments(
    ids: Iterable[GlobalSpeakerId] | None,
    clips: ClipSet,
    track: SubtitleTrack,
    cast: CastList,
    scorer: Backend,
    **kwargs,
) -> Assignment:
    """Decode names for ``ids`` (all IDs in the clips when ``None``)."""
    return GlobalDecoder(clips, track, cast, scorer, **kwargs).decode(ids)


def resolve_descriptive_name(
    global_id: GlobalSpeakerId,
    clip_scores: Sequence[ClipNameScore],
    requests: Sequence[ScoreRequest],
    generator: Backend,
    warnings: list[str] | None = None,
) -> ResolvedName:
    """Ask for a free-text label from the clip most confident in ``Others``."""
    by_clip = {r.clip_id: r for r in requests}
    best = min(clip_scores, key=lambda s: (-s.scores[OTHERS], s.clip_id))
    text = generator.speaker_name(by_clip[best.clip_id]).strip()
    if not text:
        msg = f"{global_id}: empty descriptive name from clip {best.clip_id}; using placeholder"
        logger.warning(msg)
        if warnings is not None:
            warnings.append(msg)
        return ResolvedName.descriptive(f"Unknown speaker {global_id}")
    return ResolvedName.descriptive(text)


def apply_names(track: SubtitleTrack, assignment: Assignment) -> SubtitleTrack:
    """Attach resolved names to every line that carries a global ID."""
    out = []
    for ln in track:
        if ln.global_id is not None:
            if ln.global_id not in assignment.mapping:
                raise ValidationError(f"no name decoded for {ln.global_id} (subtitle {ln.index})")
            ln = replace(ln, resolved_name=assignment.mapping[ln.global_id])
        out.append(ln)
    return track.replace_lines(out)
