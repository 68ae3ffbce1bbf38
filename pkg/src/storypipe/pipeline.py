"""End-to-end orchestration with content-addressed stage caching.

Stages run in a fixed order, each reading the previous stage's artifact from
the output directory:

    segment -> link -> identify -> describe -> concat -> evaluate

A stage is skipped when its cache key (stage parameters plus the digests of
its inputs) matches the previous run's manifest and its outputs are still on
disk with the recorded digests.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping

import filelock

from storypipe import __version__
from storypipe.backend import Backend, DescribeRequest, clip_lines, media_fragment, open_backend
from storypipe.errors import BackendError, StorypipeError, ValidationError
from storypipe.evaluator import (
    concat_descriptions,
    dump_descriptions,
    dump_report,
    load_descriptions,
    load_qa,
    score_qa,
)
from storypipe.global_decoder import apply_names, decode_assignments, dump_assignment
from storypipe.segmenter import SplitPolicy, dump_clips, load_clips, segment
from storypipe.speaker_linker import DEFAULT_THRESHOLD, assign_global_ids, cluster, load_embeddings
from storypipe.timeline import (
    dump_json,
    dump_subtitles,
    load_cast,
    load_cuts,
    load_subtitles,
    read_json,
)

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
LOCK = ".storypipe.lock"
AUDIT = "audit.jsonl"

_PATH_KEYS = ("subtitles", "cuts", "cast", "embeddings", "qa")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def synthetic_fixture_dir() -> Path:
    """Directory of the bundled synthetic three-minute example."""
    return Path(str(resources.files("storypipe") / "data" / "synthetic"))


@dataclass
class PipelineConfig:
    subtitles: Path
    cuts: Path
    cast: Path
    embeddings: Path
    output_dir: Path
    qa: Path | None = None
    policy: SplitPolicy = field(default_factory=SplitPolicy)
    threshold: float = DEFAULT_THRESHOLD
    backend: str | None = None
    strict: bool = False
    local_only: bool = False
    video_ref: str = "media:video"
    force: bool = False
    audit: bool = False
    max_workers: int = 4

    def validate(self) -> None:
        for key in _PATH_KEYS:
            p = getattr(self, key)
            if p is not None and not Path(p).is_file():
                raise ValidationError(f"config {key}: file not found: {p}")
        if not -1.0 <= self.threshold <= 1.0:
            raise ValidationError(f"config threshold {self.threshold} outside [-1, 1]")

    def to_json(self) -> dict[str, Any]:
        return {
            **{k: (str(getattr(self, k)) if getattr(self, k) is not None else None) for k in _PATH_KEYS},
            "output_dir": str(self.output_dir),
            "policy": self.policy.mode,
            "seed": self.policy.seed,
            "threshold": self.threshold,
            "backend": self.backend,
            "strict": self.strict,
            "local_only": self.local_only,
            "video_ref": self.video_ref,
            "audit": self.audit,
            "max_workers": self.max_workers,
        }

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any], base_dir: Path | None = None,
                     overrides: Mapping[str, Any] | None = None) -> PipelineConfig:
        """Build a config; ``overrides`` (non-``None`` values) beat ``doc``.

        Relative paths in ``doc`` resolve against ``base_dir``; override
        paths are taken as given.
        """
        path_keys = set(_PATH_KEYS) | {"output_dir"}
        merged = {}
        for k, v in doc.items():
            if k in path_keys and v is not None and base_dir is not None and not Path(v).is_absolute():
                v = base_dir / v
            merged[k] = v
        merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
        known = path_keys | {"policy", "seed", "threshold", "backend", "strict",
                             "local_only", "video_ref", "force", "audit", "max_workers"}
        unknown = sorted(set(merged) - known)
        if unknown:
            raise ValidationError(f"config: unknown field(s) {', '.join(unknown)}")
        missing = [k for k in ("subtitles", "cuts", "cast", "embeddings", "output_dir") if not merged.get(k)]
        if missing:
            raise ValidationError(f"config: missing field(s) {', '.join(missing)}")

        def path(value):
            return None if value is None else Path(value)

        mode = merged.get("policy", "midpoint")
        mode = "seeded_random" if mode == "random" else mode
        seed = merged.get("seed")
        return cls(
            subtitles=path(merged["subtitles"]),
            cuts=path(merged["cuts"]),
            cast=path(merged["cast"]),
            embeddings=path(merged["embeddings"]),
            qa=path(merged.get("qa")),
            output_dir=path(merged["output_dir"]),
            policy=SplitPolicy(mode, seed if mode == "seeded_random" else None),
            threshold=float(merged.get("threshold", DEFAULT_THRESHOLD)),
            backend=merged.get("backend"),
            strict=bool(merged.get("strict", False)),
            local_only=bool(merged.get("local_only", False)),
            video_ref=merged.get("video_ref", "media:video"),
            force=bool(merged.get("force", False)),
            audit=bool(merged.get("audit", False)),
            max_workers=int(merged.get("max_workers", 4)),
        )

    @classmethod
    def from_file(cls, path: str | os.PathLike, overrides: Mapping[str, Any] | None = None) -> PipelineConfig:
        path = Path(path)
        doc = read_json(path.read_bytes(), "config")
        if not isinstance(doc, dict):
            raise ValidationError("config file must hold an object")
        return cls.from_mapping(doc, path.parent, overrides)


@dataclass
class StageRecord:
    name: str
    key: str
    inputs: dict[str, str]
    outputs: dict[str, str] = field(default_factory=dict)
    cache_hit: bool = False
    seconds: float = 0.0
    status: str = "ok"

    def to_json(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "key": self.key,
            "status": self.status,
            "cache_hit": self.cache_hit,
            "seconds": round(self.seconds, 6),
            "inputs": self.inputs,
            "outputs": self.outputs,
        }


@dataclass
class RunManifest:
    config_digest: str
    config: dict[str, Any]
    stages: list[StageRecord] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    status: str = "ok"
    failed_stage: str | None = None
    error: str | None = None
    tool_version: str = __version__
    extra: dict[str, str] = field(default_factory=dict)

    @property
    def artifacts(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for st in self.stages:
            out.update(st.outputs)
        out.update(self.extra)
        return dict(sorted(out.items()))

    def stage(self, name: str) -> StageRecord:
        return next(s for s in self.stages if s.name == name)

    def to_json(self) -> dict[str, Any]:
        return {
            "tool": "storypipe",
            "tool_version": self.tool_version,
            "status": self.status,
            "failed_stage": self.failed_stage,
            "error": self.error,
            "ablation": "local_only (no global decoding)" if self.config.get("local_only") else None,
            "config_digest": self.config_digest,
            "config": self.config,
            "stages": [s.to_json() for s in self.stages],
            "artifacts": self.artifacts,
            "warnings": self.warnings,
        }


def _write(path: Path, data: bytes) -> str:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return sha256_bytes(data)


class PipelineRunner:
    def __init__(self, config: PipelineConfig, backend: Backend | None = None):
        config.validate()
        self.config = config
        self.out = Path(config.output_dir)
        self._backend = backend
        cfg_json = config.to_json()
        self.manifest = RunManifest(sha256_bytes(dump_json(cfg_json)), cfg_json)
        self._previous = self._load_previous()

    def _load_previous(self) -> dict[str, dict[str, Any]]:
        path = self.out / MANIFEST
        if not path.is_file():
            return {}
        try:
            doc = json.loads(path.read_text("utf-8"))
            return {s["name"]: s for s in doc.get("stages", []) if s.get("status") == "ok"}
        except (ValueError, KeyError, TypeError):
            return {}

    @property
    def backend(self) -> Backend:
        if self._backend is None:
            audit = self.out / AUDIT if self.config.audit else None
            self._backend = open_backend(self.config.backend, audit_log=audit, max_in_flight=self.config.max_workers)
        return self._backend

    # -- stage plumbing -----------------------------------------------------

    def _stage(self, name: str, params: dict[str, Any], inputs: Mapping[str, Path], outputs: list[str],
               body: Callable[[], dict[str, bytes]]) -> None:
        in_digests = {role: sha256_file(p) for role, p in sorted(inputs.items())}
        key = sha256_bytes(dump_json({"stage": name, "params": params, "inputs": in_digests,
                                      "version": __version__}))
        record = StageRecord(name, key, in_digests)
        self.manifest.stages.append(record)
        prev = self._previous.get(name)
        if not self.config.force and prev and prev.get("key") == key and self._outputs_intact(prev, outputs):
            record.outputs = dict(prev["outputs"])
            record.cache_hit = True
            logger.info("stage %s: cache hit", name)
            return
        t0 = time.perf_counter()
        try:
            produced = body()
        except StorypipeError:
            record.status = "failed"
            record.seconds = time.perf_counter() - t0
            raise
        for rel in outputs:
            record.outputs[rel] = _write(self.out / rel, produced[rel])
        record.seconds = time.perf_counter() - t0
        logger.info("stage %s: done in %.3fs", name, record.seconds)

    def _outputs_intact(self, prev: Mapping[str, Any], outputs: list[str]) -> bool:
        recorded = prev.get("outputs", {})
        for rel in outputs:
            p = self.out / rel
            if rel not in recorded or not p.is_file() or sha256_file(p) != recorded[rel]:
                return False
        return True

    # -- stages ----------------------------------------------------------------

    def _segment(self) -> dict[str, bytes]:
        cfg = self.config
        track = load_subtitles(cfg.subtitles.read_bytes(), strict=cfg.strict)
        cuts = load_cuts(cfg.cuts.read_bytes(), strict=cfg.strict)
        self.manifest.warnings += [f"subtitles: {w}" for w in track.warnings]
        self.manifest.warnings += [f"cuts: {w}" for w in cuts.warnings]
        clips = segment(cuts, track, cfg.policy)
        if clips.fallback_flags:
            self.manifest.warnings.append(f"segment: clips over the dialogue budget: {list(clips.fallback_flags)}")
        return {"clips.json": dump_clips(clips)}

    def _link(self) -> dict[str, bytes]:
        cfg = self.config
        track = load_subtitles(cfg.subtitles.read_bytes(), strict=cfg.strict)
        embeddings = load_embeddings(cfg.embeddings.read_bytes(), strict=cfg.strict)
        assignment = cluster(embeddings, cfg.threshold, track)
        return {"subs_ids.json": dump_subtitles(assign_global_ids(track, assignment))}

    def _identify(self) -> dict[str, bytes]:
        cfg = self.config
        clips = load_clips((self.out / "clips.json").read_bytes())
        track = load_subtitles((self.out / "subs_ids.json").read_bytes())
        cast = load_cast(cfg.cast.read_bytes(), strict=cfg.strict)
        try:
            assignment = decode_assignments(None, clips, track, cast, self.backend, video_ref=cfg.video_ref,
                                            local_only=cfg.local_only, max_workers=cfg.max_workers)
        except BackendError as exc:
            if exc.partial is not None:
                self.manifest.extra["assignment.partial.json"] = _write(
                    self.out / "assignment.partial.json", dump_assignment(exc.partial))
            raise
        self.manifest.warnings += [f"identify: {w}" for w in assignment.warnings]
        return {
            "assignment.json": dump_assignment(assignment),
            "subs_named.json": dump_subtitles(apply_names(track, assignment)),
        }

    def _describe(self) -> dict[str, bytes]:
        cfg = self.config
        clips = load_clips((self.out / "clips.json").read_bytes())
        track = load_subtitles((self.out / "subs_named.json").read_bytes())
        cast = load_cast(cfg.cast.read_bytes(), strict=cfg.strict)
        responses = describe_clips(clips, track, cast, self.backend, video_ref=cfg.video_ref,
                                   max_workers=cfg.max_workers)
        return {"descriptions.json": dump_descriptions(responses)}

    def _concat(self) -> dict[str, bytes]:
        clips = load_clips((self.out / "clips.json").read_bytes())
        responses = load_descriptions((self.out / "descriptions.json").read_bytes())
        text = concat_descriptions(clips, responses)
        return {"description.txt": (text + "\n" if text else "").encode("utf-8")}

    def _evaluate(self) -> dict[str, bytes]:
        cfg = self.config
        description = (self.out / "description.txt").read_text("utf-8").rstrip("\n")
        items = load_qa(cfg.qa.read_bytes(), strict=cfg.strict)
        try:
            report = score_qa(description, items, self.backend, max_workers=cfg.max_workers)
        except BackendError as exc:
            if exc.partial is not None:
                self.manifest.extra["report.partial.json"] = _write(
                    self.out / "report.partial.json", dump_report(exc.partial))
            raise
        return {"report.json": dump_report(report)}

    # -- driver ----------------------------------------------------------------

    def run(self) -> RunManifest:
        self.out.mkdir(parents=True, exist_ok=True)
        lock = filelock.FileLock(str(self.out / LOCK), timeout=0)
        try:
            lock.acquire()
        except filelock.Timeout as exc:
            raise StorypipeError(f"output directory {self.out} is locked by another run") from exc
        try:
            self._run_stages()
        except StorypipeError as exc:
            failed = next((s for s in self.manifest.stages if s.status == "failed"), None)
            self.manifest.status = "failed"
            self.manifest.failed_stage = failed.name if failed else None
            self.manifest.error = f"{type(exc).__name__}: {exc}"
            raise
        finally:
            self._write_manifest()
            lock.release()
        return self.manifest

    def _write_manifest(self) -> None:
        audit = self.out / AUDIT
        if self.config.audit and audit.is_file():
            self.manifest.extra[AUDIT] = sha256_file(audit)
        doc = self.manifest.to_json()
        _write(self.out / MANIFEST, dump_json(doc))

    def _run_stages(self) -> None:
        cfg = self.config
        out = self.out
        backend_id = self.backend.describe_uri()
        self._stage("segment", {"policy": cfg.policy.mode, "seed": cfg.policy.seed, "strict": cfg.strict},
                    {"subtitles": cfg.subtitles, "cuts": cfg.cuts}, ["clips.json"], self._segment)
        self._stage("link", {"threshold": cfg.threshold, "strict": cfg.strict},
                    {"subtitles": cfg.subtitles, "embeddings": cfg.embeddings}, ["subs_ids.json"], self._link)
        self._stage("identify", {"backend": backend_id, "local_only": cfg.local_only, "video_ref": cfg.video_ref},
                    {"clips": out / "clips.json", "subs_ids": out / "subs_ids.json", "cast": cfg.cast},
                    ["assignment.json", "subs_named.json"], self._identify)
        self._stage("describe", {"backend": backend_id, "video_ref": cfg.video_ref},
                    {"clips": out / "clips.json", "subs_named": out / "subs_named.json", "cast": cfg.cast},
                    ["descriptions.json"], self._describe)
        self._stage("concat", {}, {"clips": out / "clips.json", "descriptions": out / "descriptions.json"},
                    ["description.txt"], self._concat)
        if cfg.qa is not None:
            self._stage("evaluate", {"backend": backend_id},
                        {"description": out / "description.txt", "qa": cfg.qa}, ["report.json"], self._evaluate)


def describe_clips(clips, track, cast, backend: Backend, *, video_ref: str = "media:video",
                   max_workers: int = 4) -> dict:
    """One description request per clip, run concurrently, keyed by clip id."""
    lines = track.lines

    def one(clip):
        req = DescribeRequest(clip.id, media_fragment(video_ref, clip.start, clip.end), clip.start, clip.end,
                              cast, clip_lines(lines, clip.dialogue_indices))
        return clip.id, backend.generate_description(req)

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        return dict(sorted(pool.map(one, clips)))


def run_pipeline(config: PipelineConfig, backend: Backend | None = None) -> RunManifest:
    return PipelineRunner(config, backend).run()
