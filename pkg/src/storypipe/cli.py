"""Command-line entry point: ``storypipe <subcommand> ...``.

Exit codes: 0 success, 2 invalid input, 3 backend failure, 4 fixture miss.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from storypipe import __version__
from storypipe.backend import ENV_BACKEND, open_backend
from storypipe.errors import (
    BackendError,
    ContractError,
    FixtureMissError,
    ParseError,
    StorypipeError,
    ValidationError,
)
from storypipe.evaluator import concat_descriptions, dump_descriptions, dump_report, load_qa, score_qa
from storypipe.global_decoder import apply_names, decode_assignments, dump_assignment
from storypipe.pipeline import PipelineConfig, describe_clips, run_pipeline, synthetic_fixture_dir
from storypipe.segmenter import SplitPolicy, dump_clips, load_clips, segment
from storypipe.speaker_linker import (
    DEFAULT_THRESHOLD,
    assign_global_ids,
    cluster,
    dump_sweep,
    load_embeddings,
    load_pairs,
    pair_similarities,
    sweep_thresholds,
    threshold_grid,
)
from storypipe.timeline import dump_subtitles, load_cast, load_cuts, load_subtitles, read_json

log = logging.getLogger("storypipe")

EXIT_OK, EXIT_ERROR, EXIT_VALIDATION, EXIT_BACKEND, EXIT_FIXTURE = 0, 1, 2, 3, 4


def _read(path: str | Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc.strerror}") from exc


def _write(path: str | Path, data: bytes) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    log.info("wrote %s", path)


def _config_doc(args: argparse.Namespace) -> dict[str, Any]:
    if not getattr(args, "config", None):
        return {}
    doc = read_json(_read(args.config), "config")
    if not isinstance(doc, dict):
        raise ValidationError("config file must hold an object")
    return doc


def _setting(args: argparse.Namespace, name: str, default: Any = None) -> Any:
    """flag > config file > default."""
    value = getattr(args, name, None)
    if value is not None:
        return value
    return _config_doc(args).get(name, default)


def _backend(args: argparse.Namespace):
    uri = _setting(args, "backend")
    seed = getattr(args, "seed", None)
    if uri == "mock" and seed is not None:
        uri = f"mock:{seed}"
    return open_backend(uri, audit_log=getattr(args, "audit_log", None))


def _policy(args: argparse.Namespace) -> SplitPolicy:
    mode = _setting(args, "policy", "midpoint")
    mode = "seeded_random" if mode == "random" else mode
    seed = _setting(args, "seed")
    return SplitPolicy(mode, seed if mode == "seeded_random" else None)


# -- subcommands ---------------------------------------------------------------


def cmd_segment(args: argparse.Namespace) -> int:
    strict = bool(_setting(args, "strict", False))
    track = load_subtitles(_read(args.subs), strict=strict)
    cuts = load_cuts(_read(args.cuts), strict=strict)
    clips = segment(cuts, track, _policy(args))
    _write(args.output, dump_clips(clips))
    if clips.fallback_flags:
        log.warning("clips over the dialogue budget: %s", list(clips.fallback_flags))
    return EXIT_OK


def cmd_link(args: argparse.Namespace) -> int:
    strict = bool(_setting(args, "strict", False))
    track = load_subtitles(_read(args.subs), strict=strict)
    embeddings = load_embeddings(_read(args.embeddings), strict=strict)
    threshold = float(_setting(args, "threshold", DEFAULT_THRESHOLD))
    assignment = cluster(embeddings, threshold, track)
    _write(args.output, dump_subtitles(assign_global_ids(track, assignment)))
    log.info("%d utterances -> %d speakers at threshold %.2f",
             len(assignment.mapping), len(assignment.clusters()), threshold)
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    pairs = load_pairs(_read(args.pairs))
    embeddings = load_embeddings(_read(args.embeddings))
    rows = sweep_thresholds(pairs, pair_similarities(pairs, embeddings),
                            threshold_grid(args.start, args.stop, args.step))
    _write(args.output, dump_sweep(rows))
    print(f"{'threshold':>9} {'pair_acc':>8} {'precision':>9} {'recall':>7} {'f1':>6}")
    for r in rows:
        print(f"{r.threshold:9.2f} {r.accuracy:8.3f} {r.precision:9.3f} {r.recall:7.3f} {r.f1:6.3f}")
    return EXIT_OK


def cmd_identify(args: argparse.Namespace) -> int:
    strict = bool(_setting(args, "strict", False))
    clips = load_clips(_read(args.clips))
    track = load_subtitles(_read(args.subs_ids), strict=strict)
    cast = load_cast(_read(args.cast), strict=strict)
    assignment = decode_assignments(None, clips, track, cast, _backend(args),
                                    local_only=args.local_only, video_ref=args.video_ref)
    _write(args.output, dump_assignment(assignment))
    if args.named_subs:
        _write(args.named_subs, dump_subtitles(apply_names(track, assignment)))
    for gid, name in sorted(assignment.mapping.items()):
        print(f"{gid}\t{name.kind}\t{name.text}")
    return EXIT_OK


def cmd_describe(args: argparse.Namespace) -> int:
    strict = bool(_setting(args, "strict", False))
    clips = load_clips(_read(args.clips))
    track = load_subtitles(_read(args.subs_named), strict=strict)
    cast = load_cast(_read(args.cast), strict=strict)
    responses = describe_clips(clips, track, cast, _backend(args), video_ref=args.video_ref)
    _write(args.output, dump_descriptions(responses))
    if args.text:
        text = concat_descriptions(clips, responses)
        _write(args.text, (text + "\n" if text else "").encode("utf-8"))
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    description = _read(args.description).decode("utf-8").rstrip("\n")
    items = load_qa(_read(args.qa), strict=bool(_setting(args, "strict", False)))
    report = score_qa(description, items, _backend(args))
    _write(args.output, dump_report(report))
    print(report.summary())
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    overrides = {
        "output_dir": args.output,
        "backend": args.backend,
        "seed": args.seed,
        "threshold": args.threshold,
        "policy": args.policy,
        "strict": True if args.strict else None,
        "local_only": True if args.local_only else None,
        "force": True if args.force else None,
        "audit": True if args.audit else None,
    }
    if args.backend == "mock" and args.seed is not None:
        overrides["backend"] = f"mock:{args.seed}"
    if args.demo:
        config_path = synthetic_fixture_dir() / "config.json"
    elif args.config:
        config_path = Path(args.config)
    else:
        raise ValidationError("run needs --config or --demo")
    config = PipelineConfig.from_file(config_path, overrides)
    manifest = run_pipeline(config)
    for st in manifest.stages:
        print(f"{st.name:<9} {'cached' if st.cache_hit else 'ran':<6} {st.seconds:8.3f}s")
    report = Path(config.output_dir) / "report.json"
    if "report.json" in manifest.artifacts and report.is_file():
        doc = json.loads(report.read_text("utf-8"))
        print(f"QA accuracy: {doc['overall']['accuracy']:.3f}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config file (JSON)")
    common.add_argument("--backend", help=f"backend URI (mock:<seed>, scripted:<file>, http://...); "
                                          f"defaults to ${ENV_BACKEND}")
    common.add_argument("--seed", type=int, help="seed for random split policy and 'mock' backend")
    common.add_argument("--force", action="store_true", help="ignore cached stage outputs")
    common.add_argument("--strict", action="store_true", default=None, help="reject unknown fields in input files")
    common.add_argument("--audit-log", help="append every backend request/response to this file")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="storypipe", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"storypipe {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", parents=[common], help="split the timeline into dialogue-safe clips")
    p.add_argument("--cuts", required=True)
    p.add_argument("--subs", required=True)
    p.add_argument("--policy", choices=["midpoint", "random"])
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("link", parents=[common], help="assign global speaker IDs by embedding clustering")
    p.add_argument("--subs", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_link)

    p = sub.add_parser("sweep", parents=[common], help="pair-classification metrics over thresholds")
    p.add_argument("--pairs", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--from", dest="start", type=float, default=0.5)
    p.add_argument("--to", dest="stop", type=float, default=1.0)
    p.add_argument("--step", type=float, default=0.05)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("identify", parents=[common], help="decode a name for every global speaker ID")
    p.add_argument("--clips", required=True)
    p.add_argument("--subs-ids", required=True)
    p.add_argument("--cast", required=True)
    p.add_argument("--local-only", action="store_true", help="per-clip majority vote instead of global decoding")
    p.add_argument("--video-ref", default="media:video")
    p.add_argument("--named-subs", help="also write subtitles annotated with resolved names")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("describe", parents=[common], help="generate per-clip descriptions")
    p.add_argument("--clips", required=True)
    p.add_argument("--subs-named", required=True)
    p.add_argument("--cast", required=True)
    p.add_argument("--video-ref", default="media:video")
    p.add_argument("--text", help="also write the concatenated mm:ss~mm:ss description")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("evaluate", parents=[common], help="multiple-choice QA accuracy of a description")
    p.add_argument("--description", required=True)
    p.add_argument("--qa", required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", parents=[common], help="run every stage from one config")
    p.add_argument("--demo", action="store_true", help="use the bundled synthetic fixture")
    p.add_argument("--threshold", type=float)
    p.add_argument("--policy", choices=["midpoint", "random"])
    p.add_argument("--local-only", action="store_true")
    p.add_argument("--audit", action="store_true", help="write audit.jsonl into the output directory")
    p.add_argument("-o", "--output", help="output directory (overrides config)")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except FixtureMissError as exc:
        log.error("%s", exc)
        return EXIT_FIXTURE
    except BackendError as exc:
        log.error("backend: %s", exc)
        return EXIT_BACKEND
    except (ParseError, ValidationError, ContractError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_VALIDATION
    except StorypipeError as exc:
        log.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
