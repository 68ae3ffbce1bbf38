import json
import shutil
from pathlib import Path

import filelock
import pytest

from storypipe import cli
from storypipe.backend import ScriptedBackend
from storypipe.errors import BackendError, StorypipeError, ValidationError
from storypipe.pipeline import LOCK, MANIFEST, PipelineConfig, run_pipeline, sha256_file, synthetic_fixture_dir

FIXTURE = synthetic_fixture_dir()
ARTIFACTS = ["assignment.json", "clips.json", "description.txt", "descriptions.json",
             "report.json", "subs_ids.json", "subs_named.json"]

# sha256 of every artifact of `run --demo` (seeded mock backend, seed 42)
GOLDEN = {
    "assignment.json": "3c495fc1d5ff9df48a334070f523665b7408eb51e557d540618e201f9e1c8f58",
    "clips.json": "3be36ac90fe1ee513b88af3670ef100eb509253f28eaa7f27d73f961c54b50d6",
    "description.txt": "b4651d6943c828bf2cd3ce9e34b58d72f2262ea898d2a20f0ce5f0deb89668e9",
    "descriptions.json": "5d7c20ee6ad26a92bfb2d1304ab544c8c845724d520d8482196399ed891ad6b6",
    "report.json": "341a52ab97369a7a0b0f5ed05eb8d72fb5beca9e73f1da59fb839d51207b474f",
    "subs_ids.json": "7032962e001582da00956bc6f5b27f447145b4c6d7d882ade329dde8f50729b3",
    "subs_named.json": "b4dd83b49eeaba1d95236bd4ad854fe9af07fc90a84dc2cd6b49503dead82e96",
}


def demo_config(out: Path, **overrides) -> PipelineConfig:
    return PipelineConfig.from_file(FIXTURE / "config.json", {"output_dir": out, **overrides})


def digests(out: Path) -> dict[str, str]:
    return {name: sha256_file(out / name) for name in ARTIFACTS}


class TestRun:
    def test_golden_artifacts(self, tmp_path):
        manifest = run_pipeline(demo_config(tmp_path / "a"))
        assert manifest.status == "ok"
        assert digests(tmp_path / "a") == GOLDEN

    def test_two_dirs_byte_identical(self, tmp_path):
        run_pipeline(demo_config(tmp_path / "a"))
        run_pipeline(demo_config(tmp_path / "b"))
        for name in ARTIFACTS:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_rerun_all_cached(self, tmp_path):
        run_pipeline(demo_config(tmp_path))
        again = run_pipeline(demo_config(tmp_path))
        assert all(s.cache_hit for s in again.stages)
        forced = run_pipeline(demo_config(tmp_path, force=True))
        assert not any(s.cache_hit for s in forced.stages)
        assert digests(tmp_path) == GOLDEN

    def test_changed_threshold_reruns_downstream_only(self, tmp_path):
        run_pipeline(demo_config(tmp_path))
        again = run_pipeline(demo_config(tmp_path, threshold=0.99))
        assert again.stage("segment").cache_hit
        assert not again.stage("link").cache_hit

    @pytest.mark.parametrize("victim", ["clips.json", "subs_named.json", "description.txt"])
    def test_stage_isolation(self, tmp_path, victim):
        run_pipeline(demo_config(tmp_path))
        (tmp_path / victim).unlink()
        run_pipeline(demo_config(tmp_path))
        assert digests(tmp_path) == GOLDEN

    def test_manifest_complete(self, tmp_path):
        run_pipeline(demo_config(tmp_path, audit=True))
        doc = json.loads((tmp_path / MANIFEST).read_text())
        written = {p.name for p in tmp_path.iterdir()} - {MANIFEST, LOCK}
        assert set(doc["artifacts"]) == written
        for name, digest in doc["artifacts"].items():
            assert sha256_file(tmp_path / name) == digest
        assert doc["tool_version"] and doc["config_digest"]
        assert [s["name"] for s in doc["stages"]] == ["segment", "link", "identify", "describe", "concat", "evaluate"]
        assert doc["warnings"] == ["cuts: boundary cut 0 ms dropped"]

    def test_local_only_marked(self, tmp_path):
        run_pipeline(demo_config(tmp_path, local_only=True))
        doc = json.loads((tmp_path / MANIFEST).read_text())
        assert doc["ablation"] and doc["config"]["local_only"] is True
        assert json.loads((tmp_path / "assignment.json").read_text())["mode"] == "local_only"

    def test_seeded_random_policy(self, tmp_path):
        a = run_pipeline(demo_config(tmp_path / "a", policy="random", seed=3))
        b = run_pipeline(demo_config(tmp_path / "b", policy="random", seed=3))
        assert a.artifacts == b.artifacts

    def test_fixture_miss_records_failure(self, tmp_path):
        with pytest.raises(BackendError):
            run_pipeline(demo_config(tmp_path), backend=ScriptedBackend({}))
        doc = json.loads((tmp_path / MANIFEST).read_text())
        assert doc["status"] == "failed" and doc["failed_stage"] == "identify"
        assert "FixtureMissError" in doc["error"]
        assert "clips.json" in doc["artifacts"]
        assert "assignment.partial.json" in doc["artifacts"]

    def test_locked_directory(self, tmp_path):
        tmp_path.mkdir(exist_ok=True)
        with filelock.FileLock(str(tmp_path / LOCK)):
            with pytest.raises(StorypipeError, match="locked"):
                run_pipeline(demo_config(tmp_path))

    def test_missing_input(self, tmp_path):
        with pytest.raises(ValidationError, match="not found"):
            run_pipeline(demo_config(tmp_path, qa=tmp_path / "nope.json"))

    def test_unknown_config_field(self, tmp_path):
        with pytest.raises(ValidationError, match="unknown"):
            PipelineConfig.from_mapping({"subtitles": "x", "colour": "red"}, overrides={"output_dir": tmp_path})


class TestCli:
    def test_run_demo(self, tmp_path, capsys):
        assert cli.main(["run", "--demo", "-o", str(tmp_path)]) == 0
        assert "QA accuracy: 0.400" in capsys.readouterr().out
        assert digests(tmp_path) == GOLDEN

    def test_subcommands_chain(self, tmp_path):
        f = FIXTURE
        t = tmp_path
        assert cli.main(["segment", "--cuts", str(f / "cuts.json"), "--subs", str(f / "subtitles.json"),
                         "-o", str(t / "clips.json")]) == 0
        assert cli.main(["link", "--subs", str(f / "subtitles.json"), "--embeddings", str(f / "embeddings.json"),
                         "--threshold", "0.85", "-o", str(t / "subs_ids.json")]) == 0
        assert cli.main(["identify", "--clips", str(t / "clips.json"), "--subs-ids", str(t / "subs_ids.json"),
                         "--cast", str(f / "cast.json"), "--backend", "mock:42",
                         "--named-subs", str(t / "subs_named.json"), "-o", str(t / "assignment.json")]) == 0
        assert cli.main(["describe", "--clips", str(t / "clips.json"), "--subs-named", str(t / "subs_named.json"),
                         "--cast", str(f / "cast.json"), "--backend", "mock:42", "--text", str(t / "description.txt"),
                         "-o", str(t / "descriptions.json")]) == 0
        assert cli.main(["evaluate", "--description", str(t / "description.txt"), "--qa", str(f / "qa.json"),
                         "--backend", "mock:42", "-o", str(t / "report.json")]) == 0
        assert digests(t) == GOLDEN

    def test_sweep(self, tmp_path, capsys):
        f = FIXTURE
        assert cli.main(["sweep", "--pairs", str(f / "pairs.json"), "--embeddings", str(f / "embeddings.json"),
                         "-o", str(tmp_path / "sweep.json")]) == 0
        rows = json.loads((tmp_path / "sweep.json").read_text())["rows"]
        assert [r["threshold"] for r in rows][:2] == [0.5, 0.55] and len(rows) == 11
        assert "precision" in capsys.readouterr().out

    def test_backend_from_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("STORYPIPE_BACKEND", "mock:42")
        cfg = json.loads((FIXTURE / "config.json").read_text())
        del cfg["backend"]
        for k in ("subtitles", "cuts", "cast", "embeddings", "qa"):
            cfg[k] = str(FIXTURE / cfg[k])
        (tmp_path / "cfg.json").write_text(json.dumps(cfg))
        assert cli.main(["run", "--config", str(tmp_path / "cfg.json"), "-o", str(tmp_path / "out")]) == 0
        assert digests(tmp_path / "out") == GOLDEN

    def test_validation_exit_code(self, tmp_path):
        bad = tmp_path / "subs.json"
        bad.write_text('{"lines": [{"index": 1, "start_ms": 5, "end_ms": 5, "text": "x"}]}')
        code = cli.main(["segment", "--cuts", str(FIXTURE / "cuts.json"), "--subs", str(bad),
                         "-o", str(tmp_path / "c.json")])
        assert code == 2

    def test_parse_error_exit_code(self, tmp_path):
        bad = tmp_path / "subs.json"
        bad.write_text("{not json")
        code = cli.main(["link", "--subs", str(bad), "--embeddings", str(FIXTURE / "embeddings.json"),
                         "-o", str(tmp_path / "x.json")])
        assert code == 2

    def test_fixture_miss_exit_code(self, tmp_path):
        (tmp_path / "fx.json").write_text('{"entries": []}')
        code = cli.main(["run", "--demo", "-o", str(tmp_path / "out"), "--backend", f"scripted:{tmp_path / 'fx.json'}"])
        assert code == 4

    def test_backend_exit_code(self, tmp_path):
        code = cli.main(["evaluate", "--description", str(FIXTURE / "qa.json"), "--qa", str(FIXTURE / "qa.json"),
                         "--backend", "http://127.0.0.1:9", "-o", str(tmp_path / "r.json")])
        assert code == 3

    def test_no_backend(self, tmp_path, monkeypatch):
        monkeypatch.delenv("STORYPIPE_BACKEND", raising=False)
        shutil.copy(FIXTURE / "qa.json", tmp_path / "qa.json")
        code = cli.main(["evaluate", "--description", str(tmp_path / "qa.json"), "--qa", str(tmp_path / "qa.json"),
                         "-o", str(tmp_path / "r.json")])
        assert code == 2
