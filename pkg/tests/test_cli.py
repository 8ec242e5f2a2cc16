"""End-to-end tests for the command line front end.

Most tests call ``cli.main(argv)`` in-process and assert on exit codes
and produced files. A tiny real run and a small ingested corpus are
shared across the module.
"""

import json
import subprocess
import sys
import wave
from pathlib import Path

import numpy as np
import pytest

from qdsound import cli
from qdsound.engine import RunConfig


def _write_tones(dir_path: Path, count: int = 12) -> Path:
    dir_path.mkdir(parents=True, exist_ok=True)
    sr = 16000
    t = np.arange(sr) / sr
    rng = np.random.default_rng(7)
    for i in range(count):
        x = 0.5 * np.sin(2 * np.pi * 150.0 * (i + 1) * t)
        if i % 3 == 0:
            x = x + 0.1 * rng.standard_normal(sr)
        pcm = (np.clip(x, -1.0, 1.0) * 32767).astype("<i2")
        with wave.open(str(dir_path / f"tone_{i:02d}.wav"), "wb") as fh:
            fh.setnchannels(1)
            fh.setsampwidth(2)
            fh.setframerate(sr)
            fh.writeframes(pcm.tobytes())
    return dir_path


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def config_file(work):
    out = work / "run_out"
    path = work / "tiny.cfg"
    path.write_text(
        "# tiny run\n"
        "seed = 3\n"
        "budget = 48\n"
        "seed_iterations = 32\n"
        "batch_size = 16\n"
        "grid_size = 12\n"
        "projection = pca_static\n"
        "render.duration_s = 0.3\n"
        "checkpoint_every = 2\n"
        f'out_dir = "{out}"\n'
    )
    return path


@pytest.fixture(scope="module")
def run_dir(work, config_file):
    assert cli.main(["run", "--config", str(config_file)]) == 0
    return work / "run_out"


@pytest.fixture(scope="module")
def store_dir(work):
    corpus = _write_tones(work / "corpus")
    store = work / "store"
    assert cli.main(["refdb", "ingest", str(corpus), "--out", str(store)]) == 0
    return store


# ---------------------------------------------------------------------------
# config file parsing


class TestConfigParsing:
    def test_comments_blanks_and_types(self, tmp_path):
        path = tmp_path / "a.cfg"
        path.write_text(
            "# leading comment\n"
            "\n"
            "seed = 42\n"
            "projection = manual\n"
            "fitness.regime = multi_ref\n"
            "fitness.k = 7\n"
            "render.duration_s = 1.5\n"
            'manual_x = "flux"\n'
        )
        doc = cli.parse_config_file(path)
        assert doc["seed"] == 42
        assert doc["projection"] == "manual"
        assert doc["fitness"] == {"regime": "multi_ref", "k": 7}
        assert doc["render"] == {"duration_s": 1.5}
        assert doc["manual_x"] == "flux"

    def test_bare_strings_survive_json_fallback(self, tmp_path):
        path = tmp_path / "a.cfg"
        path.write_text("store_path = refs/march take 2\n")
        assert cli.parse_config_file(path)["store_path"] == "refs/march take 2"

    def test_line_without_equals_rejected(self, tmp_path):
        path = tmp_path / "a.cfg"
        path.write_text("seed 42\n")
        with pytest.raises(ValueError, match="key = value"):
            cli.parse_config_file(path)

    def test_nesting_under_scalar_rejected(self, tmp_path):
        path = tmp_path / "a.cfg"
        path.write_text("fitness = 3\nfitness.k = 7\n")
        with pytest.raises(ValueError, match="nests under a scalar"):
            cli.parse_config_file(path)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "a.cfg"
        path.write_text("seed = 1\nbudgt = 100\n")
        with pytest.raises(ValueError, match="budgt"):
            cli.load_config(path)

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope.cfg"):
            cli.load_config(tmp_path / "nope.cfg")

    def test_load_config_builds_run_config(self, tmp_path):
        path = tmp_path / "a.cfg"
        path.write_text("seed = 9\nfitness.regime = ref_free\nbatch_size = 8\n")
        cfg = cli.load_config(path)
        assert isinstance(cfg, RunConfig)
        assert cfg.seed == 9
        assert cfg.batch_size == 8

    def test_example_config_parses_to_defaults(self):
        example = Path(__file__).resolve().parents[1] / "configs" / "example.cfg"
        cfg = cli.load_config(example)
        assert cfg.semantic_dict() == RunConfig().semantic_dict()


# ---------------------------------------------------------------------------
# exit codes and argument handling


class TestExitCodes:
    def test_help_exits_zero(self):
        assert cli.main(["--help"]) == 0

    def test_no_command_is_usage_error(self):
        assert cli.main([]) == 1

    def test_unknown_command_suggests(self, capsys):
        assert cli.main(["anaylze"]) == 1
        err = capsys.readouterr().err
        assert "did you mean 'analyze'" in err

    def test_unknown_flag_suggests(self, capsys, tmp_path):
        cfg = tmp_path / "a.cfg"
        cfg.write_text("seed = 1\n")
        assert cli.main(["run", "--config", str(cfg), "--wokers", "2"]) == 1
        err = capsys.readouterr().err
        assert "did you mean '--workers'" in err

    def test_missing_config_exits_two_naming_path(self, capsys):
        assert cli.main(["run", "--config", "/tmp/definitely_absent.cfg"]) == 2
        assert "/tmp/definitely_absent.cfg" in capsys.readouterr().err

    def test_bare_subgroup_is_usage_error(self):
        assert cli.main(["analyze"]) == 1
        assert cli.main(["refdb"]) == 1

    def test_module_entry_point(self):
        proc = subprocess.run(
            [sys.executable, "-m", "qdsound.cli", "--help"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0
        assert "quality-diversity" in proc.stdout.lower()


# ---------------------------------------------------------------------------
# run / resume


class TestRunCommand:
    def test_run_produces_artifacts(self, run_dir):
        for name in (
            "metrics.csv",
            "events.jsonl",
            "manifest.json",
            "report.json",
            "elites_genomes.json",
            "elites_features.csv",
        ):
            assert (run_dir / name).is_file(), name
        report = json.loads((run_dir / "report.json").read_text())
        assert report["evaluations"] == 48

    def test_out_root_env_applies_to_relative_dir(
        self, work, config_file, monkeypatch, tmp_path
    ):
        monkeypatch.setenv(cli.OUT_ROOT_ENV, str(tmp_path))
        rc = cli.main(["run", "--config", str(config_file), "--out", "envrun"])
        assert rc == 0
        assert (tmp_path / "envrun" / "metrics.csv").is_file()

    def test_out_root_env_ignored_for_absolute_dir(
        self, config_file, monkeypatch, tmp_path
    ):
        monkeypatch.setenv(cli.OUT_ROOT_ENV, str(tmp_path / "unused"))
        target = tmp_path / "absrun"
        rc = cli.main(["run", "--config", str(config_file), "--out", str(target)])
        assert rc == 0
        assert (target / "metrics.csv").is_file()
        assert not (tmp_path / "unused").exists()

    def test_resume_from_final_checkpoint(self, run_dir, config_file, capsys):
        ckpts = sorted((run_dir / "checkpoints").glob("gen_*.json"))
        assert ckpts
        rc = cli.main(["resume", str(ckpts[-1]), "--config", str(config_file)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "evaluations: 48" in out

    def test_resume_rejects_mismatched_config(self, run_dir, tmp_path, capsys):
        other = tmp_path / "other.cfg"
        other.write_text("seed = 99\nbudget = 48\nseed_iterations = 32\n")
        ckpt = sorted((run_dir / "checkpoints").glob("gen_*.json"))[-1]
        rc = cli.main(["resume", str(ckpt), "--config", str(other)])
        assert rc == 2
        assert "different configuration" in capsys.readouterr().err

    def test_resume_missing_checkpoint(self, config_file, capsys):
        rc = cli.main(["resume", "/tmp/no_ckpt.json", "--config", str(config_file)])
        assert rc == 2
        assert "no_ckpt.json" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# analyze


class TestAnalyze:
    def test_metrics_summary_and_plots(self, run_dir, capsys):
        assert cli.main(["analyze", "metrics", str(run_dir)]) == 0
        out = capsys.readouterr().out
        assert "evaluations: 48" in out
        assert (run_dir / "metrics.png").is_file()
        assert (run_dir / "grid.png").is_file()

    def test_metrics_missing_dir(self, tmp_path, capsys):
        assert cli.main(["analyze", "metrics", str(tmp_path)]) == 2
        assert "metrics.csv" in capsys.readouterr().err

    def test_remap_writes_density_plot(self, run_dir, capsys):
        rc = cli.main(
            ["analyze", "remap", str(run_dir), "--bd", "centroid,flux", "--grid", "10"]
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert "coverage:" in out
        assert (run_dir / "remap_centroid_flux.png").is_file()

    def test_remap_rejects_unknown_feature(self, run_dir, capsys):
        rc = cli.main(["analyze", "remap", str(run_dir), "--bd", "centroid,sparkle"])
        assert rc == 2
        assert "sparkle" in capsys.readouterr().err

    def test_remap_rejects_malformed_bd(self, run_dir, capsys):
        assert cli.main(["analyze", "remap", str(run_dir), "--bd", "centroid"]) == 2
        assert "feature_x,feature_y" in capsys.readouterr().err

    def test_rank_features_writes_csv(self, store_dir, capsys):
        assert cli.main(["analyze", "rank-features", str(store_dir)]) == 0
        out = capsys.readouterr().out
        assert "ranked 10 features" in out
        ranking = store_dir / "feature_ranking.csv"
        assert ranking.is_file()
        lines = ranking.read_text().splitlines()
        assert lines[1] == "rank,name,variance,max_abs_correlation,key"
        assert len(lines) == 12

    def test_rank_features_custom_out_and_lambda(self, store_dir, tmp_path):
        out = tmp_path / "r.csv"
        rc = cli.main(
            [
                "analyze",
                "rank-features",
                str(store_dir),
                "--lam",
                "0",
                "--out",
                str(out),
            ]
        )
        assert rc == 0
        assert "0.0 * max_abs_correlation" in out.read_text().splitlines()[0]

    def test_dataset_coverage(self, store_dir, capsys):
        rc = cli.main(
            [
                "analyze",
                "dataset-coverage",
                str(store_dir),
                "--bd",
                "centroid,flatness",
                "--grid",
                "8",
            ]
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert "sounds: 12" in out
        assert (store_dir / "dataset_centroid_flatness.png").is_file()

    def test_dataset_coverage_unknown_feature(self, store_dir, capsys):
        rc = cli.main(["analyze", "dataset-coverage", str(store_dir), "--bd", "a,b"])
        assert rc == 2


# ---------------------------------------------------------------------------
# refdb / bench / render-genome


class TestOtherCommands:
    def test_ingest_reports_counts(self, store_dir, capsys):
        # store_dir fixture already ran ingest; run again for the output
        corpus = store_dir.parent / "corpus"
        rc = cli.main(["refdb", "ingest", str(corpus), "--out", str(store_dir)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "ingested 12 sounds (0 skipped)" in out

    def test_ingest_missing_corpus(self, tmp_path, capsys):
        rc = cli.main(
            ["refdb", "ingest", str(tmp_path / "ghost"), "--out", str(tmp_path / "s")]
        )
        assert rc == 2

    def test_bench_render_compares_backends(self, capsys):
        rc = cli.main(["bench-render", "--count", "2", "--duration", "0.2"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "ms/render" in out
        if "compiled" in out and "numpy" in out:
            assert "outputs bit-identical: yes" in out

    def test_render_genome_defaults_from_manifest(self, run_dir, tmp_path, capsys):
        cells = json.loads((run_dir / "elites_genomes.json").read_text())
        cell = sorted(cells)[0]
        wav_path = tmp_path / "elite.wav"
        rc = cli.main(
            ["render-genome", str(run_dir), "--cell", cell, "--out", str(wav_path)]
        )
        assert rc == 0
        with wave.open(str(wav_path), "rb") as fh:
            assert fh.getframerate() == 16000
            # run config set duration_s = 0.3
            assert fh.getnframes() == int(0.3 * 16000)

    def test_render_genome_respects_overrides(self, run_dir, tmp_path):
        cell = sorted(json.loads((run_dir / "elites_genomes.json").read_text()))[0]
        wav_path = tmp_path / "long.wav"
        rc = cli.main(
            [
                "render-genome",
                str(run_dir),
                "--cell",
                cell,
                "--out",
                str(wav_path),
                "--duration",
                "0.5",
                "--rate",
                "48000",
            ]
        )
        assert rc == 0
        with wave.open(str(wav_path), "rb") as fh:
            assert fh.getframerate() == 48000
            assert fh.getnframes() == int(0.5 * 48000)

    def test_render_genome_unknown_cell_lists_occupied(self, run_dir, capsys):
        rc = cli.main(["render-genome", str(run_dir), "--cell", "99,99"])
        assert rc == 2
        err = capsys.readouterr().err
        assert "99,99" in err
        assert "occupied cells include" in err
