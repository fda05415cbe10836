import json
import subprocess
import sys

import pytest

from sparsity_forge.cli import main


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    doc = json.loads(captured.out) if captured.out.strip() else None
    return code, doc, captured.err


def gen_stem(tmp_path, capsys, seed=7, **flags):
    stem = str(tmp_path / "m")
    args = ["gen", "--layers", "8", "--rows", "64", "--cols", "64",
            "--seed", str(seed), "--out", stem]
    for k, v in flags.items():
        args += [f"--{k.replace('_', '-')}", str(v)]
    code, doc, _ = run_cli(capsys, *args)
    assert code == 0
    return stem


class TestPipeline:
    def test_end_to_end_exit_codes_and_achieved_sparsity(self, tmp_path, capsys):
        stem = gen_stem(tmp_path, capsys)
        assert run_cli(capsys, "score", "--model", stem, "--calib", stem,
                       "--metric", "wanda", "--out", stem)[0] == 0
        code, doc, _ = run_cli(capsys, "allocate", "--model", stem, "--scores", stem,
                               "--allocator", "dlp", "--sparsity", "0.7",
                               "--alpha", "0.15", "--out", stem)
        assert code == 0
        code, doc, _ = run_cli(capsys, "prune", "--model", stem, "--scores", stem,
                               "--alloc", stem, "--scope", "per-output", "--out", stem)
        assert code == 0
        code, doc, _ = run_cli(capsys, "eval", "--model", stem, "--mask", stem,
                               "--alloc", stem, "--batch", stem, "--calib", stem,
                               "--out", stem)
        assert code == 0
        achieved = doc["global"]["achieved_sparsity"]
        assert 0.695 <= achieved <= 0.705
        assert doc["config"]["seed"] == 7

    def test_alpha_defaults_from_table(self, tmp_path, capsys):
        stem = gen_stem(tmp_path, capsys, seed=3)
        run_cli(capsys, "score", "--model", stem, "--calib", stem, "--out", stem)
        code, doc, _ = run_cli(capsys, "allocate", "--model", stem, "--scores", stem,
                               "--sparsity", "0.7", "--out", stem)
        assert code == 0
        assert doc["config"]["alpha"] == 0.15
        saved = json.loads((tmp_path / "m.alloc.json").read_text())
        assert saved["metadata"]["alpha"] == 0.15

    def test_rerun_reproduces_bytes(self, tmp_path, capsys):
        stem = gen_stem(tmp_path, capsys, seed=11)
        run_cli(capsys, "score", "--model", stem, "--calib", stem, "--out", stem)
        run_cli(capsys, "allocate", "--model", stem, "--scores", stem,
                "--sparsity", "0.7", "--out", stem)
        run_cli(capsys, "prune", "--model", stem, "--scores", stem,
                "--alloc", stem, "--out", stem)
        files = ["m.model.bin", "m.model.json", "m.calib.bin", "m.score.bin",
                 "m.alloc.json", "m.mask.bin", "m.mask.json"]
        before = {f: (tmp_path / f).read_bytes() for f in files}
        # rerun every stage from the same flags (echoed config) with --force
        run_cli(capsys, "gen", "--layers", "8", "--rows", "64", "--cols", "64",
                "--seed", "11", "--out", stem, "--force")
        run_cli(capsys, "score", "--model", stem, "--calib", stem, "--out", stem, "--force")
        run_cli(capsys, "allocate", "--model", stem, "--scores", stem,
                "--sparsity", "0.7", "--out", stem, "--force")
        run_cli(capsys, "prune", "--model", stem, "--scores", stem,
                "--alloc", stem, "--out", stem, "--force")
        for f, data in before.items():
            assert (tmp_path / f).read_bytes() == data, f

    def test_existing_output_without_force_fails_and_preserves_file(self, tmp_path, capsys):
        stem = gen_stem(tmp_path, capsys, seed=5)
        run_cli(capsys, "score", "--model", stem, "--calib", stem, "--out", stem)
        run_cli(capsys, "allocate", "--model", stem, "--scores", stem,
                "--sparsity", "0.5", "--out", stem)
        assert run_cli(capsys, "prune", "--model", stem, "--scores", stem,
                       "--alloc", stem, "--out", stem)[0] == 0
        before = (tmp_path / "m.mask.bin").read_bytes()
        code, _, err = run_cli(capsys, "prune", "--model", stem, "--scores", stem,
                               "--alloc", stem, "--out", stem)
        assert code == 1
        assert "ERROR OutputExists" in err
        assert (tmp_path / "m.mask.bin").read_bytes() == before


class TestErrorsAndUsage:
    def test_unknown_enum_is_usage_error(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["score", "--model", "x", "--metric", "bogus", "--out", "y"])
        assert exc.value.code == 2

    def test_unknown_flag_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["gen", "--nonsense", "1"])
        assert exc.value.code == 2

    def test_domain_error_prints_code_to_stderr(self, tmp_path, capsys):
        code, _, err = run_cli(capsys, "score", "--model", str(tmp_path / "missing"),
                               "--out", str(tmp_path / "s"))
        assert code == 1
        assert err.startswith("ERROR ")

    def test_wanda_without_calib_fails_cleanly(self, tmp_path, capsys):
        stem = gen_stem(tmp_path, capsys, seed=2)
        code, _, err = run_cli(capsys, "score", "--model", stem, "--out", stem + "x")
        assert code == 1
        assert "MissingGram" in err

    def test_allocate_global_redirects_to_prune(self, tmp_path, capsys):
        stem = gen_stem(tmp_path, capsys, seed=2)
        code, _, err = run_cli(capsys, "allocate", "--model", stem, "--allocator", "global",
                               "--sparsity", "0.5", "--out", stem)
        assert code == 1
        assert "InvalidConfig" in err


class TestDirectMaskBaselines:
    def test_lamp_and_global(self, tmp_path, capsys):
        stem = gen_stem(tmp_path, capsys, seed=13, layers=3, rows=16, cols=16)
        run_cli(capsys, "score", "--model", stem, "--calib", stem, "--out", stem)
        code, doc, _ = run_cli(capsys, "prune", "--model", stem, "--allocator", "lamp",
                               "--sparsity", "0.5", "--out", str(tmp_path / "lamp"))
        assert code == 0
        assert doc["achieved_sparsity"] == pytest.approx(0.5, abs=0.01)
        code, doc, _ = run_cli(capsys, "prune", "--model", stem, "--scores", stem,
                               "--allocator", "global", "--sparsity", "0.5",
                               "--out", str(tmp_path / "glob"))
        assert code == 0
        assert doc["achieved_sparsity"] == pytest.approx(0.5, abs=0.01)

    def test_nm_allocation_path(self, tmp_path, capsys):
        stem = gen_stem(tmp_path, capsys, seed=17, layers=4, rows=16, cols=16)
        run_cli(capsys, "score", "--model", stem, "--calib", stem, "--out", stem)
        code, doc, _ = run_cli(capsys, "allocate", "--model", stem, "--scores", stem,
                               "--sparsity", "0.5", "--nm", "4", "--out", stem)
        assert code == 0
        code, doc, _ = run_cli(capsys, "prune", "--model", stem, "--scores", stem,
                               "--alloc", stem, "--out", stem)
        assert code == 0
        assert doc["achieved_sparsity"] == pytest.approx(0.5, abs=1e-9)


class TestPerBlockGranularity:
    def test_allocate_and_prune_per_block(self, tmp_path, capsys):
        stem = gen_stem(tmp_path, capsys, seed=31, layers=3, rows=16, cols=16)
        run_cli(capsys, "score", "--model", stem, "--calib", stem, "--out", stem)
        code, doc, _ = run_cli(capsys, "allocate", "--model", stem, "--scores", stem,
                               "--sparsity", "0.6", "--granularity", "per-block",
                               "--out", stem)
        assert code == 0
        assert set(doc["entries"]) == {f"layer{i:02d}/w" for i in range(3)}
        code, doc, _ = run_cli(capsys, "prune", "--model", stem, "--scores", stem,
                               "--alloc", stem, "--out", stem)
        assert code == 0
        assert doc["achieved_sparsity"] == pytest.approx(0.6, abs=0.01)


class TestIntrospectionCommands:
    def test_importance_outputs_units_and_values(self, tmp_path, capsys):
        stem = gen_stem(tmp_path, capsys, seed=19, layers=4, rows=16, cols=16)
        run_cli(capsys, "score", "--model", stem, "--calib", stem, "--out", stem)
        code, doc, _ = run_cli(capsys, "importance", "--model", stem, "--scores", stem)
        assert code == 0
        assert len(doc["units"]) == 4
        assert len(doc["importance"]) == 4
        assert doc["config"]["aggregator"] == "median"

    def test_lod_command_pre_and_post_prune(self, tmp_path, capsys):
        stem = gen_stem(tmp_path, capsys, seed=23, layers=3, rows=16, cols=16)
        run_cli(capsys, "score", "--model", stem, "--calib", stem, "--out", stem)
        code, pre, _ = run_cli(capsys, "lod", "--model", stem, "--calib", stem)
        assert code == 0
        assert set(pre["per_unit"]) == {f"layer{i:02d}" for i in range(3)}
        run_cli(capsys, "allocate", "--model", stem, "--scores", stem,
                "--sparsity", "0.6", "--out", stem)
        run_cli(capsys, "prune", "--model", stem, "--scores", stem, "--alloc", stem,
                "--out", stem)
        code, post, _ = run_cli(capsys, "lod", "--model", stem, "--calib", stem,
                                "--mask", stem)
        assert code == 0
        assert post["summary"]["pooled"] >= pre["summary"]["pooled"]

    def test_compare_emits_joined_csv(self, tmp_path, capsys):
        stem = gen_stem(tmp_path, capsys, seed=29, layers=3, rows=16, cols=16)
        out_csv = str(tmp_path / "grid.csv")
        code, doc, _ = run_cli(capsys, "compare", "--model", stem, "--calib", stem,
                               "--batch", stem, "--sparsity", "0.6", "--out", out_csv)
        assert code == 0
        lines = (tmp_path / "grid.csv").read_text().strip().splitlines()
        header = lines[0].split(",")
        assert header[0] == "allocator"
        allocators = {line.split(",")[0] for line in lines[1:]}
        assert allocators == {"dlp", "uniform", "owl", "er", "er-plus", "lamp", "global"}
        assert set(doc["summary"]) == allocators
        # one global row and three unit rows per allocator
        assert len(lines) == 1 + 7 * (3 + 1)


class TestConsoleScript:
    def test_installed_entry_point(self, tmp_path):
        stem = str(tmp_path / "m")
        proc = subprocess.run(
            [sys.executable, "-m", "sparsity_forge.cli", "gen", "--layers", "2",
             "--rows", "8", "--cols", "8", "--seed", "1", "--out", stem],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0
        doc = json.loads(proc.stdout)
        assert doc["config"]["command"] == "gen"
