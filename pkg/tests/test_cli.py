import json
import subprocess
import sys

import numpy as np
import pytest

from crclip.cli import EXIT_FAILED, EXIT_IO, EXIT_OK, EXIT_USAGE, run
from crclip.formats import read_matrix
from crclip.gradcheck import SUITES


def parse_block(text):
    out = {}
    for line in text.splitlines():
        key, sep, value = line.partition(": ")
        if sep and key in ("map_v2t", "map_t2v", "map_avg", "ndcg_v2t", "ndcg_t2v", "ndcg_avg"):
            out[key] = float(value)
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """gen-data then train with default config; shared by the eval tests."""
    root = tmp_path_factory.mktemp("cli")
    assert run(["gen-data", "--seed", "7", "--out", str(root / "data")]) == EXIT_OK
    assert run(["train", "--data", str(root / "data"), "--out", str(root / "run")]) == EXIT_OK
    return root


class TestUsage:
    def test_no_command(self, capsys):
        assert run([]) == EXIT_USAGE
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        assert run(["gradcheck", "--bogus"]) == EXIT_USAGE

    def test_eval_without_inputs(self, capsys):
        assert run(["eval"]) == EXIT_USAGE
        assert "--checkpoint" in capsys.readouterr().err

    def test_partial_embedding_inputs(self, tmp_path, capsys):
        assert run(["eval", "--visual", str(tmp_path / "v.crmx")]) == EXIT_USAGE

    @pytest.mark.parametrize("scales", ["0.5,-1", "a,b", ""])
    def test_bad_scales(self, scales):
        assert run(["tta-eval", "--scales", scales]) == EXIT_USAGE

    def test_bad_config_value(self, tmp_path):
        (tmp_path / "cfg.json").write_text(json.dumps({"epochs": -1}))
        code = run(["train", "--config", str(tmp_path / "cfg.json"),
                    "--data", str(tmp_path / "none"), "--out", str(tmp_path / "run")])
        assert code == EXIT_USAGE

    def test_help_exits_cleanly(self, capsys):
        assert run(["--help"]) == EXIT_OK

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "crclip", "eval"], capture_output=True, text=True)
        assert proc.returncode == EXIT_USAGE
        assert "usage" in proc.stderr


class TestChecks:
    def test_gradcheck(self, capsys):
        assert run(["gradcheck", "--cases", "2"]) == EXIT_OK
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == len(SUITES)
        assert all(line.startswith("PASS\t") and "cases=2" in line for line in lines)

    def test_selfcheck(self, capsys):
        assert run(["selfcheck"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "FAIL" not in out and out.strip()


class TestIOErrors:
    def test_missing_dataset(self, tmp_path):
        assert run(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == EXIT_IO

    def test_corrupt_matrix(self, tmp_path):
        for name in ("v", "t", "c"):
            (tmp_path / f"{name}.crmx").write_bytes(b"CRMX\x01")
        code = run(["eval", "--visual", str(tmp_path / "v.crmx"), "--text", str(tmp_path / "t.crmx"),
                    "--relevance", str(tmp_path / "c.crmx")])
        assert code == EXIT_IO

    def test_corrupt_checkpoint(self, trained, tmp_path, capsys):
        raw = bytearray((trained / "run" / "checkpoint.crck").read_bytes())
        raw[len(raw) // 2] ^= 0x10
        bad = tmp_path / "checkpoint.crck"
        bad.write_bytes(bytes(raw))
        (tmp_path / "config.json").write_bytes((trained / "run" / "config.json").read_bytes())
        assert run(["eval", "--checkpoint", str(bad), "--data", str(trained / "data")]) == EXIT_IO
        assert "error" in capsys.readouterr().err


class TestPipeline:
    def test_train_outputs(self, trained):
        run_dir = trained / "run"
        for name in ("checkpoint.crck", "train_log.tsv", "config.json", "loss.png"):
            assert (run_dir / name).stat().st_size > 0

    def test_eval_reaches_target(self, trained, tmp_path, capsys):
        code = run(["eval", "--checkpoint", str(trained / "run" / "checkpoint.crck"),
                    "--data", str(trained / "data"), "--figures", str(tmp_path / "fig")])
        assert code == EXIT_OK
        out = capsys.readouterr().out.splitlines()
        assert len(out[0].split("\t")) == 6
        block = parse_block("\n".join(out[1:]))
        assert len(block) == 6 and block["map_avg"] >= 90.0
        for name in ("eval_similarity.png", "eval_metrics.png"):
            assert (tmp_path / "fig" / name).read_bytes()[:4] == b"\x89PNG"

    def test_embedding_mode_matches(self, trained, tmp_path, capsys):
        ckpt = str(trained / "run" / "checkpoint.crck")
        emb = tmp_path / "emb"
        assert run(["eval", "--checkpoint", ckpt, "--data", str(trained / "data"),
                    "--embeddings-out", str(emb)]) == EXIT_OK
        first = capsys.readouterr().out
        v = read_matrix(emb / "visual.crmx")
        assert np.allclose(np.linalg.norm(v, axis=1), 1.0)
        assert run(["eval", "--visual", str(emb / "visual.crmx"), "--text", str(emb / "text.crmx"),
                    "--relevance", str(emb / "relevance.crmx")]) == EXIT_OK
        assert capsys.readouterr().out == first

    def test_tta_eval(self, trained, tmp_path, capsys):
        code = run(["tta-eval", "--checkpoint", str(trained / "run" / "checkpoint.crck"),
                    "--data", str(trained / "data"), "--flip", "--figures", str(tmp_path)])
        assert code == EXIT_OK
        out = capsys.readouterr().out.splitlines()
        assert out[0].startswith("# variants: 6")
        assert parse_block("\n".join(out[2:]))["map_avg"] >= 90.0
        assert (tmp_path / "tta_similarity.png").exists()

    def test_all_pairs_runs(self, trained, capsys):
        code = run(["eval", "--checkpoint", str(trained / "run" / "checkpoint.crck"),
                    "--data", str(trained / "data"), "--pairing", "all_pairs"])
        assert code == EXIT_OK
        assert len(parse_block(capsys.readouterr().out)) == 6

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss(self, trained, tmp_path, capsys):
        (tmp_path / "cfg.json").write_text(json.dumps({"epochs": 2, "lr": 1e300}))
        code = run(["train", "--config", str(tmp_path / "cfg.json"), "--data", str(trained / "data"),
                    "--out", str(tmp_path / "run"), "--no-figures"])
        assert code == EXIT_FAILED
        assert "non-finite values first appear" in capsys.readouterr().err
