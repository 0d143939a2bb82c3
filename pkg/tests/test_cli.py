import json

import pytest

from progressnav.cli import main

SMALL_SETS = [
    "--set", "data.n_train_worlds=1",
    "--set", "data.episodes_per_world=2",
    "--set", "data.n_eval_episodes=2",
    "--set", "data.history_len=4",
    "--set", "model.d=8",
    "--set", "model.n_heads=2",
    "--set", "model.n_blocks=1",
    "--set", "model.d_ff=16",
    "--set", "sapp.epochs=1",
    "--set", "stage2.epochs=1",
    "--set", "ppcf.steps=1",
    "--set", "ppcf.states_per_step=1",
    "--set", "eval.max_steps=12",
]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


class TestGeneration:
    def test_gen_world(self, tmp_path, capsys):
        code, out, _ = run(capsys, "gen-world", "--seed", "0",
                           "--out", str(tmp_path), *SMALL_SETS)
        assert code == 0
        path = out.strip()
        rec = json.loads(open(path).read())
        assert "spec" in rec and "grid" in rec

    def test_gen_data(self, tmp_path, capsys):
        code, out, _ = run(capsys, "gen-data", "--out", str(tmp_path), *SMALL_SETS)
        assert code == 0
        data_path, ep_path = out.strip().splitlines()
        assert sum(1 for _ in open(ep_path)) == 2
        first = json.loads(open(data_path).readline())
        assert "instruction" in first or "config_hash" in first


class TestTrainEvalChain:
    def test_full_chain(self, tmp_path, capsys):
        outdir = tmp_path
        code, out, _ = run(capsys, "train-sapp", "--out", str(outdir), *SMALL_SETS)
        assert code == 0
        prm = out.strip()

        code, out, _ = run(capsys, "train-policy", "--prm", prm,
                           "--out", str(outdir), *SMALL_SETS)
        assert code == 0
        policy = out.strip()

        code, out, _ = run(capsys, "train-ppcf", "--prm", prm, "--policy", policy,
                           "--out", str(outdir), *SMALL_SETS)
        assert code == 0
        prm3, policy3 = out.strip().splitlines()

        code, out, _ = run(capsys, "eval", "--prm", prm3, "--policy", policy3,
                           "--out", str(outdir), *SMALL_SETS)
        assert code == 0
        rep = json.loads(out.strip())
        assert rep["n_episodes"] == 2
        assert (outdir / "metrics.tsv").exists()
        assert (outdir / "progress_traces.svg").exists()

        code, out, _ = run(capsys, "progress-trace", "--prm", prm3,
                           "--n-episodes", "1", "--out", str(outdir), *SMALL_SETS)
        assert code == 0
        rec = json.loads(open(out.strip()).readline())
        assert "khat" in rec and "k_star" in rec

    def test_train_sapp_deterministic(self, tmp_path, capsys):
        c1, o1, _ = run(capsys, "train-sapp", "--out", str(tmp_path / "a"), *SMALL_SETS)
        c2, o2, _ = run(capsys, "train-sapp", "--out", str(tmp_path / "b"), *SMALL_SETS)
        assert c1 == c2 == 0
        with open(o1.strip(), "rb") as f1, open(o2.strip(), "rb") as f2:
            assert f1.read() == f2.read()


class TestErrors:
    def test_unknown_subcommand_exits_2(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["frobnicate"])
        assert e.value.code == 2

    def test_unknown_flag_exits_2(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["gen-world", "--bogus", "1"])
        assert e.value.code == 2

    def test_bad_override_returns_1(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen-world", "--out", str(tmp_path),
                           "--set", "no.such.key=1")
        assert code == 1
        assert "error:" in err

    def test_missing_checkpoint_returns_1(self, tmp_path, capsys):
        code, _, err = run(capsys, "eval", "--prm", "/nonexistent.ckpt",
                           "--policy", "/nonexistent.ckpt",
                           "--out", str(tmp_path), *SMALL_SETS)
        assert code == 1

    def test_config_file_loads(self, tmp_path, capsys):
        cfgfile = tmp_path / "run.cfg"
        cfgfile.write_text("world.extent = 8.0\ndata.episodes_per_world = 2\n"
                           "data.n_train_worlds = 1\n")
        code, out, _ = run(capsys, "gen-world", "--config", str(cfgfile),
                           "--out", str(tmp_path))
        assert code == 0


class TestGradCheckCommand:
    def test_small_run_passes(self, capsys):
        code, out, _ = run(capsys, "grad-check", "--instances", "2")
        assert code == 0
        lines = [ln for ln in out.splitlines() if ln.startswith(("PASS", "FAIL"))]
        assert len(lines) == 5
        assert all(ln.startswith("PASS") for ln in lines)
