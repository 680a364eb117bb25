import json
from pathlib import Path

import pytest

from latact.cli import main
from latact.serialize import load_checkpoint
from latact.worldgen import load_dataset

CFG = """
[dgp]
T = 9
[data]
m_target = 4
source_count = 4
[train]
steps = 12
a2l_steps = 8
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.txt"
    cfg.write_text(CFG)
    assert main(["gen", "--spec", str(cfg), "--out", str(root / "data"),
                 "--seed", "0"]) == 0
    assert main(["train", "--variant", "scar-kl-grl", "--config", str(cfg),
                 "--data", str(root / "data" / "dataset.bin"),
                 "--out", str(root / "run"), "--seed", "0"]) == 0
    return root


class TestGen:
    def test_dataset_counts(self, workdir):
        ds = load_dataset(workdir / "data" / "dataset.bin")
        target = [ep for ep in ds.episodes if ep.e == ds.target_e]
        assert len(target) == 4
        assert len(ds.episodes) == 16  # 4 target + 4 x 3 source embodiments

    def test_byte_identical_regeneration(self, workdir, tmp_path):
        cfg = workdir / "cfg.txt"
        assert main(["gen", "--spec", str(cfg), "--out", str(tmp_path / "d2"),
                     "--seed", "0"]) == 0
        a = (workdir / "data" / "dataset.bin").read_bytes()
        b = (tmp_path / "d2" / "dataset.bin").read_bytes()
        assert a == b

    def test_manifest_contents(self, workdir):
        man = json.loads((workdir / "data" / "manifest.json").read_text())
        assert man["command"] == "gen"
        assert man["seed"] == 0
        assert "dataset.bin" in man["files"]
        assert len(man["checksums"]["dataset.bin"]) == 64
        assert man["finished"] >= man["started"]


class TestTrain:
    def test_outputs_present(self, workdir):
        run = workdir / "run"
        for name in ("checkpoint.bin", "model.json", "log.csv", "manifest.json"):
            assert (run / name).exists()
        meta = json.loads((run / "model.json").read_text())
        assert meta["variant"] == "scar-kl-grl"
        tensors = load_checkpoint(run / "checkpoint.bin")
        assert any(k.startswith("idm.") for k in tensors)
        assert any(k.startswith("fdm.") for k in tensors)

    def test_deterministic_checkpoint(self, workdir, tmp_path):
        cfg = workdir / "cfg.txt"
        assert main(["train", "--variant", "scar-kl-grl", "--config", str(cfg),
                     "--data", str(workdir / "data" / "dataset.bin"),
                     "--out", str(tmp_path / "r2"), "--seed", "0"]) == 0
        a = (workdir / "run" / "checkpoint.bin").read_bytes()
        b = (tmp_path / "r2" / "checkpoint.bin").read_bytes()
        assert a == b

    def test_contradictory_flags_refused(self, workdir, tmp_path, capsys):
        bad = tmp_path / "bad.txt"
        bad.write_text("[train]\nsteps = 5\nbeta = 0.0\n")
        rc = main(["train", "--variant", "scar-kl", "--config", str(bad),
                   "--data", str(workdir / "data" / "dataset.bin"),
                   "--out", str(tmp_path / "r")])
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("error:")
        assert "beta" in err

    def test_unknown_variant_exits_nonzero(self, workdir, tmp_path, capsys):
        rc = main(["train", "--variant", "scar-maximal",
                   "--data", str(workdir / "data" / "dataset.bin"),
                   "--out", str(tmp_path / "r")])
        assert rc == 1
        assert "scar-maximal" in capsys.readouterr().err


class TestEvalProbe:
    def test_eval_outputs(self, workdir, tmp_path):
        out = tmp_path / "ev"
        assert main(["eval", "--checkpoints", f"m={workdir / 'run'}",
                     "--data", str(workdir / "data" / "dataset.bin"),
                     "--out", str(out), "--episodes", "2"]) == 0
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0] == "method,task,SSIM,PSNR,MSE,SSIM-L"
        assert len(lines) == 3  # header + target + transfer
        metrics = json.loads((out / "metrics.json").read_text())
        assert set(metrics["m"]) == {"target", "transfer"}

    def test_eval_bad_checkpoint_spec(self, workdir, tmp_path, capsys):
        rc = main(["eval", "--checkpoints", "no-equals-sign",
                   "--data", str(workdir / "data" / "dataset.bin"),
                   "--out", str(tmp_path / "ev")])
        assert rc == 1
        assert "name=dir" in capsys.readouterr().err

    def test_probe_report(self, workdir, tmp_path):
        out = tmp_path / "pr"
        assert main(["probe", "--checkpoint", str(workdir / "run"),
                     "--data", str(workdir / "data" / "dataset.bin"),
                     "--out", str(out)]) == 0
        rep = json.loads((out / "probe.json").read_text())
        for key in ("eval_mse", "min_r2_forward", "probe_accuracy",
                    "mi_lower_bound"):
            assert key in rep

    def test_leakage_refuses_on_tiny_dataset(self, workdir, tmp_path, capsys):
        # 16 episodes are too few for a reliable frame classifier; the
        # command must refuse rather than emit an untrustworthy report
        rc = main(["leakage", "--checkpoint", str(workdir / "run"),
                   "--data", str(workdir / "data" / "dataset.bin"),
                   "--out", str(tmp_path / "lk")])
        assert rc == 1
        assert "0.9" in capsys.readouterr().err


class TestA2l:
    def test_sequence_mode(self, workdir, tmp_path):
        out = tmp_path / "a2l"
        assert main(["a2l", "--checkpoint", str(workdir / "run"),
                     "--data", str(workdir / "data" / "dataset.bin"),
                     "--out", str(out), "--mode", "sequence"]) == 0
        rep = json.loads((out / "a2l.json").read_text())
        assert rep["mode"] == "sequence"
        assert rep["eval_latent_mse"] >= 0
        tensors = load_checkpoint(out / "checkpoint.bin")
        assert any(k.startswith("a2l.") for k in tensors)


class TestVerify:
    def test_unknown_preset(self, tmp_path, capsys):
        rc = main(["verify", "--preset", "vmf-enormous",
                   "--out", str(tmp_path / "v")])
        assert rc == 1
        assert "vmf-enormous" in capsys.readouterr().err

    @pytest.mark.slow
    def test_small_preset_passes(self, tmp_path):
        out = tmp_path / "v"
        assert main(["verify", "--preset", "vmf-small", "--out", str(out)]) == 0
        rep = json.loads((out / "verify.json").read_text())
        names = {c["check"] for c in rep["checks"]}
        assert names == {"saddle", "mgf", "bessel-recurrence", "idm-lemma"}
        assert all(c["passed"] for c in rep["checks"])


def test_missing_data_file_is_one_line_error(tmp_path, capsys):
    rc = main(["train", "--variant", "shared-latent",
               "--data", str(tmp_path / "nope.bin"),
               "--out", str(tmp_path / "r")])
    assert rc == 1
    err = capsys.readouterr().err
    assert err.startswith("error:")
    assert err.count("\n") == 1
