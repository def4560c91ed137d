"""End-to-end subcommand coverage driven through cli.main()."""

import dataclasses
import json
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest
import torch

from motionprior import fitting as F
from motionprior import state as st
from motionprior.cli import main
from motionprior.data import load_clip, save_clip
from motionprior.kinematics import default_skeleton, skeleton_hash
from motionprior.metrics import apd
from motionprior.training import load_curves

TRAIN_CFG = {
    "seed": 1,
    "width": 16,
    "groups": 2,
    "schedule": {
        "epochs": 2, "windows_per_epoch": 16, "batch_size": 8, "val_windows": 8,
        "lr_stages": [[1, 5e-5]], "kl_anneal_epochs": 1,
        "supervised_epochs": 1, "mixed_epochs": 1,
    },
    "gmm_k": 2,
    "gmm_stride": 5,
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Shared dataset + tiny trained run + one fit problem with references."""
    root = tmp_path_factory.mktemp("cli")
    rc = main(["gen-data", "--out", str(root / "ds"), "--seed", "7",
               "--families", '{"walk_cycle": 4, "idle_sway": 3, "squat": 3}',
               "--duration", "2.0"])
    assert rc == 0
    cfg = dict(TRAIN_CFG, dataset=str(root / "ds"), out=str(root / "run"))
    with open(root / "train.json", "w") as f:
        json.dump(cfg, f)
    assert main(["train", "--config", str(root / "train.json")]) == 0

    skel = default_skeleton()
    clip = load_clip(root / "ds" / "test" / "clip_0000.mclip")
    sub = clip.states[:10]
    obs = F.occlude_below(F.joints3d_from_states(sub), 0.9)
    problem = F.FitProblem(
        obs=obs, weights=F.EnergyWeights.occluded_keypoints(), stages=(3, 2, 2),
        g_init=torch.zeros(3, dtype=torch.float64),
        meta={"skeleton_hash": skeleton_hash(skel)},
    )
    os.makedirs(root / "problems")
    F.save_fit_problem(root / "problems" / "seq_000.problem", problem)
    os.makedirs(root / "refs")
    ref = dataclasses.replace(clip, states=sub, contacts=clip.contacts[:10])
    save_clip(ref, root / "refs" / "seq_000.mclip")
    return root


class TestGenData:
    def test_writes_splits_and_manifest(self, work):
        for split in ("train", "val", "test"):
            assert (work / "ds" / split).is_dir()
        manifest = json.loads((work / "ds" / "manifest.json").read_text())
        assert manifest["seed"] == 7
        assert sum(len(v) for v in manifest["splits"].values()) == 10

    def test_same_seed_reproduces_manifest(self, work, tmp_path):
        args = ["gen-data", "--seed", "7", "--duration", "1.0",
                "--families", '{"squat": 2}']
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        a = (tmp_path / "a" / "manifest.json").read_text()
        b = (tmp_path / "b" / "manifest.json").read_text()
        assert a == b
        clip_a = (tmp_path / "a" / "train" / "clip_0000.mclip").read_bytes()
        clip_b = (tmp_path / "b" / "train" / "clip_0000.mclip").read_bytes()
        assert clip_a == clip_b

    def test_invalid_family_exits_2(self, tmp_path, capsys):
        rc = main(["gen-data", "--out", str(tmp_path / "x"),
                   "--families", '{"moonwalk": 1}'])
        assert rc == 2
        assert "moonwalk" in capsys.readouterr().err


class TestTrain:
    def test_writes_artifacts(self, work):
        for name in ("checkpoint.model", "init.gmm", "curves.csv"):
            assert (work / "run" / name).exists()
        rows = load_curves(work / "run" / "curves.csv")
        assert [r["epoch"] for r in rows] == [0, 1, 2]

    def test_resume_continues_epoch_numbering(self, work, tmp_path):
        cfg = dict(TRAIN_CFG, dataset=str(work / "ds"), out=str(tmp_path / "run2"),
                   resume=str(work / "run"))
        with open(tmp_path / "resume.json", "w") as f:
            json.dump(cfg, f)
        assert main(["train", "--config", str(tmp_path / "resume.json")]) == 0
        rows = load_curves(tmp_path / "run2" / "curves.csv")
        assert [r["epoch"] for r in rows] == [0, 1, 2, 3, 4]

    def test_missing_dataset_exits_2(self, tmp_path, capsys):
        rc = main(["train", "--dataset", str(tmp_path / "nope")])
        assert rc == 2
        assert "not found" in capsys.readouterr().err


class TestSample:
    def test_count_frames_and_determinism(self, work, tmp_path):
        args = ["sample", "--checkpoint", str(work / "run" / "checkpoint.model"),
                "--dataset", str(work / "ds"), "--split", "train",
                "--count", "3", "--frames", "15", "--seed", "3"]
        assert main(args + ["--out", str(tmp_path / "s1")]) == 0
        names = sorted(os.listdir(tmp_path / "s1"))
        assert names == [f"sample_{i:04d}.mclip" for i in range(3)]
        clips = [load_clip(tmp_path / "s1" / n, validate=False) for n in names]
        assert all(c.num_frames == 15 for c in clips)
        joints = torch.stack([c.joints() for c in clips])
        assert apd(joints) > 0.0

        assert main(args + ["--out", str(tmp_path / "s2")]) == 0
        for n in names:
            assert (tmp_path / "s1" / n).read_bytes() == (tmp_path / "s2" / n).read_bytes()


@pytest.fixture(scope="module")
def fits(work, tmp_path_factory):
    out = tmp_path_factory.mktemp("fits")
    rc = main(["fit", "--checkpoint", str(work / "run" / "checkpoint.model"),
               "--gmm", str(work / "run" / "init.gmm"),
               "--problems", str(work / "problems"), "--out", str(out)])
    assert rc == 0
    return out


class TestFit:
    def test_stage_trace_recorded(self, fits):
        sidecar = json.loads((fits / "seq_000.json").read_text())
        stages = [entry["stage"] for entry in sidecar["energy_trace"]]
        assert stages == ["init_a", "init_b", 0, 1, 2, 3]
        for entry in sidecar["energy_trace"]:
            assert entry["trace"], "every stage stores its iterate values"

    def test_result_files_load(self, fits, work):
        clip, sidecar = F.load_fit_result(fits / "seq_000")
        assert clip.num_frames == 10
        assert len(sidecar["g"]) == 3

    def test_init_only_baseline(self, work, tmp_path):
        rc = main(["fit", "--problems", str(work / "problems"),
                   "--out", str(tmp_path / "base"), "--init-only", "true"])
        assert rc == 0
        sidecar = json.loads((tmp_path / "base" / "seq_000.json").read_text())
        stages = [entry["stage"] for entry in sidecar["energy_trace"]]
        assert stages == ["init_a", "init_b"]

    def test_skeleton_hash_mismatch_errors(self, work, tmp_path, capsys):
        bad = tmp_path / "problems_bad"
        os.makedirs(bad)
        doc = json.loads((work / "problems" / "seq_000.problem").read_text())
        doc["meta"]["skeleton_hash"] = "bogus"
        (bad / "seq_000.problem").write_text(json.dumps(doc))
        shutil.copy(work / "problems" / "seq_000.npz", bad / "seq_000.npz")
        rc = main(["fit", "--checkpoint", str(work / "run" / "checkpoint.model"),
                   "--gmm", str(work / "run" / "init.gmm"),
                   "--problems", str(bad), "--out", str(tmp_path / "out")])
        assert rc == 2
        assert "skeleton" in capsys.readouterr().err


class TestEval:
    def test_truth_against_itself_is_zero(self, work, tmp_path):
        rc = main(["eval", "--est", str(work / "refs"), "--ref", str(work / "refs"),
                   "--out", str(tmp_path / "self")])
        assert rc == 0
        row = json.loads((tmp_path / "self" / "report.json").read_text())["sequences"][0]
        for key in ("err_all_cm", "err_vis_cm", "err_occ_cm", "err_legs_cm"):
            assert row[key] == 0.0
        assert row["contact_acc"] == 1.0
        assert row["accel_est"] == row["accel_ref"]

    def test_report_carries_every_metric(self, work, tmp_path):
        rc = main(["eval", "--est", str(work / "refs"), "--ref", str(work / "refs"),
                   "--problems", str(work / "problems"),
                   "--out", str(tmp_path / "rep"), "--svg", "true"])
        assert rc == 0
        doc = json.loads((tmp_path / "rep" / "report.json").read_text())
        expected = {"err_all_cm", "err_vis_cm", "err_occ_cm", "err_legs_cm",
                    "accel_est", "accel_ref", "pen_freq", "pen_dist_cm",
                    "contact_acc"}
        assert expected <= set(doc["sequences"][0])
        assert (tmp_path / "rep" / "report.csv").exists()
        assert (tmp_path / "rep" / "svg" / "err_all_cm.svg").exists()

    def test_occlusion_mask_splits_errors(self, work, tmp_path):
        # hide two joints, corrupt exactly those in the estimate: the
        # occluded error must see the 5 cm offset, the visible error none
        ref = load_clip(work / "refs" / "seq_000.mclip")
        vis = torch.ones(10, st.NUM_JOINTS, dtype=torch.bool)
        vis[:, 3] = False
        vis[:, 7] = False
        states = ref.states.clone()
        joints = states[:, st.JOINT_POS].reshape(10, st.NUM_JOINTS, 3)
        joints[:, 3, 2] += 0.05
        joints[:, 7, 2] += 0.05
        states[:, st.JOINT_POS] = joints.reshape(10, -1)
        est = dataclasses.replace(ref, states=states)

        est_dir = tmp_path / "est"
        prob_dir = tmp_path / "problems"
        os.makedirs(est_dir)
        os.makedirs(prob_dir)
        save_clip(est, est_dir / "case.mclip")
        save_clip(ref, tmp_path / "refs_case.mclip")
        os.makedirs(tmp_path / "refs")
        save_clip(ref, tmp_path / "refs" / "case.mclip")
        problem = F.FitProblem(obs=F.Observation("joints3d", ref.joints(), vis))
        F.save_fit_problem(prob_dir / "case.problem", problem)

        rc = main(["eval", "--est", str(est_dir), "--ref", str(tmp_path / "refs"),
                   "--problems", str(prob_dir), "--out", str(tmp_path / "split")])
        assert rc == 0
        row = json.loads((tmp_path / "split" / "report.json").read_text())["sequences"][0]
        # clips store float32, so the offset round-trips at ~1e-6 cm
        assert row["err_vis_cm"] == pytest.approx(0.0, abs=1e-4)
        assert row["err_occ_cm"] == pytest.approx(5.0, abs=1e-4)


class TestCheckCommand:
    def test_passes_and_reports(self, capsys):
        rc = main(["check", "--instances", "1", "--names", '["e_gnd", "e_shape"]'])
        assert rc == 0
        out = capsys.readouterr().out
        assert "all passed" in out

    def test_fault_injection_fails_with_exit_3(self):
        rc = main(["check", "--instances", "1", "--names", '["e_gnd"]',
                   "--fault", "0.01"])
        assert rc == 3
        assert main(["check", "--instances", "1", "--names", '["e_gnd"]']) == 0


class TestConfigPlumbing:
    def test_env_seed_overrides_config(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MOTIONPRIOR_SEED", "99")
        rc = main(["gen-data", "--out", str(tmp_path / "d"), "--seed", "1",
                   "--families", '{"squat": 1}', "--duration", "1.0"])
        assert rc == 0
        assert json.loads((tmp_path / "d" / "manifest.json").read_text())["seed"] == 99

    def test_bad_env_seed_exits_2(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MOTIONPRIOR_SEED", "zebra")
        assert main(["gen-data", "--out", str(tmp_path / "d")]) == 2

    def test_unknown_override_exits_2(self, tmp_path, capsys):
        rc = main(["gen-data", "--out", str(tmp_path / "d"), "--bogus", "1"])
        assert rc == 2
        assert "bogus" in capsys.readouterr().err

    def test_dangling_override_exits_2(self, tmp_path):
        assert main(["gen-data", "--out"]) == 2

    def test_module_entry_point(self):
        proc = subprocess.run(
            [sys.executable, "-m", "motionprior", "check", "--instances", "1",
             "--names", '["e_shape"]'],
            capture_output=True, text=True, timeout=300,
        )
        assert proc.returncode == 0, proc.stderr
        assert "all passed" in proc.stdout
