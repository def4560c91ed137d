"""Metric definitions against hand oracles and brute-force recounts."""

import json

import numpy as np
import pytest
import torch

from motionprior import metrics as M
from motionprior.kinematics import GroundPlane, default_skeleton


def rand_joints(t, j, seed, scale=1.0):
    gen = torch.Generator().manual_seed(seed)
    return scale * torch.randn(t, j, 3, generator=gen, dtype=torch.float64)


class TestAdeFde:
    def test_identical(self):
        p = rand_joints(6, 5, 0)
        assert M.ade_fde(p, p) == (0.0, 0.0)

    def test_uniform_offset(self):
        p = rand_joints(6, 5, 1)
        q = p + torch.tensor([0.01, 0.0, 0.0], dtype=torch.float64)
        a, f = M.ade_fde(q, p)
        assert a == pytest.approx(1.0, rel=1e-12)
        assert f == pytest.approx(1.0, rel=1e-12)

    def test_two_frame_case(self):
        true = torch.zeros(2, 3, 3, dtype=torch.float64)
        pred = torch.zeros(2, 3, 3, dtype=torch.float64)
        pred[0, :, 0] = 0.01
        pred[1, :, 0] = 0.03
        a, f = M.ade_fde(pred, true)
        assert a == pytest.approx(2.0, rel=1e-12)
        assert f == pytest.approx(3.0, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            M.ade_fde(rand_joints(3, 4, 0), rand_joints(3, 5, 0))

    def test_joint_permutation_invariant(self):
        p, q = rand_joints(5, 7, 2), rand_joints(5, 7, 3)
        perm = torch.randperm(7, generator=torch.Generator().manual_seed(4))
        assert M.ade_fde(p, q) == M.ade_fde(p[:, perm], q[:, perm])


class TestApd:
    def test_identical_samples(self):
        s = rand_joints(4, 6, 0).unsqueeze(0).repeat(5, 1, 1, 1)
        assert M.apd(s) == 0.0

    def test_single_pair_offset(self):
        a = rand_joints(4, 6, 1)
        b = a + torch.tensor([0.0, 0.02, 0.0], dtype=torch.float64)
        assert M.apd(torch.stack([a, b])) == pytest.approx(2.0, rel=1e-12)

    def test_sample_order_invariant(self):
        s = torch.stack([rand_joints(4, 6, i) for i in range(4)])
        shuffled = s[[2, 0, 3, 1]]
        assert M.apd(s) == pytest.approx(M.apd(shuffled), rel=1e-12)

    def test_single_sample(self):
        assert M.apd(rand_joints(4, 6, 0).unsqueeze(0)) == 0.0


class TestAccel:
    def test_constant_zero(self):
        p = torch.ones(8, 3, 3, dtype=torch.float64)
        assert float(M.accel(p).max()) == 0.0

    def test_linear_zero(self):
        t = torch.arange(8, dtype=torch.float64).reshape(8, 1, 1)
        p = t * torch.tensor([0.1, -0.2, 0.3], dtype=torch.float64)
        assert float(M.accel(p).abs().max()) < 1e-12

    def test_unit_magnitude(self):
        h = 1.0 / 30.0
        p = torch.zeros(3, 1, 3, dtype=torch.float64)
        p[2, 0, 2] = h * h  # second difference h^2 on one axis
        out = M.accel(p, h=h)
        assert out.shape == (1, 1)
        assert float(out[0, 0]) == pytest.approx(1.0, rel=1e-12)

    def test_quadratic_constant(self):
        t = torch.arange(10, dtype=torch.float64).reshape(10, 1, 1)
        p = 0.5 * t**2 * torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
        out = M.accel(p)
        assert float((out - out[0]).abs().max()) < 1e-9

    def test_short_sequences(self):
        assert M.accel(torch.zeros(2, 4, 3)).shape == (0, 4)


class TestPenetration:
    def test_all_above(self):
        toes = torch.full((10, 2, 3), 0.05, dtype=torch.float64)
        freq, dist = M.penetration(toes, GroundPlane(torch.zeros(3, dtype=torch.float64)))
        assert (freq, dist) == (0.0, 0.0)

    def test_hand_case(self):
        # one toe 5 cm under the floor in 1 of 10 frames
        toes = torch.full((10, 2, 3), 0.10, dtype=torch.float64)
        toes[4, 0, 2] = -0.05
        freq, dist = M.penetration(toes, GroundPlane(torch.zeros(3, dtype=torch.float64)))
        assert freq == pytest.approx(2.0 / (20 * 6), rel=1e-12)
        assert dist == pytest.approx(0.25, rel=1e-12)

    def test_strict_threshold(self):
        toes = torch.full((1, 2, 3), 1.0, dtype=torch.float64)
        toes[0, 0, 2] = -0.03  # exactly 3 cm deep
        freq, _ = M.penetration(toes, GroundPlane(torch.zeros(3, dtype=torch.float64)))
        # counts at threshold 0 only; 3 > 3 is false
        assert freq == pytest.approx(1.0 / (2 * 6), rel=1e-12)

    def test_brute_force_recount(self):
        gen = torch.Generator().manual_seed(7)
        toes = 0.1 * torch.randn(25, 2, 3, generator=gen, dtype=torch.float64)
        plane = GroundPlane.from_normal_offset(
            torch.tensor([0.05, -0.02, 1.0], dtype=torch.float64), 0.01
        )
        freq, dist = M.penetration(toes, plane)
        n, d = plane.decompose()
        count = {thr: 0 for thr in M.PENETRATION_THRESHOLDS_CM}
        depth_total = 0.0
        cells = 0
        for t in range(25):
            for s in range(2):
                h = float(toes[t, s] @ n) - float(d)
                dep = max(-h, 0.0) * 100.0
                for thr in M.PENETRATION_THRESHOLDS_CM:
                    count[thr] += 1 if dep > thr else 0
                depth_total += dep
                cells += 1
        freq_b = sum(count[thr] / cells for thr in M.PENETRATION_THRESHOLDS_CM) / 6
        assert freq == pytest.approx(freq_b, rel=1e-12)
        assert dist == pytest.approx(depth_total / cells, rel=1e-12)

    def test_tilted_plane(self):
        plane = GroundPlane.from_normal_offset(
            torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64), 0.5
        )
        toes = torch.zeros(1, 2, 3, dtype=torch.float64)
        toes[:, :, 2] = 0.44  # 6 cm below the plane z = 0.5
        freq, dist = M.penetration(toes, plane)
        assert dist == pytest.approx(6.0, rel=1e-12)
        # both toes exceed thresholds 0 and 3 cm: (2/2 + 2/2) / 6
        assert freq == pytest.approx(2.0 / 6.0, rel=1e-12)

    def test_bad_shape(self):
        with pytest.raises(ValueError, match="toe"):
            M.penetration(torch.zeros(4, 3, 3), GroundPlane(torch.zeros(3)))


class TestContactAccuracy:
    def test_perfect(self):
        labels = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
        probs = torch.tensor([[0.1, 0.9], [0.8, 0.2]], dtype=torch.float64)
        assert M.contact_accuracy(probs, labels) == 1.0

    def test_half_probs_tie_positive(self):
        labels = torch.tensor([[1.0, 0.0, 1.0, 0.0]], dtype=torch.float64)
        probs = torch.full((1, 4), 0.5, dtype=torch.float64)
        # ties predict contact: right on the two positives only
        assert M.contact_accuracy(probs, labels) == 0.5

    def test_inverted(self):
        labels = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
        probs = torch.tensor([[0.9, 0.1]], dtype=torch.float64)
        assert M.contact_accuracy(probs, labels) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            M.contact_accuracy(torch.zeros(2, 8), torch.zeros(3, 8))


class TestPositionalErrors:
    def test_all_zero(self):
        p = rand_joints(4, 6, 0)
        vis = torch.ones(4, 6, dtype=torch.bool)
        out = M.positional_errors(p, p, vis, [1, 2])
        assert out == {"vis": 0.0, "occ": 0.0, "all": 0.0, "legs": 0.0}

    def test_single_occluded_error(self):
        true = torch.zeros(3, 4, 3, dtype=torch.float64)
        pred = true.clone()
        pred[1, 2, 0] = 0.02
        vis = torch.ones(3, 4, dtype=torch.bool)
        vis[1, 2] = False
        out = M.positional_errors(pred, true, vis, [])
        assert out["occ"] == pytest.approx(2.0, rel=1e-12)
        assert out["vis"] == 0.0

    def test_mixed_case(self):
        true = torch.zeros(2, 2, 3, dtype=torch.float64)
        pred = true.clone()
        pred[0, 0, 1] = 0.01  # visible, 1 cm
        pred[1, 1, 1] = 0.03  # occluded, 3 cm
        vis = torch.tensor([[True, True], [True, False]])
        out = M.positional_errors(pred, true, vis, [1])
        assert out["vis"] == pytest.approx(1.0 / 3, rel=1e-12)
        assert out["occ"] == pytest.approx(3.0, rel=1e-12)
        assert out["all"] == pytest.approx(4.0 / 4, rel=1e-12)
        assert out["legs"] == pytest.approx(1.5, rel=1e-12)

    def test_permutation_invariant(self):
        p, q = rand_joints(5, 6, 1), rand_joints(5, 6, 2)
        vis = torch.rand(5, 6, generator=torch.Generator().manual_seed(3)) > 0.4
        vis[0, 0] = True
        perm = [3, 1, 5, 0, 2, 4]
        legs = [2, 4]
        legs_p = [perm.index(i) for i in legs]
        a = M.positional_errors(p, q, vis, legs)
        b = M.positional_errors(p[:, perm], q[:, perm], vis[:, perm], legs_p)
        for key in a:
            assert a[key] == pytest.approx(b[key], rel=1e-12)

    def test_root_align(self):
        j = rand_joints(4, 5, 0)
        shifted = j + torch.tensor([3.0, -1.0, 2.0], dtype=torch.float64)
        a = M.root_align(j)
        b = M.root_align(shifted)
        assert float((a - b).abs().max()) < 1e-12
        assert float(a[:, 0].abs().max()) == 0.0

    def test_leg_ids(self):
        skel = default_skeleton()
        ids = M.leg_joint_ids(skel)
        names = [skel.joint_names[i] for i in ids]
        assert len(ids) == 6
        assert all(any(k in n for k in ("knee", "ankle", "toe")) for n in names)


class TestEvalReport:
    def test_aggregate_means(self):
        r = M.EvalReport()
        r.add("a", ade=1.0, pen_freq=0.2)
        r.add("b", ade=3.0, pen_freq=0.4)
        agg = r.aggregate()
        assert agg["ade"] == 2.0
        assert agg["pen_freq"] == pytest.approx(0.3)

    def test_rejects_bad_values(self):
        r = M.EvalReport()
        with pytest.raises(ValueError, match="negative"):
            r.add("a", ade=-1.0)
        with pytest.raises(ValueError, match="0, 1"):
            r.add("a", pen_freq=1.5)

    def test_json_round_trip(self, tmp_path):
        r = M.EvalReport()
        r.add("s0", ade=1.5, fde=2.5)
        path = tmp_path / "report.json"
        r.save_json(path)
        back = M.EvalReport.load_json(path)
        assert back.sequences == r.sequences
        doc = json.loads(path.read_text())
        assert doc["aggregate"]["ade"] == 1.5

    def test_csv_layout(self, tmp_path):
        r = M.EvalReport()
        r.add("s0", ade=1.0)
        r.add("s1", ade=2.0, fde=4.0)
        path = tmp_path / "report.csv"
        r.save_csv(path)
        rows = path.read_text().strip().splitlines()
        assert rows[0] == "name,ade,fde"
        assert rows[-1].startswith("aggregate,1.5,4.0")

    def test_svg_plot(self, tmp_path):
        path = tmp_path / "curve.svg"
        M.write_line_svg(path, {"loss": [3.0, 2.0, 1.5], "val": [3.5, 2.5, 2.0]})
        text = path.read_text()
        assert text.startswith("<svg") and "polyline" in text
        assert text.count("polyline") == 2
