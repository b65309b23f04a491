import hashlib
import json

import numpy as np
import pytest

from egopose.dataio import SITTING, STANDING, load_dataset
from egopose.errors import InsufficientCorrespondences
from egopose.features import estimate_homography
from egopose.skeleton import KINECT_25, split_pose
from egopose.synthdata import (
    SynthConfig,
    generate,
    make_prototypes,
    n_standing_classes,
    synth_correspondences,
    synthesize,
)

L = KINECT_25


def classes(seq, name):
    return seq.extra[name].astype(np.int64)


def mutual_information_bits(a, b):
    joint = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(joint, (a, b), 1)
    joint /= joint.sum()
    pa, pb = joint.sum(1, keepdims=True), joint.sum(0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log2(joint[nz] / (pa @ pb)[nz])))


def dir_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [dict(coupling=1.5), dict(response_lag=0), dict(num_sequences=0), dict(num_test=5, num_sequences=4),
         dict(activities=()), dict(noise_mode="burst"), dict(dwell_frames=(5, 2))],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SynthConfig(**kw)

    def test_bayes_ceiling(self):
        ceil = SynthConfig(coupling=0.9).bayes_ceiling()
        assert ceil["upper"] == pytest.approx(0.9 + 0.1 / 8)
        assert ceil["lower"] == pytest.approx(0.9 + 0.1 / 4)
        assert ceil["mean"] == pytest.approx((ceil["upper"] + ceil["lower"]) / 2)
        assert SynthConfig(coupling=0.0).bayes_ceiling()["lower"] == pytest.approx(0.25)


class TestPrototypes:
    @pytest.mark.parametrize("half,K", [("upper", 8), ("lower", 4), ("upper", 12)])
    def test_min_distance(self, half, K):
        protos = make_prototypes(K, half, np.random.default_rng(2))
        part = split_pose(protos, L)[0 if half == "upper" else 1].reshape(K, -1, 3)
        for i in range(K):
            for j in range(i):
                assert np.sqrt(np.mean(np.sum((part[i] - part[j]) ** 2, axis=-1))) >= 10.0

    def test_standing_classes(self):
        assert n_standing_classes(4) == 2
        assert n_standing_classes(1) == 1


class TestResponseStructure:
    def test_full_coupling_is_a_lookup(self):
        cfg = SynthConfig(num_sequences=3, num_test=1, frames_per_sequence=200, coupling=1.0, seed=4)
        bundle = synthesize(cfg)
        lag = cfg.response_lag
        for seq in bundle.dataset.sequences:
            wear, inter = classes(seq, "wearer_classes"), classes(seq, "interactee_classes")
            for h, name in enumerate(("upper", "lower")):
                resp = bundle.response_maps[name]
                np.testing.assert_array_equal(wear[lag:, h], resp[inter[:-lag, h]])

    def test_response_maps_are_permutations(self):
        maps = synthesize(SynthConfig(num_sequences=1, num_test=0, frames_per_sequence=32)).response_maps
        for name, K in (("upper", 8), ("lower", 4)):
            assert sorted(maps[name]) == list(range(K)) and maps[name][0] == 0
        # posture survives the lower map
        n_stand = n_standing_classes(4)
        assert all((maps["lower"][k] < n_stand) == (k < n_stand) for k in range(4))

    def test_no_coupling_no_information(self):
        # about 10k frames of lagged pairs; the plug-in estimate carries a
        # small positive bias of roughly (K-1)^2 / (2 N ln 2) bits
        cfg = SynthConfig(num_sequences=20, num_test=0, frames_per_sequence=512, coupling=0.0, seed=8)
        seqs = synthesize(cfg).dataset.sequences
        lag = cfg.response_lag
        for h in (0, 1):
            wear = np.concatenate([classes(s, "wearer_classes")[lag:, h] for s in seqs])
            inter = np.concatenate([classes(s, "interactee_classes")[:-lag, h] for s in seqs])
            assert len(wear) >= 10_000
            assert mutual_information_bits(wear, inter) < 0.05

    def test_coupled_information_is_large(self):
        cfg = SynthConfig(num_sequences=4, num_test=0, frames_per_sequence=512, coupling=0.9, seed=8)
        seqs = synthesize(cfg).dataset.sequences
        lag = cfg.response_lag
        wear = np.concatenate([classes(s, "wearer_classes")[lag:, 0] for s in seqs])
        inter = np.concatenate([classes(s, "interactee_classes")[:-lag, 0] for s in seqs])
        assert mutual_information_bits(wear, inter) > 1.0

    def test_empirical_accuracy_near_ceiling(self):
        cfg = SynthConfig(num_sequences=8, num_test=0, frames_per_sequence=512, coupling=0.9, seed=1)
        bundle = synthesize(cfg)
        lag = cfg.response_lag
        for h, name in enumerate(("upper", "lower")):
            resp = bundle.response_maps[name]
            hits = np.concatenate([
                classes(s, "wearer_classes")[lag:, h] == resp[classes(s, "interactee_classes")[:-lag, h]]
                for s in bundle.dataset.sequences
            ])
            assert hits.mean() == pytest.approx(cfg.bayes_ceiling()[name], abs=0.02)


@pytest.fixture(scope="module")
def bundle():
    return synthesize(SynthConfig(num_sequences=4, num_test=1, frames_per_sequence=96, seed=11))


class TestChannels:
    def test_shapes_and_splits(self, bundle):
        ds = bundle.dataset
        assert [s.split for s in ds.sequences] == ["train"] * 3 + ["test"]
        for s in ds.sequences:
            n = s.n_frames
            assert s.scene.shape == (n, 2048) and s.keypoints.shape == (n, 50)
            assert s.homographies.shape == (n, 9) and s.gt.shape == (n, 25, 3)
            assert set(np.unique(s.posture)) <= {STANDING, SITTING}

    def test_shoulders_normalized(self, bundle):
        for s in bundle.dataset.sequences:
            width = np.linalg.norm(s.gt[:, L.left_shoulder] - s.gt[:, L.right_shoulder], axis=-1)
            np.testing.assert_allclose(width, 30.0, atol=1e-4)

    def test_keypoints_in_range_with_missing_zeros(self, bundle):
        kp = np.concatenate([s.keypoints for s in bundle.dataset.sequences])
        assert kp.min() >= 0 and kp.max() <= 1
        assert np.any(np.all(kp.reshape(len(kp), 25, 2) == 0, axis=-1))

    def test_first_homography_identity(self, bundle):
        for s in bundle.dataset.sequences:
            np.testing.assert_array_equal(s.homographies[0], np.eye(3).ravel())
            assert np.all(s.homographies[:, 0] == 1.0)

    def test_correspondences_consistent(self, bundle):
        s = bundle.dataset.sequences[0]
        corr = bundle.correspondences[s.id]
        for t in (1, 40, 95):
            rows = corr[corr[:, 0] == t].astype(np.float64)
            est = estimate_homography(rows[:, 1:3], rows[:, 3:5])
            np.testing.assert_allclose(est.ravel(), s.homographies[t], atol=1e-4)

    def test_manifest_reports_ceiling(self, bundle):
        man = bundle.dataset.manifest
        assert man["bayes_ceiling"] == SynthConfig(seed=11).bayes_ceiling()
        assert man["fps"] == 30 and man["channels"]["gt"] == 75


class TestSynthCorrespondences:
    def test_identity(self):
        for c in synth_correspondences(np.eye(3), 8, seed=1):
            assert c.src == c.dst

    def test_noise_free_recovery(self, rng):
        h = np.eye(3) + rng.normal(scale=[[0.02, 0.02, 3.0], [0.02, 0.02, 3.0], [1e-5, 1e-5, 0.0]])
        h /= h[0, 0]
        est = estimate_homography(synth_correspondences(h, 12, seed=2))
        assert np.max(np.abs(est - h)) < 1e-8

    def test_three_points_emitted_then_rejected(self):
        corr = synth_correspondences(np.eye(3), 3)
        assert len(corr) == 3
        with pytest.raises(InsufficientCorrespondences):
            estimate_homography(corr)


class TestDeterminism:
    def test_in_memory(self):
        cfg = SynthConfig(num_sequences=2, num_test=1, frames_per_sequence=64, seed=6)
        a, b = synthesize(cfg).dataset, synthesize(cfg).dataset
        for s, t in zip(a.sequences, b.sequences):
            assert s.scene.tobytes() == t.scene.tobytes() and s.gt.tobytes() == t.gt.tobytes()
            assert s.keypoints.tobytes() == t.keypoints.tobytes()

    def test_seed_changes_output(self):
        a = synthesize(SynthConfig(num_sequences=1, num_test=0, frames_per_sequence=64, seed=1))
        b = synthesize(SynthConfig(num_sequences=1, num_test=0, frames_per_sequence=64, seed=2))
        assert a.dataset.sequences[0].gt.tobytes() != b.dataset.sequences[0].gt.tobytes()

    def test_bundle_on_disk_byte_identical(self, tmp_path):
        cfg = SynthConfig(num_sequences=2, num_test=1, frames_per_sequence=48, seed=6)
        generate(cfg, tmp_path / "a")
        generate(cfg, tmp_path / "b")
        assert dir_digest(tmp_path / "a") == dir_digest(tmp_path / "b")

    def test_written_bundle_loads(self, tmp_path):
        cfg = SynthConfig(num_sequences=2, num_test=1, frames_per_sequence=48, seed=6)
        path = generate(cfg, tmp_path / "a")
        loaded = load_dataset(path)
        mem = synthesize(cfg).dataset
        assert [s.id for s in loaded.sequences] == [s.id for s in mem.sequences]
        for s, t in zip(loaded.sequences, mem.sequences):
            assert s.gt.tobytes() == t.gt.tobytes() and s.homographies.tobytes() == t.homographies.tobytes()
            np.testing.assert_array_equal(s.posture, t.posture)
        assert json.loads((tmp_path / "a" / "synth_config.json").read_text())["seed"] == 6
