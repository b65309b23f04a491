from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egopose.codebook import quantization_stats
from egopose.dataio import SITTING, STANDING, Dataset
from egopose.errors import MissingChannel, MissingGroundTruth, NoTaggedFrames, UnknownActivityTag
from egopose.evaluation import (
    PoseModel,
    baseline_constant,
    constant_pose,
    evaluate,
    score_predictions,
    still_vector,
    substitute_second_person,
    teacher_forced_accuracy,
    train_pose_model,
)
from egopose.skeleton import KINECT_25, align_for_eval
from egopose.training import TrainConfig

L = KINECT_25
FAST = TrainConfig(window_len=32, window_overlap=8, min_window_len=16, batch_size=4, epochs=2, seed=1)


def rot_z(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@pytest.fixture(scope="module")
def model(small_dataset, small_codebook):
    return train_pose_model(small_dataset, small_codebook, FAST, E=8, D=8)


class TestScore:
    def test_perfect_is_zero(self, small_dataset):
        seqs = small_dataset.split("test")
        rep = score_predictions({s.id: s.gt for s in seqs}, seqs, L)
        assert rep.overall == pytest.approx(0.0, abs=1e-5)

    def test_brute_force_groups(self, small_dataset, rng):
        seqs = small_dataset.sequences[:2]
        preds = {s.id: s.gt + rng.normal(scale=3.0, size=s.gt.shape) for s in seqs}
        rep = score_predictions(preds, seqs, L)
        errs = []
        for s in seqs:
            for p, g in zip(preds[s.id], s.gt.astype(np.float64)):
                errs.append(np.linalg.norm(align_for_eval(p, L) - align_for_eval(g, L), axis=-1))
        errs = np.array(errs)
        assert rep.overall == pytest.approx(errs.mean(), abs=1e-9)
        assert rep.upper == pytest.approx(errs[:, list(L.upper_idx)].mean(), abs=1e-9)
        assert rep.lower == pytest.approx(errs[:, list(L.lower_idx)].mean(), abs=1e-9)
        np.testing.assert_allclose(rep.per_joint, errs.mean(axis=0), atol=1e-9)
        # All is joint-weighted, not the mean of Upp and Bot
        n_up, n_lo = len(L.upper_idx), len(L.lower_idx)
        assert rep.overall == pytest.approx((n_up * rep.upper + n_lo * rep.lower) / L.J, abs=1e-9)
        assert rep.frame_count == sum(s.n_frames for s in seqs)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-np.pi, np.pi), st.floats(0.3, 4.0),
           st.tuples(*[st.floats(-300, 300)] * 3))
    def test_invariance(self, small_dataset, seed, theta, scale, offset):
        seq = small_dataset.sequences[0]
        gt = seq.gt[:8].astype(np.float64)
        pred = gt + np.random.default_rng(seed).normal(scale=4.0, size=gt.shape)
        move = lambda x: scale * (x @ rot_z(theta).T) + np.array(offset)  # noqa: E731
        a = score_predictions({seq.id: pred}, [replace(seq, gt=gt)], L)
        b = score_predictions({seq.id: move(pred)}, [replace(seq, gt=move(gt))], L)
        np.testing.assert_allclose(a.per_joint, b.per_joint, atol=1e-9)

    def test_per_activity_rows(self, small_dataset):
        seqs = small_dataset.sequences
        rep = score_predictions({s.id: s.gt[::-1] for s in seqs}, seqs, L, small_dataset.activities)
        assert list(rep.per_activity) == [a for a in small_dataset.activities if a in {s.activity for s in seqs}]
        assert sum(r.frames for r in rep.per_activity.values()) == rep.frame_count

    def test_activity_rows_weight_to_overall(self, small_dataset, rng):
        seqs = small_dataset.sequences
        rep = score_predictions({s.id: s.gt + rng.normal(size=s.gt.shape) for s in seqs}, seqs, L)
        weighted = sum(r.all * r.frames for r in rep.per_activity.values()) / rep.frame_count
        assert weighted == pytest.approx(rep.overall, abs=1e-9)

    def test_single_activity_row_is_overall(self, small_dataset):
        seqs = [replace(s, activity="conversation") for s in small_dataset.sequences]
        rep = score_predictions({s.id: s.gt[::-1] for s in seqs}, seqs, L)
        (row,) = rep.per_activity.values()
        assert (row.upper, row.lower, row.all) == (rep.upper, rep.lower, rep.overall)

    def test_quantized_truth_hits_codebook_floor(self, small_dataset, small_codebook):
        # emitting the quantized ground truth scores exactly the codebook's own error
        seqs = small_dataset.sequences
        preds = {s.id: small_codebook.reconstruct_many(small_codebook.quantize_many(s.gt)) for s in seqs}
        rep = score_predictions(preds, seqs, L)
        floor = quantization_stats(np.concatenate([s.gt for s in seqs]), small_codebook)["per_joint_cm"]
        assert rep.overall == pytest.approx(floor, abs=1e-9)

    def test_unknown_activity(self, small_dataset):
        seqs = small_dataset.sequences[:1]
        with pytest.raises(UnknownActivityTag):
            score_predictions({seqs[0].id: seqs[0].gt}, seqs, L, ["nothing"])

    def test_missing_gt(self, small_dataset):
        s = replace(small_dataset.sequences[0], gt=None)
        with pytest.raises(MissingGroundTruth):
            score_predictions({s.id: np.zeros((s.n_frames, 25, 3))}, [s], L)

    def test_csv_and_table(self, small_dataset, tmp_path):
        seqs = small_dataset.sequences[:1]
        rep = score_predictions({seqs[0].id: seqs[0].gt[::-1]}, seqs, L, accuracy={"upper": 0.5})
        text = rep.to_csv(tmp_path / "r.csv")
        lines = text.splitlines()
        assert lines[0] == "scope,name,upp,bot,all,frames"
        assert len(lines) == 1 + 1 + len(rep.per_activity) + L.J + 1
        assert (tmp_path / "r.csv").read_text() == text
        assert "accuracy[upper] 50.0%" in rep.table()


class TestBaselines:
    def test_constant_pose_is_tagged_mean(self, small_dataset):
        train = small_dataset.split("train")
        for mode, code in (("stand", STANDING), ("sit", SITTING)):
            frames = np.concatenate([s.gt[s.posture == code] for s in train]).astype(np.float64)
            np.testing.assert_allclose(constant_pose(mode, train), frames.mean(axis=0), atol=1e-9)

    def test_errors(self, small_dataset):
        train = small_dataset.split("train")
        with pytest.raises(ValueError):
            constant_pose("lie", train)
        untagged = [replace(s, posture=np.zeros_like(s.posture)) for s in train]
        with pytest.raises(NoTaggedFrames):
            constant_pose("stand", untagged)

    def test_stand_wins_on_standing_set(self, small_dataset):
        train = small_dataset.split("train")
        standing = [replace(s, gt=s.gt[s.posture == STANDING], posture=s.posture[s.posture == STANDING])
                    for s in small_dataset.split("test")]
        standing = [replace(s, scene=s.scene[: len(s.gt)]) for s in standing]
        _, stand = baseline_constant("stand", train, standing, L)
        _, sit = baseline_constant("sit", train, standing, L)
        assert stand.overall < sit.overall

    def test_mean_standing_test_set_scores_zero(self, small_dataset):
        train = small_dataset.split("train")
        pose = constant_pose("stand", train)
        seq = replace(small_dataset.split("test")[0], gt=np.repeat(pose[None], 10, 0).astype(np.float32))
        seq = replace(seq, scene=seq.scene[:10])
        _, rep = baseline_constant("stand", train, [seq], L)
        assert rep.overall == pytest.approx(0.0, abs=1e-4)

    def test_report_matches_scoring(self, small_dataset):
        pose, rep = baseline_constant("stand", small_dataset.subset("train"), small_dataset.subset("test"))
        seqs = small_dataset.split("test")
        again = score_predictions({s.id: np.repeat(pose[None], s.n_frames, 0) for s in seqs}, seqs, L)
        assert rep.overall == pytest.approx(again.overall, abs=1e-12)


class TestModel:
    def test_heads_validated(self, model, small_codebook):
        with pytest.raises(ValueError):
            PoseModel(small_codebook, {"upper": model.heads["upper"]})

    def test_predict_shapes(self, model, small_dataset):
        seqs = small_dataset.split("test")
        (ids, poses), = model.predict(seqs)
        n = seqs[0].n_frames
        assert ids.shape == (n, 2) and poses.shape == (n, 25, 3)
        np.testing.assert_array_equal(poses, model.codebook.reconstruct_many(ids))

    def test_accuracy_matches_predictions(self, model, small_dataset, small_codebook):
        seqs = small_dataset.split("test")
        rep = evaluate(model, seqs)
        (ids, _), = model.predict(seqs)
        truth = small_codebook.quantize_many(seqs[0].gt)
        assert rep.accuracy["upper"] == pytest.approx(np.mean(ids[:, 0] == truth[:, 0]))
        assert rep.accuracy["lower"] == pytest.approx(np.mean(ids[:, 1] == truth[:, 1]))
        assert rep.mean_accuracy == pytest.approx((rep.accuracy["upper"] + rep.accuracy["lower"]) / 2)

    def test_disabled_o_equals_zero_substitution(self, model, small_dataset):
        zeroed = substitute_second_person(small_dataset.subset("test"), "zero")
        a = evaluate(model.with_features(use_o=False), small_dataset.split("test"))
        b = evaluate(model.with_features(use_o=False), zeroed)
        c = evaluate(model, zeroed)
        assert a.overall == b.overall == c.overall

    def test_never_below_codebook_floor(self, model, small_dataset, small_codebook):
        seqs = small_dataset.split("test")
        rep = evaluate(model, seqs)
        floor = quantization_stats(np.concatenate([s.gt for s in seqs]), small_codebook)["per_joint_cm"]
        assert rep.overall >= floor - 1e-9

    def test_teacher_forced_in_range(self, model, small_dataset, small_codebook):
        acc = teacher_forced_accuracy(model.heads["lower"], small_dataset.split("train"), small_codebook)
        assert 0.0 <= acc <= 1.0

    def test_needs_gt(self, model, small_dataset):
        with pytest.raises(MissingGroundTruth):
            evaluate(model, [replace(small_dataset.sequences[0], gt=None)])


class TestSubstitution:
    def test_still_vector_oracle(self, small_dataset):
        train = small_dataset.split("train")
        vec = still_vector(train)
        rows = np.concatenate([s.keypoints[s.posture == STANDING] for s in train]).astype(np.float64)
        for j in range(25):
            pts = rows[:, 2 * j : 2 * j + 2]
            seen = pts[np.any(pts != 0, axis=1)]
            expected = seen.mean(axis=0) if len(seen) else np.zeros(2)
            np.testing.assert_allclose(vec[2 * j : 2 * j + 2], expected, atol=1e-12)

    def test_still_needs_tags(self, small_dataset):
        with pytest.raises(NoTaggedFrames):
            still_vector([replace(s, posture=np.zeros_like(s.posture)) for s in small_dataset.sequences])

    def test_modes(self, small_dataset):
        ds = small_dataset
        zero = substitute_second_person(ds, "zero")
        assert all(not s.keypoints.any() for s in zero.sequences)
        still = substitute_second_person(ds, "still")
        vec = still_vector(ds.split("train")).astype(np.float32)
        assert all(np.array_equal(s.keypoints, np.tile(vec, (s.n_frames, 1))) for s in still.sequences)
        gt3d = substitute_second_person(ds, "gt_3d")
        assert all(s.keypoints is s.extra["second_person_3d"] for s in gt3d.sequences)
        true = substitute_second_person(ds, "true_detector")
        assert all(a is b for a, b in zip(true.sequences, ds.sequences))
        # the original dataset is untouched
        assert any(s.keypoints.any() for s in ds.sequences)

    def test_random_draws_other_activity(self, small_dataset):
        ds = small_dataset
        a = substitute_second_person(ds, "random", seed=4)
        b = substitute_second_person(ds, "random", seed=4)
        sources = a.manifest["substitution"]["sources"]
        by_id = {s.id: s for s in ds.sequences}
        for s in a.sequences:
            src = by_id[sources[s.id]]
            assert src.activity != by_id[s.id].activity
            np.testing.assert_array_equal(s.keypoints, src.keypoints[: s.n_frames])
        assert sources == b.manifest["substitution"]["sources"]

    def test_random_needs_other_activity(self, small_dataset):
        one = Dataset(L, [replace(s, activity="same") for s in small_dataset.sequences])
        with pytest.raises(MissingChannel):
            substitute_second_person(one, "random")

    def test_missing_3d_channel(self, small_dataset):
        bare = Dataset(L, [replace(s, extra={}) for s in small_dataset.sequences])
        with pytest.raises(MissingChannel):
            substitute_second_person(bare, "predicted_3d_file")

    def test_unknown_mode(self, small_dataset):
        with pytest.raises(ValueError):
            substitute_second_person(small_dataset, "mirror")
