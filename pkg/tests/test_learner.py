import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from activeseg.errors import EmptyAnnotationError, InvalidArgumentError, ParseError
from activeseg.learner import (
    AdamState,
    FeatureCache,
    FeatureConfig,
    MlpParams,
    PartialLabels,
    TrainConfig,
    adam_step,
    dice_loss,
    dice_loss_grad,
    draw_dropout_masks,
    extract_features,
    feature_matrix,
    forward,
    init_params,
    jaccard,
    load_checkpoint,
    predict,
    sample_stratified_batch,
    save_checkpoint,
    threshold,
    train,
)
from activeseg.volume import LabelVolume, PhantomSpec, ScalarVolume, generate_phantom

from gradcheck import REL_TOL, loss_grad_errors, param_grad_errors, random_instance

TINY = PhantomSpec(dims=(20, 20, 12), organ_count=(1, 1), organ_semi_axes=((4, 6), (4, 6), (2, 3)),
                   lesion_count=(0, 0))


class TestDiceLoss:
    def test_hand_values(self):
        p = np.array([1.0, 0.0])
        y = np.array([1.0, 0.0])
        assert dice_loss(p, y, np.ones(2)) == pytest.approx(1 - 2 / (2 + 1e-6), abs=1e-15)
        assert dice_loss(np.array([0.5, 0.5]), np.array([1.0, 0.0]), np.ones(2)) == pytest.approx(
            1 - 1.0 / (2.0 + 1e-6), abs=1e-15)

    def test_unannotated_voxels_are_ignored(self):
        p = np.array([0.3, 0.9, 0.1])
        y = np.array([1.0, 0.0, 1.0])
        w = np.array([1.0, 0.0, 1.0])
        assert dice_loss(p, y, w) == dice_loss(p[[0, 2]], y[[0, 2]], w[[0, 2]])
        assert dice_loss_grad(p, y, w)[1] == 0.0

    def test_empty_weights_rejected(self):
        with pytest.raises(EmptyAnnotationError):
            dice_loss(np.ones(3), np.ones(3), np.zeros(3))
        with pytest.raises(EmptyAnnotationError):
            dice_loss_grad(np.ones(3), np.ones(3), np.zeros(3))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_loss_in_unit_interval(self, seed):
        p, y, w = random_instance(np.random.default_rng(seed))
        assert 0.0 <= dice_loss(p, y, w) <= 1.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            assert loss_grad_errors(*random_instance(rng)).max() < REL_TOL


class TestNetwork:
    def test_backprop_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        for n in (1, 7, 20):
            assert param_grad_errors(rng, n).max() < REL_TOL
        assert param_grad_errors(rng, 9, hidden=(4, 3)).max() < REL_TOL

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        params = init_params([4, 8, 2], 0.25, rng)
        probs = forward(params, rng.normal(size=(50, 4)) * 30)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_init_within_glorot_limit(self):
        params = init_params([10, 30, 2], 0.25, np.random.default_rng(3))
        assert np.abs(params.weights[0]).max() <= np.sqrt(6 / 40)
        assert not np.any(params.biases[0])

    def test_dropout_masks_scale(self):
        params = init_params([3, 1000, 2], 0.25, np.random.default_rng(4))
        m = draw_dropout_masks(params, 200, np.random.default_rng(5))[0]
        assert set(np.unique(m)) == {0.0, 1.0 / 0.75}
        assert abs((m == 0).mean() - 0.25) < 0.01

    def test_shape_validation(self):
        with pytest.raises(InvalidArgumentError):
            MlpParams([np.zeros((3, 4)), np.zeros((5, 2))], [np.zeros(4), np.zeros(2)])
        with pytest.raises(InvalidArgumentError):
            MlpParams([np.zeros((3, 4)), np.zeros((4, 3))], [np.zeros(4), np.zeros(3)])


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        params = MlpParams([np.ones((2, 2)), np.ones((2, 2))], [np.zeros(2), np.zeros(2)])
        grads = MlpParams([np.full((2, 2), 3.0), np.full((2, 2), -0.5)], [np.ones(2), np.zeros(2)])
        cfg = TrainConfig(learning_rate=0.01)
        out, state = adam_step(params, grads, AdamState.zeros_like(params), cfg)
        # bias-corrected first step is lr * g / (|g| + eps)
        np.testing.assert_allclose(out.weights[0], 1.0 - 0.01 * 3 / (3 + 1e-8), rtol=1e-12)
        np.testing.assert_allclose(out.weights[1], 1.0 + 0.01 * 0.5 / (0.5 + 1e-8), rtol=1e-12)
        assert np.all(out.biases[1] == 0.0)
        assert state.t == 1

    def test_matches_hand_recurrence(self):
        rng = np.random.default_rng(6)
        theta = rng.normal(size=3)
        params = MlpParams([theta.reshape(3, 1) * np.ones((3, 2)), np.ones((2, 2))], [np.zeros(2), np.zeros(2)])
        cfg = TrainConfig(learning_rate=0.05)
        state = AdamState.zeros_like(params)
        m = v = 0.0
        x = params.weights[0][0, 0]
        for t in range(1, 6):
            g = float(rng.normal())
            gr = MlpParams([np.full((3, 2), g), np.zeros((2, 2))], [np.zeros(2), np.zeros(2)])
            params, state = adam_step(params, gr, state, cfg)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x -= 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            assert params.weights[0][0, 0] == pytest.approx(x, rel=1e-12)


class TestFeatures:
    def test_box_mean_oracle(self):
        rng = np.random.default_rng(7)
        v = ScalarVolume(rng.normal(75, 50, size=(6, 5, 4)))
        cfg = FeatureConfig(scales=(1, 3))
        F = feature_matrix(v, cfg)
        norm = (v.data - 75) / 50
        padded = np.pad(norm, 1, mode="reflect")  # edge sample not repeated
        i, j, k = 2, 1, 3
        col = i + 6 * (j + 5 * k)
        assert F[col, 0] == pytest.approx(norm[i, j, k])
        assert F[col, 1] == pytest.approx(padded[i:i + 3, j:j + 3, k:k + 3].mean(), abs=1e-12)

    def test_extract_subset_and_cache(self):
        img, _ = generate_phantom(TINY, 0)
        cfg = FeatureConfig(include_raw=True, include_z=True)
        F = feature_matrix(img, cfg)
        assert F.shape == (img.data.size, cfg.n_features)
        idx = np.array([0, 17, 400])
        np.testing.assert_array_equal(extract_features(img, cfg, idx), F[idx])
        cache = FeatureCache(cfg)
        assert cache.get(img) is cache.get(img)


def _tiny_sets(n_train=2, n_val=1):
    vols = [generate_phantom(TINY, s) for s in range(n_train + n_val)]
    tr = [(img, PartialLabels.full(lab)) for img, lab in vols[:n_train]]
    va = [(img, lab) for img, lab in vols[n_train:]]
    return vols, tr, va


class TestTraining:
    def test_stratified_first_patch_hits_foreground(self):
        vols, tr, _ = _tiny_sets()
        cfg = TrainConfig(patch_size=(3, 3, 1))
        rng = np.random.default_rng(0)
        for _ in range(20):
            patches = sample_stratified_batch(tr, cfg, rng)
            assert len(patches) == cfg.batch_patches
            assert patches[0].y.any()
            assert all(pt.w.any() for pt in patches)

    def test_batch_needs_annotation(self):
        img, lab = generate_phantom(TINY, 0)
        empty = PartialLabels.from_slices(lab, [])
        with pytest.raises(EmptyAnnotationError):
            sample_stratified_batch([(img, empty)], TrainConfig(), np.random.default_rng(0))

    def test_training_improves_validation(self):
        _, tr, va = _tiny_sets()
        cfg = TrainConfig(max_steps=300, val_interval=100, seed=0)
        params, tlog = train(tr, va, cfg)
        first = train(tr, va, TrainConfig(max_steps=0, seed=0))[0]
        j0 = jaccard(threshold(predict(first, va[0][0], FeatureConfig())), va[0][1])
        assert tlog.best_jaccard > j0
        assert tlog.best_jaccard > 0.5
        assert [e[0] for e in tlog.entries] == [100, 200, 300]

    def test_deterministic_in_seed(self):
        _, tr, va = _tiny_sets()
        cfg = TrainConfig(max_steps=60, val_interval=30, seed=3)
        a, _ = train(tr, va, cfg)
        b, _ = train(tr, va, cfg)
        assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))

    def test_last_step_validated_and_early_stop(self):
        _, tr, va = _tiny_sets()
        _, tlog = train(tr, va, TrainConfig(max_steps=50, val_interval=40))
        assert [e[0] for e in tlog.entries] == [40, 50]
        _, tlog = train(tr, va, TrainConfig(max_steps=400, val_interval=10, early_stop_fraction=0.1,
                                            min_delta=1.0))
        # first check at step 10 sets the reference; no later check can beat it by 1.0
        assert tlog.steps_run == 50

    def test_partial_labels_hide_unannotated(self):
        img, lab = generate_phantom(TINY, 0)
        zs = [int(np.flatnonzero(lab.data.any(axis=(0, 1)))[0])]
        pl = PartialLabels.from_slices(lab, zs)
        assert pl.annotated_count() == 20 * 20
        assert pl.labels.count() == lab.data[:, :, zs].sum()


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        params = init_params([5, 7, 3, 2], 0.25, np.random.default_rng(8))
        feats = FeatureConfig(scales=(1, 3, 5, 9), include_raw=True)
        save_checkpoint(tmp_path / "m.json", params, feats)
        back, f2 = load_checkpoint(tmp_path / "m.json")
        assert f2 == feats and back.dropout == params.dropout
        assert all(np.array_equal(a, b) for a, b in zip(params.arrays(), back.arrays()))

    def test_rejects_foreign_or_broken(self, tmp_path):
        (tmp_path / "x.json").write_text('{"format": "other"}')
        with pytest.raises(ParseError):
            load_checkpoint(tmp_path / "x.json")
        (tmp_path / "y.json").write_text("not json")
        with pytest.raises(ParseError):
            load_checkpoint(tmp_path / "y.json")
        params = init_params([5, 3, 2], 0.25, np.random.default_rng(0))
        save_checkpoint(tmp_path / "z.json", params, FeatureConfig())
        with pytest.raises(ParseError):
            load_checkpoint(tmp_path / "z.json")  # default features give 4 inputs, not 5


def test_label_volume_helpers():
    a = LabelVolume(np.zeros((2, 2, 2), dtype=np.uint8))
    assert jaccard(a, a) == 1.0
