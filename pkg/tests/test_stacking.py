import json

import numpy as np
import pytest

from segstack.combiner import combine, decide
from segstack.errors import ConfigError, DataError
from segstack.imagery import ChannelImage, Dataset, LabelImage, ProbMapSet
from segstack.learners import SegmenterSpec, learn, segment
from segstack.solver import residual
from segstack.stacking import (
    EnsembleModel,
    FoldPlan,
    SecondLevelData,
    assemble_second_level,
    augment,
    augment_dataset,
    fit_weights,
    load_ensemble,
    out_of_fold_maps,
    plan_folds,
    predict,
    save_ensemble,
    train_ensemble,
)


def normalized_maps(rng, k, m, h, w):
    maps = []
    for _ in range(k):
        raw = rng.random((m, h, w))
        maps.append(ProbMapSet((raw / raw.sum(axis=0)).astype(np.float32)))
    return maps


def random_dataset(rng, n=6, h=8, w=8, m=2, channels=1):
    items = []
    for i in range(n):
        items.append((ChannelImage(rng.random((channels, h, w), dtype=np.float32), stem=f"i{i}"),
                      LabelImage(rng.integers(0, m, (h, w)).astype(np.uint8))))
    return Dataset(tuple(items), m)


class RecordingLearner:
    """Fake learn/segment pair that tags maps with the items it trained on."""

    def __init__(self):
        self.segmented = []  # (target stem, frozenset of training stems)

    def learn(self, spec, data):
        return frozenset(img.stem for img, _ in data.items)

    def segment(self, model, image):
        self.segmented.append((image.stem, model))
        planes = np.full((2, image.height, image.width), 0.5, dtype=np.float32)
        return ProbMapSet(planes)


class TestFoldPlan:
    def test_ten_items_five_folds(self):
        plan = plan_folds(10, 5, seed=1)
        sizes = [len(plan.holdout(t)) for t in range(5)]
        assert sizes == [2, 2, 2, 2, 2]
        covered = np.sort(np.concatenate([plan.holdout(t) for t in range(5)]))
        assert covered.tolist() == list(range(10))

    def test_seven_items_five_folds_sizes(self):
        plan = plan_folds(7, 5, seed=2)
        sizes = sorted((len(plan.holdout(t)) for t in range(5)), reverse=True)
        assert sizes == [2, 2, 1, 1, 1]

    def test_deterministic(self):
        a = plan_folds(23, 4, seed=9)
        b = plan_folds(23, 4, seed=9)
        assert np.array_equal(a.assignment, b.assignment)
        c = plan_folds(23, 4, seed=10)
        assert not np.array_equal(a.assignment, c.assignment)

    def test_invariants_over_random_configs(self):
        rng = np.random.default_rng(71)
        for _ in range(30):
            n = int(rng.integers(2, 60))
            t = int(rng.integers(2, n + 1))
            plan = plan_folds(n, t, seed=int(rng.integers(0, 1000)))
            sizes = np.bincount(plan.assignment, minlength=t)
            assert sizes.sum() == n
            assert sizes.max() - sizes.min() <= 1

    def test_bad_fold_counts(self):
        with pytest.raises(ConfigError):
            plan_folds(5, 1, seed=0)
        with pytest.raises(ConfigError):
            plan_folds(5, 6, seed=0)
        with pytest.raises(ConfigError):
            FoldPlan(3, np.array([0, 0, 1, 1, 2, 2, 0, 0]), seed=0)  # sizes differ by 2


class TestAugment:
    def test_six_model_three_class_channel_count(self):
        rng = np.random.default_rng(72)
        image = ChannelImage(rng.random((3, 4, 4), dtype=np.float32))
        maps = normalized_maps(rng, 6, 3, 4, 4)
        assert augment(image, maps).channels == 21  # 3 + 3*6

    def test_constant_map_channels(self):
        rng = np.random.default_rng(73)
        image = ChannelImage(rng.random((1, 3, 3), dtype=np.float32))
        pm = ProbMapSet(np.full((2, 3, 3), 0.5, dtype=np.float32))
        out = augment(image, [pm])
        assert out.channels == 3
        assert np.array_equal(out.data[0], image.data[0])
        assert np.all(out.data[1] == 0.5) and np.all(out.data[2] == 0.5)

    def test_channel_index_arithmetic_random(self):
        rng = np.random.default_rng(74)
        for _ in range(10):
            c = int(rng.integers(1, 4))
            m = int(rng.integers(2, 5))
            k = int(rng.integers(1, 5))
            image = ChannelImage(rng.random((c, 5, 6), dtype=np.float32))
            maps = normalized_maps(rng, k, m, 5, 6)
            out = augment(image, maps)
            assert out.channels == c + m * k
            for ki in range(k):
                for mi in range(m):
                    assert np.array_equal(out.data[c + ki * m + mi], maps[ki].planes[mi])

    def test_stem_preserved(self):
        rng = np.random.default_rng(75)
        image = ChannelImage(rng.random((1, 3, 3), dtype=np.float32), stem="keepme")
        out = augment(image, normalized_maps(rng, 1, 2, 3, 3))
        assert out.stem == "keepme"

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(76)
        image = ChannelImage(rng.random((1, 3, 3), dtype=np.float32))
        with pytest.raises(DataError):
            augment(image, normalized_maps(rng, 1, 2, 4, 4))


class TestOutOfFoldMaps:
    def test_purity_no_model_predicts_its_training_items(self):
        rng = np.random.default_rng(77)
        data = random_dataset(rng, n=9)
        plan = plan_folds(9, 3, seed=5)
        fake = RecordingLearner()
        specs = [SegmenterSpec("naiveBayesPatch"), SegmenterSpec("knnPatch")]
        maps = out_of_fold_maps(data, specs, plan, learn_fn=fake.learn, segment_fn=fake.segment)
        assert len(fake.segmented) == 9 * 2
        for stem, trained_on in fake.segmented:
            assert stem not in trained_on
        assert all(pm is not None for per_item in maps for pm in per_item)

    def test_two_fold_structure(self):
        rng = np.random.default_rng(78)
        data = random_dataset(rng, n=4)
        plan = plan_folds(4, 2, seed=1)
        fake = RecordingLearner()
        out_of_fold_maps(data, [SegmenterSpec("knnPatch")], plan,
                         learn_fn=fake.learn, segment_fn=fake.segment)
        holdout0 = {f"i{i}" for i in plan.holdout(0)}
        for stem, trained_on in fake.segmented:
            if stem in holdout0:
                assert trained_on == {f"i{i}" for i in plan.holdout(1)}
            else:
                assert trained_on == holdout0

    def test_output_count_is_items_times_models(self):
        rng = np.random.default_rng(79)
        data = random_dataset(rng, n=6)
        plan = plan_folds(6, 3, seed=2)
        fake = RecordingLearner()
        maps = out_of_fold_maps(data, [SegmenterSpec("knnPatch")] * 3, plan,
                                learn_fn=fake.learn, segment_fn=fake.segment)
        assert sum(len(per_item) for per_item in maps) == 6 * 3

    def test_external_learner_ignores_folds(self, tmp_path):
        from segstack.imagery import write_prob_map
        rng = np.random.default_rng(80)
        data = random_dataset(rng, n=4, h=5, w=5)
        wanted = {}
        for img, _ in data.items:
            pm = normalized_maps(rng, 1, 2, 5, 5)[0]
            write_prob_map(pm, tmp_path / f"{img.stem}.pmap")
            wanted[img.stem] = pm
        plan = plan_folds(4, 2, seed=3)
        maps = out_of_fold_maps(data, [SegmenterSpec("external", {"map_dir": str(tmp_path)})], plan)
        for (img, _), per_item in zip(data.items, maps):
            assert np.array_equal(per_item[0].planes, wanted[img.stem].planes)

    def test_worker_pool_matches_sequential(self):
        rng = np.random.default_rng(81)
        data = random_dataset(rng, n=6, m=2)
        plan = plan_folds(6, 2, seed=4)
        specs = [SegmenterSpec("naiveBayesPatch"), SegmenterSpec("knnPatch", {"max_reference": 64})]
        seq = out_of_fold_maps(data, specs, plan, workers=1)
        par = out_of_fold_maps(data, specs, plan, workers=3)
        for a_item, b_item in zip(seq, par):
            for a, b in zip(a_item, b_item):
                assert np.array_equal(a.planes, b.planes)

    def test_error_carries_fold_and_model_context(self):
        rng = np.random.default_rng(82)
        data = random_dataset(rng, n=4)
        plan = plan_folds(4, 2, seed=5)

        def broken_learn(spec, data):
            raise DataError("synthetic failure")

        with pytest.raises(DataError, match=r"fold 0, model 0"):
            out_of_fold_maps(data, [SegmenterSpec("knnPatch")], plan, learn_fn=broken_learn)


class TestSecondLevel:
    def test_row_count_small(self):
        rng = np.random.default_rng(83)
        maps = [normalized_maps(rng, 2, 2, 2, 2) for _ in range(2)]
        masks = [LabelImage(rng.integers(0, 2, (2, 2)).astype(np.uint8)) for _ in range(2)]
        sld = SecondLevelData(maps, masks)
        assert sld.row_count == 8
        assert sld.column_count == 4

    def test_column_count_six_model_three_class(self):
        rng = np.random.default_rng(84)
        maps = [normalized_maps(rng, 6, 3, 2, 2)]
        masks = [LabelImage(rng.integers(0, 3, (2, 2)).astype(np.uint8))]
        assert SecondLevelData(maps, masks).column_count == 18

    def test_row_count_formula_matches_streamed_blocks(self):
        rng = np.random.default_rng(85)
        data = random_dataset(rng, n=4, h=3, w=5)
        plan = plan_folds(4, 2, seed=6)
        aug = augment_dataset(data, out_of_fold_maps(data, [SegmenterSpec("knnPatch")], plan))
        sld = assemble_second_level(aug, [SegmenterSpec("knnPatch")], plan)
        assert sld.row_count == 4 * 3 * 5
        streamed = sum(labels.shape[0] for _, labels in sld.blocks())
        assert streamed == sld.row_count


@pytest.fixture(scope="module")
def trained(tiny_dataset):
    specs = [
        SegmenterSpec("naiveBayesPatch", seed=1),
        SegmenterSpec("logisticPixel", {"epochs": 40}, seed=2),
        SegmenterSpec("knnPatch", {"max_reference": 400}, seed=3),
    ]
    model, report = train_ensemble(tiny_dataset, specs, fold_count=3, seed=9)
    return tiny_dataset, specs, model, report


@pytest.fixture(scope="module")
def k1(tiny_dataset):
    spec = SegmenterSpec("logisticPixel", {"epochs": 40}, seed=4)
    model, report = train_ensemble(tiny_dataset, [spec], fold_count=3, seed=7)
    return tiny_dataset, spec, model, report


class TestTrainEnsemble:

    def test_fitted_residual_dominates_feasible_points(self, trained):
        _, _, model, report = trained
        for m in range(model.class_count):
            fitted = report.fitted_residuals[m]
            assert fitted <= report.uniform_residuals[m] + 1e-9
            for k in range(model.model_count):
                assert fitted <= report.single_model_residuals[k, m] + 1e-9

    def test_layer2_channel_arithmetic(self, trained):
        data, _, model, _ = trained
        expected = data.channels + model.class_count * model.model_count
        for m2 in model.layer2:
            assert m2.input_channels == expected

    def test_weights_inside_unit_box(self, trained):
        _, _, model, _ = trained
        assert model.weights.min() >= 0.0 and model.weights.max() <= 1.0

    def test_row_count_matches_dataset_pixels(self, trained):
        data, _, _, report = trained
        h, w = data.items[0][1].labels.shape
        assert report.row_count == len(data) * h * w
        for gram in report.grams:
            assert gram.rows == report.row_count

    def test_predict_deterministic(self, trained):
        data, _, model, _ = trained
        img = data.items[0][0]
        l1, pm1 = predict(model, img)
        l2, pm2 = predict(model, img)
        assert np.array_equal(l1.labels, l2.labels)
        assert np.array_equal(pm1.planes, pm2.planes)

    def test_save_load_round_trip(self, trained, tmp_path):
        data, _, model, _ = trained
        save_ensemble(model, tmp_path / "model")
        back = load_ensemble(tmp_path / "model")
        assert np.array_equal(back.weights, model.weights)
        img = data.items[2][0]
        a, _ = predict(model, img)
        b, _ = predict(back, img)
        assert np.array_equal(a.labels, b.labels)

    def test_saved_directory_layout(self, trained, tmp_path):
        _, _, model, _ = trained
        out = tmp_path / "layout"
        save_ensemble(model, out)
        assert (out / "manifest.json").is_file()
        assert (out / "weights.json").is_file()
        for k in range(model.model_count):
            assert (out / "layer1" / f"{k}.model").is_file()
            assert (out / "layer2" / f"{k}.model").is_file()
        weights = json.loads((out / "weights.json").read_text())
        assert len(weights) == model.model_count
        assert len(weights[0]) == model.class_count

    def test_fold_count_default_is_five(self):
        import inspect
        sig = inspect.signature(train_ensemble)
        assert sig.parameters["fold_count"].default == 5

    def test_bad_fold_count_rejected(self, tiny_dataset):
        with pytest.raises(ConfigError):
            train_ensemble(tiny_dataset, [SegmenterSpec("knnPatch")], fold_count=1)


class TestSingleModelEnsemble:
    def test_weights_are_best_scalars(self, k1):
        # Independent closed-form oracle: scalar least squares clipped to [0, 1].
        _, _, model, report = k1
        for m, gram in enumerate(report.grams):
            want = min(max(gram.b[0] / gram.g[0, 0], 0.0), 1.0)
            assert model.weights[0, m] == pytest.approx(want, abs=1e-10)

    def test_prediction_equals_scaled_single_model(self, k1):
        data, _, model, _ = k1
        assert model.weights.min() > 0.0
        for img, _ in list(data.items)[:4]:
            labels, _ = predict(model, img)
            maps1 = [segment(model.layer1[0], img)]
            p2 = segment(model.layer2[0], augment(img, maps1))
            scaled = model.weights[0][:, None, None] * p2.planes.astype(np.float64)
            assert np.array_equal(labels.labels, np.argmax(scaled, axis=0))
            # Unscaled argmax agrees wherever scaling cannot flip the winner;
            # with near-equal per-class weights that is almost every pixel.
            unscaled = np.argmax(p2.planes, axis=0)
            agree = float(np.mean(unscaled == labels.labels))
            assert agree >= 0.99


class TestOleMode:
    def test_ole_skips_second_layer_and_predicts(self, tiny_dataset):
        specs = [SegmenterSpec("naiveBayesPatch", seed=1),
                 SegmenterSpec("knnPatch", {"max_reference": 400}, seed=2)]
        model, report = train_ensemble(tiny_dataset, specs, fold_count=3, seed=9, ole=True)
        assert model.ole and model.layer2 is None
        img = tiny_dataset.items[0][0]
        labels, _ = predict(model, img)
        maps1 = [segment(m, img) for m in model.layer1]
        want = decide(combine(maps1, model.weights))
        assert np.array_equal(labels.labels, want.labels)

    def test_ole_round_trip(self, tiny_dataset, tmp_path):
        specs = [SegmenterSpec("naiveBayesPatch", seed=1)]
        model, _ = train_ensemble(tiny_dataset, specs, fold_count=3, seed=9, ole=True)
        save_ensemble(model, tmp_path / "ole")
        back = load_ensemble(tmp_path / "ole")
        assert back.ole
        img = tiny_dataset.items[1][0]
        assert np.array_equal(predict(model, img)[0].labels, predict(back, img)[0].labels)


class TestPredictWorkedExample:
    def test_hand_evaluated_combination(self):
        # Two models, two classes, constant planes; fusion weights 0.5/0.5
        # per class give memberships (0.4, 0.6) -> class index 1.
        rng = np.random.default_rng(86)
        p1 = ProbMapSet(np.stack([np.full((2, 2), 0.6, np.float32),
                                  np.full((2, 2), 0.4, np.float32)]))
        p2 = ProbMapSet(np.stack([np.full((2, 2), 0.2, np.float32),
                                  np.full((2, 2), 0.8, np.float32)]))
        weights = np.full((2, 2), 0.5)
        cm = combine([p1, p2], weights)
        f32 = np.float32
        assert np.allclose(cm.planes[0], 0.5 * float(f32(0.6)) + 0.5 * float(f32(0.2)), atol=1e-12)
        assert np.allclose(cm.planes[1], 0.5 * float(f32(0.4)) + 0.5 * float(f32(0.8)), atol=1e-12)
        assert np.all(decide(cm).labels == 1)

    def test_equal_weights_average_property(self):
        rng = np.random.default_rng(87)
        maps = normalized_maps(rng, 3, 2, 4, 4)
        cm = combine(maps, np.full((3, 2), 1.0 / 3.0))
        mean = np.mean([pm.planes.astype(np.float64) for pm in maps], axis=0)
        assert np.allclose(cm.planes, mean, atol=1e-12)


class TestEnsembleModelValidation:
    def test_layer2_channel_mismatch_rejected(self, tiny_dataset):
        spec = SegmenterSpec("naiveBayesPatch")
        l1 = [learn(spec, tiny_dataset)]
        with pytest.raises(ConfigError):
            EnsembleModel(layer1=l1, layer2=l1, weights=np.ones((1, 3)),
                          class_count=3, input_channels=1, fold_count=2, seed=0,
                          solver_mode="bvls")

    def test_bvls_weights_outside_unit_box_rejected(self, tiny_dataset):
        spec = SegmenterSpec("naiveBayesPatch")
        l1 = [learn(spec, tiny_dataset)]
        with pytest.raises(ConfigError):
            EnsembleModel(layer1=l1, layer2=None, weights=np.full((1, 3), 1.5),
                          class_count=3, input_channels=1, fold_count=2, seed=0,
                          solver_mode="bvls")
