import numpy as np
import pytest

from fusiondet import autodiff as ad
from fusiondet import detect_toy as dt
from fusiondet import metrics_eval as me
from fusiondet import tree
from fusiondet.tensor_core import ShapeError


class TestScene:
    def test_deterministic(self):
        cfg = dt.SceneConfig(seed=5)
        a, ga = dt.gen_scene(cfg, 3)
        b, gb = dt.gen_scene(cfg, 3)
        assert a.tobytes() == b.tobytes() and ga == gb
        c, _ = dt.gen_scene(cfg, 4)
        assert a.tobytes() != c.tobytes()

    def test_empty_scene_is_noise(self):
        img, gts = dt.gen_scene(dt.SceneConfig(objects=(0, 0), noise=0.1), 0)
        assert gts == []
        assert abs(img.mean()) < 0.02 and 0.08 < img.std() < 0.12

    def test_disc_box(self):
        cfg = dt.SceneConfig(objects=(1, 1), noise=0.0, blur=0.0)
        img, [g] = dt.gen_scene(cfg, 0)
        cx, cy, r = (g.x1 + g.x2) / 2, (g.y1 + g.y2) / 2, (g.x2 - g.x1) / 2
        assert g.y2 - g.y1 == pytest.approx(2 * r)
        yy, xx = np.mgrid[0:64, 0:64] + 0.5
        mass = img[0, 0]
        assert (mass * xx).sum() / mass.sum() == pytest.approx(cx, abs=0.05)
        assert (mass * yy).sum() / mass.sum() == pytest.approx(cy, abs=0.05)
        assert mass.sum() / cfg.intensities[g.class_id] == pytest.approx(np.pi * r * r, rel=0.02)

    def test_trivial_scene_is_centred(self):
        img, [g] = dt.gen_scene(dt.trivial_scene(), 0)
        assert ((g.x1 + g.x2) / 2, (g.y1 + g.y2) / 2) == (32.0, 32.0)
        assert g.x2 - g.x1 >= 20
        with pytest.raises(ValueError):
            dt.SceneConfig(centered=True, objects=(1, 2))

    def test_default_scene_has_tiny_class(self):
        cfg = dt.SceneConfig()
        assert cfg.height == cfg.width == 64 and cfg.num_classes == 3
        assert cfg.radii[0] == (3.0, 5.0)

    def test_objects_own_distinct_cells(self):
        cfg = dt.SceneConfig(objects=(4, 4))
        for i in range(30):
            _, gts = dt.gen_scene(cfg, i)
            assert len(dt.assign(gts, 8, 8)) == len(gts)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            dt.SceneConfig(radii=((3, 40), (6, 8), (9, 12)))
        with pytest.raises(ValueError):
            dt.SceneConfig(objects=(3, 1))


class TestForward:
    def test_shape(self, rng):
        x = rng.standard_normal((2, 1, 64, 64)).astype(np.float32)
        assert dt.detector_forward(x, dt.init_detector()).shape == (2, 8, 8, 8)

    def test_toggle_block(self, rng):
        x = rng.standard_normal((1, 1, 64, 64)).astype(np.float32)
        a = dt.detector_forward(x, dt.init_detector(use_caf_block=True))
        b = dt.detector_forward(x, dt.init_detector(use_caf_block=False))
        assert a.shape == b.shape and not np.allclose(a, b)

    def test_arms_share_backbone_and_head(self):
        a, b = dt.init_detector(seed=3), dt.init_detector(seed=3, use_caf_block=False)
        assert a.head.weights.tobytes() == b.head.weights.tobytes()
        assert all(x.weights.tobytes() == y.weights.tobytes() for x, y in zip(a.backbone, b.backbone))

    def test_indivisible_size(self, rng):
        with pytest.raises(ShapeError):
            dt.detector_forward(rng.standard_normal((1, 1, 60, 64)), dt.init_detector())

    def test_gradcheck_loss_through_forward(self):
        p = dt.init_detector(seed=1, widths=(2, 3, 4), hidden=4, dtype=np.float64)
        img, gts = dt.gen_batch(dt.SceneConfig(height=16, width=16, radii=((2, 3), (3, 4), (4, 5)),
                                               objects=(1, 2)), [0, 1])
        params = dict(tree.named_arrays(p))

        def f(d):
            return dt.detection_loss(dt.detector_forward(img.astype(np.float64),
                                                         tree.map_arrays(p, lambda n, _: d[n])), gts)

        assert ad.grad_check(f, params, samples=40) < 1e-3


def one_object():
    return [[me.DetBox(20, 20, 36, 36, 1)]]


class TestLoss:
    def test_no_gts_saturated(self):
        preds = np.zeros((2, 8, 8, 8))
        preds[:, 0] = -20
        assert float(dt.detection_loss(preds, [[], []])) < 1e-7

    def test_perfect_predictions(self):
        preds = dt.perfect_predictions(one_object(), 8, 8, 3)
        assert float(dt.detection_loss(preds, one_object())) < 1e-3

    def test_non_negative(self, rng):
        for i in range(20):
            preds = rng.normal(0, 3, (2, 8, 8, 8))
            _, gts = dt.gen_batch(dt.SceneConfig(), [2 * i, 2 * i + 1])
            assert float(dt.detection_loss(preds, gts)) >= 0

    def test_batch_mismatch(self):
        with pytest.raises(ValueError):
            dt.detection_loss(np.zeros((2, 8, 8, 8)), [[]])


class TestDecode:
    def test_all_negative_is_empty(self):
        preds = np.full((2, 8, 8, 8), -20.0)
        assert dt.decode(preds) == [[], []]

    def test_single_saturated_cell(self):
        preds = np.full((1, 8, 4, 4), -20.0)
        preds[0, 0, 1, 2] = 20
        preds[0, 1:5, 1, 2] = 0.0
        preds[0, 6, 1, 2] = 20
        [[b]] = dt.decode(preds)
        assert (b.x1, b.y1, b.x2, b.y2, b.class_id) == (16.0, 8.0, 24.0, 16.0, 1)

    def test_encode_decode_round_trip(self):
        cfg = dt.SceneConfig()
        for i in range(20):
            _, gts = dt.gen_scene(cfg, i)
            [found] = dt.decode(dt.perfect_predictions([gts], 8, 8, 3))
            assert len(found) == len(gts)
            for g in gts:
                assert max(me.iou(g, d) for d in found if d.class_id == g.class_id) > 0.99

    def test_feeds_evaluation(self):
        p = dt.init_detector(use_caf_block=False)
        report = dt.evaluate_model(p, dt.SceneConfig(), n_images=4)
        assert 0.0 <= report.map50 <= 1.0


class TestTrain:
    def test_zero_lr_leaves_params(self):
        p = dt.init_detector(use_caf_block=True)
        r = dt.train(dt.TrainConfig(lr=0.0, steps=3, patience=None), dt.SceneConfig(), p)
        for (_, a), (_, b) in zip(tree.named_arrays(p), tree.named_arrays(r.params)):
            assert a.tobytes() == b.tobytes()

    def test_deterministic_history(self):
        run = lambda: dt.train(dt.TrainConfig(steps=5, patience=None), dt.SceneConfig(seed=2),
                               dt.init_detector(seed=2)).loss_history
        assert run() == run()

    def test_trivial_scene_loss_decreases(self):
        h = dt.train(dt.TrainConfig(steps=200, patience=None, train_images=1, batch_size=1),
                     dt.trivial_scene(), dt.init_detector(use_caf_block=False)).loss_history
        assert np.mean(h[190:200]) < np.mean(h[0:10])

    def test_early_stopping_returns_best(self):
        r = dt.train(dt.TrainConfig(lr=0.5, steps=40, eval_every=5, patience=2, val_images=4),
                     dt.SceneConfig(), dt.init_detector(use_caf_block=False))
        best = min(v for _, v in r.val_history)
        assert dict(r.val_history)[r.best_step] == best

    def test_clipping_bounds_the_update(self):
        p = dt.init_detector(use_caf_block=False)
        imgs, gts = dt.gen_batch(dt.SceneConfig(), range(8))
        _, g = dt.loss_and_grads(p, imgs, gts)
        r = dt.train(dt.TrainConfig(lr=1.0, steps=1, patience=None, clip_norm=0.5), dt.SceneConfig(), p)
        moved = np.sqrt(sum(np.sum((a.astype(np.float64) - b) ** 2)
                            for (_, a), (_, b) in zip(tree.named_arrays(r.params), tree.named_arrays(p))))
        assert dt.grad_norm(g) > 0.5
        assert moved == pytest.approx(0.5, rel=1e-4)

    def test_overfits_eight_images(self):
        h = dt.train(dt.TrainConfig(steps=2000, train_images=8, patience=None), dt.SceneConfig(),
                     dt.init_detector(use_caf_block=False)).loss_history
        assert min(h) < 0.1 * h[0]

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            dt.TrainConfig(clip_norm=0)
        with pytest.raises(ValueError):
            dt.TrainConfig(lr=-1)
        with pytest.raises(ValueError):
            dt.TrainConfig(batch_size=0)
