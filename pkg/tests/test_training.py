import math

import numpy as np
import pytest

from lfdisp.autodiff import serialize
from lfdisp.lightfield import Sample, ViewPattern, epi_slope, extract_epi, make_sample, unstack_sais
from lfdisp.losses import LossWeights
from lfdisp.model import ModelConfig, PyramidConfig, build_model, load_model
from lfdisp.synth import Layer, SceneSpec, Texture, render
from lfdisp.training import (
    Adam,
    Dataset,
    TrainConfig,
    TrainingAborted,
    checkpoint_name,
    clip_gradients,
    evaluate,
    log_from_csv,
    lr_schedule,
    make_batches,
    read_train_config,
    train,
)


def tiny_model(seed=0, dtype=np.float32):
    cfg = ModelConfig(variant=9, pyramid=PyramidConfig(channels=2), encoder_channels=4,
                      residual_blocks=1, trunk_channels=4, seed=seed)
    return build_model(cfg, dtype=dtype)


def plane_sample(d=1.0, size=32, name="plane", seed=0):
    spec = SceneSpec(grid=(9, 9), size=(size, size),
                     layers=[Layer(d, Texture("noise", seed=seed, scale=1.0))])
    g = render(spec)
    return make_sample(g.lightfield, g.disparity.values, ViewPattern.for_variant(9), name)


def random_samples(n, size=12, seed=0):
    rng = np.random.default_rng(seed)
    return [Sample(rng.random((27, size, size)).astype(np.float32),
                   rng.uniform(-1, 1, (size, size)).astype(np.float32), f"s{i}") for i in range(n)]


class TestSchedule:
    def test_default_values(self):
        assert lr_schedule(0) == 0.001
        assert lr_schedule(10) == 0.0005
        assert lr_schedule(139) == pytest.approx(0.001 * 0.5 ** 13, rel=1e-12)
        assert lr_schedule(140) is None

    def test_fourteen_plateaus(self):
        values = []
        epoch = 0
        while (lr := lr_schedule(epoch)) is not None:
            values.append(lr)
            epoch += 1
        assert epoch == 140 and len(set(values)) == 14
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_raised_floor(self):
        cfg = TrainConfig(lr_floor=1e-3 * 0.75)
        assert lr_schedule(9, cfg) == 1e-3 and lr_schedule(10, cfg) is None

    def test_floor_equal_lr0_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_floor=1e-3)

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            lr_schedule(-1)


class TestConfig:
    def test_text_roundtrip(self):
        cfg = TrainConfig(lr0=0.01, batch_size=3, optimizer="sgd", max_epochs=4,
                          loss_weights=LossWeights(1, 0.5, 0), augment=False, adam_betas=(0.8, 0.9))
        assert TrainConfig.from_text(cfg.to_text()) == cfg

    def test_zero_weights_rejected(self):
        with pytest.raises(ValueError, match="loss_weights"):
            TrainConfig.from_text("loss_weights=0,0,0\n")

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown training config keys: lr"):
            TrainConfig.from_text("lr=0.1\n")

    @pytest.mark.parametrize("kw", [dict(decay_factor=1.0), dict(optimizer="rmsprop"),
                                    dict(batch_size=0), dict(grad_clip=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_file(self, tmp_path):
        p = tmp_path / "train.cfg"
        p.write_text("# desk run\nlr0 = 0.002\nmax_epochs=none\nrecord_timing=false\n")
        cfg = TrainConfig.from_file(p)
        assert cfg.lr0 == 0.002 and cfg.max_epochs is None and not cfg.record_timing


class TestBatches:
    def test_eight_variants_for_one_sample(self):
        s = plane_sample(size=16)
        cfg = TrainConfig(patch_size=16, batch_size=3)
        batches = list(make_batches([s], cfg, 0))
        assert [b[0].shape[0] for b in batches] == [3, 3, 2]
        xs = np.concatenate([b[0] for b in batches])
        assert len({x.tobytes() for x in xs}) == 8
        assert xs.shape[1:] == (27, 16, 16) and batches[0][1].shape == (3, 1, 16, 16)

    def test_deterministic(self):
        samples = random_samples(3, size=20)
        cfg = TrainConfig(patch_size=8, batch_size=4, seed=5)
        a = [x.tobytes() + y.tobytes() for x, y in make_batches(samples, cfg, 2)]
        b = [x.tobytes() + y.tobytes() for x, y in make_batches(samples, cfg, 2)]
        c = [x.tobytes() + y.tobytes() for x, y in make_batches(samples, cfg, 3)]
        assert a == b and a != c

    def test_no_augmentation(self):
        s = plane_sample(size=16)
        batches = list(make_batches([s], TrainConfig(patch_size=16, augment=False), 0))
        assert len(batches) == 1
        np.testing.assert_array_equal(batches[0][0][0], s.input)

    @pytest.mark.parametrize("d", [1.0, -1.5])
    def test_crops_geometrically_consistent(self, d):
        s = plane_sample(d, size=40)
        cfg = TrainConfig(patch_size=28, batch_size=8, seed=1)
        for xs, ys in make_batches([s], cfg, 0):
            for x, y in zip(xs, ys):
                lf = unstack_sais(x)
                h = epi_slope(extract_epi(lf, "horizontal", 14, 1), region=(6, 22))
                v = epi_slope(extract_epi(lf, "vertical", 14, 1), region=(6, 22))
                assert abs(h - y[0, 14, 14]) < 0.05 and abs(v - y[0, 14, 14]) < 0.05

    def test_small_sample_rejected(self):
        with pytest.raises(ValueError, match="smaller than patch"):
            list(make_batches(random_samples(1, size=8), TrainConfig(patch_size=16), 0))


class TestDataset:
    def test_split_disjoint_and_sized(self):
        ds = Dataset.from_samples(random_samples(10), val_fraction=0.2, seed=1)
        assert len(ds.split("val")) == 2 and len(ds.split("train")) == 8
        assert not {s.name for s in ds.split("val")} & {s.name for s in ds.split("train")}

    def test_overlap_rejected(self):
        s = random_samples(1)[0]
        with pytest.raises(ValueError, match="both splits"):
            Dataset([s, s], ["train", "val"])


class TestOptim:
    def test_clip(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_gradients(grads, 1.0) == pytest.approx(5.0)
        assert math.hypot(grads["a"][0], grads["b"][0]) == pytest.approx(1.0)
        g2 = {"a": np.array([0.3])}
        clip_gradients(g2, 0.0)
        assert g2["a"][0] == 0.3

    def test_adam_first_step_is_signed_lr(self):
        from lfdisp.autodiff import Tensor
        p = {"w": Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)}
        opt = Adam(p)
        opt.step({"w": np.array([0.1, -3.0, 2e-3])}, 0.01)
        np.testing.assert_allclose(p["w"].data, [0.99, -1.99, 0.49], atol=1e-6)


def small_config(**kw):
    base = dict(patch_size=8, batch_size=4, max_epochs=2, seed=3, record_timing=False)
    base.update(kw)
    return TrainConfig(**base)


class TestTrain:
    def test_writes_log_and_checkpoints(self, tmp_path):
        ds = Dataset.from_samples(random_samples(4), 0.25, seed=0)
        res = train(tiny_model(), ds, small_config(), out_dir=tmp_path)
        assert [r.epoch for r in res.log] == [0, 1]
        for e in (0, 1):
            assert (tmp_path / checkpoint_name(e)).exists()
            assert (tmp_path / (checkpoint_name(e) + ".cfg")).exists()
        assert (tmp_path / "best.bin").exists()
        log = log_from_csv((tmp_path / "log.csv").read_text())
        assert log[0].lr == 0.001 and log[0].val_mse_x100 is not None and log[0].seconds == 0
        assert read_train_config(tmp_path / checkpoint_name(1)) == small_config()
        assert len(res.step_losses) == 2 * 3 * 8 // 4

    def test_resume_bit_identical(self, tmp_path):
        samples = random_samples(3)
        cfg = small_config(max_epochs=3)
        full = train(tiny_model(), samples, cfg, out_dir=tmp_path / "full")
        part = train(tiny_model(), samples, small_config(max_epochs=1), out_dir=tmp_path / "part")
        assert len(part.log) == 1
        resumed = train(tiny_model(), samples, cfg, out_dir=tmp_path / "part",
                        resume=tmp_path / "part" / checkpoint_name(0))
        assert [r.epoch for r in resumed.log] == [0, 1, 2]
        for name in ("log.csv", checkpoint_name(2), checkpoint_name(2) + ".cfg"):
            assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()

    def test_same_seed_same_bytes(self, tmp_path):
        for run in ("a", "b"):
            train(tiny_model(), random_samples(2), small_config(), out_dir=tmp_path / run)
        assert (tmp_path / "a" / checkpoint_name(1)).read_bytes() == \
            (tmp_path / "b" / checkpoint_name(1)).read_bytes()

    def test_nan_aborts(self):
        samples = random_samples(2)
        samples[1].input[0, 0, 0] = np.nan
        with pytest.raises(TrainingAborted, match="epoch 0, step") as info:
            train(tiny_model(), samples, small_config(augment=False, batch_size=1))
        assert info.value.epoch == 0

    def test_loss_decreases(self):
        s = plane_sample(0.5, size=16)
        cfg = small_config(patch_size=16, batch_size=1, augment=False, max_epochs=60, lr0=0.01)
        res = train(tiny_model(), [s], cfg)
        assert np.mean(res.step_losses[-10:]) < 0.5 * np.mean(res.step_losses[:5])

    def test_channel_mismatch(self):
        s = Sample(np.zeros((75, 12, 12), np.float32), np.zeros((12, 12), np.float32), "x")
        with pytest.raises(ValueError, match="75 channels"):
            train(tiny_model(), [s], small_config())


class TestEvaluate:
    def constant_model(self, value):
        m = tiny_model()
        m.graph["head.weight"].data[:] = 0
        m.graph["head.bias"].data[:] = value
        return m

    def test_exact_prediction_scores_zero(self):
        s = Sample(np.random.default_rng(0).random((27, 10, 10)).astype(np.float32),
                   np.full((10, 10), 0.25, np.float32), "c")
        reps, mean = evaluate(self.constant_model(0.25), [s], record_timing=False)
        assert mean.mse_x100 == 0 and reps[0].badpix[0.01] == 0

    def test_constant_zero_on_offset_scenes(self):
        samples = [Sample(np.random.default_rng(i).random((27, 10, 10)).astype(np.float32),
                          np.full((10, 10), 0.3, np.float32), f"c{i}") for i in range(2)]
        reps, mean = evaluate(self.constant_model(0.0), samples)
        assert mean.mse_x100 == pytest.approx(9.0, rel=1e-6)
        assert [r.scene for r in reps] == ["c0", "c1"]

    def test_checkpoint_roundtrip_equal(self, tmp_path):
        samples = random_samples(3)
        res = train(tiny_model(), samples, small_config(max_epochs=1), out_dir=tmp_path)
        before = evaluate(res.model, samples, record_timing=False)[1]
        after = evaluate(load_model(tmp_path / checkpoint_name(0)), samples, record_timing=False)[1]
        assert before == after

    def test_checkpoint_contents(self, tmp_path):
        train(tiny_model(), random_samples(2), small_config(max_epochs=1), out_dir=tmp_path)
        arrays = serialize.load(tmp_path / checkpoint_name(0))
        assert arrays["meta.epoch"][0] == 0 and arrays["opt.t"][0] == 4
        assert any(k.startswith("opt.m.") for k in arrays)
        assert any(k.endswith("running_var") for k in arrays)
