import numpy as np
import pytest

from fusioncount.autodiff import Tensor
from fusioncount.errors import NumericalError
from fusioncount.model import ModelConfig, init_params, trainable
from fusioncount.synthetic import SceneSpec, synth_scene
from fusioncount.training import (
    AdamState,
    TrainConfig,
    adam_step,
    build_sample,
    evaluate_model,
    infer,
    learning_rate,
    train,
    write_history_csv,
)

TINY_MODEL = dict(backbone_channels=(4, 6, 6, 8), block_count=2, block_channels=8)


def tiny_dataset(n=6, seed=100, size=64):
    spec = SceneSpec(size=(size, size), count_range=(2, 8))
    return [build_sample(*synth_scene(spec, rng_seed=seed + i), sigma=2.0) for i in range(n)]


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = {"w": Tensor(np.ones((3, 3)), requires_grad=True)}
        before = p["w"].data.copy()
        adam_step(p, {"w": np.zeros((3, 3))}, AdamState(), lr=0.1)
        np.testing.assert_array_equal(p["w"].data, before)

    def test_first_step_is_signed_lr(self):
        g = np.array([[2.0, -3.0], [0.5, -0.25]], dtype=np.float32)
        p = {"w": Tensor(np.zeros((2, 2)), requires_grad=True)}
        adam_step(p, {"w": g}, AdamState(), lr=0.01)
        np.testing.assert_allclose(p["w"].data, -0.01 * np.sign(g), atol=1e-5)

    def test_two_runs_identical(self):
        def run():
            rng = np.random.default_rng(5)
            p = {"w": Tensor(np.ones((4,)), requires_grad=True)}
            state = AdamState()
            for _ in range(10):
                adam_step(p, {"w": rng.standard_normal(4)}, state, lr=0.05)
            return p["w"].data.copy()

        np.testing.assert_array_equal(run(), run())

    def test_nonfinite_gradient_rejected(self):
        p = {"w": Tensor(np.ones((2,)), requires_grad=True)}
        g = np.array([1.0, np.nan])
        with pytest.raises(NumericalError, match="non-finite"):
            adam_step(p, {"w": g}, AdamState(), lr=0.1)


class TestSchedule:
    def test_halving_epochs(self):
        cfg = TrainConfig(lr=5e-5, lr_halve_every=1000, epochs=1)
        assert learning_rate(cfg, 0) == 5e-5
        assert learning_rate(cfg, 999) == 5e-5
        assert learning_rate(cfg, 1000) == pytest.approx(2.5e-5)
        assert learning_rate(cfg, 2000) == pytest.approx(1.25e-5)

    def test_warmup_ramp(self):
        cfg = TrainConfig(lr=1e-3, lr_warmup=10, epochs=1)
        assert learning_rate(cfg, 0) == pytest.approx(1e-4)
        assert learning_rate(cfg, 9) == pytest.approx(1e-3)
        assert learning_rate(cfg, 10) == pytest.approx(1e-3)


class TestTrainLoop:
    def test_zero_epochs_returns_initial(self):
        cfg = ModelConfig(**TINY_MODEL)
        params = init_params(cfg, 0)
        before = {n: t.data.copy() for n, t in trainable(params)}
        params, history = train(
            params, cfg, tiny_dataset(3), TrainConfig(epochs=0, batch=2, crop=64, lr=1e-3)
        )
        assert history == []
        for n, t in trainable(params):
            np.testing.assert_array_equal(t.data, before[n])

    def test_history_structure_and_descent_smoke(self):
        cfg = ModelConfig(**TINY_MODEL)
        params = init_params(cfg, 1)
        tcfg = TrainConfig(lr=3e-3, lr_warmup=2, epochs=12, batch=4, crop=64,
                           seed=1, sigma=2.0)
        params, history = train(params, cfg, tiny_dataset(4), tcfg)
        assert len(history) == 12
        assert set(history[0]) == {"epoch", "lr", "loss_total", "loss_I", "loss_C", "loss_S"}
        assert all(np.isfinite(h["loss_total"]) for h in history)
        assert history[-1]["loss_total"] < history[0]["loss_total"]

    def test_deterministic_given_seed(self):
        def run():
            cfg = ModelConfig(**TINY_MODEL)
            params = init_params(cfg, 2)
            tcfg = TrainConfig(lr=1e-3, epochs=3, batch=4, crop=64, seed=2, sigma=2.0)
            params, history = train(params, cfg, tiny_dataset(4), tcfg)
            return history[-1]["loss_total"]

        assert run() == run()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numerical_abort(self):
        cfg = ModelConfig(**TINY_MODEL)
        params = init_params(cfg, 3)
        params["head_density.w"].data[...] = 1e30
        params["block0.col1_conv.w"].data[...] = 1e30
        with pytest.raises(NumericalError):
            train(params, cfg, tiny_dataset(4),
                  TrainConfig(lr=1e-3, epochs=2, batch=4, crop=64))

    def test_empty_dataset_rejected(self):
        cfg = ModelConfig(**TINY_MODEL)
        with pytest.raises(ValueError, match="empty"):
            train(init_params(cfg, 0), cfg, [], TrainConfig(epochs=1))

    def test_history_csv_columns(self, tmp_path):
        rows = [
            {"epoch": 0, "lr": 1e-3, "loss_total": 1.0, "loss_I": 2.0,
             "loss_C": 0.5, "loss_S": 0.7}
        ]
        path = tmp_path / "history.csv"
        write_history_csv(path, rows)
        text = path.read_text().splitlines()
        assert text[0] == "epoch,lr,loss_total,loss_I,loss_C,loss_S"
        assert text[1].startswith("0,0.001,1,2,0.5,0.7")


class TestInfer:
    def setup_method(self):
        self.cfg = ModelConfig(**TINY_MODEL)
        self.params = init_params(self.cfg, 7)

    def test_untrained_model_on_blank_image(self):
        blank = np.zeros((64, 64, 3), dtype=np.float32)
        density, count, mask = infer(blank, self.params, self.cfg)
        assert density.values.shape == (16, 16)
        assert np.all(np.isfinite(density.values))
        assert np.all(density.values >= 0)
        assert count >= 0
        assert set(np.unique(mask)).issubset({0.0, 1.0})

    def test_repeatable(self):
        img, _ = synth_scene(SceneSpec(size=(64, 64)), rng_seed=9)
        a = infer(img, self.params, self.cfg)
        b = infer(img, self.params, self.cfg)
        np.testing.assert_array_equal(a[0].values, b[0].values)
        assert a[1] == b[1]

    def test_count_is_sum_of_map(self):
        img, _ = synth_scene(SceneSpec(size=(64, 64)), rng_seed=10)
        density, count, _ = infer(img, self.params, self.cfg)
        assert count == float(np.sum(density.values, dtype=np.float64))

    def test_nonconforming_image_resized(self):
        img = np.random.default_rng(11).random((70, 100, 3)).astype(np.float32)
        density, _, _ = infer(img, self.params, self.cfg)
        # resize_dims(70, 100) = (64, 96) -> stride-4 map 16x24
        assert density.values.shape == (16, 24)


class TestEvaluateModel:
    def test_report_fields_and_mae_mse_order(self):
        cfg = ModelConfig(**TINY_MODEL)
        params = init_params(cfg, 8)
        pairs = [synth_scene(SceneSpec(size=(64, 64), count_range=(3, 9)), rng_seed=s)
                 for s in range(4)]
        rep = evaluate_model(params, cfg, pairs, sigma=2.0)
        assert rep.mae >= 0
        assert rep.mse >= rep.mae
        assert -1.0 <= rep.ssim <= 1.0
