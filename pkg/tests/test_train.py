import numpy as np
import pytest

from conftest import make_tiny_dataset
from footprint_uq.domain import ValidationError
from footprint_uq.gnn import init_params
from footprint_uq.train import (AdamState, EpochLog, TrainConfig, adam_step, loss_mse_log,
                                loss_mse_log_grad, read_epoch_csv, train_model,
                                write_epoch_csv)


class TestLoss:
    def test_equal_is_zero(self):
        x = np.random.default_rng(0).normal(size=(4, 4))
        assert loss_mse_log(x, x) == 0.0

    def test_constant_offset(self):
        x = np.zeros((3, 3))
        assert loss_mse_log(x + 1.0, x) == pytest.approx(1.0)

    def test_two_by_two_example(self):
        truth = np.zeros((2, 2))
        pred = np.array([[1.0, -1.0], [2.0, 0.0]])
        assert loss_mse_log(pred, truth) == pytest.approx(1.5)

    def test_gradient_matches_definition(self):
        rng = np.random.default_rng(1)
        pred = rng.normal(size=(3, 3))
        truth = rng.normal(size=(3, 3))
        value, grad = loss_mse_log_grad(pred, truth)
        assert value == pytest.approx(np.mean((pred - truth) ** 2))
        assert np.allclose(grad, 2 * (pred - truth) / 9)

    def test_non_finite_rejected(self):
        bad = np.array([[np.inf]])
        with pytest.raises(ValidationError):
            loss_mse_log(bad, np.zeros((1, 1)))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            loss_mse_log(np.zeros((2, 2)), np.zeros((3, 3)))


class TestAdam:
    def make(self, value=1.0):
        from footprint_uq.gnn import GnnHyperParams
        hyper = GnnHyperParams(channels=2, latent=3, rounds=0, hidden_layers=0,
                               side=2, mesh_r=1.0)
        params = init_params(0, hyper, np.float64)
        for t in params.tensors.values():
            t[:] = value
        return params

    def test_zero_gradient_no_change(self):
        params = self.make()
        grads = {k: np.zeros_like(t) for k, t in params.tensors.items()}
        out, _ = adam_step(params, grads, AdamState.zeros_like(params), 1, TrainConfig())
        assert all(np.array_equal(out.tensors[k], params.tensors[k]) for k in out.tensors)

    def test_first_step_magnitude_near_lr_sign(self):
        params = self.make()
        cfg = TrainConfig(learning_rate=1e-3)
        grads = {k: np.full_like(t, 0.25) for k, t in params.tensors.items()}
        out, _ = adam_step(params, grads, AdamState.zeros_like(params), 1, cfg)
        for k in out.tensors:
            delta = out.tensors[k] - params.tensors[k]
            assert np.all(np.abs(delta) <= cfg.learning_rate * (1 + 1e-6))
            assert np.allclose(delta, -cfg.learning_rate, rtol=1e-4)

    def test_deterministic(self):
        params = self.make()
        grads = {k: np.full_like(t, -0.5) for k, t in params.tensors.items()}
        a, sa = adam_step(params, grads, AdamState.zeros_like(params), 1, TrainConfig())
        b, sb = adam_step(params, grads, AdamState.zeros_like(params), 1, TrainConfig())
        assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)
        assert all(np.array_equal(sa.m[k], sb.m[k]) for k in sa.m)

    def test_non_finite_gradient_names_tensor(self):
        params = self.make()
        grads = {k: np.zeros_like(t) for k, t in params.tensors.items()}
        name = next(iter(grads))
        grads[name].flat[0] = np.nan
        with pytest.raises(ValidationError, match=name.split(".")[0]):
            adam_step(params, grads, AdamState.zeros_like(params), 1, TrainConfig())


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    ctx = make_tiny_dataset(out)
    ctx["dir"] = out
    return ctx


class TestTrainModel:

    def cfg(self, epochs=2):
        return TrainConfig(epochs=epochs, batch_size=4, learning_rate=1e-3,
                           shuffle_seed=99)

    def test_epoch_log_count_and_finiteness(self, tiny):
        params, logs, norm = train_model(tiny["manifest"], tiny["dir"], 1,
                                         self.cfg(3), tiny["hyper"])
        assert len(logs) == 3
        for log in logs:
            for v in (log.train_loss, log.val_loss, log.nmae, log.mse):
                assert np.isfinite(v)

    def test_end_to_end_determinism(self, tiny):
        a, logs_a, _ = train_model(tiny["manifest"], tiny["dir"], 2, self.cfg(), tiny["hyper"])
        b, logs_b, _ = train_model(tiny["manifest"], tiny["dir"], 2, self.cfg(), tiny["hyper"])
        assert logs_a == logs_b
        assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)

    def test_best_validation_checkpoint_retained(self, tiny):
        params, logs, _ = train_model(tiny["manifest"], tiny["dir"], 3,
                                      self.cfg(4), tiny["hyper"])
        best_epoch = min(logs, key=lambda log: log.val_loss)
        # retrain stopping exactly at the best epoch reproduces the kept params
        again, logs2, _ = train_model(tiny["manifest"], tiny["dir"], 3,
                                      self.cfg(best_epoch.epoch + 1), tiny["hyper"])
        assert all(np.array_equal(params.tensors[k], again.tensors[k])
                   for k in params.tensors)

    def test_validation_isolation(self, tiny, tmp_path):
        # corrupting a validation footprint changes only validation numbers
        import shutil
        alt = tmp_path / "corrupt_val"
        shutil.copytree(tiny["dir"], alt)
        from footprint_uq.domain import read_footprint, write_footprint, Footprint, Space
        entry = tiny["manifest"].entries("val")[0]
        fp = read_footprint(alt / entry.footprint)
        write_footprint(alt / entry.footprint,
                        Footprint(fp.grid, fp.release, fp.values * 13.0, fp.space))
        base_params, base_logs, _ = train_model(tiny["manifest"], tiny["dir"], 1,
                                                self.cfg(), tiny["hyper"])
        alt_params, alt_logs, _ = train_model(tiny["manifest"], alt, 1,
                                              self.cfg(), tiny["hyper"])
        assert [l.train_loss for l in base_logs] == [l.train_loss for l in alt_logs]
        assert [l.val_loss for l in base_logs] != [l.val_loss for l in alt_logs]

        # corrupting a training footprint changes the training loss
        alt2 = tmp_path / "corrupt_train"
        shutil.copytree(tiny["dir"], alt2)
        entry = tiny["manifest"].entries("train")[0]
        fp = read_footprint(alt2 / entry.footprint)
        write_footprint(alt2 / entry.footprint,
                        Footprint(fp.grid, fp.release, fp.values * 13.0, fp.space))
        alt2_params, alt2_logs, _ = train_model(tiny["manifest"], alt2, 1,
                                                self.cfg(), tiny["hyper"])
        assert [l.train_loss for l in base_logs] != [l.train_loss for l in alt2_logs]


class TestEpochCsv:
    def test_roundtrip(self, tmp_path):
        logs = [EpochLog(0, 1.0, 2.0, 0.5, 0.25, 0.9, 0.4, 0.1),
                EpochLog(1, 0.5, 1.5, 0.4, 0.20, 0.92, 0.5, 0.3)]
        path = tmp_path / "epochs.csv"
        write_epoch_csv(path, logs)
        assert read_epoch_csv(path) == logs
        header = path.read_text().splitlines()[0]
        assert header == "epoch,train_loss,val_loss,nmae,mse,acc,iou,r2"
