import numpy as np
import pytest

from footprint_uq.domain import ValidationError
from footprint_uq.features import Normalizer
from footprint_uq.gnn import (GnnHyperParams, ModelParams, backward_batch, cast_params,
                              count_params, forward, forward_batch, gradient_check,
                              init_params, load_checkpoint, save_checkpoint, tensor_specs)
from footprint_uq.mesh import build_maps, build_mesh

HYPER = GnnHyperParams(channels=5, latent=8, rounds=2, hidden_layers=2, side=10, mesh_r=3.0)


@pytest.fixture(scope="module")
def mesh():
    return build_mesh(10, 3.0)


@pytest.fixture(scope="module")
def maps(mesh):
    return build_maps(mesh, 10)


def random_inputs(b=2, seed=0, side=10, c=5):
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((b, side, side, c))
    masks = np.ones((b, side, side), dtype=bool)
    masks[0, :2, :] = False
    return feats.astype(np.float32), masks


def nudged_params(seed, hyper=HYPER, dtype=np.float64, shift=0.2):
    """Random params with biases moved off zero so ReLU preactivations stay
    clear of the finite-difference window (keeps the FD oracle valid)."""
    params = init_params(seed, hyper, dtype)
    for name, t in params.tensors.items():
        if ".b" in name:
            t += shift
    return params


class TestInitParams:
    def test_deterministic_per_seed(self):
        a = init_params(7, HYPER)
        b = init_params(7, HYPER)
        assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)

    def test_different_seeds_differ(self):
        a = init_params(1, HYPER)
        b = init_params(2, HYPER)
        assert any(not np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)

    def test_glorot_bounds_hold_everywhere(self):
        params = init_params(3, HYPER)
        for name, shape in tensor_specs(HYPER):
            t = params.tensors[name]
            if len(shape) == 2:
                bound = np.sqrt(6.0 / (shape[0] + shape[1]))
                assert np.all(np.abs(t) <= bound)
            else:
                assert not t.any()

    def test_zero_width_rejected(self):
        with pytest.raises(ValidationError):
            GnnHyperParams(channels=5, latent=0)

    def test_param_count_closed_form(self):
        # independent arithmetic: each MLP has dims [in, H*D, out]
        c, h, d, r = HYPER.channels, HYPER.latent, HYPER.hidden_layers, HYPER.rounds

        def mlp(din, dout):
            dims = [din] + [h] * d + [dout]
            return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))

        expected = mlp(c + 1, h) + mlp(h, h) + r * (mlp(2 * h, h) + mlp(2 * h, h)) \
            + mlp(h + 1, 1)
        assert count_params(HYPER) == expected
        params = init_params(0, HYPER)
        assert sum(t.size for t in params.tensors.values()) == expected


class TestForward:
    def test_deterministic_and_masked(self, mesh, maps):
        params = init_params(1, HYPER)
        feats, masks = random_inputs()
        a, _ = forward_batch(params, feats, masks, mesh, maps)
        b, _ = forward_batch(params, feats, masks, mesh, maps)
        assert np.array_equal(a, b)
        assert not a[~masks].any()

    def test_zeroed_decoder_gives_bias_everywhere(self, mesh, maps):
        params = init_params(1, HYPER)
        last = HYPER.hidden_layers
        params.tensors[f"dec.w{last}"][:] = 0.0
        params.tensors[f"dec.b{last}"][:] = 2.5
        feats, masks = random_inputs()
        preds, _ = forward_batch(params, feats, masks, mesh, maps)
        assert np.allclose(preds[masks], 2.5)
        assert not preds[~masks].any()

    def test_cell_permutation_within_node_invariant(self, mesh, maps):
        params = cast_params(init_params(2, HYPER), np.float64)
        feats, masks = random_inputs()
        feats = feats.astype(np.float64)
        base, _ = forward_batch(params, feats, masks, mesh, maps)
        # swapping the features of two equidistant cells of one node permutes
        # the aggregation set without changing any per-cell distance input
        pair = None
        for node in range(mesh.n_nodes):
            cells = np.flatnonzero(maps.assign == node)
            for i in range(len(cells)):
                for j in range(i + 1, len(cells)):
                    if np.isclose(maps.distance[cells[i]], maps.distance[cells[j]]):
                        pair = (cells[i], cells[j])
                        break
                if pair:
                    break
            if pair:
                break
        assert pair is not None, "triangular lattice should have equidistant cells"
        a, b = pair
        f2 = feats.reshape(2, 100, -1).copy()
        f2[:, [a, b], :] = f2[:, [b, a], :]
        out, _ = forward_batch(params, f2.reshape(2, 10, 10, -1), masks, mesh, maps)
        # decoder reads node latents only, so the node's aggregation multiset
        # (and hence every cell's output) is unchanged
        assert np.allclose(out, base, atol=1e-12)

    def test_zero_processor_rounds_are_identity(self, maps, mesh):
        few = GnnHyperParams(channels=5, latent=8, rounds=1, hidden_layers=2,
                             side=10, mesh_r=3.0)
        many = GnnHyperParams(channels=5, latent=8, rounds=3, hidden_layers=2,
                              side=10, mesh_r=3.0)
        base = init_params(4, few)
        grown = init_params(4, many)
        for name in grown.tensors:
            if name.startswith("round"):
                grown.tensors[name][:] = 0.0
            else:
                grown.tensors[name] = base.tensors[name.replace("round2", "round0")].copy()
        for name in base.tensors:
            if name.startswith("round"):
                base.tensors[name][:] = 0.0
        feats, masks = random_inputs()
        a, _ = forward_batch(base, feats, masks, mesh, maps)
        b, _ = forward_batch(grown, feats, masks, mesh, maps)
        assert np.allclose(a, b, atol=1e-6)

    def test_channel_mismatch_names_layer(self, mesh, maps):
        params = init_params(1, HYPER)
        feats, masks = random_inputs(c=6)
        with pytest.raises(ValidationError, match="enc_cell"):
            forward_batch(params, feats, masks, mesh, maps)

    def test_batch_matches_single(self, mesh, maps):
        params = init_params(5, HYPER)
        feats, masks = random_inputs(b=3, seed=8)
        batch, _ = forward_batch(params, feats, masks, mesh, maps)
        for k in range(3):
            single, _ = forward(params, feats[k], masks[k], mesh, maps)
            assert np.allclose(single, batch[k], atol=1e-5)


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self, mesh, maps):
        params = init_params(1, HYPER)
        feats, masks = random_inputs()
        _, cache = forward_batch(params, feats, masks, mesh, maps)
        grads = backward_batch(params, cache, np.zeros((2, 10, 10), np.float32))
        assert all(not g.any() for g in grads.values())

    def test_final_bias_grad_is_upstream_sum(self, mesh, maps):
        params = cast_params(init_params(1, HYPER), np.float64)
        feats, masks = random_inputs()
        _, cache = forward_batch(params, feats.astype(np.float64), masks, mesh, maps)
        rng = np.random.default_rng(3)
        d_pred = rng.standard_normal((2, 10, 10))
        grads = backward_batch(params, cache, d_pred)
        expected = d_pred[masks].sum()
        assert grads[f"dec.b{HYPER.hidden_layers}"][0] == pytest.approx(expected, rel=1e-12)

    def test_cache_mismatch_rejected(self, mesh, maps):
        params = init_params(1, HYPER)
        feats, masks = random_inputs()
        _, cache = forward_batch(params, feats, masks, mesh, maps)
        other = init_params(1, GnnHyperParams(channels=5, latent=4, rounds=2,
                                              hidden_layers=2, side=10, mesh_r=3.0))
        with pytest.raises(ValidationError):
            backward_batch(other, cache, np.zeros((2, 10, 10), np.float32))


class TestGradientCheck:
    def loss_for(self, target):
        def loss(pred):
            d = pred - target
            return float(np.mean(d**2)), 2 * d / d.size
        return loss

    def test_small_model_passes(self, mesh, maps):
        params = nudged_params(2)
        feats, masks = random_inputs(seed=0)
        rng = np.random.default_rng(0)
        target = rng.standard_normal((2, 10, 10)) * masks
        err = gradient_check(params, feats.astype(np.float64), masks, mesh, maps,
                             self.loss_for(target), epsilon=1e-5, n_sample=200,
                             rng=np.random.default_rng(1))
        assert err < 1e-4

    def test_linear_network_near_exact(self, mesh, maps):
        hyper = GnnHyperParams(channels=5, latent=8, rounds=2, hidden_layers=2,
                               side=10, mesh_r=3.0, activation="identity")
        params = init_params(2, hyper, np.float64)
        feats, masks = random_inputs(seed=0)
        rng = np.random.default_rng(0)
        target = rng.standard_normal((2, 10, 10)) * masks
        # quadratic loss: central differences are exact bar roundoff, and the
        # roundoff floor shrinks with larger epsilon
        err = gradient_check(params, feats.astype(np.float64), masks, mesh, maps,
                             self.loss_for(target), epsilon=1e-4, n_sample=200,
                             rng=np.random.default_rng(1))
        assert err < 1e-7

    def test_epsilon_range_enforced(self, mesh, maps):
        params = nudged_params(2)
        feats, masks = random_inputs()
        for eps in (1e-8, 1e-3):
            with pytest.raises(ValidationError):
                gradient_check(params, feats, masks, mesh, maps,
                               self.loss_for(np.zeros((2, 10, 10))), epsilon=eps)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        params = init_params(11, HYPER)
        rng = np.random.default_rng(0)
        norm = Normalizer(rng.normal(size=5), np.abs(rng.normal(size=5)) + 0.5,
                          np.zeros(5, bool), channel_hash=0xABCDEF)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, params, norm, config_hash=9)
        back, norm2 = load_checkpoint(path)
        assert back.hyper == params.hyper
        assert back.seed == params.seed
        for k in params.tensors:
            assert np.array_equal(back.tensors[k], params.tensors[k])
        assert np.array_equal(norm2.mean, norm.mean)
        assert np.array_equal(norm2.std, norm.std)
        assert norm2.channel_hash == norm.channel_hash
        assert path.read_bytes()[:4] == b"CKP1"

    def test_normalizer_channel_mismatch_rejected(self, tmp_path):
        params = init_params(11, HYPER)
        norm = Normalizer(np.zeros(7), np.ones(7), np.zeros(7, bool), 1)
        with pytest.raises(ValidationError):
            save_checkpoint(tmp_path / "m.ckpt", params, norm)
