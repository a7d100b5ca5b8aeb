"""Central finite-difference gradient checks and checkpoint contracts."""

import numpy as np
import pytest

from atcor.model import (Fingerprint, ModelParams, atcor_apply, atcor_backward,
                         cnn_forward_batch, cnn_backward_batch, init_params,
                         load_checkpoint, mse_loss_and_grads, param_shapes,
                         save_checkpoint, ModelError)


def d8_fingerprint(seed=0) -> Fingerprint:
    # d=8 on the standard 11x11 grid; conv channels kept small so the check
    # stays well inside its runtime budget
    return Fingerprint(kind="atcor", d=8, lookback=6, rows=11, cols=11,
                       channels=4, conv_spec=((3, 3, 8), (3, 3, 8), (2, 2, 4)),
                       seed=seed)


def randomized(params: ModelParams, scale=0.3) -> ModelParams:
    rng = np.random.default_rng(params.fingerprint.seed + 7)
    for k in params.tensors:
        params.tensors[k] = rng.normal(0, scale, size=params.tensors[k].shape)
    return params


def make_batch(fp, n=2, seed=1):
    rng = np.random.default_rng(seed)
    return {
        "heatmaps": rng.normal(size=(n, fp.lookback, fp.rows, fp.cols, fp.channels)),
        "usage": rng.uniform(0, 1, size=(n, fp.lookback, 2)),
        "externals": rng.normal(size=(n, fp.lookback + 1, fp.ex_dim)),
        "targets": rng.normal(size=(n, 2)),
    }


def central_difference(f, params, name, idx, eps):
    arr = params.tensors[name]
    orig = arr[idx]
    arr[idx] = orig + eps
    hi = f()
    arr[idx] = orig - eps
    lo = f()
    arr[idx] = orig
    return (hi - lo) / (2 * eps)


class TestEndToEndGradients:
    def test_loss_gradients_match_finite_differences(self):
        fp = d8_fingerprint(seed=3)
        params = randomized(init_params(fp))
        batch = make_batch(fp, n=2)

        def loss():
            pred, _ = atcor_apply(params, batch)
            return float(((pred - batch["targets"]) ** 2).mean())

        _, grads, _ = mse_loss_and_grads(params, batch, atcor_apply,
                                         atcor_backward)
        rng = np.random.default_rng(99)
        names = list(params.tensors)
        checked = 0
        while checked < 20:
            name = names[rng.integers(len(names))]
            arr = params.tensors[name]
            idx = np.unravel_index(rng.integers(arr.size), arr.shape)
            g_num = central_difference(loss, params, name, idx, eps=1e-6)
            g_ana = grads[name][idx]
            if max(abs(g_num), abs(g_ana)) < 1e-9:
                continue  # too small for a meaningful relative comparison
            rel = abs(g_num - g_ana) / max(abs(g_num), abs(g_ana))
            assert rel < 1e-3, f"{name}{idx}: {g_ana} vs FD {g_num} (rel {rel})"
            checked += 1

    def test_cnn_only_gradients_match_finite_differences(self):
        fp = d8_fingerprint(seed=5)
        params = randomized(init_params(fp))
        rng = np.random.default_rng(11)
        hmaps = rng.normal(size=(3, fp.rows, fp.cols, fp.channels))
        weights = rng.normal(size=3)  # fixed projection makes the output scalar

        def scalar_out():
            out, _ = cnn_forward_batch(hmaps, params)
            return float(out @ weights)

        out, cache = cnn_forward_batch(hmaps, params)
        grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        cnn_backward_batch(weights.copy(), params, cache, grads)

        cnn_names = [k for k in params.tensors if k.startswith(("conv", "cnn"))]
        checked = 0
        while checked < 20:
            name = cnn_names[rng.integers(len(cnn_names))]
            arr = params.tensors[name]
            idx = np.unravel_index(rng.integers(arr.size), arr.shape)
            g_num = central_difference(scalar_out, params, name, idx, eps=1e-6)
            g_ana = grads[name][idx]
            if max(abs(g_num), abs(g_ana)) < 1e-9:
                continue
            rel = abs(g_num - g_ana) / max(abs(g_num), abs(g_ana))
            assert rel < 1e-4, f"{name}{idx}: {g_ana} vs FD {g_num} (rel {rel})"
            checked += 1


class TestBaselineGradients:
    @pytest.mark.parametrize("kind", ["rnn", "lstm", "gru"])
    def test_baseline_gradients_match_finite_differences(self, kind):
        from atcor.baselines import (baseline_apply, baseline_backward,
                                     baseline_fingerprint)
        fp = baseline_fingerprint(kind, d=6, lookback=5, seed=2)
        params = randomized(init_params(fp))
        rng = np.random.default_rng(4)
        batch = {
            "usage": rng.uniform(0, 1, size=(3, 5, 2)),
            "externals": rng.normal(size=(3, 6, 4)),
            "targets": rng.normal(size=(3, 2)),
        }

        def loss():
            pred, _ = baseline_apply(params, batch)
            return float(((pred - batch["targets"]) ** 2).mean())

        _, grads, _ = mse_loss_and_grads(params, batch, baseline_apply,
                                         baseline_backward)
        checked = 0
        names = list(params.tensors)
        while checked < 12:
            name = names[rng.integers(len(names))]
            arr = params.tensors[name]
            idx = np.unravel_index(rng.integers(arr.size), arr.shape)
            g_num = central_difference(loss, params, name, idx, eps=1e-6)
            g_ana = grads[name][idx]
            if max(abs(g_num), abs(g_ana)) < 1e-9:
                continue
            rel = abs(g_num - g_ana) / max(abs(g_num), abs(g_ana))
            assert rel < 1e-4, f"{kind} {name}{idx}: {g_ana} vs {g_num}"
            checked += 1


class TestDeterminism:
    def test_same_seed_same_parameters(self):
        fp = d8_fingerprint(seed=17)
        a = init_params(fp)
        b = init_params(fp)
        for k in a.tensors:
            np.testing.assert_array_equal(a.tensors[k], b.tensors[k])

    def test_fixed_input_identical_output_across_runs(self):
        fp = d8_fingerprint(seed=23)
        params = randomized(init_params(fp))
        batch = make_batch(fp, n=1, seed=8)
        p1, _ = atcor_apply(params, batch)
        p2, _ = atcor_apply(params, {k: v.copy() for k, v in batch.items()})
        np.testing.assert_allclose(p1, p2, rtol=1e-12, atol=0)


class TestCheckpoints:
    def test_round_trip_preserves_everything(self, tmp_path):
        fp = d8_fingerprint(seed=31)
        params = randomized(init_params(fp))
        params.aux = {"usage_scale": {"S001": [4.0, 5.0]},
                      "heatmap_divisors": [1.0, 2.0, 3.0, 4.0]}
        path = tmp_path / "model.ckpt"
        save_checkpoint(params, path)
        loaded = load_checkpoint(path, expected=fp)
        assert loaded.fingerprint == fp
        assert loaded.aux == params.aux
        for k in params.tensors:
            np.testing.assert_array_equal(loaded.tensors[k], params.tensors[k])

    def test_fingerprint_mismatch_rejected(self, tmp_path):
        fp = d8_fingerprint(seed=1)
        params = init_params(fp)
        path = tmp_path / "model.ckpt"
        save_checkpoint(params, path)
        other = d8_fingerprint(seed=2)
        with pytest.raises(ModelError, match="fingerprint mismatch"):
            load_checkpoint(path, expected=other)

    def test_fingerprint_determines_every_shape(self):
        fp = d8_fingerprint(seed=0)
        shapes = param_shapes(fp)
        params = init_params(fp)
        assert {k: v.shape for k, v in params.tensors.items()} == shapes
        # default full-scale configuration stays constructible
        full = Fingerprint()
        full_shapes = param_shapes(full)
        assert full_shapes["conv0_w"] == (3, 3, 15, 256)
        assert full_shapes["conv1_w"] == (3, 3, 256, 128)
        assert full_shapes["conv2_w"] == (2, 2, 128, 64)
        assert full_shapes["enc_Wi"] == (1024, 1024 + 3)
        assert full_shapes["att_W"] == (1024, 2048)
