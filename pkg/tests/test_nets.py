import math

import numpy as np
import pytest
import torch

from flowtact.errors import ConfigError
from flowtact.nets import (
    Adam,
    AttentionSpec,
    MLPSpec,
    ParamStore,
    VelocityNetSpec,
    cross_attention_forward,
    grad_check,
    init_params,
    load_checkpoint,
    mlp_forward,
    optimizer_step,
    save_checkpoint,
    velocity_net_forward,
)


class TestInit:
    def test_same_seed_bit_identical(self):
        spec = MLPSpec((3, 5, 2))
        a = init_params(spec, seed=9).to_arrays()
        b = init_params(spec, seed=9).to_arrays()
        assert a.keys() == b.keys()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_biases_zero(self):
        store = init_params(MLPSpec((4, 8, 8, 2)), seed=0)
        for name in store.names():
            if name.endswith(".b"):
                assert torch.all(store[name] == 0)

    def test_weight_extrema_within_fan_in_bound(self):
        spec = MLPSpec((16, 32, 4))
        store = init_params(spec, seed=1)
        w0 = store["layer0.w"]
        assert w0.abs().max() <= 1.0 / math.sqrt(16)
        w1 = store["layer1.w"]
        assert w1.abs().max() <= 1.0 / math.sqrt(32)

    def test_different_seeds_differ(self):
        spec = MLPSpec((3, 5, 2))
        a = init_params(spec, seed=0)["layer0.w"]
        b = init_params(spec, seed=1)["layer0.w"]
        assert not torch.equal(a, b)


class TestMLPForward:
    def test_zero_params_zero_output(self):
        spec = MLPSpec((3, 4, 2))
        store = init_params(spec, seed=0)
        store.load_arrays({k: np.zeros_like(v) for k, v in store.to_arrays().items()})
        out = mlp_forward(spec, store, np.ones(3))
        assert torch.all(out == 0)

    def test_identity_single_layer(self):
        spec = MLPSpec((3, 3))
        store = init_params(spec, seed=0)
        store.load_arrays({"layer0.w": np.eye(3), "layer0.b": np.zeros(3)})
        x = np.array([0.3, -1.2, 4.0])
        np.testing.assert_allclose(mlp_forward(spec, store, x).detach().numpy(), x)

    def test_against_plain_numpy_reimplementation(self):
        spec = MLPSpec((5, 7, 7, 3), activation="tanh")
        store = init_params(spec, seed=42)
        arrays = store.to_arrays()
        x = np.random.default_rng(0).normal(size=(4, 5))

        h = x
        for i in range(3):
            h = h @ arrays[f"layer{i}.w"].T + arrays[f"layer{i}.b"]
            if i < 2:
                h = np.tanh(h)
        got = mlp_forward(spec, store, x).detach().numpy()
        np.testing.assert_allclose(got, h, atol=1e-12)

    def test_width_mismatch(self):
        spec = MLPSpec((3, 2))
        store = init_params(spec, seed=0)
        with pytest.raises(ValueError):
            mlp_forward(spec, store, np.ones(4))


def softmax_np(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


class TestCrossAttention:
    spec = AttentionSpec(width=4, n_heads=2, head_width=2)

    def test_head_width_mismatch_rejected(self):
        with pytest.raises(ValueError):
            AttentionSpec(width=5, n_heads=2, head_width=2)

    def test_single_kv_token_closed_form(self):
        store = init_params(self.spec, seed=3)
        a = store.to_arrays()
        q_tok = np.random.default_rng(1).normal(size=(2, 4))
        kv_tok = np.random.default_rng(2).normal(size=(1, 4))
        # softmax over one token is 1, so output = q_in + Wo(Wv kv + bv) + bo
        v = kv_tok @ a["v.w"].T + a["v.b"]
        expected = q_tok + (np.tile(v, (2, 1)) @ a["o.w"].T + a["o.b"])
        got = cross_attention_forward(self.spec, store, q_tok, kv_tok).detach().numpy()
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_duplicate_kv_tokens_match_single(self):
        store = init_params(self.spec, seed=3)
        q_tok = np.random.default_rng(1).normal(size=(2, 4))
        kv = np.random.default_rng(2).normal(size=(1, 4))
        single = cross_attention_forward(self.spec, store, q_tok, kv)
        doubled = cross_attention_forward(self.spec, store, q_tok, np.tile(kv, (2, 1)))
        np.testing.assert_allclose(single.detach(), doubled.detach(), atol=1e-12)

    def test_hand_computed_attention(self):
        store = init_params(self.spec, seed=5)
        a = store.to_arrays()
        q_tok = np.random.default_rng(3).normal(size=(2, 4))
        kv_tok = np.random.default_rng(4).normal(size=(3, 4))

        q = q_tok @ a["q.w"].T + a["q.b"]
        k = kv_tok @ a["k.w"].T + a["k.b"]
        v = kv_tok @ a["v.w"].T + a["v.b"]
        heads = []
        for h in range(2):
            sl = slice(2 * h, 2 * h + 2)
            logits = q[:, sl] @ k[:, sl].T / math.sqrt(2)
            heads.append(softmax_np(logits) @ v[:, sl])
        out = np.concatenate(heads, axis=1)
        expected = q_tok + out @ a["o.w"].T + a["o.b"]
        got = cross_attention_forward(self.spec, store, q_tok, kv_tok).detach().numpy()
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_kv_permutation_invariance(self):
        store = init_params(self.spec, seed=7)
        q_tok = np.random.default_rng(5).normal(size=(3, 4))
        kv = np.random.default_rng(6).normal(size=(5, 4))
        out = cross_attention_forward(self.spec, store, q_tok, kv)
        perm = cross_attention_forward(self.spec, store, q_tok, kv[[4, 2, 0, 1, 3]])
        np.testing.assert_allclose(out.detach(), perm.detach(), atol=1e-12)

    def test_batched_matches_loop(self):
        store = init_params(self.spec, seed=9)
        q = np.random.default_rng(7).normal(size=(4, 2, 4))
        kv = np.random.default_rng(8).normal(size=(4, 3, 4))
        batched = cross_attention_forward(self.spec, store, q, kv).detach().numpy()
        for b in range(4):
            one = cross_attention_forward(self.spec, store, q[b], kv[b]).detach().numpy()
            np.testing.assert_allclose(batched[b], one, atol=1e-14)


class TestVelocityNet:
    spec = VelocityNetSpec(data_shape=(4, 7), cond_width=6, time_width=8, hidden=(16, 12))

    def test_zero_initialized_head_gives_zero_velocity(self):
        store = init_params(self.spec, seed=0)
        x = np.random.default_rng(0).normal(size=(4, 7))
        cond = np.random.default_rng(1).normal(size=6)
        out = velocity_net_forward(self.spec, store, x, t=0.25, dt=0.25, cond=cond)
        assert torch.all(out == 0)

    def test_output_shape_matches_data_shape(self):
        store = init_params(self.spec, seed=0)
        x = np.zeros((3, 4, 7))
        cond = np.zeros((3, 6))
        out = velocity_net_forward(self.spec, store, x, t=0.0, dt=1.0, cond=cond)
        assert out.shape == (3, 4, 7)

    def test_dt_embedding_sensitivity(self):
        store = init_params(self.spec, seed=0)
        # give the zero head nonzero weights so embeddings reach the output
        arrays = store.to_arrays()
        arrays["head.w"] = np.random.default_rng(2).normal(size=arrays["head.w"].shape) * 0.1
        store.load_arrays(arrays)
        x = np.random.default_rng(3).normal(size=(4, 7))
        cond = np.zeros(6)
        a = velocity_net_forward(self.spec, store, x, t=0.0, dt=1.0 / 128, cond=cond)
        b = velocity_net_forward(self.spec, store, x, t=0.0, dt=1.0, cond=cond)
        assert not torch.allclose(a, b)

    def test_time_range_validated(self):
        store = init_params(self.spec, seed=0)
        x = np.zeros((4, 7))
        cond = np.zeros(6)
        with pytest.raises(ValueError):
            velocity_net_forward(self.spec, store, x, t=1.0, dt=0.5, cond=cond)
        with pytest.raises(ValueError):
            velocity_net_forward(self.spec, store, x, t=0.0, dt=0.0, cond=cond)
        with pytest.raises(ValueError):
            velocity_net_forward(self.spec, store, x, t=-0.1, dt=0.5, cond=cond)

    def test_unconditional_spec_runs(self):
        spec = VelocityNetSpec(data_shape=(2,), cond_width=0, time_width=4, hidden=(8,))
        store = init_params(spec, seed=1)
        out = velocity_net_forward(spec, store, np.ones(2), t=0.0, dt=1.0)
        assert out.shape == (2,)

    def test_deterministic_forward(self):
        store = init_params(self.spec, seed=4)
        x = np.random.default_rng(4).normal(size=(4, 7))
        cond = np.random.default_rng(5).normal(size=6)
        a = velocity_net_forward(self.spec, store, x, t=0.5, dt=0.25, cond=cond)
        b = velocity_net_forward(self.spec, store, x, t=0.5, dt=0.25, cond=cond)
        assert torch.equal(a, b)


class TestGradCheck:
    def test_square_function(self):
        store = ParamStore()
        store.add("w", np.array(3.0))
        err = grad_check(lambda p: p["w"] ** 2, store, eps=1e-5)
        assert err < 1e-8

    def test_constant_function(self):
        store = ParamStore()
        store.add("w", np.array(2.0))
        err = grad_check(lambda p: torch.tensor(1.5, dtype=torch.float64) + 0 * p["w"].sum(), store)
        assert err == 0.0

    def test_mlp_loss_under_1e4(self):
        spec = MLPSpec((3, 6, 2))
        store = init_params(spec, seed=0)
        x = torch.as_tensor(np.random.default_rng(0).normal(size=3))
        target = torch.as_tensor(np.array([0.3, -0.2]))

        def loss(p):
            return ((mlp_forward(spec, p, x) - target) ** 2).mean()

        assert grad_check(loss, store, eps=1e-5) < 1e-4

    def test_nonfinite_loss_rejected(self):
        store = ParamStore()
        store.add("w", np.array(1.0))
        with pytest.raises(ValueError):
            grad_check(lambda p: p["w"] / 0.0, store)


class TestOptimizer:
    def test_zero_gradient_leaves_params(self):
        store = ParamStore()
        store.add("w", np.array([1.0, -2.0]))
        grads = {"w": torch.zeros(2, dtype=torch.float64)}
        _, state = optimizer_step(store, grads, None, lr=0.1)
        np.testing.assert_array_equal(store["w"].detach().numpy(), [1.0, -2.0])
        assert state["step"] == 1

    def test_first_step_closed_form(self):
        store = ParamStore()
        store.add("w", np.array([1.0, 1.0, 1.0]))
        g = np.array([0.5, -3.0, 1e-12])
        grads = {"w": torch.as_tensor(g)}
        lr, eps = 0.01, 1e-8
        optimizer_step(store, grads, None, lr=lr, beta1=0.9, beta2=0.999, eps=eps)
        # bias-corrected first step: update = -lr * g / (|g| + eps)
        expected = 1.0 - lr * g / (np.abs(g) + eps)
        np.testing.assert_allclose(store["w"].detach().numpy(), expected, atol=1e-12)

    def test_two_runs_bit_identical(self):
        def run():
            spec = MLPSpec((2, 4, 1))
            store = init_params(spec, seed=0)
            state = None
            rng = np.random.default_rng(0)
            for _ in range(5):
                x = torch.as_tensor(rng.normal(size=2))
                loss = (mlp_forward(spec, store, x) ** 2).sum()
                grads = dict(zip(store.names(), torch.autograd.grad(loss, store.tensors())))
                _, state = optimizer_step(store, grads, state, lr=0.05)
            return store.to_arrays()

        a, b = run(), run()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_adam_wrapper_trains(self):
        spec = MLPSpec((2, 8, 1))
        store = init_params(spec, seed=0)
        opt = Adam({"net": store}, lr=0.05)
        x = torch.as_tensor(np.random.default_rng(1).normal(size=(16, 2)))
        y = (x[:, :1] * 2.0 - x[:, 1:]) * 0.5
        first = None
        for _ in range(200):
            loss = ((mlp_forward(spec, store, x) - y) ** 2).mean()
            if first is None:
                first = float(loss.detach())
            opt.step(loss)
        assert float(loss.detach()) < 0.1 * first


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        spec = MLPSpec((3, 5, 2))
        store = init_params(spec, seed=12)
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, {"net": (spec, store)}, seed=12, extra={"note": "x"})
        comps, seed, extra = load_checkpoint(path)
        assert seed == 12 and extra == {"note": "x"}
        spec2, store2 = comps["net"]
        assert spec2 == spec
        a, b = store.to_arrays(), store2.to_arrays()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_save_is_deterministic(self, tmp_path):
        spec = VelocityNetSpec((2,), 0, 4, (8,))
        store = init_params(spec, seed=3)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, {"net": (spec, store)}, seed=3)
        save_checkpoint(p2, {"net": (spec, store)}, seed=3)
        assert p1.read_bytes() == p2.read_bytes()

    def test_manifest_layout(self, tmp_path):
        # independent reader: first line is JSON, rest is f64 data in order
        import json

        spec = MLPSpec((2, 2))
        store = init_params(spec, seed=1)
        path = tmp_path / "c.ckpt"
        save_checkpoint(path, {"net": (spec, store)}, seed=1)
        raw = path.read_bytes()
        nl = raw.index(b"\n")
        manifest = json.loads(raw[:nl])
        assert manifest["version"] == 1
        comp = manifest["components"]["net"]
        total = sum(int(np.prod(comp["shapes"][n])) for n in comp["names"])
        data = np.frombuffer(raw[nl + 1 :], dtype="<f8")
        assert data.size == total
        np.testing.assert_array_equal(
            data[: store["layer0.w"].numel()], store["layer0.w"].detach().numpy().reshape(-1)
        )

    def test_unknown_spec_kind(self):
        with pytest.raises(ConfigError):
            save_checkpoint("/dev/null", {"net": (object(), ParamStore())}, seed=0)
