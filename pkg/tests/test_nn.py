import numpy as np
import pytest

from clrmlab.nn import (
    AdamState,
    ParamStore,
    Tensor,
    adam_update,
    batchnorm,
    conv3d,
    dense,
    export_manifest,
    load_params,
    lstm_step,
    maxpool3d,
    save_params,
    stack,
)


def conv3d_reference(x, w, b):
    """Nested-loop 'same' 3x3x3 convolution oracle."""
    bsz, xs, ys, zs, cin = x.shape
    cout = w.shape[4]
    out = np.zeros((bsz, xs, ys, zs, cout))
    for n in range(bsz):
        for i in range(xs):
            for j in range(ys):
                for k in range(zs):
                    acc = b.copy()
                    for oi in range(3):
                        for oj in range(3):
                            for ok in range(3):
                                ii, jj, kk = i + oi - 1, j + oj - 1, k + ok - 1
                                if 0 <= ii < xs and 0 <= jj < ys and 0 <= kk < zs:
                                    acc = acc + x[n, ii, jj, kk] @ w[oi, oj, ok]
                    out[n, i, j, k] = acc
    return out


class TestConv3d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 4, 4, 4, 3))
        w = np.zeros((3, 3, 3, 3, 3))
        w[1, 1, 1] = np.eye(3)
        out = conv3d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
        assert np.allclose(out.data, x, atol=1e-14)

    def test_all_ones_counts_taps(self):
        x = np.ones((1, 4, 4, 4, 1))
        w = np.ones((3, 3, 3, 1, 1))
        out = conv3d(Tensor(x), Tensor(w), Tensor(np.zeros(1)))
        assert out.data[0, 1, 1, 1, 0] == 27.0  # interior cell sees every tap
        assert out.data[0, 0, 0, 0, 0] == 8.0   # corner sees a 2x2x2 block

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 3, 3, 2))
        w = rng.standard_normal((3, 3, 3, 2, 4))
        b = rng.standard_normal(4)
        out = conv3d(Tensor(x), Tensor(w), Tensor(b))
        assert np.allclose(out.data, conv3d_reference(x, w, b), atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            conv3d(Tensor(np.zeros((1, 2, 2, 2, 3))),
                   Tensor(np.zeros((3, 3, 3, 2, 4))), Tensor(np.zeros(4)))


class TestMaxpool3d:
    def test_constant_input(self):
        out = maxpool3d(Tensor(np.full((1, 4, 4, 2, 2), 3.5)))
        assert out.shape == (1, 2, 2, 1, 2)
        assert np.all(out.data == 3.5)

    def test_block_max(self):
        x = np.arange(1.0, 9.0).reshape(1, 2, 2, 2, 1)
        assert maxpool3d(Tensor(x)).data.item() == 8.0

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 4, 4, 2, 3))
        out = maxpool3d(Tensor(x)).data
        for n in range(2):
            for i in range(2):
                for j in range(2):
                    for c in range(3):
                        block = x[n, 2 * i:2 * i + 2, 2 * j:2 * j + 2, 0:2, c]
                        assert out[n, i, j, 0, c] == block.max()

    def test_odd_extent_rejected(self):
        with pytest.raises(ValueError):
            maxpool3d(Tensor(np.zeros((1, 3, 4, 2, 1))))

    def test_tie_routes_to_first_index(self):
        x = Tensor(np.zeros((1, 2, 2, 2, 1)), requires_grad=True)
        out = maxpool3d(x)
        out.sum().backward()
        grads = x.grad.ravel()
        assert grads[0] == 1.0 and grads[1:].sum() == 0.0


class TestBatchnorm:
    def _stats(self, store):
        return store.add_buffer("rm", np.zeros(3)), store.add_buffer("rv", np.ones(3))

    def test_train_normalizes(self):
        rng = np.random.default_rng(3)
        store = ParamStore()
        rm, rv = self._stats(store)
        x = Tensor(rng.normal(5.0, 2.0, (16, 3)))
        out = batchnorm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), "train", rm, rv)
        assert np.all(np.abs(out.data.mean(axis=0)) <= 1e-10)
        assert np.allclose(out.data.var(axis=0), 1.0, atol=1e-4)

    def test_affine_applied(self):
        rng = np.random.default_rng(4)
        store = ParamStore()
        rm, rv = self._stats(store)
        x = Tensor(rng.standard_normal((64, 3)))
        out = batchnorm(x, Tensor(2.0 * np.ones(3)), Tensor(3.0 * np.ones(3)),
                        "train", rm, rv)
        assert np.allclose(out.data.mean(axis=0), 3.0, atol=1e-10)
        assert np.allclose(out.data.std(axis=0), 2.0, atol=1e-3)

    def test_infer_uses_running_stats(self):
        rm = np.array([5.0])
        rv = np.array([4.0])
        x = Tensor(np.array([[7.0]]))
        out = batchnorm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), "infer", rm, rv)
        assert out.data[0, 0] == pytest.approx(2.0 / np.sqrt(4.0 + 1e-5), rel=1e-12)

    def test_batch_of_one_rejected_in_train(self):
        with pytest.raises(ValueError):
            batchnorm(Tensor(np.zeros((1, 2))), Tensor(np.ones(2)),
                      Tensor(np.zeros(2)), "train", np.zeros(2), np.ones(2))

    def test_running_stats_updated(self):
        rm, rv = np.zeros(1), np.ones(1)
        x = Tensor(np.array([[10.0], [10.0]]))
        batchnorm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), "train", rm, rv)
        assert rm[0] == pytest.approx(0.99 * 0.0 + 0.01 * 10.0)
        assert rv[0] == pytest.approx(0.99 * 1.0 + 0.01 * 0.0)


class TestLstmStep:
    def _params(self, n_in, n_neu, fill=0.0, bias=None):
        p = {}
        for z in "fiog":
            p[f"w_x_{z}"] = Tensor(np.full((n_in, n_neu), fill))
            p[f"w_h_{z}"] = Tensor(np.full((n_neu, n_neu), fill))
            p[f"b_{z}"] = Tensor(np.full(n_neu, bias[z] if bias else 0.0))
        return p

    def test_forget_gate_preserves_cell(self):
        p = self._params(2, 3, bias={"f": 40.0, "i": -40.0, "o": 0.0, "g": 0.0})
        c_prev = Tensor(np.array([[0.3, -0.2, 0.9]]))
        _, c = lstm_step(Tensor(np.ones((1, 2))), Tensor(np.zeros((1, 3))), c_prev, p)
        assert np.allclose(c.data, c_prev.data, atol=1e-12)

    def test_closed_output_gate(self):
        p = self._params(2, 3, bias={"f": 0.0, "i": 0.0, "o": -40.0, "g": 0.0})
        h, _ = lstm_step(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 3))),
                         Tensor(np.ones((1, 3))), p)
        assert np.all(np.abs(h.data) < 1e-15)

    def test_hand_computed_step(self):
        # all weights 0.1, biases 0, x = h = (1,1), c = 0
        p = self._params(2, 2, fill=0.1)
        h, c = lstm_step(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 2))),
                         Tensor(np.zeros((1, 2))), p)
        sig = 1.0 / (1.0 + np.exp(-0.4))
        assert np.allclose(c.data, sig * 0.4, atol=1e-12)       # 0.23948
        assert np.allclose(h.data, sig * sig * 0.4, atol=1e-12)  # 0.14337
        assert c.data[0, 0] == pytest.approx(0.23948, abs=1e-5)
        assert h.data[0, 0] == pytest.approx(0.14337, abs=1e-5)

    def test_tanh_cell_activation(self):
        p = self._params(2, 2, fill=0.1)
        h, c = lstm_step(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 2))),
                         Tensor(np.zeros((1, 2))), p, cell_activation="tanh")
        sig = 1.0 / (1.0 + np.exp(-0.4))
        assert np.allclose(h.data, sig * np.tanh(sig * 0.4), atol=1e-12)


class TestDense:
    def test_identity(self):
        x = np.array([[1.0, 2.0]])
        out = dense(Tensor(x), Tensor(np.eye(2)), Tensor(np.zeros(2)))
        assert np.array_equal(out.data, x)

    def test_hand_case(self):
        out = dense(Tensor(np.array([[1.0, 2.0]])),
                    Tensor(np.array([[1.0, 0.0], [0.0, 2.0]])),
                    Tensor(np.array([1.0, 1.0])))
        assert np.array_equal(out.data, [[2.0, 5.0]])

    def test_matches_reference(self):
        rng = np.random.default_rng(5)
        x, w, b = rng.standard_normal((7, 4)), rng.standard_normal((4, 3)), rng.standard_normal(3)
        out = dense(Tensor(x), Tensor(w), Tensor(b))
        assert np.allclose(out.data, x @ w + b, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))),
                  Tensor(np.zeros(2)))


class TestBackward:
    def test_quadratic(self):
        p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        (p * p).sum().backward()
        assert np.allclose(p.grad, 2.0 * p.data)

    def test_unused_parameter_gets_zero(self):
        a = Tensor(np.array([2.0]), requires_grad=True)
        b = Tensor(np.array([5.0]), requires_grad=True)
        (a * a).sum().backward()
        assert b.grad is None  # untouched by the record

    def test_non_scalar_loss_rejected(self):
        p = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            (p * p).backward()

    def test_abs_and_broadcast(self):
        p = Tensor(np.array([[1.0, -2.0], [3.0, -4.0]]), requires_grad=True)
        bias = Tensor(np.array([0.5, -0.5]), requires_grad=True)
        (p + bias).abs().sum().backward()
        assert np.allclose(p.grad, np.sign(p.data + bias.data))
        assert np.allclose(bias.grad, np.sign(p.data + bias.data).sum(axis=0))

    def test_gather_and_stack(self):
        p = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        picked = p.gather_rows([0, 2, 0])
        out = stack([picked, picked], axis=1)
        out.sum().backward()
        assert np.allclose(p.grad, [[4.0, 4.0], [0.0, 0.0], [2.0, 2.0]])

    @pytest.mark.parametrize("op", ["relu", "sigmoid", "tanh", "abs"])
    def test_elementwise_fd(self, op):
        rng = np.random.default_rng(6)
        x0 = rng.standard_normal(5) + 0.3  # keep clear of kinks
        p = Tensor(x0, requires_grad=True)
        out = getattr(p, op)()
        (out * out).sum().backward()
        h = 1e-6
        for i in range(5):
            xp, xm = x0.copy(), x0.copy()
            xp[i] += h
            xm[i] -= h
            fp = (getattr(Tensor(xp), op)().data ** 2).sum()
            fm = (getattr(Tensor(xm), op)().data ** 2).sum()
            fd = (fp - fm) / (2 * h)
            assert p.grad[i] == pytest.approx(fd, rel=1e-5, abs=1e-8)

    def test_layer_fd_composite(self):
        # conv -> bn -> relu -> pool -> dense on a tiny input, FD on a few params
        rng = np.random.default_rng(7)
        store = ParamStore()
        w = store.add_param("w", 0.3 * rng.standard_normal((3, 3, 3, 1, 2)))
        b = store.add_param("b", 0.1 * rng.standard_normal(2))
        gam = store.add_param("g", np.ones(2))
        bet = store.add_param("be", np.zeros(2))
        x = rng.standard_normal((3, 2, 2, 2, 1))

        def loss_value():
            rm, rv = np.zeros(2), np.ones(2)
            t = conv3d(Tensor(x), w, b)
            t = batchnorm(t, gam, bet, "train", rm, rv)
            t = t.relu()
            t = maxpool3d(t)
            return (t * t).sum()

        loss = loss_value()
        loss.backward()
        h = 1e-6
        for name, flat_idx in (("w", 13), ("b", 0), ("g", 1), ("be", 0)):
            p = store.params[name]
            orig = p.data.ravel()[flat_idx]
            p.data.ravel()[flat_idx] = orig + h
            fp = loss_value().data
            p.data.ravel()[flat_idx] = orig - h
            fm = loss_value().data
            p.data.ravel()[flat_idx] = orig
            fd = (fp - fm) / (2 * h)
            assert p.grad.ravel()[flat_idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)


class TestAdam:
    def test_first_step_is_signed_lr(self):
        p = {"x": Tensor(np.array([1.0, 1.0]), requires_grad=True)}
        st = AdamState(lr=0.001)
        adam_update(st, p, {"x": np.array([0.5, -3.0])})
        assert np.allclose(p["x"].data, [1.0 - 0.001, 1.0 + 0.001], atol=1e-8)
        assert st.t == 1

    def test_zero_gradient_no_move(self):
        p = {"x": Tensor(np.array([2.0]), requires_grad=True)}
        adam_update(AdamState(lr=0.1), p, {"x": np.zeros(1)})
        assert p["x"].data[0] == 2.0

    def test_two_steps_constant_gradient(self):
        # hand iteration of the Adam recurrences with g = 1, lr = 0.001
        p = {"x": Tensor(np.array([0.0]), requires_grad=True)}
        st = AdamState(lr=0.001)
        m = v = 0.0
        x_ref = 0.0
        for t in (1, 2):
            m = 0.9 * m + 0.1 * 1.0
            v = 0.999 * v + 0.001 * 1.0
            x_ref -= 0.001 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            adam_update(st, p, {"x": np.ones(1)})
        assert p["x"].data[0] == pytest.approx(x_ref, abs=1e-12)
        assert p["x"].data[0] == pytest.approx(-0.002, abs=1e-6)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(8)
        store = ParamStore()
        store.add_param("layer1.w", rng.standard_normal((3, 4)))
        store.add_param("layer1.b", rng.standard_normal(4))
        store.add_buffer("bn.mean", rng.standard_normal(4))
        path = tmp_path / "ckpt.bin"
        save_params(path, store, extras={"note": "test", "n": 3})
        back, extras = load_params(path)
        assert extras == {"note": "test", "n": 3}
        assert np.array_equal(back.params["layer1.w"].data,
                              store.params["layer1.w"].data)
        assert np.array_equal(back.buffers["bn.mean"], store.buffers["bn.mean"])

    def test_manifest_export(self, tmp_path):
        import json
        store = ParamStore()
        store.add_param("w", np.zeros((2, 2)))
        export_manifest(tmp_path / "manifest.json", store)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["layers"][0] == {"name": "w", "shape": [2, 2],
                                         "trainable": True}

    def test_magic_checked(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            load_params(path)
