import math

import numpy as np
import pytest

from easing import autodiff as ad
from easing.autodiff import ParamStore, Tensor, grad, mean_all
from easing.config import ConfigError, DjeConfig, ScalingConfig
from easing.decoder import (
    Estimate,
    apply_scaling,
    cen,
    decode,
    decoder_layer,
    dsa,
    init_decoder_params,
    rent,
    scaler_vector,
)
from easing.graph import NodeFeatureSet, generate_synthetic, load_graph

from fd_oracle import max_rel_error, numeric_grad


def make_decoder(cfg, seed=0):
    store = ParamStore()
    init_decoder_params(store, "", cfg, np.random.default_rng(seed))
    return store


def batch(cfg, b=2, seed=1):
    rng = np.random.default_rng(seed)
    return (Tensor(rng.normal(size=(b, cfg.N, 2 * cfg.d))),
            Tensor(rng.normal(size=(b, cfg.N, 2 * cfg.d))))


class TestDsa:
    def test_single_row_returns_value_row(self):
        cfg = DjeConfig(d=4, N=1, H=2, L=1, dropout=0.0)
        store = make_decoder(cfg)
        X = Tensor(np.random.default_rng(2).normal(size=(1, 1, 8)))
        out = dsa(X, store, "", cfg, 0, "s")
        elu = lambda v: np.where(v > 0, v, np.exp(v) - 1)
        want = elu(X.data[0] @ store["dec.layer0.WV"].data)
        np.testing.assert_allclose(out.data[0], want, atol=1e-12)

    def test_zero_input_zero_preserving_params(self):
        cfg = DjeConfig(d=4, N=3, H=2, L=1, dropout=0.0)
        store = make_decoder(cfg)
        X = Tensor(np.zeros((1, 3, 8)))
        out = dsa(X, store, "", cfg, 0, "s")
        np.testing.assert_allclose(out.data, 0.0, atol=1e-15)

    def test_matches_loop_oracle(self):
        cfg = DjeConfig(d=4, N=3, H=2, L=1, dropout=0.0)
        store = make_decoder(cfg, seed=5)
        X, _ = batch(cfg, b=1, seed=7)
        out = dsa(X, store, "", cfg, 0, "s")
        elu = lambda v: np.where(v > 0, v, np.exp(v) - 1)
        x = X.data[0]
        Q = elu(x @ store["dec.layer0.WQ"].data)
        K = elu(x @ store["dec.layer0.WK"].data)
        V = elu(x @ store["dec.layer0.WV"].data)
        want = np.zeros_like(x)
        for i in range(cfg.N):
            scores = np.array([Q[i] @ K[j] for j in range(cfg.N)])
            scores /= math.sqrt(cfg.d)
            e = np.exp(scores - scores.max())
            a = e / e.sum()
            for j in range(cfg.N):
                want[i] += a[j] * V[j]
        np.testing.assert_allclose(out.data[0], want, atol=1e-12)

    def test_attention_rows_sum_to_one(self):
        cfg = DjeConfig(d=8, N=5, H=2, L=1, dropout=0.0)
        store = make_decoder(cfg)
        X, _ = batch(cfg, b=3, seed=9)
        elu = lambda v: np.where(v > 0, v, np.exp(v) - 1)
        Q = elu(X.data @ store["dec.layer0.WQ"].data)
        K = elu(X.data @ store["dec.layer0.WK"].data)
        rows = ad.softmax_rows(
            Tensor(Q @ np.swapaxes(K, -1, -2) / math.sqrt(cfg.d)))
        np.testing.assert_allclose(rows.data.sum(axis=-1), 1.0, atol=1e-9)


class TestDecoderLayer:
    def test_shape_preservation(self):
        cfg = DjeConfig(d=8, N=3, H=2, L=1, dropout=0.0)
        store = make_decoder(cfg)
        S, U = batch(cfg, b=4)
        S2, U2 = decoder_layer(S, U, store, "", cfg, 0, "off", None)
        assert S2.data.shape == (4, 3, 16) and U2.data.shape == (4, 3, 16)

    def test_zeroed_path_reduces_to_double_layer_norm(self):
        cfg = DjeConfig(d=4, N=3, H=2, L=1, dropout=0.0)
        store = make_decoder(cfg)
        two_d = 2 * cfg.d
        store.replace("dec.layer0.WV", np.zeros((two_d, two_d)))
        for stream in ("s", "u"):
            store.replace(f"dec.layer0.{stream}.W2", np.zeros((two_d, two_d)))
        S, U = batch(cfg, b=2, seed=3)
        S2, _ = decoder_layer(S, U, store, "", cfg, 0, "off", None)
        ln = ad.layer_norm(S, np.ones(two_d), np.zeros(two_d))
        lnln = ad.layer_norm(ln, np.ones(two_d), np.zeros(two_d))
        np.testing.assert_allclose(S2.data, lnln.data, atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        cfg = DjeConfig(d=4, N=3, H=2, L=1, dropout=0.0)
        store = make_decoder(cfg, seed=13)
        S, U = batch(cfg, b=2, seed=17)

        def forward():
            S2, U2 = decoder_layer(S, U, store, "", cfg, 0, "off", None)
            return ad.add(mean_all(S2), mean_all(ad.square(U2)))

        res = grad(forward(), store)
        num = numeric_grad(forward, store)
        err, name = max_rel_error(res.grads, num)
        assert err <= 1e-4, f"worst mismatch {err:.3e} at {name}"


class TestDecode:
    def test_zero_readout_gives_zero(self):
        cfg = DjeConfig(d=4, N=3, H=2, L=1, dropout=0.0)
        store = make_decoder(cfg)
        store.replace("dec.Ws", np.zeros((cfg.N, 2 * cfg.d)))
        S, U = batch(cfg)
        s_hat, _ = decode(S, U, store, "", cfg, "off")
        np.testing.assert_allclose(s_hat.data, 0.0, atol=1e-15)

    def test_selector_readout_with_no_layers(self):
        cfg = DjeConfig(d=4, N=3, H=2, L=0, dropout=0.0)
        store = make_decoder(cfg)
        sel = np.zeros((cfg.N, 2 * cfg.d))
        sel[1, 5] = 1.0
        store.replace("dec.Ws", sel)
        S, U = batch(cfg, b=3, seed=21)
        s_hat, _ = decode(S, U, store, "", cfg, "off")
        np.testing.assert_allclose(s_hat.data, S.data[:, 1, 5], atol=1e-15)

    def test_matches_composed_loop_oracle(self):
        cfg = DjeConfig(d=4, N=3, H=2, L=2, dropout=0.0)
        store = make_decoder(cfg, seed=23)
        S, U = batch(cfg, b=2, seed=29)
        s_hat, z_hat = decode(S, U, store, "", cfg, "off")
        # independent recomputation with plain numpy, layer by layer
        elu = lambda v: np.where(v > 0, v, np.exp(v) - 1)

        def ln(x):
            m = x.mean(axis=-1, keepdims=True)
            v = x.var(axis=-1, keepdims=True)
            return (x - m) / np.sqrt(v + 1e-5)

        def attn(x, l):
            Q = elu(x @ store[f"dec.layer{l}.WQ"].data)
            K = elu(x @ store[f"dec.layer{l}.WK"].data)
            V = elu(x @ store[f"dec.layer{l}.WV"].data)
            sc = Q @ np.swapaxes(K, -1, -2) / math.sqrt(cfg.d)
            e = np.exp(sc - sc.max(axis=-1, keepdims=True))
            return (e / e.sum(axis=-1, keepdims=True)) @ V

        def ffn(x, l, stream):
            W1 = store[f"dec.layer{l}.{stream}.W1"].data
            W2 = store[f"dec.layer{l}.{stream}.W2"].data
            return elu(elu(x @ W1) @ W2)

        s, u = S.data, U.data
        for l in range(cfg.L):
            hs = ln(s + attn(s, l))
            s = ln(hs + ffn(hs, l, "s"))
            hu = ln(u + attn(u, l))
            u = ln(hu + ffn(hu, l, "u"))
        want_s = (store["dec.Ws"].data[None] * s).sum(axis=(1, 2))
        want_z = (store["dec.Wz"].data[None] * u).sum(axis=(1, 2))
        np.testing.assert_allclose(s_hat.data, want_s, atol=1e-10)
        np.testing.assert_allclose(z_hat.data, want_z, atol=1e-10)

    def test_deterministic_with_dropout_off(self):
        cfg = DjeConfig(d=4, N=3, H=2, L=1, dropout=0.3)
        store = make_decoder(cfg)
        S, U = batch(cfg)
        a = decode(S, U, store, "", cfg, "off")[0].data
        b = decode(S, U, store, "", cfg, "off")[0].data
        np.testing.assert_array_equal(a, b)

    def test_per_stream_qkv_toggle(self):
        cfg = DjeConfig(d=4, N=3, H=2, L=1, dropout=0.0,
                        share_decoder_qkv=False)
        store = make_decoder(cfg)
        assert "dec.layer0.s.WQ" in store and "dec.layer0.u.WQ" in store
        S, U = batch(cfg)
        s_hat, z_hat = decode(S, U, store, "", cfg, "off")
        assert s_hat.data.shape == (2,)


class TestScaling:
    def test_cen_isolated_node(self, tmp_path):
        p = tmp_path / "e.tsv"
        p.write_text("0\t1\ta\n", encoding="utf-8")
        graph = __import__("easing.graph", fromlist=["load_graph"]).load_graph(
            p, node_count=3)
        assert abs(cen(graph, 2) - math.log(1e-4)) < 1e-12

    def test_cen_one_and_seven_neighbors(self, tmp_path):
        p = tmp_path / "e.tsv"
        lines = ["1\t0\ta\n"] + [f"{i}\t8\ta\n" for i in range(1, 8)]
        p.write_text("".join(lines), encoding="utf-8")
        graph = load_graph(p, node_count=9)
        assert abs(cen(graph, 0) - math.log(1.0001)) < 1e-12
        assert abs(cen(graph, 8) - math.log(7.0001)) < 1e-12

    def test_rent_no_neighbors_and_identical_features(self, tmp_path):
        p = tmp_path / "e.tsv"
        p.write_text("0\t1\ta\n", encoding="utf-8")
        graph = load_graph(p, node_count=3)
        t = np.tile(np.array([0.3, -0.2, 1.0, 0.0]), (3, 1))
        assert abs(rent(graph, t, 2) - math.log(1e-4)) < 1e-12
        # node 1 has neighbor 0 with identical features -> KL = 0
        assert abs(rent(graph, t, 1) - math.log(1e-4)) < 1e-12

    def test_rent_matches_kl_loop_oracle(self, tmp_path):
        p = tmp_path / "e.tsv"
        p.write_text("1\t0\ta\n2\t0\tb\n3\t0\ta\n", encoding="utf-8")
        graph = load_graph(p, node_count=4)
        rng = np.random.default_rng(31)
        t = rng.normal(size=(4, 6))
        got = rent(graph, t, 0)

        def softmax(v):
            e = np.exp(v - v.max())
            return e / e.sum()

        total = 0.0
        qx = softmax(t[0])
        for y in (1, 2, 3):
            qy = softmax(t[y])
            for j in range(6):
                total += qx[j] * math.log(qx[j] / qy[j])
        np.testing.assert_allclose(got, math.log(total + 1e-4), atol=1e-12)

    def test_scaler_vector_matches_pointwise_definitions(self):
        graph, feats, _ = generate_synthetic(40, 3, 4, 6, seed=17)
        cfg = ScalingConfig(enabled=True, mu1=0.7, mu2=0.3)
        vec = scaler_vector(graph, feats, cfg)
        for x in range(0, 40, 7):
            want = (0.7 * cen(graph, x) + 0.3 * rent(graph, feats.textual, x))
            np.testing.assert_allclose(vec[x], want, atol=1e-10)

    def test_apply_scaling_disabled_is_identity(self):
        graph, feats, _ = generate_synthetic(5, 2, 2, 4, seed=1)
        est = Estimate(s_hat=2.0, z_hat=-1.5)
        out = apply_scaling(est, graph, feats, 0,
                            ScalingConfig(enabled=False))
        assert out == est

    def test_apply_scaling_arithmetic(self, tmp_path):
        # CEN = 1 and RENT = -1 forced via monkeypatchable pieces is brittle;
        # instead check the formula directly on a crafted fixture
        graph, feats, _ = generate_synthetic(6, 2, 2, 4, seed=3)
        cfg = ScalingConfig(enabled=True, mu1=0.9, mu2=0.1)
        est = Estimate(s_hat=2.0, z_hat=0.25)
        out = apply_scaling(est, graph, feats, 4, cfg)
        scale = 0.9 * cen(graph, 4) + 0.1 * rent(graph, feats.textual, 4)
        np.testing.assert_allclose(out.s_hat, scale * 2.0, atol=1e-12)
        assert out.z_hat == est.z_hat

    def test_scaling_is_linear_in_estimate(self):
        graph, feats, _ = generate_synthetic(6, 2, 2, 4, seed=3)
        cfg = ScalingConfig(enabled=True)
        a = apply_scaling(Estimate(3.0, 0.0), graph, feats, 2, cfg).s_hat
        b = apply_scaling(Estimate(1.0, 0.0), graph, feats, 2, cfg).s_hat
        np.testing.assert_allclose(a, 3.0 * b, atol=1e-12)

    def test_uncertainty_bit_identical(self):
        graph, feats, _ = generate_synthetic(6, 2, 2, 4, seed=3)
        cfg = ScalingConfig(enabled=True)
        z = -0.123456789123456789
        out = apply_scaling(Estimate(1.0, z), graph, feats, 1, cfg)
        assert out.z_hat == z

    def test_mu_range_validation(self):
        with pytest.raises(ConfigError):
            ScalingConfig(enabled=True, mu1=1.5, mu2=0.1)
