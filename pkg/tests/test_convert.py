import math

import numpy as np
import pytest

from sdrnn.containers import FeatureSequence
from sdrnn.convert import (CompileConfig, TimingConfig, alpha_to_tau, compile_network,
                           compile_report, load_network, map_bias, map_weights,
                           rescale_tau, save_network, select_scale_factor, tau_to_alpha)
from sdrnn.errors import ConfigError, NumericError
from sdrnn.lprnn import init_model, ste_quantize
from sdrnn.numerics import STATE_LIMIT

TIMING = TimingConfig(t_ann=0.01, t_snn=0.0001)


def quantized_model(rng, n_in=2, hidden=(4, 4, 4), n_out=2, alphas=(0.85, 0.9, 0.9, 0.8),
                    weight_scale=0.8, bias_scale=0.1):
    model = init_model(n_in, hidden, n_out, alphas, t_ann=TIMING.t_ann,
                       seed=int(rng.integers(1 << 30)))
    for layer in model.layers:
        layer.w_in = rng.normal(0.0, weight_scale / np.sqrt(layer.fan_in),
                                size=layer.w_in.shape)
        if layer.w_rec is not None:
            layer.w_rec = rng.normal(0.0, weight_scale / np.sqrt(layer.size),
                                     size=layer.w_rec.shape)
        layer.bias = rng.uniform(0.0, bias_scale, size=layer.bias.shape)
    return model


class TestTimingConfig:
    def test_oversample(self):
        assert TIMING.oversample == 100

    def test_non_integer_ratio_rejected(self):
        with pytest.raises(ConfigError):
            TimingConfig(t_ann=0.01, t_snn=0.003)

    def test_snn_coarser_than_ann_rejected(self):
        with pytest.raises(ConfigError):
            TimingConfig(t_ann=0.01, t_snn=0.02)


class TestAlphaToTau:
    def test_exp_minus_one(self):
        # ln(e^-1) = -1, so tau equals the sampling interval exactly
        assert alpha_to_tau(math.exp(-1.0), 1.0) == pytest.approx(1.0, rel=1e-12)

    def test_alpha_09_at_10ms(self):
        expected = -0.010 / math.log(0.9)  # independent evaluation, ~94.91 ms
        assert alpha_to_tau(0.9, 0.010) == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(0.09491, abs=5e-6)

    def test_alpha_to_zero_limit(self):
        assert alpha_to_tau(1e-12, 1.0) < 0.04

    def test_rejects_out_of_range(self):
        for alpha in (0.0, 1.0, 1.5, -0.1):
            with pytest.raises(ConfigError):
                alpha_to_tau(alpha, 1.0)

    def test_round_trip_recovers_alpha(self):
        rng = np.random.default_rng(0)
        for alpha in rng.uniform(1e-6, 1.0 - 1e-9, size=200):
            tau = alpha_to_tau(alpha, 0.01)
            assert tau_to_alpha(tau, 0.01) == pytest.approx(alpha, rel=1e-12)


class TestRescaleTau:
    def test_oversample_one_identity(self):
        timing = TimingConfig(t_ann=0.01, t_snn=0.01)
        # tau re-expressed in steps of t_snn = t_ann: one step per frame
        assert rescale_tau(0.02, timing) == pytest.approx(2.0, rel=1e-12)

    def test_two_frames_oversample_100(self):
        tau_ann = 2 * TIMING.t_ann
        assert rescale_tau(tau_ann, TIMING) == pytest.approx(200.0, rel=1e-12)

    def test_zero_tau_rejected(self):
        with pytest.raises(ConfigError):
            rescale_tau(0.0, TIMING)

    def test_subunit_tau_rejected(self):
        with pytest.raises(ConfigError):
            rescale_tau(TIMING.t_snn / 2, TIMING)


class TestMapWeights:
    def test_zero_maps_to_zero(self):
        out = map_weights(np.zeros((3, 3)), f=100.0, tau_u=2, tau_i=4)
        assert np.all(out == 0)

    def test_worked_value(self):
        # 512 * 1.0 / (2 * 4 * 64) = 1
        out = map_weights(np.array([[1.0]]), f=512.0, tau_u=2, tau_i=4)
        assert out[0, 0] == 1

    def test_scale_linearity(self):
        rng = np.random.default_rng(1)
        w = rng.normal(size=(4, 4))
        for c in (0.5, 2.0, 3.0):
            left = map_weights(c * w, f=300.0, tau_u=2, tau_i=4)
            right = map_weights(w, f=c * 300.0, tau_u=2, tau_i=4)
            np.testing.assert_array_equal(left, right)

    def test_range_error_names_entries(self):
        w = np.array([[1.0, 0.0], [0.0, 2.0]])
        with pytest.raises(NumericError) as err:
            map_weights(w, f=10_000_000.0, tau_u=2, tau_i=4, weight_limit=255)
        assert "(0, 0)" in str(err.value)

    def test_ties_round_away_from_zero(self):
        # f/(tau_u*tau_i*gain) = 0.5 exactly
        out = map_weights(np.array([[1.0, -1.0, 3.0]]), f=256.0, tau_u=2, tau_i=4)
        assert out.tolist() == [[1, -1, 2]]


class TestMapBias:
    def test_zero(self):
        assert np.all(map_bias(np.zeros(4), f=8.0, tau_i=4) == 0)

    def test_worked_value(self):
        # 8 * 2.0 / 4 = 4
        assert map_bias(np.array([2.0]), f=8.0, tau_i=4)[0] == 4

    def test_scale_linearity(self):
        rng = np.random.default_rng(2)
        b = rng.normal(size=6)
        np.testing.assert_array_equal(map_bias(2.0 * b, f=50.0, tau_i=4),
                                      map_bias(b, f=100.0, tau_i=4))

    def test_range_check(self):
        with pytest.raises(NumericError):
            map_bias(np.array([1.0]), f=1e9, tau_i=1)


class TestCompile:
    def test_bookkeeping_round_trip(self):
        rng = np.random.default_rng(3)
        model = quantized_model(rng)
        f = 2e5
        net = compile_network(model, TIMING, f)
        assert net.f == f
        for layer_model, layer_net in zip(model.layers, net.layers):
            tau_expected = rescale_tau(alpha_to_tau(layer_model.alpha, TIMING.t_ann), TIMING)
            assert layer_net.tau_s == pytest.approx(tau_expected, rel=1e-12)
            assert layer_net.tau_i == layer_net.tau_s
            assert layer_net.w_fb == int(round(f / layer_net.tau_s_fx))
            assert layer_net.threshold == layer_net.w_fb

    def test_alpha_09_tau_in_steps(self):
        # chained formula: (-0.010 / ln 0.9) s expressed in 0.1 ms steps
        model = quantized_model(np.random.default_rng(4), alphas=(0.9, 0.9, 0.9, 0.9))
        net = compile_network(model, TIMING, f=1e5)
        expected_steps = (-0.010 / math.log(0.9)) / 0.0001
        assert net.layers[0].tau_s == pytest.approx(expected_steps, rel=1e-12)
        assert net.layers[0].tau_s == pytest.approx(949.122, abs=1e-3)

    def test_integer_weights_and_mapping(self):
        rng = np.random.default_rng(5)
        model = quantized_model(rng)
        net = compile_network(model, TIMING, f=2e5)
        for li, layer in enumerate(net.layers):
            if layer.w_in is not None:
                w_q = ste_quantize(model.layers[li].w_in, model.bits)
                expected = map_weights(w_q, net.f, layer.tau_u_fx, layer.tau_i_fx,
                                       net.config.weight_gain)
                np.testing.assert_array_equal(layer.w_in, expected)
                assert layer.tau_u == layer.tau_s  # sender-lead cancellation
            assert layer.bias.dtype.kind == "i"

    def test_compile_is_deterministic(self):
        rng = np.random.default_rng(6)
        model = quantized_model(rng)
        a = compile_network(model, TIMING, f=1.5e5)
        b = compile_network(model, TIMING, f=1.5e5)
        for la, lb in zip(a.layers, b.layers):
            np.testing.assert_array_equal(la.bias, lb.bias)
            if la.w_in is not None:
                np.testing.assert_array_equal(la.w_in, lb.w_in)
            assert (la.tau_s, la.w_fb) == (lb.tau_s, lb.w_fb)

    def test_infeasible_feedback_weight(self):
        rng = np.random.default_rng(7)
        model = quantized_model(rng)
        with pytest.raises(NumericError):
            compile_network(model, TIMING, f=10.0)  # f/tau_s < 1


class TestSelectScaleFactor:
    def test_zero_probes_cap_by_weight_range(self):
        rng = np.random.default_rng(8)
        model = quantized_model(rng)
        probes = [FeatureSequence(np.zeros((5, 2)), TIMING.t_ann)]
        f, trace = select_scale_factor(model, probes, TIMING, return_trace=True)
        # with silent probes only the weight range binds: the largest mapped
        # magnitude sits at the hardware limit
        net = compile_network(model, TIMING, f)
        peak_w = max(int(np.abs(l.w_in).max()) for l in net.layers if l.w_in is not None)
        assert peak_w == 255
        assert len(trace) == 1

    def test_single_neuron_closed_form(self):
        # one encoder unit with unit weight driven at constant v: the peak
        # state is the drive i = f * v, so the bound gives f = limit/2 / v
        model = init_model(1, (1,), 1, (0.9, 0.9), t_ann=TIMING.t_ann, seed=0)
        model.layers[0].w_in[:] = 1.0
        model.layers[0].bias[:] = 0.0
        model.layers[1].w_in[:] = 0.03
        model.layers[1].bias[:] = 0.0
        v = 0.8
        probes = [FeatureSequence(np.full((40, 1), v), TIMING.t_ann)]
        f = select_scale_factor(model, probes, TIMING)
        expected = STATE_LIMIT * 0.5 / v
        assert f == pytest.approx(expected, rel=0.03)

    def test_doubling_amplitude_halves_f(self):
        rng = np.random.default_rng(9)
        model = quantized_model(rng)
        base = rng.uniform(0.2, 0.5, size=(20, 2))
        probes1 = [FeatureSequence(base, TIMING.t_ann)]
        probes2 = [FeatureSequence(np.clip(2 * base, 0, 1), TIMING.t_ann)]
        f1 = select_scale_factor(model, probes1, TIMING)
        f2 = select_scale_factor(model, probes2, TIMING)
        assert f2 / f1 == pytest.approx(0.5, rel=0.06)

    def test_search_trace_monotone_in_f(self):
        rng = np.random.default_rng(10)
        model = quantized_model(rng)
        probes = [FeatureSequence(rng.uniform(0.3, 1.0, size=(15, 2)), TIMING.t_ann)]
        _, trace = select_scale_factor(model, probes, TIMING, return_trace=True)
        fs = [f for f, _ in trace]
        peaks = [p for _, p in trace]
        assert all(p1 <= p2 for p1, p2 in zip(peaks, peaks[1:])), (fs, peaks)

    def test_empty_probe_set_rejected(self):
        rng = np.random.default_rng(11)
        with pytest.raises(ConfigError):
            select_scale_factor(quantized_model(rng), [], TIMING)


class TestNetworkFile:
    def test_roundtrip_and_report(self, tmp_path):
        rng = np.random.default_rng(12)
        model = quantized_model(rng)
        net = compile_network(model, TIMING, f=2e5)
        net.notes["probe_peak"] = 123.0
        path = tmp_path / "net.npz"
        save_network(net, path)
        back = load_network(path)
        assert back.f == net.f
        assert back.timing == net.timing
        assert back.notes["probe_peak"] == 123.0
        for la, lb in zip(back.layers, net.layers):
            assert la.kind == lb.kind and la.w_fb == lb.w_fb
            np.testing.assert_array_equal(la.bias, lb.bias)
            if lb.w_rec is not None:
                np.testing.assert_array_equal(la.w_rec, lb.w_rec)
            if lb.enc_w is not None:
                np.testing.assert_allclose(la.enc_w, lb.enc_w, rtol=0)
        # embedded source model survives for paired evaluation
        assert back.source_model.n_classes == model.n_classes
        report = compile_report(back)
        assert "scale factor" in report and "histogram" in report
