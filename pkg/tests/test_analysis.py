import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msat_snn import analysis
from msat_snn.analysis import accuracy_sweep, decompose_error, dense_layer_error, energy, recount_acs, sweep_csv
from msat_snn.calibrate import SinStats
from msat_snn.data import LabeledDataset
from msat_snn.errors import InputError, UnsupportedConfigurationError
from msat_snn.model import AnnModel, Layer, accuracy, forward, init_mlp, record_profile
from msat_snn.msat import MsatConfig
from msat_snn.snn import RunResult, clipfloor_oracle, convert, simulate_dataset


def test_single_neuron_decomposition():
    err = dense_layer_error([[1.0]], [0.42], [0.0], [0.0], np.zeros((10, 1), bool), 1.0, 1.0, 10)
    assert err.e_total[0] == pytest.approx(-0.02, abs=1e-15)
    assert err.e_qc[0] == 0.4 - 0.42
    assert err.e_sin[0] == 0.0 and err.residual[0] == 0.0


def test_mixed_presynaptic_layer_e_sin():
    # presynaptic layer: two active neurons (0.48, 0.5) and the -0.01 neuron, which spiked once
    weights = [[0.5, 0.5, -0.5]]
    raster = np.zeros((10, 3), bool)
    raster[2, 2] = True
    err = dense_layer_error(weights, [0.2], [0.48, 0.5, 0.0], [0.48, 0.5, -0.01], raster, 1.0, 1.0, 10)
    assert err.e_sin[0] == pytest.approx(-(-0.5) * 1 / 10, abs=1e-15)
    assert err.e_total[0] == pytest.approx(err.e_qc[0] + err.e_sin[0] + err.residual[0], abs=1e-15)
    # spikes of the active neurons are not SIN: they never enter e_sin
    raster[:, 0] = True
    again = dense_layer_error(weights, [0.2], [0.48, 0.5, 0.0], [0.48, 0.5, -0.01], raster, 1.0, 1.0, 10)
    assert again.e_sin[0] == err.e_sin[0]
    # a negative neuron that never fires contributes nothing
    silent = dense_layer_error(weights, [0.2], [0.48, 0.5, 0.0], [0.48, 0.5, -0.01], np.zeros((10, 3), bool),
                               1.0, 1.0, 10)
    assert silent.e_sin[0] == 0.0 and silent.residual[0] == 0.0


def test_raster_shape_checked():
    with pytest.raises(InputError):
        dense_layer_error([[1.0]], [0.0], [0.5], [0.5], np.zeros((5, 2), bool), 1.0, 1.0, 10)


def test_additivity_random_single_layers():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        m, n = rng.integers(1, 8, size=2)
        W = rng.normal(size=(m, n))
        b = rng.normal(0, 0.2, m)
        a_prev = np.maximum(rng.normal(0.3, 0.5, n), 0.0)
        T = int(rng.integers(1, 64))
        v_th = float(rng.uniform(0.2, 3.0))
        err = dense_layer_error(W, b, a_prev, a_prev, np.zeros((T, n), bool), 1.0, v_th, T)
        worst = max(worst, np.abs(err.e_total - err.e_qc - err.e_sin).max())
        pre = W @ a_prev + b
        assert np.allclose(err.e_qc, clipfloor_oracle(pre, T, v_th) - np.maximum(pre, 0), atol=1e-12)
    assert worst <= 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_residual_is_reported_not_folded(seed):
    rng = np.random.default_rng(seed)
    n, T = 4, 16
    pre_prev = rng.normal(0, 0.5, n)
    raster = rng.random((T, n)) < 0.2
    err = dense_layer_error(rng.normal(size=(3, n)), rng.normal(0, 0.2, 3), np.maximum(pre_prev, 0), pre_prev,
                            raster, 0.8, 1.0, T)
    assert np.allclose(err.e_total, err.e_qc + err.e_sin + err.residual, atol=1e-12)


def test_decompose_error_on_model():
    rng = np.random.default_rng(1)
    model = init_mlp([3, 6, 4], 1)
    x = rng.uniform(-1, 1, (40, 3))
    profile = record_profile(model, LabeledDataset(x, np.zeros(40, dtype=np.int64), 1))
    net = convert(model, profile, "constant")
    report = decompose_error(model, net, x[0], 32)
    assert report.T == 32 and len(report.layers) == 2
    first = report.layers[0]
    assert not first.e_sin.any() and not first.residual.any()
    _, acts = forward(model, x[0], capture=True)
    run = net.run(x[0], 32)
    assert np.allclose(first.e_total, run.rates[0][0] - acts.post[0], atol=1e-12)
    for layer in report.layers:
        assert np.allclose(layer.e_total, layer.e_qc + layer.e_sin + layer.residual, atol=1e-12)
    with pytest.raises(UnsupportedConfigurationError):
        decompose_error(model, net.replace(regime="msat"), x[0], 32)


def test_ans_examples():
    stats = SinStats(10, 1, [10], [0.1], [np.array([3] + [0] * 9)], [np.zeros(10, int)])
    assert analysis.ans(stats) == pytest.approx(0.3)
    assert analysis.ans(SinStats(10, 1, [10], [0.0], [np.zeros(10)], [np.zeros(10, int)])) == 0.0
    counts = np.zeros((1, 10), dtype=np.int64)
    counts[0, 4] = 3
    counts[0, 5] = 7  # positive neuron, not SIN
    pre = np.full((1, 10), 0.5)
    pre[0, 4] = -0.01
    run = RunResult(10, [np.zeros((1, 10))], [counts], [np.zeros((1, 10))], np.zeros((1, 10)),
                    np.zeros((10, 1, 10), bool), np.zeros((10, 1, 1)), np.zeros((10, 1, 1)))
    assert analysis.ans(run, pre_relu=pre) == pytest.approx(0.3)
    with pytest.raises(InputError):
        analysis.ans(run)


def _conv_model(rng, bias=0.1):
    return AnnModel([
        Layer.conv2d(rng.normal(0, 0.5, (2, 1, 3, 3)), rng.normal(0, 0.1, 2), stride=1, padding=1),
        Layer.relu(), Layer.avgpool(2),
        Layer.conv2d(rng.normal(0, 0.5, (3, 2, 2, 2)), np.full(3, bias), stride=2, padding=1),
        Layer.relu(), Layer.flatten(),
        Layer.dense(rng.normal(0, 0.5, (2, 12)), np.full(2, bias)),
    ], (1, 4, 4))


def test_energy_recount_conv_and_bias_acs():
    rng = np.random.default_rng(2)
    model = _conv_model(rng)
    x = rng.uniform(0, 1, (10, 1, 4, 4))
    prof = record_profile(model, LabeledDataset(x.reshape(10, -1), np.zeros(10, dtype=np.int64), 1))
    trace = convert(model, prof, "constant").run(x, 12, record_rasters=True)
    assert np.array_equal(recount_acs(model, trace.rasters), trace.step_acs.sum(axis=(0, 1)))
    report = energy(model, trace)
    assert report.bias_acs == 12 * (3 * 2 * 2 + 2)
    assert report.snn_acs == trace.step_acs.sum() / 10
    expect = 4.6 * report.snn_first_layer_macs * 12 + 0.9 * (report.snn_acs + report.bias_acs)
    assert report.snn_energy_pj == pytest.approx(expect, rel=1e-15)
    assert report.ann_energy_pj == 4.6 * model.total_macs()
    assert all(0.0 <= r <= 1.0 for r in report.firing_rates)
    assert set(report.to_dict()) >= {"ann_macs", "snn_acs", "snn_first_layer_macs", "ratio", "firing_rates"}
    with pytest.raises(InputError):
        energy(model, trace, T=24)
    zero_bias = _conv_model(np.random.default_rng(2), bias=0.0)
    trace0 = convert(zero_bias, record_profile(zero_bias, LabeledDataset(x.reshape(10, -1), np.zeros(10, dtype=np.int64), 1))).run(x, 12)
    assert energy(zero_bias, trace0).bias_acs == 0


def test_energy_custom_costs():
    model = init_mlp([2, 3, 1], 0)
    x = np.array([[0.5, 0.5]])
    trace = convert(model, record_profile(model, LabeledDataset(x, np.zeros(1, dtype=np.int64), 1))).run(x, 4)
    r = energy(model, trace, ac_pj=1.0, mac_pj=2.0)
    assert r.ann_energy_pj == 18.0 and r.ac_pj == 1.0


def test_sweep_shape_csv_and_errors(desk_mlp):
    model, profile, _, evaluation = desk_mlp
    small = evaluation.subset(slice(0, 100))
    net = convert(model, profile, config=MsatConfig.preset("vgg16"))
    rows = accuracy_sweep(model, net, small, [1, 4, 16], ["constant", "msat"], chunk_size=40, jobs=2)
    assert [(r.regime, r.T) for r in rows] == [(g, t) for g in ("constant", "msat") for t in (1, 4, 16)]
    direct = simulate_dataset(net.replace(regime="msat"), small.features, 4)
    assert rows[4].accuracy == float(np.mean(direct.predictions() == small.labels))
    text = sweep_csv(rows)
    lines = text.splitlines()
    assert lines[0] == "regime,T,accuracy,mean_firing_rate" and len(lines) == 7
    assert all(len(l.split(",")) == 4 for l in lines)
    assert len(accuracy_sweep(model, net, small, [2, 8], ["det"])) == 2
    with pytest.raises(InputError):
        accuracy_sweep(model, net, small, [0, 4], ["constant"])
    with pytest.raises(InputError):
        accuracy_sweep(model, net, small, [4], [])


def test_constant_sweep_trend(desk_mlp):
    model, profile, _, evaluation = desk_mlp
    T_list = [2 ** k for k in range(9)]
    rows = accuracy_sweep(model, convert(model, profile), evaluation, T_list, ["constant"])
    acc = [r.accuracy for r in rows]
    assert all(b >= a - 0.01 for a, b in zip(acc, acc[1:])), acc
    assert acc[-1] >= accuracy(model, evaluation) - 0.01
