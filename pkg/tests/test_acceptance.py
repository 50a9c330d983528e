"""Acceptance criteria 1-10, one test (or parametrized group) per criterion.

The terminal summary prints one PASS/FAIL line per criterion (see conftest).
"""

import math
import time
from fractions import Fraction

import numpy as np
import pytest

from conftest import blobs_pipeline
from msat_snn import analysis, calibrate, cli, msat
from msat_snn.analysis import accuracy_sweep, dense_layer_error, energy, recount_acs
from msat_snn.calibrate import SpikeConfidenceTable, derive_confidence, measure_sin
from msat_snn.data import make_blobs
from msat_snn.io import RunConfig
from msat_snn.model import AnnModel, Layer, accuracy, init_mlp, record_profile
from msat_snn.msat import MsatConfig
from msat_snn.snn import RunResult, SnnNetwork, clipfloor_oracle, convert, simulate_dataset


def _single_neuron(v_th: float) -> SnnNetwork:
    model = AnnModel([Layer.dense([[1.0]], [0.0])], (1,))
    return SnnNetwork(model, [v_th])


# ---------------------------------------------------------------- 1

def test_criterion_1_clipfloor_grid():
    a_values = np.array([-1.0, -0.5, 0.0] + [k / 100 for k in range(1, 201)])
    start = time.perf_counter()
    cases = mismatches = 0
    for v_th in (0.5, 1.0, 2.0):
        net = _single_neuron(v_th)
        Ts = range(1, 65)
        res = net.run(a_values[:, None], 64, checkpoints=Ts, record_rasters=True)
        counts = np.cumsum(res.rasters[0][:, :, 0], axis=0)
        for T in Ts:
            rate = res.snapshots[T].scores[:, 0]
            expected = clipfloor_oracle(a_values, T, v_th)
            # independent exact count: clamp(floor(a*T/v_th), 0, T) in rational arithmetic
            exact_n = [min(max(math.floor(Fraction(a) * T / Fraction(v_th)), 0), T) for a in a_values]
            mismatches += int(np.count_nonzero(rate != expected))
            mismatches += int(np.count_nonzero(counts[T - 1] != exact_n))
            cases += a_values.size
    elapsed = time.perf_counter() - start
    assert cases == 3 * 64 * 203
    assert mismatches == 0
    assert elapsed < 5.0, f"grid took {elapsed:.2f}s"


# ---------------------------------------------------------------- 2

def test_criterion_2_worked_example():
    net = _single_neuron(1.0)
    res = net.run(np.array([0.42]), 10)
    assert int(res.spike_counts[0][0, 0]) == 4
    assert res.rates[0][0, 0] == 0.4
    residual = res.potentials[0][0, 0]
    # exact for the stored value of 0.42 (10*fl(0.42) - 4), which is 0.2 to 1.6e-16
    assert residual == float(Fraction(0.42) * 10 - 4)
    assert abs(residual - 0.2) < 1e-15
    # layer-local decomposition of the same neuron: e_qc = 0.4 - 0.42, nothing from SIN
    err = dense_layer_error([[1.0]], [0.42], [0.0], [0.0], np.zeros((10, 1), bool), 1.0, 1.0, 10)
    assert err.e_qc[0] == 0.4 - 0.42
    assert err.e_sin[0] == 0.0


# ---------------------------------------------------------------- 3

def _random_mlp(rng):
    n_in, n_hid, n_out = (int(v) for v in rng.integers(2, 9, size=3))
    base = init_mlp([n_in, n_hid, n_out], int(rng.integers(1 << 30)))
    layers = [Layer.dense(ly.weights, rng.normal(0, 0.3, ly.weights.shape[0])) if ly.parameterized else ly
              for ly in base.layers]
    model = AnnModel(layers, (n_in,))
    x = rng.uniform(-1, 2, size=(6, n_in))
    thresholds = rng.uniform(0.3, 2.0, size=2)
    return model, x, thresholds


@pytest.mark.parametrize("regime", ["constant", "msat"])
def test_criterion_3_conservation_and_recursion(regime):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        model, x, thresholds = _random_mlp(rng)
        net = SnnNetwork(model, thresholds, MsatConfig.preset("vgg16", regime=regime))
        net.reset(x.shape[0], 32)
        emitted = [np.zeros((x.shape[0],) + b.shape) for b in model.blocks]
        W = [model.layers[b.param_index].weights for b in model.blocks]
        b_ = [model.layers[b.param_index].bias for b in model.blocks]
        for T in range(1, 33):
            net.step(x)
            for l, st in enumerate(net.layers):
                emitted[l] += np.where(st.fired_now, st.threshold, 0.0)
                # soft-reset conservation: V(T) = sum z - sum V_th * spikes
                worst = max(worst, np.abs(st.v_after - (st.input_sum - emitted[l])).max())
            r = net.rates()
            prev = [x, r[0]]
            for l in range(2):
                rhs = prev[l] @ W[l].T + b_[l] - net.layers[l].v_after / T
                worst = max(worst, np.abs(r[l] - rhs).max())
    assert worst <= 1e-9, worst


# ---------------------------------------------------------------- 4

def test_criterion_4_end_to_end_fidelity():
    start = time.perf_counter()
    model, profile, _, evaluation = blobs_pipeline(0)
    ann_acc = accuracy(model, evaluation)
    net = convert(model, profile, "constant")
    res = simulate_dataset(net, evaluation.features, 256)
    snn_acc = float(np.mean(res.predictions() == evaluation.labels))
    elapsed = time.perf_counter() - start
    assert abs(snn_acc - ann_acc) <= 0.01, (snn_acc, ann_acc)
    assert elapsed < 60.0


# ---------------------------------------------------------------- 5

def _latency_holds(seed: int) -> bool:
    model, profile, _, evaluation = blobs_pipeline(seed)
    ann_acc = accuracy(model, evaluation)
    net = convert(model, profile, config=MsatConfig.preset("vgg16"))
    rows = accuracy_sweep(model, net, evaluation, range(1, 257), ["constant", "msat"])
    acc = {(r.regime, r.T): r.accuracy for r in rows}

    def first_T(regime):
        return next((T for T in range(1, 257) if acc[(regime, T)] >= ann_acc - 0.01), math.inf)

    return acc[("msat", 32)] >= acc[("constant", 32)] - 0.005 and first_T("msat") <= first_T("constant")


def test_criterion_5_msat_latency():
    held = [_latency_holds(seed) for seed in (0, 1, 2)]
    assert sum(held) >= 2, held


# ---------------------------------------------------------------- 6

def test_criterion_6_dtt_det_monotonicity():
    cfg = MsatConfig.preset("vgg16")
    rng = np.random.default_rng(6)
    h = 1e-6
    d = rng.uniform(-20, 20, 1000)
    assert np.all(msat.dtt(d + h, 0.0, cfg) > msat.dtt(d, 0.0, cfg))
    dv = rng.uniform(-20, 20, 1000)
    assert np.all(msat.det(dv + h, 0.0, cfg) < msat.det(dv, 0.0, cfg))
    # asymptotic slopes
    step = 1e-3
    slope = lambda x: float((msat.dtt(x + step, 0.0, cfg) - msat.dtt(x - step, 0.0, cfg)) / (2 * step))
    assert abs(slope(-100.0) - cfg.alpha) < 1e-4
    assert abs(slope(100.0) - (cfg.alpha + cfg.k_a / cfg.k_i)) < 1e-4


# ---------------------------------------------------------------- 7

def _sin_seeded_model():
    """Untrained 2-16-4 MLP with shifted biases: hidden -1, output -0.5."""
    base = init_mlp([2, 16, 4], 1)
    layers = list(base.layers)
    layers[0] = Layer.dense(layers[0].weights, layers[0].bias - 1.0)
    layers[-1] = Layer.dense(layers[-1].weights, layers[-1].bias - 0.5)
    return AnnModel(layers, base.input_shape)


def test_criterion_7_spike_confidence_effect():
    data = make_blobs(500, 4, seed=1000)
    model = _sin_seeded_model()
    profile = record_profile(model, data, store_pre_relu=True)
    net = convert(model, profile, config=MsatConfig.preset("vgg16"), rng_seed=0, initial_potential=0.5)
    without = measure_sin(net, profile, data, 32)
    table = derive_confidence(without, early_steps=16)
    with_sc = measure_sin(net.replace(confidence=table), profile, data, 32, with_confidence=True)
    ans_without, ans_with = analysis.ans(without), analysis.ans(with_sc)
    assert ans_without > 0, "model is not seeded with SIN"
    assert ans_with <= ans_without, (ans_with, ans_without)

    # p = 1 everywhere: identical to running without the filter
    ones = SpikeConfidenceTable([1.0] * model.L, (0, 1), 16)
    x = data.features
    for regime in ("constant", "msat"):
        plain = net.replace(regime=regime, confidence=None).run(x, 32, record_rasters=True)
        gated = net.replace(regime=regime, confidence=ones).run(x, 32, record_rasters=True)
        for l in range(model.L):
            assert np.array_equal(plain.rasters[l], gated.rasters[l])
            assert np.array_equal(plain.potentials[l], gated.potentials[l])
            assert np.array_equal(plain.rates[l], gated.rates[l])


# ---------------------------------------------------------------- 8

def _hand_counted_model():
    return AnnModel([
        Layer.dense([[1.0, 1.0], [1.0, 0.5], [0.5, 1.0]], [0.0, 0.0, 0.0]),
        Layer.relu(),
        Layer.dense([[1.0, 1.0, 1.0]], [0.0]),
    ], (2,))


def _conv_net(rng):
    return AnnModel([
        Layer.conv2d(rng.normal(0, 0.5, (2, 1, 3, 3)), rng.normal(0, 0.1, 2), stride=1, padding=1),
        Layer.relu(),
        Layer.avgpool(2),
        Layer.conv2d(rng.normal(0, 0.5, (3, 2, 2, 2)), rng.normal(0, 0.1, 3), stride=1, padding=0),
        Layer.relu(),
        Layer.flatten(),
        Layer.dense(rng.normal(0, 0.5, (3, 3)), rng.normal(0, 0.1, 3)),
    ], (1, 4, 4))


def test_criterion_8_energy_accounting():
    from msat_snn.data import LabeledDataset
    model = _hand_counted_model()
    calib = LabeledDataset(np.array([[1.0, 1.0]]), np.array([0]), 1)
    net = convert(model, record_profile(model, calib))
    trace = net.run(np.array([-1.0, -1.0]), 1)
    report = energy(model, trace)
    assert report.ann_macs == 9 and report.snn_first_layer_macs == 6 and report.snn_acs == 0
    assert report.ratio == (4.6 * 6) / (4.6 * 9)
    assert round(report.ratio, 3) == 0.667

    # brute-force recount from rasters equals the incremental count
    rng = np.random.default_rng(8)
    nets = [init_mlp([4, 12, 10, 5], 3), _conv_net(rng)]
    for model in nets:
        assert sum(b.size for b in model.blocks) <= 64
        x = rng.uniform(0, 1, (20,) + model.input_shape)
        prof = record_profile(model, LabeledDataset(x.reshape(20, -1), np.zeros(20, int), 1))
        for regime in ("constant", "msat"):
            trace = convert(model, prof, regime).run(x, 16, record_rasters=True)
            assert np.array_equal(recount_acs(model, trace.rasters), trace.step_acs.sum(axis=(0, 1)))

        # frozen rasters replayed twice -> AC energy doubles exactly
        doubled = RunResult(
            T=32, rates=trace.rates, spike_counts=trace.spike_counts, potentials=trace.potentials,
            scores=trace.scores, output_spikes=np.concatenate([trace.output_spikes] * 2),
            step_spikes=np.concatenate([trace.step_spikes] * 2), step_acs=np.concatenate([trace.step_acs] * 2),
            rasters=[np.concatenate([r] * 2) for r in trace.rasters],
        )
        once, twice = energy(model, trace), energy(model, doubled)
        assert twice.snn_acs == 2 * once.snn_acs
        assert twice.bias_acs == 2 * once.bias_acs
        assert twice.snn_energy_pj == 2 * once.snn_energy_pj
        assert np.array_equal(recount_acs(model, doubled.rasters), 2 * recount_acs(model, trace.rasters))


# ---------------------------------------------------------------- 9

def test_criterion_9_determinism(tmp_path):
    p = lambda name: str(tmp_path / name)
    assert cli.main(["make-blobs", "--n", "400", "--seed", "3", "--out", p("data.csv")]) == 0
    assert cli.main(["train", "--data", p("data.csv"), "--arch", "2,16,4", "--epochs", "10", "--out", p("m.json")]) == 0
    assert cli.main(["calibrate", "--model", p("m.json"), "--data", p("data.csv"), "--out", p("prof.json")]) == 0
    cfg = tmp_path / "run.ini"
    cfg.write_text("[thresholds]\nregime = msat\n[simulation]\nT = 64\nseed = 7\nchunk_size = 64\n")
    common = ["simulate", "--model", p("m.json"), "--profile", p("prof.json"), "--data", p("data.csv"),
              "--config", str(cfg)]
    assert cli.main(common + ["--out", p("a.json")]) == 0
    assert cli.main(common + ["--out", p("b.json"), "--jobs", "3"]) == 0
    a, b = (tmp_path / "a.json").read_bytes(), (tmp_path / "b.json").read_bytes()
    assert a == b


# ---------------------------------------------------------------- 10

def test_criterion_10_reference_constants():
    assert analysis.AC_PJ == 0.9 and analysis.MAC_PJ == 4.6
    assert RunConfig().ac_pj == 0.9 and RunConfig().mac_pj == 4.6
    presets = {
        "vgg16": (0.03, 1.0, 1.0, 5.0, 1.0, 1.0),
        "resnet20": (0.3, 1.0, 1.0, 5.0, 0.5, 0.5),
        "resnet34": (1.0, 1.0, 1.0, 5.0, 0.5, 0.5),
    }
    for family, values in presets.items():
        c = MsatConfig.preset(family)
        assert (c.alpha, c.k_a, c.k_i, c.c_sensitivity, c.tau_mp, c.tau_rd) == values
    assert MsatConfig().v_T == (0.0,)
    assert calibrate.DEFAULT_EARLY_STEPS == 16 and MsatConfig().early_steps == 16 and RunConfig().early_steps == 16
    stats = calibrate.SinStats(8, 1, [4, 2], [0.25, 0.617], [np.zeros(4), np.zeros(2)], [np.zeros(8), np.zeros(8)])
    table = derive_confidence(stats)
    assert table.active_layers == (1,)
    assert table.p == [1.0, 1.0 - 0.617]
    assert table.early_steps == 16
    assert RunConfig().confidence_layers == (-1,)
