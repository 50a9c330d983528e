"""Conversion-error decomposition, SIN spike metric, energy estimate and accuracy sweeps."""

from __future__ import annotations

import csv
import io as _io
from dataclasses import dataclass, field

import numpy as np

from . import model as ann
from .calibrate import SinStats
from .data import LabeledDataset
from .errors import InputError, UnsupportedConfigurationError
from .model import AnnModel
from .snn import RunResult, SnnNetwork, bias_acs_per_step, clipfloor_oracle, integrate_and_fire, simulate_dataset

AC_PJ = 0.9
MAC_PJ = 4.6
SWEEP_HEADER = ("regime", "T", "accuracy", "mean_firing_rate")


@dataclass
class LayerError:
    e_total: np.ndarray
    e_qc: np.ndarray
    e_sin: np.ndarray
    residual: np.ndarray


@dataclass
class ErrorReport:
    """Per-layer rate error split into quantization/clip and SIN parts.

    Each layer is simulated on its own with the exact ANN activations of the
    previous layer as input, except at presynaptic SIN neurons, whose actual
    spikes are passed through.  ``residual`` is whatever the two named parts
    do not explain.
    """

    T: int
    layers: list[LayerError]


def _layer_error(apply, apply_linear, a_prev, sin_signal, pre, post, v_th: float, T: int) -> LayerError:
    # sin_signal: (T, *prev_shape) threshold-weighted spikes of presynaptic SIN neurons, zero elsewhere
    currents = np.stack([apply((a_prev + sin_signal[t])[None])[0] for t in range(T)])
    rate, _, _ = integrate_and_fire(currents, v_th)
    e_total = rate - post
    e_qc = clipfloor_oracle(pre, T, v_th) - post
    e_sin = -apply_linear(sin_signal.sum(axis=0)[None])[0] / T
    return LayerError(e_total, e_qc, e_sin, e_total - e_qc - e_sin)


def dense_layer_error(weights, bias, a_prev, pre_prev, prev_spikes, prev_threshold: float, v_th: float, T: int) -> LayerError:
    """Error decomposition for a single dense layer fed by a given presynaptic raster.

    ``prev_spikes`` is a ``(T, M_prev)`` boolean raster; only the spikes of
    neurons with negative ``pre_prev`` (the SIN neurons) are used, all other
    inputs take their exact activation ``a_prev``.
    """
    W = np.asarray(weights, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    a_prev = np.asarray(a_prev, dtype=np.float64)
    pre_prev = np.asarray(pre_prev, dtype=np.float64)
    prev_spikes = np.asarray(prev_spikes, dtype=bool)
    if prev_spikes.shape != (T,) + a_prev.shape:
        raise InputError(f"raster shape {prev_spikes.shape} != {(T,) + a_prev.shape}")
    sin_mask = (pre_prev < 0) & prev_spikes.any(axis=0)
    sin_signal = np.where(sin_mask, prev_threshold * prev_spikes, 0.0)
    layer = ann.Layer.dense(W, b)
    pre = layer.apply(a_prev[None])[0]
    return _layer_error(layer.apply, lambda x: layer.apply(x, with_bias=False),
                        a_prev, sin_signal, pre, np.maximum(pre, 0.0), v_th, T)


def decompose_error(model: AnnModel, snn: SnnNetwork, sample, T: int) -> ErrorReport:
    """Layer-wise error decomposition for one sample under constant thresholds."""
    if snn.regime != "constant":
        raise UnsupportedConfigurationError(f"error decomposition is defined for the constant regime only, got {snn.regime!r}")
    if T < 1:
        raise InputError("T must be >= 1")
    _, acts = ann.forward(model, sample, capture=True)
    run = snn.replace(confidence=None).run(sample, T, record_rasters=True)
    layers = []
    for l, block in enumerate(model.blocks):
        v_th = snn.base_thresholds[l]
        if l == 0:
            a_prev = np.asarray(sample, dtype=np.float64).reshape(model.input_shape)
            sin_signal = np.zeros((T,) + a_prev.shape)
        else:
            a_prev = acts.post[l - 1]
            raster = run.rasters[l - 1][:, 0]
            sin_mask = (acts.pre[l - 1] < 0) & raster.any(axis=0)
            sin_signal = np.where(sin_mask, snn.base_thresholds[l - 1] * raster, 0.0)
        layers.append(_layer_error(
            lambda x, l=l: model.apply_block(l, x),
            lambda x, l=l: model.apply_block(l, x, with_bias=False),
            a_prev, sin_signal, acts.pre[l], acts.post[l], v_th, T))
    return ErrorReport(T, layers)


def ans(source, layer: int = -1, pre_relu=None) -> float:
    """Averaged number of SIN spikes per neuron of ``layer``, averaged over samples.

    ``source`` is a :class:`SinStats`, or a :class:`RunResult` together with
    the matching per-sample ANN ``pre_relu`` activations of that layer.
    """
    if isinstance(source, SinStats):
        size = source.layer_sizes[layer]
        return float(source.sin_spike_counts[layer].sum()) / (size * source.num_samples)
    if pre_relu is None:
        raise InputError("ans on a run needs the ANN pre-ReLU activations of the layer")
    counts = source.spike_counts[layer]
    pre = np.asarray(pre_relu).reshape(counts.shape)
    sin_spikes = np.where(pre < 0, counts, 0)
    n = counts.shape[0]
    return float(sin_spikes.sum()) / (counts[0].size * n)


@dataclass
class EnergyReport:
    T: int
    ann_macs: int
    snn_first_layer_macs: int
    snn_acs: float  # spike-triggered accumulates over all T, mean per sample
    bias_acs: int  # nonzero-bias adds of spiking layers over all T
    ann_energy_pj: float
    snn_energy_pj: float
    ratio: float
    firing_rates: list[float] = field(default_factory=list)
    ac_pj: float = AC_PJ
    mac_pj: float = MAC_PJ

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def energy(model: AnnModel, trace: RunResult, T: int | None = None,
           ac_pj: float = AC_PJ, mac_pj: float = MAC_PJ) -> EnergyReport:
    """Energy of one SNN inference relative to one ANN forward pass.

    The first layer is costed as MACs every step (it sees the analog input);
    every later layer costs one AC per synaptic event plus one per nonzero
    bias per step.
    """
    T = trace.T if T is None else T
    if trace.step_acs.shape[0] != T:
        raise InputError(f"trace holds {trace.step_acs.shape[0]} steps, expected T={T}")
    ann_macs = model.total_macs()
    first = model.block_macs(0)
    n = trace.step_acs.shape[2]
    snn_acs = float(trace.step_acs.sum()) / n
    bias_acs = T * sum(bias_acs_per_step(model, l) for l in range(1, model.L))
    ann_e = mac_pj * ann_macs
    snn_e = mac_pj * first * T + ac_pj * (snn_acs + bias_acs)
    sizes = np.array([b.size for b in model.blocks])
    rates = (trace.step_spikes.sum(axis=(0, 2)) / (sizes * T * n)).tolist()
    return EnergyReport(T, ann_macs, first, snn_acs, bias_acs, ann_e, snn_e, snn_e / ann_e, rates, ac_pj, mac_pj)


def recount_acs(model: AnnModel, rasters: list[np.ndarray]) -> np.ndarray:
    """Brute-force spike-triggered AC count per sample from stored rasters.

    Fan-out is found by probing: each presynaptic neuron gets a unit input,
    the block runs with all-ones weights and no bias, and every nonzero
    output is one synaptic event.  Meant for small networks.
    """
    n = rasters[0].shape[1]
    total = np.zeros(n, dtype=np.int64)
    for l in range(1, model.L):
        block = model.blocks[l]
        probe_layers = []
        for j in block.layer_indices:
            layer = model.layers[j]
            if layer.parameterized:
                layer = ann.Layer(layer.kind, np.ones_like(layer.weights), np.zeros_like(layer.bias),
                                  stride=layer.stride, padding=layer.padding)
                probe_layers.append(layer)
                break
            probe_layers.append(layer)
        size = int(np.prod(block.in_shape))
        spikes = rasters[l - 1].reshape(rasters[l - 1].shape[0], n, size)
        for j in range(size):
            x = np.zeros((1, size))
            x[0, j] = 1.0
            x = x.reshape((1,) + block.in_shape)
            for layer in probe_layers:
                x = layer.apply(x)
            fan = int(np.count_nonzero(x))
            total += fan * spikes[:, :, j].sum(axis=0)
    return total


@dataclass
class SweepRow:
    regime: str
    T: int
    accuracy: float
    mean_firing_rate: float


def accuracy_sweep(model: AnnModel, snn: SnnNetwork, eval_set: LabeledDataset, T_list, regimes,
                   chunk_size: int = 256, jobs: int = 1) -> list[SweepRow]:
    """Top-1 accuracy and mean firing rate for every (regime, T) pair.

    Each regime is simulated once for ``max(T_list)`` steps; the readout after
    ``T`` steps of that run is exactly a ``T``-step run, since the dynamics
    are causal.
    """
    T_list = [int(t) for t in T_list]
    regimes = list(regimes)
    if not T_list or min(T_list) < 1:
        raise InputError("T_list must be non-empty with every T >= 1")
    if not regimes:
        raise InputError("need at least one regime")
    x = model.batch_inputs(eval_set.features)
    total_neurons = sum(b.size for b in model.blocks)
    rows = []
    for regime in regimes:
        net = snn.replace(regime=regime)
        result = simulate_dataset(net, x, max(T_list), chunk_size=chunk_size, jobs=jobs, checkpoints=T_list)
        for T in T_list:
            snap = result.snapshots[T]
            acc = float(np.mean(np.argmax(snap.scores, axis=1) == eval_set.labels))
            rate = float(snap.spike_totals.sum()) / (total_neurons * T * len(eval_set))
            rows.append(SweepRow(regime, T, acc, rate))
    return rows


def sweep_csv(rows: list[SweepRow]) -> str:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    for r in rows:
        writer.writerow([r.regime, r.T, repr(r.accuracy), repr(r.mean_firing_rate)])
    return buf.getvalue()
