"""Spikes of Inactivated Neurons (SIN) statistics and spike confidence.

A neuron is a SIN neuron for a sample when its ANN pre-ReLU activation is
negative yet it fired at least once during the SNN run.  Spike confidence
gates early spikes of a layer with an independent Bernoulli(p) draw per
neuron per step, where ``p = 1 - (SIN neuron ratio of that layer)``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .errors import ConfigurationError, InputError
from .model import ActivationProfile
from .snn import SnnNetwork, simulate_dataset

DEFAULT_EARLY_STEPS = 16


@dataclass
class SinStats:
    T: int
    num_samples: int
    layer_sizes: list[int]
    sin_neuron_ratio: list[float]
    sin_spike_counts: list[np.ndarray]  # per neuron, summed over samples
    sin_step_histogram: list[np.ndarray]  # (T,) SIN spikes per step, summed over samples and neurons

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes)


@dataclass
class SpikeConfidenceTable:
    p: list[float]
    active_layers: tuple[int, ...]
    early_steps: int = DEFAULT_EARLY_STEPS

    def __post_init__(self):
        self.p = [float(min(max(v, 0.0), 1.0)) for v in self.p]
        L = len(self.p)
        self.active_layers = tuple(sorted({l % L for l in self.active_layers})) if L else ()
        if self.early_steps < 0:
            raise ConfigurationError("early_steps must be >= 0")

    @property
    def active(self) -> bool:
        return any(self.p[l] < 1.0 for l in self.active_layers) and self.early_steps > 0

    def gate(self, layer: int, fired: np.ndarray, t: int, rng: np.random.Generator) -> np.ndarray:
        """Filter the spikes of ``layer`` at 0-based step ``t``."""
        if t >= self.early_steps or layer not in self.active_layers:
            return fired
        return apply_confidence(fired, self.p[layer], rng)


def apply_confidence(theta, p: float, rng: np.random.Generator):
    """Keep each true entry of ``theta`` with probability ``p``.

    One uniform draw is consumed per true entry, in C order, and none at all
    when ``p >= 1``.
    """
    if not 0.0 <= p <= 1.0:
        raise InputError(f"spike confidence must lie in [0, 1], got {p}")
    arr = np.asarray(theta, dtype=bool)
    if p >= 1.0 or not arr.any():
        return theta
    out = arr.copy()
    flat = out.reshape(-1)
    idx = np.flatnonzero(flat)
    flat[idx[rng.random(idx.size) >= p]] = False
    return bool(out) if out.ndim == 0 else out


def measure_sin(snn: SnnNetwork, profile: ActivationProfile, calib_set: LabeledDataset, T: int,
                with_confidence: bool = False, chunk_size: int = 256, jobs: int = 1) -> SinStats:
    """Count SIN neurons and their spikes over a calibration set.

    The network is simulated for ``T`` steps per sample with spike confidence
    disabled unless ``with_confidence`` is set.
    """
    if profile.pre_relu is None:
        raise InputError("profile holds no pre-ReLU activations; record it with store_pre_relu=True")
    if profile.num_samples != len(calib_set) or any(p.shape[0] != len(calib_set) for p in profile.pre_relu):
        raise InputError(f"profile has activations for {profile.num_samples} samples, calibration set has {len(calib_set)}")
    if profile.data_fingerprint and profile.data_fingerprint != calib_set.fingerprint():
        raise InputError("profile was recorded on a different calibration set")
    model = snn.model
    if len(profile.pre_relu) != model.L:
        raise InputError(f"profile has {len(profile.pre_relu)} layers, network has {model.L}")
    net = snn if with_confidence else snn.replace(confidence=None)
    negative = [p < 0 for p in profile.pre_relu]
    histogram = [np.zeros(T, dtype=np.int64) for _ in range(model.L)]
    lock = threading.Lock()

    def on_step(t, nw, sl):
        counts = [int(np.count_nonzero(st.fired_now & negative[l][sl])) for l, st in enumerate(nw.layers)]
        with lock:
            for l, c in enumerate(counts):
                histogram[l][t] += c

    result = simulate_dataset(net, model.batch_inputs(calib_set.features), T,
                              chunk_size=chunk_size, jobs=jobs, on_step=on_step)
    sizes = [b.size for b in model.blocks]
    ratios, spike_counts = [], []
    n = len(calib_set)
    for l in range(model.L):
        sin = negative[l] & (result.spike_counts[l] > 0)
        # integer totals keep the ratio independent of sample order
        ratios.append(int(np.count_nonzero(sin)) / (sizes[l] * n))
        spike_counts.append(np.where(sin, result.spike_counts[l], 0).sum(axis=0).reshape(-1))
    return SinStats(T, n, sizes, ratios, spike_counts, histogram)


def derive_confidence(stats: SinStats, layers=(-1,), early_steps: int = DEFAULT_EARLY_STEPS) -> SpikeConfidenceTable:
    """Per-layer confidence ``1 - SIN ratio`` on the selected layers, 1 elsewhere."""
    if early_steps < 0:
        raise ConfigurationError("early_steps must be >= 0")
    L = stats.num_layers
    selected = {l % L for l in layers}
    p = [1.0 - stats.sin_neuron_ratio[l] if l in selected else 1.0 for l in range(L)]
    return SpikeConfidenceTable(p, tuple(sorted(selected)), early_steps)


def suggest_early_steps(stats: SinStats, layer: int = -1, coverage: float = 0.9) -> int:
    """Smallest horizon E whose first E steps hold ``coverage`` of the layer's SIN spikes."""
    hist = stats.sin_step_histogram[layer]
    total = hist.sum()
    if total == 0:
        return 0
    return int(np.searchsorted(np.cumsum(hist), coverage * total) + 1)
