"""Time-stepped integrate-and-fire simulation of a converted network.

Each block of the source ANN becomes one layer of soft-reset IF neurons.  At
every step a layer integrates

    z(t) = W . (V_th^{l-1}(t) * spikes^{l-1}(t)) + b

(the first layer receives the analog input ``W.x + b`` instead), fires where
the pre-fire potential reaches its threshold, and subtracts the threshold
from the potential of every neuron that emitted a spike.  Decoded rates are
threshold weighted: ``r = sum_t V_th(t) * spike(t) / T``.

Membrane potentials and rate sums are carried as unevaluated double-double
pairs (``hi + lo``), so the spike train depends only on the exact sum of the
inputs and not on float accumulation order.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace as dc_replace
from fractions import Fraction
from typing import TYPE_CHECKING, Callable

import numpy as np

from . import msat
from .errors import ConfigurationError, DimensionError, InputError, StateError
from .model import ActivationProfile, AnnModel

if TYPE_CHECKING:
    from .calibrate import SpikeConfidenceTable

READOUTS = ("rate", "potential")


def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def _dd_add(hi, lo, x):
    """(hi + lo) + x, renormalised so that hi == fl(hi + lo)."""
    s, e = _two_sum(hi, x)
    return _two_sum(s, e + lo)


def _fires(v_hi, v_lo, threshold):
    # v_hi - threshold is exact whenever the two are within a factor 2 (Sterbenz),
    # which is the only case where v_lo can decide the sign.
    return (v_hi - threshold) + v_lo >= 0.0


def _exact_floor_ratio(a: np.ndarray, T: int, v_th: float) -> np.ndarray:
    q = a * T / v_th
    n = np.floor(q)
    near = np.abs(q - np.round(q)) <= 1e-9 * np.maximum(1.0, np.abs(q))
    if near.any():
        flat_a, flat_n = a.reshape(-1), n.reshape(-1)
        vt = Fraction(v_th)
        for idx in np.flatnonzero(near.reshape(-1)):
            flat_n[idx] = math.floor(Fraction(float(flat_a[idx])) * T / vt)
    return n


def clipfloor_oracle(a, T: int, v_th: float):
    """Closed-form rate of a soft-reset IF neuron driven by constant input ``a``.

    ``clip(v_th * floor(a*T/v_th) / T, 0, v_th)`` with the floor taken on the
    exact product of the float inputs.  The spike count is clamped to
    ``[0, T]`` before scaling, which is the same value in exact arithmetic and
    rounds the way a simulated rate does (``v_th * T / T`` need not be
    ``v_th`` in floats).  Accepts scalars or arrays.
    """
    if T < 1 or not v_th > 0:
        raise InputError(f"clipfloor needs T >= 1 and v_th > 0 (got T={T}, v_th={v_th})")
    arr = np.asarray(a, dtype=np.float64)
    n = _exact_floor_ratio(np.atleast_1d(arr).copy(), T, float(v_th))
    out = v_th * np.clip(n, 0, T) / T
    return float(out[0]) if arr.ndim == 0 else out.reshape(arr.shape)


def integrate_and_fire(currents, threshold: float, initial=0.0):
    """Soft-reset IF neurons with a fixed threshold over a ``(T, ...)`` current sequence.

    Returns ``(rates, spike_counts, v_after)`` with threshold-weighted rates.
    """
    currents = np.asarray(currents, dtype=np.float64)
    T = currents.shape[0]
    hi = np.full(currents.shape[1:], float(initial))
    lo = np.zeros_like(hi)
    rate_hi, rate_lo = np.zeros_like(hi), np.zeros_like(hi)
    counts = np.zeros(hi.shape, dtype=np.int64)
    for t in range(T):
        hi, lo = _dd_add(hi, lo, currents[t])
        fired = _fires(hi, lo, threshold)
        emitted = np.where(fired, threshold, 0.0)
        hi, lo = _dd_add(hi, lo, -emitted)
        rate_hi, rate_lo = _dd_add(rate_hi, rate_lo, emitted)
        counts += fired
    return rate_hi / T, counts, hi


def fanout_map(model: AnnModel, block: int) -> np.ndarray:
    """Synaptic fan-out of each presynaptic neuron feeding ``block`` (flattened, int64).

    A spike into a dense layer of M outputs costs M accumulates; into a conv
    layer, one per output position and channel whose receptive field covers
    it.  Pooling/flatten in front of the weight layer map a spike onto the
    position it lands on.
    """
    if block == 0:
        raise InputError("the first block is driven by analog input and has no presynaptic spikes")
    b = model.blocks[block]
    ops = [model.layers[j] for j in b.layer_indices]
    shapes = [b.in_shape]
    for op in ops:
        shapes.append(op.output_shape(shapes[-1]))
    k = next(idx for idx, op in enumerate(ops) if op.parameterized)
    param, in_shape = ops[k], shapes[k]
    if param.kind == "dense":
        fan = np.full(in_shape, param.weights.shape[0], dtype=np.int64)
    else:
        c_out, _, kh, kw = param.weights.shape
        _, h, w = in_shape
        _, h_out, w_out = param.output_shape(in_shape)
        p, s = param.padding, param.stride
        cover = np.zeros((h + 2 * p, w + 2 * p), dtype=np.int64)
        for i in range(kh):
            for j in range(kw):
                cover[i:i + s * h_out:s, j:j + s * w_out:s] += 1
        cover = cover[p:p + h, p:p + w]
        fan = np.broadcast_to(c_out * cover, in_shape).copy()
    for idx in range(k - 1, -1, -1):
        op = ops[idx]
        if op.kind == "flatten":
            fan = fan.reshape(shapes[idx])
        elif op.kind == "avgpool":
            fan = np.repeat(np.repeat(fan, op.window, axis=1), op.window, axis=2)
    return fan.reshape(-1)


def bias_acs_per_step(model: AnnModel, block: int) -> int:
    """Neurons of a spiking (non-first) block that add a nonzero bias each step."""
    b = model.blocks[block]
    shape = b.in_shape
    for j in b.layer_indices:
        layer = model.layers[j]
        out = layer.output_shape(shape)
        if layer.parameterized:
            nonzero = int(np.count_nonzero(layer.bias))
            return nonzero * (int(np.prod(out[1:])) if layer.kind == "conv2d" else 1)
        shape = out
    return 0


@dataclass
class SnnLayerState:
    """Per-neuron simulation state of one IF layer; every array has a leading batch axis."""

    base_threshold: float
    v_after: np.ndarray
    v_lo: np.ndarray  # low-order part of v_after
    v_before: np.ndarray
    v_before_lo: np.ndarray
    v_before_prev: np.ndarray
    v_sum: np.ndarray
    v_mean: np.ndarray
    threshold: np.ndarray
    rate_sum: np.ndarray
    rate_lo: np.ndarray
    input_sum: np.ndarray
    spike_counts: np.ndarray
    fired_now: np.ndarray

    @classmethod
    def initial(cls, shape, base_threshold: float, initial_potential: float = 0.0) -> "SnnLayerState":
        zeros = lambda: np.zeros(shape)
        v0 = np.full(shape, initial_potential * base_threshold)
        return cls(
            base_threshold=base_threshold,
            v_after=v0, v_lo=zeros(), v_before=zeros(), v_before_lo=zeros(), v_before_prev=zeros(),
            v_sum=zeros(), v_mean=v0.copy(), threshold=np.full(shape, base_threshold),
            rate_sum=zeros(), rate_lo=zeros(), input_sum=zeros(),
            spike_counts=np.zeros(shape, dtype=np.int64), fired_now=np.zeros(shape, dtype=bool),
        )


@dataclass
class Snapshot:
    scores: np.ndarray  # (n, out) readout after t steps
    spike_totals: np.ndarray  # (L,) spikes summed over the batch


@dataclass
class RunResult:
    T: int
    rates: list[np.ndarray]  # per layer, (n, *shape), threshold weighted
    spike_counts: list[np.ndarray]
    potentials: list[np.ndarray]  # v_after at T
    scores: np.ndarray  # (n, out)
    output_spikes: np.ndarray  # (T, n, out) bool
    step_spikes: np.ndarray  # (T, L, n) spikes emitted by layer l at step t
    step_acs: np.ndarray  # (T, L, n) accumulates in layer l caused by layer l-1 spikes at step t
    rasters: list[np.ndarray] | None = None  # per layer, (T, n, *shape) bool
    snapshots: dict[int, Snapshot] = field(default_factory=dict)

    @property
    def batch_size(self) -> int:
        return self.scores.shape[0]

    def predictions(self) -> np.ndarray:
        return np.argmax(self.scores, axis=1)

    def mean_firing_rates(self) -> np.ndarray:
        """Fraction of (neuron, step) slots carrying a spike, per layer."""
        return np.array([c.mean() / self.T for c in self.spike_counts])


class SnnNetwork:
    """Converted network: shared ANN weights plus mutable per-layer IF state.

    Instances are single-threaded.  :meth:`replace` makes an independent copy
    sharing the (read-only) weights, which is how batches are parallelised.
    """

    def __init__(self, model: AnnModel, base_thresholds, config: msat.MsatConfig | None = None,
                 confidence: "SpikeConfidenceTable | None" = None, rng_seed=0, stream: int = 0,
                 initial_potential: float = 0.0, readout: str = "rate", T: int | None = None):
        self.model = model
        self.base_thresholds = [float(v) for v in base_thresholds]
        if len(self.base_thresholds) != model.L:
            raise ConfigurationError(f"{len(self.base_thresholds)} thresholds for {model.L} layers")
        for l, v in enumerate(self.base_thresholds):
            if not (v > 0 and math.isfinite(v)):
                raise ConfigurationError(f"layer {l} has non-positive base threshold {v} (dead layer on the calibration set)")
        self.config = config or msat.MsatConfig(regime="constant")
        if readout not in READOUTS:
            raise ConfigurationError(f"readout must be one of {READOUTS}")
        if confidence is not None and len(confidence.p) != model.L:
            raise ConfigurationError(f"confidence table covers {len(confidence.p)} layers, network has {model.L}")
        self.confidence = confidence
        self.rng_seed = tuple(np.atleast_1d(rng_seed).astype(int).tolist())
        self.stream = int(stream)
        self.initial_potential = float(initial_potential)
        self.readout = readout
        self.fanouts = [None] + [fanout_map(model, i) for i in range(1, model.L)]
        self.T = T
        self.t = 0
        self.layers: list[SnnLayerState] = []
        self.batch_size: int | None = None
        self.rng = None
        self._input = None
        self._input_current = None

    @property
    def regime(self) -> str:
        return self.config.regime

    def replace(self, **changes) -> "SnnNetwork":
        kw = dict(model=self.model, base_thresholds=self.base_thresholds, config=self.config,
                  confidence=self.confidence, rng_seed=self.rng_seed, stream=self.stream,
                  initial_potential=self.initial_potential, readout=self.readout, T=self.T)
        if "regime" in changes:
            kw["config"] = self.config.with_regime(changes.pop("regime"))
        kw.update(changes)
        return SnnNetwork(**kw)

    def reset(self, batch_size: int = 1, T: int | None = None) -> None:
        """Zero all state (potentials, counts, RNG) for a new run of ``T`` steps."""
        if T is not None:
            self.T = int(T)
        if self.T is not None and self.T < 1:
            raise InputError(f"T must be >= 1, got {self.T}")
        if self.confidence is not None and self.T is not None and self.confidence.active \
                and self.confidence.early_steps > self.T:
            raise ConfigurationError(f"early_steps={self.confidence.early_steps} exceeds T={self.T}")
        self.t = 0
        self.batch_size = batch_size
        self.layers = [SnnLayerState.initial((batch_size,) + b.shape, thr, self.initial_potential)
                       for b, thr in zip(self.model.blocks, self.base_thresholds)]
        self.rng = np.random.default_rng(list(self.rng_seed) + [self.stream])
        self._input = None
        self._input_current = None

    def _batch(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        shape = self.model.input_shape
        if x.shape == shape:
            x = x[None]
        elif x.shape[1:] != shape:
            raise DimensionError(f"input shape {x.shape} does not match model input {shape}")
        return x

    def step(self, x) -> np.ndarray:
        """Advance one time step on input ``x``; returns output-layer spikes ``(n, *shape)``."""
        if self.T is None:
            raise StateError("call reset(batch_size, T) or run() before stepping")
        if self.t >= self.T:
            raise StateError(f"network already simulated all T={self.T} steps")
        if x is not self._input:
            xb = self._batch(x)
            if not self.layers:
                self.reset(xb.shape[0])
            if xb.shape[0] != self.batch_size:
                raise DimensionError(f"batch of {xb.shape[0]} inputs, state holds {self.batch_size}")
            self._input = x
            self._input_current = self.model.apply_block(0, xb)
        cfg = self.config
        regime = cfg.regime
        t_index = self.t
        signal = None
        for i, st in enumerate(self.layers):
            z = self._input_current if i == 0 else self.model.apply_block(i, signal)
            st.input_sum += z
            st.v_before_prev = st.v_before
            st.v_before, st.v_before_lo = _dd_add(st.v_after, st.v_lo, z)
            if regime != "constant":
                st.threshold = msat.update_threshold(st, cfg, i)
            fired = _fires(st.v_before, st.v_before_lo, st.threshold)
            if self.confidence is not None:
                fired = self.confidence.gate(i, fired, t_index, self.rng)
            emitted = np.where(fired, st.threshold, 0.0)
            st.v_after, st.v_lo = _dd_add(st.v_before, st.v_before_lo, -emitted)
            st.rate_sum, st.rate_lo = _dd_add(st.rate_sum, st.rate_lo, emitted)
            st.spike_counts += fired
            st.fired_now = fired
            st.v_sum += st.v_after
            st.v_mean = st.v_sum / (t_index + 1)
            signal = emitted
        self.t += 1
        return self.layers[-1].fired_now

    def rates(self) -> list[np.ndarray]:
        """Threshold-weighted firing rates after the steps taken so far."""
        t = max(self.t, 1)
        return [st.rate_sum / t for st in self.layers]

    def scores(self) -> np.ndarray:
        out = self.layers[-1]
        t = max(self.t, 1)
        value = out.rate_sum if self.readout == "rate" else out.input_sum
        return (value / t).reshape(self.batch_size, -1)

    def run(self, x, T: int, record_rasters: bool = False, checkpoints=(),
            on_step: Callable[[int, "SnnNetwork"], None] | None = None) -> RunResult:
        """Simulate ``T`` steps from a fresh state on a sample or a batch."""
        if T < 1:
            raise InputError(f"T must be >= 1, got {T}")
        xb = self._batch(x)
        n, L = xb.shape[0], self.model.L
        self.reset(n, T)
        checkpoints = set(int(c) for c in checkpoints)
        out_size = self.model.output_size
        output_spikes = np.zeros((T, n, out_size), dtype=bool)
        step_spikes = np.zeros((T, L, n), dtype=np.int64)
        step_acs = np.zeros((T, L, n), dtype=np.int64)
        rasters = [np.zeros((T, n) + b.shape, dtype=bool) for b in self.model.blocks] if record_rasters else None
        snapshots = {}
        for t in range(T):
            self.step(xb)
            for i, st in enumerate(self.layers):
                flat = st.fired_now.reshape(n, -1)
                step_spikes[t, i] = flat.sum(axis=1)
                if i + 1 < L:
                    step_acs[t, i + 1] = flat.astype(np.int64) @ self.fanouts[i + 1]
                if rasters is not None:
                    rasters[i][t] = st.fired_now
            output_spikes[t] = self.layers[-1].fired_now.reshape(n, -1)
            if on_step is not None:
                on_step(t, self)
            if t + 1 in checkpoints:
                snapshots[t + 1] = Snapshot(self.scores().copy(), step_spikes[:t + 1].sum(axis=(0, 2)))
        return RunResult(
            T=T,
            rates=self.rates(),
            spike_counts=[st.spike_counts.copy() for st in self.layers],
            potentials=[st.v_after.copy() for st in self.layers],
            scores=self.scores().copy(),
            output_spikes=output_spikes,
            step_spikes=step_spikes,
            step_acs=step_acs,
            rasters=rasters,
            snapshots=snapshots,
        )


def convert(model: AnnModel, profile: ActivationProfile, regime: str | None = None,
            config: msat.MsatConfig | None = None, **kwargs) -> SnnNetwork:
    """Build an SNN whose per-layer base thresholds are the calibrated maximum activations."""
    if len(profile.max_post_relu) != model.L:
        raise ConfigurationError(f"profile covers {len(profile.max_post_relu)} layers, model has {model.L}")
    if profile.layer_shapes and [tuple(s) for s in profile.layer_shapes] != [b.shape for b in model.blocks]:
        raise ConfigurationError("profile layer shapes do not match the model")
    config = config or msat.MsatConfig(regime="constant")
    if regime is not None:
        config = config.with_regime(regime)
    return SnnNetwork(model, profile.max_post_relu, config, **kwargs)


def _merge(parts: list[RunResult]) -> RunResult:
    if len(parts) == 1:
        return parts[0]
    first = parts[0]
    L = len(first.rates)
    cat = lambda getter, axis=0: np.concatenate([getter(p) for p in parts], axis=axis)
    snapshots = {
        t: Snapshot(cat(lambda p: p.snapshots[t].scores), sum(p.snapshots[t].spike_totals for p in parts))
        for t in first.snapshots
    }
    return RunResult(
        T=first.T,
        rates=[cat(lambda p: p.rates[l]) for l in range(L)],
        spike_counts=[cat(lambda p: p.spike_counts[l]) for l in range(L)],
        potentials=[cat(lambda p: p.potentials[l]) for l in range(L)],
        scores=cat(lambda p: p.scores),
        output_spikes=cat(lambda p: p.output_spikes, 1),
        step_spikes=cat(lambda p: p.step_spikes, 2),
        step_acs=cat(lambda p: p.step_acs, 2),
        rasters=[cat(lambda p: p.rasters[l], 1) for l in range(L)] if first.rasters is not None else None,
        snapshots=snapshots,
    )


def simulate_dataset(net: SnnNetwork, x, T: int, chunk_size: int = 256, jobs: int = 1,
                     on_step: Callable[[int, SnnNetwork, slice], None] | None = None, **run_kwargs) -> RunResult:
    """Run a batch in fixed-size chunks, optionally on ``jobs`` threads.

    Chunk ``k`` uses random stream ``k``; chunking does not depend on
    ``jobs``, so results are identical for any worker count.  ``on_step``
    receives the chunk's slice into the full batch and may be called from
    several threads at once.
    """
    xb = net._batch(x)
    if chunk_size < 1 or jobs < 1:
        raise InputError("chunk_size and jobs must be >= 1")
    slices = [slice(s, min(s + chunk_size, xb.shape[0])) for s in range(0, xb.shape[0], chunk_size)]

    def work(k: int) -> RunResult:
        sl = slices[k]
        worker = net.replace(stream=k)
        cb = None if on_step is None else (lambda t, nw: on_step(t, nw, sl))
        return worker.run(xb[sl], T, on_step=cb, **run_kwargs)

    if jobs == 1 or len(slices) == 1:
        parts = [work(k) for k in range(len(slices))]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(work, range(len(slices))))
    return _merge(parts)
