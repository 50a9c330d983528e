"""File formats: models, datasets, activation profiles, run configs and reports.

Model file (JSON, ``format_version`` 1)::

    {"format_version": 1, "input_shape": [2],
     "layers": [{"kind": "dense", "in_features": 2, "out_features": 16,
                 "weights": "<base64>", "bias": "<base64>"},
                {"kind": "relu"}, ...]}

Weight payloads are base64 of little-endian float32 in row-major order
(dense: out x in; conv2d: c_out x c_in x kh x kw).  Arrays are widened to
float64 on load, so save -> load -> save is byte-identical.

Dataset file: comma separated, one sample per line, integer label first and
then the feature values.  An optional first line ``# features=<d> classes=<k>``
declares the arity and the label range.

Run config: INI sections ``[thresholds]``, ``[confidence]``,
``[simulation]`` and ``[energy]``; unknown sections or keys are rejected.
"""

from __future__ import annotations

import base64
import binascii
import configparser
import hashlib
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .analysis import AC_PJ, MAC_PJ, EnergyReport
from .calibrate import DEFAULT_EARLY_STEPS, SinStats, SpikeConfidenceTable
from .data import LabeledDataset
from .errors import ConfigurationError, ParseError, UnsupportedLayerError
from .model import KINDS, ActivationProfile, AnnModel, Layer
from .msat import PRESETS, MsatConfig

FORMAT_VERSION = 1
_UNSUPPORTED = {
    "maxpool": "max-pooling is not supported by the converter (only avgpool)",
    "batchnorm": "batch-norm layers must be folded into the preceding layer before export",
}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def encode_array(a, dtype="<f4") -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype=dtype).tobytes()).decode("ascii")


def decode_array(text, shape, dtype="<f4", where="array") -> np.ndarray:
    if not isinstance(text, str):
        raise ParseError(f"{where}: expected a base64 string")
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError) as exc:
        raise ParseError(f"{where}: malformed base64 ({exc})") from None
    itemsize = np.dtype(dtype).itemsize
    count = int(np.prod(shape))
    if len(raw) != count * itemsize:
        raise ParseError(f"{where}: payload holds {len(raw) // itemsize} values, shape {list(shape)} needs {count}")
    return np.frombuffer(raw, dtype=dtype).astype(np.float64).reshape(shape)


def _loads(text: str, what: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{what}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def _field(rec: dict, key: str, where: str, kind=int):
    if key not in rec:
        raise ParseError(f"{where}: missing field {key!r}")
    value = rec[key]
    if kind is int and (not isinstance(value, int) or isinstance(value, bool)):
        raise ParseError(f"{where}.{key}: expected an integer, got {value!r}")
    if kind is list and not isinstance(value, list):
        raise ParseError(f"{where}.{key}: expected a list, got {value!r}")
    return value


# ---------------------------------------------------------------- models

def model_to_dict(model: AnnModel) -> dict:
    layers = []
    for layer in model.layers:
        rec = {"kind": layer.kind}
        if layer.kind == "dense":
            rec.update(out_features=int(layer.weights.shape[0]), in_features=int(layer.weights.shape[1]))
        elif layer.kind == "conv2d":
            c_out, c_in, kh, kw = layer.weights.shape
            rec.update(out_channels=int(c_out), in_channels=int(c_in), kernel_size=[int(kh), int(kw)],
                       stride=layer.stride, padding=layer.padding)
        elif layer.kind == "avgpool":
            rec["window"] = layer.window
        if layer.parameterized:
            rec["weights"] = encode_array(layer.weights)
            rec["bias"] = encode_array(layer.bias)
        layers.append(rec)
    return {"format_version": FORMAT_VERSION, "input_shape": list(model.input_shape), "layers": layers}


def _layer_from_dict(rec, i: int) -> Layer:
    where = f"layers[{i}]"
    if not isinstance(rec, dict):
        raise ParseError(f"{where}: expected an object")
    kind = rec.get("kind")
    if kind in _UNSUPPORTED:
        raise UnsupportedLayerError(f"{where}: unsupported layer kind {kind!r}: {_UNSUPPORTED[kind]}")
    if kind not in KINDS:
        raise UnsupportedLayerError(f"{where}: unsupported layer kind {kind!r}; supported: {', '.join(KINDS)}")
    if kind == "dense":
        out_f, in_f = _field(rec, "out_features", where), _field(rec, "in_features", where)
        w = decode_array(rec.get("weights"), (out_f, in_f), where=f"{where}.weights")
        b = decode_array(rec.get("bias"), (out_f,), where=f"{where}.bias")
        return Layer.dense(w, b)
    if kind == "conv2d":
        c_out, c_in = _field(rec, "out_channels", where), _field(rec, "in_channels", where)
        ks = _field(rec, "kernel_size", where, list)
        if len(ks) != 2 or not all(isinstance(k, int) and k > 0 for k in ks):
            raise ParseError(f"{where}.kernel_size: expected two positive integers")
        w = decode_array(rec.get("weights"), (c_out, c_in, ks[0], ks[1]), where=f"{where}.weights")
        b = decode_array(rec.get("bias"), (c_out,), where=f"{where}.bias")
        return Layer.conv2d(w, b, stride=_field(rec, "stride", where), padding=_field(rec, "padding", where))
    if kind == "avgpool":
        return Layer.avgpool(_field(rec, "window", where))
    return Layer(kind)


def model_from_dict(doc) -> AnnModel:
    if not isinstance(doc, dict):
        raise ParseError("model: expected a JSON object")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ParseError(f"model: unsupported format_version {doc.get('format_version')!r}")
    shape = _field(doc, "input_shape", "model", list)
    layers = _field(doc, "layers", "model", list)
    parsed = [_layer_from_dict(rec, i) for i, rec in enumerate(layers)]
    try:
        return AnnModel(parsed, shape)
    except ValueError as exc:
        raise ParseError(f"model: {exc}") from None


def dumps_model(model: AnnModel) -> str:
    return canonical_json(model_to_dict(model))


def loads_model(text: str) -> AnnModel:
    return model_from_dict(_loads(text, "model"))


def save_model(model: AnnModel, path) -> None:
    Path(path).write_text(dumps_model(model))


def load_model(path) -> AnnModel:
    return loads_model(Path(path).read_text())


# ---------------------------------------------------------------- datasets

_HEADER = re.compile(r"#\s*features\s*=\s*(\d+)(?:\s+classes\s*=\s*(\d+))?\s*$")


def loads_dataset(text: str, num_classes: int | None = None) -> LabeledDataset:
    lines = text.splitlines()
    declared_features = None
    start = 0
    if lines and lines[0].startswith("#"):
        m = _HEADER.match(lines[0].strip())
        if not m:
            raise ParseError("line 1: malformed header, expected '# features=<d> classes=<k>'")
        declared_features = int(m.group(1))
        if m.group(2) is not None and num_classes is None:
            num_classes = int(m.group(2))
        start = 1
    labels, rows = [], []
    arity = declared_features
    for lineno, line in enumerate(lines[start:], start=start + 1):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            label = int(parts[0])
            values = [float(v) for v in parts[1:]]
        except ValueError:
            raise ParseError(f"line {lineno}: non-numeric field") from None
        if not all(math.isfinite(v) for v in values):
            raise ParseError(f"line {lineno}: non-finite feature value")
        if arity is None:
            arity = len(values)
        if len(values) != arity or arity == 0:
            raise ParseError(f"line {lineno}: expected {arity} features, found {len(values)}")
        labels.append(label)
        rows.append(values)
    if not rows:
        raise ParseError("dataset has no samples")
    labels = np.array(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        raise ParseError(f"line {bad[0] + start + 1}: label {labels[bad[0]]} outside [0, {num_classes})")
    return LabeledDataset(np.array(rows, dtype=np.float64), labels, num_classes)


def load_dataset(path, num_classes: int | None = None) -> LabeledDataset:
    return loads_dataset(Path(path).read_text(), num_classes)


def dumps_dataset(ds: LabeledDataset) -> str:
    lines = [f"# features={ds.num_features} classes={ds.num_classes}"]
    for label, row in zip(ds.labels, ds.features):
        lines.append(",".join([str(int(label))] + [repr(float(v)) for v in row]))
    return "\n".join(lines) + "\n"


def save_dataset(ds: LabeledDataset, path) -> None:
    Path(path).write_text(dumps_dataset(ds))


# ---------------------------------------------------------------- profiles

def dumps_profile(profile: ActivationProfile) -> str:
    doc = {
        "format_version": FORMAT_VERSION,
        "num_samples": profile.num_samples,
        "data_sha256": profile.data_fingerprint,
        "layer_shapes": [list(s) for s in profile.layer_shapes],
        "max_post_relu": [float(v) for v in profile.max_post_relu],
        # float64 keeps the sign of tiny negative activations
        "pre_relu": None if profile.pre_relu is None else [encode_array(p, "<f8") for p in profile.pre_relu],
    }
    return canonical_json(doc)


def loads_profile(text: str) -> ActivationProfile:
    doc = _loads(text, "profile")
    if not isinstance(doc, dict) or doc.get("format_version") != FORMAT_VERSION:
        raise ParseError("profile: missing or unsupported format_version")
    n = _field(doc, "num_samples", "profile")
    shapes = [tuple(s) for s in _field(doc, "layer_shapes", "profile", list)]
    maxima = _field(doc, "max_post_relu", "profile", list)
    if len(maxima) != len(shapes):
        raise ParseError("profile: max_post_relu and layer_shapes differ in length")
    pre = doc.get("pre_relu")
    if pre is not None:
        if len(pre) != len(shapes):
            raise ParseError("profile: pre_relu and layer_shapes differ in length")
        pre = [decode_array(p, (n,) + s, "<f8", where=f"profile.pre_relu[{i}]") for i, (p, s) in enumerate(zip(pre, shapes))]
    return ActivationProfile([float(v) for v in maxima], n, pre, str(doc.get("data_sha256", "")), shapes)


def save_profile(profile: ActivationProfile, path) -> None:
    Path(path).write_text(dumps_profile(profile))


def load_profile(path) -> ActivationProfile:
    return loads_profile(Path(path).read_text())


# ---------------------------------------------------------------- SIN statistics

def sin_stats_to_dict(stats: SinStats, table: SpikeConfidenceTable | None = None) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "T": stats.T,
        "num_samples": stats.num_samples,
        "layer_sizes": stats.layer_sizes,
        "sin_neuron_ratio": stats.sin_neuron_ratio,
        "sin_spike_counts": [c.astype(int).tolist() for c in stats.sin_spike_counts],
        "sin_step_histogram": [h.astype(int).tolist() for h in stats.sin_step_histogram],
    }
    if table is not None:
        doc["confidence"] = {"p": table.p, "active_layers": list(table.active_layers), "early_steps": table.early_steps}
    return doc


def loads_sin_stats(text: str) -> SinStats:
    doc = _loads(text, "sin stats")
    if not isinstance(doc, dict) or doc.get("format_version") != FORMAT_VERSION:
        raise ParseError("sin stats: missing or unsupported format_version")
    try:
        return SinStats(
            T=int(doc["T"]), num_samples=int(doc["num_samples"]), layer_sizes=[int(v) for v in doc["layer_sizes"]],
            sin_neuron_ratio=[float(v) for v in doc["sin_neuron_ratio"]],
            sin_spike_counts=[np.array(c, dtype=np.int64) for c in doc["sin_spike_counts"]],
            sin_step_histogram=[np.array(h, dtype=np.int64) for h in doc["sin_step_histogram"]],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"sin stats: bad or missing field ({exc})") from None


# ---------------------------------------------------------------- run configuration

@dataclass
class RunConfig:
    msat: MsatConfig = field(default_factory=lambda: MsatConfig.preset("vgg16", regime="msat"))
    confidence_enabled: bool = False
    confidence_layers: tuple[int, ...] = (-1,)
    confidence_seed: int = 0
    T: int = 256
    seed: int = 0
    readout: str = "rate"
    initial_potential: float = 0.0
    chunk_size: int = 256
    ac_pj: float = AC_PJ
    mac_pj: float = MAC_PJ

    @property
    def early_steps(self) -> int:
        return self.msat.early_steps

    @property
    def rng_seed(self) -> tuple[int, int]:
        return (self.seed, self.confidence_seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["msat"] = self.msat.to_dict()
        d["confidence_layers"] = list(self.confidence_layers)
        return d

    def hash(self) -> str:
        return sha256_text(canonical_json(self.to_dict()))


_KEYS = {
    "thresholds": {"regime", "preset", "alpha", "k_a", "k_i", "C", "tau_mp", "tau_rd", "v_T"},
    "confidence": {"enabled", "layers", "early_steps", "seed"},
    "simulation": {"T", "seed", "readout", "initial_potential", "chunk_size"},
    "energy": {"ac_pj", "mac_pj"},
}
_MSAT_FIELDS = {"alpha": "alpha", "k_a": "k_a", "k_i": "k_i", "C": "c_sensitivity", "tau_mp": "tau_mp", "tau_rd": "tau_rd"}


def _ints(text: str, where: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ParseError(f"{where}: expected comma-separated integers, got {text!r}") from None


def loads_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case sensitive (C, v_T, T)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ParseError(f"config: {exc}") from None
    for section in parser.sections():
        if section not in _KEYS:
            raise ConfigurationError(f"config: unknown section [{section}]")
        unknown = set(parser[section]) - _KEYS[section]
        if unknown:
            raise ConfigurationError(f"config: unknown key(s) {sorted(unknown)} in [{section}]")

    def get(section, key, conv, default):
        if not parser.has_option(section, key):
            return default
        raw = parser.get(section, key)
        try:
            return conv(raw)
        except ValueError:
            raise ParseError(f"config: [{section}] {key} = {raw!r} is not a valid {conv.__name__}") from None

    def boolean(raw):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)

    preset = get("thresholds", "preset", str, "vgg16").strip()
    if preset not in PRESETS:
        raise ConfigurationError(f"config: unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    params = dict(PRESETS[preset])
    for key, attr in _MSAT_FIELDS.items():
        params[attr] = get("thresholds", key, float, params[attr])
    if parser.has_option("thresholds", "v_T"):
        raw = parser.get("thresholds", "v_T")
        try:
            params["v_T"] = tuple(float(v) for v in raw.split(",") if v.strip())
        except ValueError:
            raise ParseError(f"config: [thresholds] v_T = {raw!r} is not a float list") from None
    params["regime"] = get("thresholds", "regime", str, "msat").strip()
    params["early_steps"] = get("confidence", "early_steps", int, DEFAULT_EARLY_STEPS)
    cfg = RunConfig(
        msat=MsatConfig(**params),
        confidence_enabled=get("confidence", "enabled", boolean, False),
        confidence_layers=_ints(parser.get("confidence", "layers", fallback="-1"), "[confidence] layers"),
        confidence_seed=get("confidence", "seed", int, 0),
        T=get("simulation", "T", int, 256),
        seed=get("simulation", "seed", int, 0),
        readout=get("simulation", "readout", str, "rate").strip(),
        initial_potential=get("simulation", "initial_potential", float, 0.0),
        chunk_size=get("simulation", "chunk_size", int, 256),
        ac_pj=get("energy", "ac_pj", float, AC_PJ),
        mac_pj=get("energy", "mac_pj", float, MAC_PJ),
    )
    if cfg.T < 1 or cfg.chunk_size < 1:
        raise ConfigurationError("config: T and chunk_size must be >= 1")
    if cfg.readout not in ("rate", "potential"):
        raise ConfigurationError(f"config: readout must be 'rate' or 'potential', got {cfg.readout!r}")
    if not cfg.confidence_layers:
        raise ConfigurationError("config: [confidence] layers must name at least one layer")
    return cfg


def load_config(path) -> RunConfig:
    return loads_config(Path(path).read_text())


def dumps_config(cfg: RunConfig) -> str:
    m = cfg.msat
    lines = [
        "[thresholds]",
        f"regime = {m.regime}",
        f"alpha = {m.alpha!r}", f"k_a = {m.k_a!r}", f"k_i = {m.k_i!r}", f"C = {m.c_sensitivity!r}",
        f"tau_mp = {m.tau_mp!r}", f"tau_rd = {m.tau_rd!r}",
        "v_T = " + ", ".join(repr(v) for v in m.v_T),
        "",
        "[confidence]",
        f"enabled = {str(cfg.confidence_enabled).lower()}",
        "layers = " + ", ".join(str(l) for l in cfg.confidence_layers),
        f"early_steps = {m.early_steps}",
        f"seed = {cfg.confidence_seed}",
        "",
        "[simulation]",
        f"T = {cfg.T}", f"seed = {cfg.seed}", f"readout = {cfg.readout}",
        f"initial_potential = {cfg.initial_potential!r}", f"chunk_size = {cfg.chunk_size}",
        "",
        "[energy]",
        f"ac_pj = {cfg.ac_pj!r}", f"mac_pj = {cfg.mac_pj!r}",
    ]
    return "\n".join(lines) + "\n"


def energy_to_dict(report: EnergyReport) -> dict:
    return report.to_dict()


def write_report(doc: dict, path) -> None:
    Path(path).write_text(canonical_json(doc))
