"""Multi-stage adaptive threshold (MSAT).

Two per-neuron components drive the threshold:

* the dynamic tracking threshold (DTT) follows the gap between the residual
  membrane potential and its running mean,
  ``alpha*d + v_T + k_a*softplus(d / k_i)`` with ``d = V - V_mean``;
* the dynamic evoked threshold (DET) falls exponentially with the
  depolarization of the incoming input, ``tau_rd * exp(-dV / C)``.

They are combined as ``sigmoid(tau_mp*DTT + DET)``, a coefficient in (0, 1)
that scales the calibrated per-layer maximum activation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import ConfigurationError

REGIMES = ("constant", "dtt", "det", "msat")

# Table of hyperparameters per network family, keyed by family name.
PRESETS: dict[str, dict[str, float]] = {
    "vgg16": dict(alpha=0.03, k_a=1.0, k_i=1.0, c_sensitivity=5.0, tau_mp=1.0, tau_rd=1.0),
    "resnet20": dict(alpha=0.3, k_a=1.0, k_i=1.0, c_sensitivity=5.0, tau_mp=0.5, tau_rd=0.5),
    "resnet34": dict(alpha=1.0, k_a=1.0, k_i=1.0, c_sensitivity=5.0, tau_mp=0.5, tau_rd=0.5),
}

# DET exponent is clamped to +-this many multiples of C.
DET_CLAMP = 50.0
# sigmoid(-700) is still a positive float64 and sigmoid(36) is still < 1.
_SIGMOID_LO, _SIGMOID_HI = -700.0, 36.0


@dataclass(frozen=True)
class MsatConfig:
    regime: str = "msat"
    alpha: float = 0.03
    k_a: float = 1.0
    k_i: float = 1.0
    c_sensitivity: float = 5.0
    tau_mp: float = 1.0
    tau_rd: float = 1.0
    v_T: tuple[float, ...] = (0.0,)  # one entry per layer, or a single entry for all
    early_steps: int = 16

    def __post_init__(self):
        v_t = self.v_T
        if np.isscalar(v_t):
            v_t = (float(v_t),)
        object.__setattr__(self, "v_T", tuple(float(v) for v in v_t))
        self.validate()

    @classmethod
    def preset(cls, family: str = "vgg16", **overrides) -> "MsatConfig":
        try:
            params = dict(PRESETS[family])
        except KeyError:
            raise ConfigurationError(f"unknown preset {family!r}; choose from {sorted(PRESETS)}") from None
        params.update(overrides)
        return cls(**params)

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ConfigurationError(f"unknown regime {self.regime!r}; choose from {REGIMES}")
        values = (self.alpha, self.k_a, self.k_i, self.c_sensitivity, self.tau_mp, self.tau_rd) + self.v_T
        if not all(np.isfinite(values)):
            raise ConfigurationError("threshold hyperparameters must be finite")
        if self.k_i <= 0 or self.c_sensitivity <= 0:
            raise ConfigurationError("k_i and C must be > 0")
        if self.tau_mp < 0 or self.tau_rd < 0:
            raise ConfigurationError("tau_mp and tau_rd must be >= 0")
        if not self.v_T:
            raise ConfigurationError("v_T needs at least one value")
        if self.early_steps < 0:
            raise ConfigurationError("early_steps must be >= 0")
        # A zero weight on every active component pins the coefficient at 0.5.
        if (self.regime == "msat" and self.tau_mp == 0 and self.tau_rd == 0) \
                or (self.regime == "dtt" and self.tau_mp == 0) \
                or (self.regime == "det" and self.tau_rd == 0):
            raise ConfigurationError(f"degenerate {self.regime} regime: active tau coefficients are all zero")

    def with_regime(self, regime: str) -> "MsatConfig":
        return replace(self, regime=regime)

    def v_t_for(self, layer: int) -> float:
        if len(self.v_T) == 1:
            return self.v_T[0]
        try:
            return self.v_T[layer]
        except IndexError:
            raise ConfigurationError(f"v_T has {len(self.v_T)} entries, no value for layer {layer}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["v_T"] = list(self.v_T)
        return d


def softplus(x):
    """ln(1 + e^x), evaluated as max(x, 0) + ln(1 + e^-|x|)."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = np.clip(np.asarray(x, dtype=np.float64), _SIGMOID_LO, _SIGMOID_HI)
    return 1.0 / (1.0 + np.exp(-x))


def dtt(v_after, v_mean, cfg: MsatConfig, layer: int = 0):
    """Dynamic tracking threshold for residual potential ``v_after`` and running mean ``v_mean``."""
    d = np.asarray(v_after, dtype=np.float64) - np.asarray(v_mean, dtype=np.float64)
    return cfg.alpha * d + cfg.v_t_for(layer) + cfg.k_a * softplus(d / cfg.k_i)


def det(v_before_now, v_before_prev, cfg: MsatConfig):
    """Dynamic evoked threshold from the change of the pre-fire potential between steps."""
    c = cfg.c_sensitivity
    dv = np.clip(np.asarray(v_before_now, dtype=np.float64) - np.asarray(v_before_prev, dtype=np.float64),
                 -DET_CLAMP * c, DET_CLAMP * c)
    return cfg.tau_rd * np.exp(-dv / c)


def coefficient(v_after, v_mean, v_before_now, v_before_prev, cfg: MsatConfig, layer: int = 0, regime: str | None = None):
    """Threshold coefficient in (0, 1) for the given regime (default ``cfg.regime``)."""
    regime = regime or cfg.regime
    drive = 0.0
    if regime in ("dtt", "msat"):
        drive = drive + cfg.tau_mp * dtt(v_after, v_mean, cfg, layer)
    if regime in ("det", "msat"):
        drive = drive + det(v_before_now, v_before_prev, cfg)
    return sigmoid(np.broadcast_to(drive, np.shape(v_after)))


def update_threshold(state, cfg: MsatConfig, layer: int, regime: str | None = None) -> np.ndarray:
    """New per-neuron thresholds for a layer state.

    ``state`` must carry ``v_after``/``v_mean`` from the previous step and the
    current and previous pre-fire potentials.  Under the constant regime the
    current thresholds are returned untouched.
    """
    regime = regime or cfg.regime
    if regime == "constant":
        return state.threshold
    coef = coefficient(state.v_after, state.v_mean, state.v_before, state.v_before_prev, cfg, layer, regime)
    return coef * state.base_threshold
