"""Sign-flip saliency and norm-scaled gradient noise."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .nn import ParameterStore
from .pruning import FlipState, Mask, SaliencyVector, global_rank_and_prune

ZERO_FLIP_MODES = ("floor", "top")


@dataclass(frozen=True)
class FlipOutConfig:
    p: float = 2.0
    lam: float = 1.0
    seed: int = 0
    # "floor": flips=0 is treated as 1.  "top": never-flipped weights rank above every flipped one.
    zero_flips: str = "floor"

    def __post_init__(self):
        if self.p < 0 or self.lam < 0:
            raise ConfigError("p and lambda must be nonnegative")
        if self.zero_flips not in ZERO_FLIP_MODES:
            raise ConfigError(f"zero_flips must be one of {ZERO_FLIP_MODES}")


def flipout_saliency(theta, flips, p: float, zero_flips: str = "floor"):
    """|theta|^p / flips, with the zero-flip case resolved by ``zero_flips``.

    Works elementwise on arrays.  In "top" mode never-flipped weights get
    ``max_flipped + 1 + |theta|^p`` so they outrank every flipped weight while
    keeping magnitude order among themselves.
    """
    mag = np.abs(np.asarray(theta, dtype=np.float64)) ** p
    f = np.asarray(flips)
    if zero_flips == "floor":
        out = mag / np.maximum(f, 1)
    else:
        flipped = f > 0
        ratio = np.where(flipped, mag / np.maximum(f, 1), 0.0)
        ceiling = ratio[flipped].max() if np.any(flipped) else 0.0
        out = np.where(flipped, ratio, ceiling + 1.0 + mag)
    return float(out) if out.ndim == 0 else out


@dataclass
class NoiseReport:
    """Per-layer noise variance and alive L2 norm, keyed by layer name."""

    sigma2: dict[str, float] = field(default_factory=dict)
    alive_norm: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"sigma2": dict(self.sigma2), "alive_norm": dict(self.alive_norm)}


def layer_noise_variance(weight: np.ndarray, d_l: int | None = None) -> float:
    """Squared L2 norm of the (masked) weights over the layer's full size."""
    d = weight.size if d_l is None else d_l
    return float(np.dot(weight.reshape(-1), weight.reshape(-1)) / d) if d else 0.0


def noise_report(params: ParameterStore, mask: Mask) -> NoiseReport:
    rep = NoiseReport()
    for name, slot, b in zip(mask.names, mask.slots, mask.bits):
        w = params.groups[slot].value * b
        rep.sigma2[name] = layer_noise_variance(w, b.size)
        rep.alive_norm[name] = float(np.linalg.norm(w))
    return rep


def inject_noise(grads: Sequence[np.ndarray], params: ParameterStore, mask: Mask, lam: float,
                 rng: np.random.Generator) -> list[np.ndarray]:
    """Add N(0, (lam * sigma_l)^2) noise to every alive weight gradient.

    sigma_l^2 uses the current masked weights over the layer's original
    size.  One standard-normal draw per weight of each layer per call,
    whatever the mask, so runs sharing a seed share a noise stream.
    Biases and BN parameters pass through untouched.
    """
    out = list(grads)
    if lam == 0:
        return out
    for slot, b in zip(mask.slots, mask.bits):
        w = params.groups[slot].value
        sigma = np.sqrt(layer_noise_variance(w * b, b.size))
        z = rng.standard_normal(w.shape)
        out[slot] = grads[slot] + (lam * sigma) * z * b
    return out


def flipout_saliency_vector(params: ParameterStore, mask: Mask, state: FlipState,
                            config: FlipOutConfig) -> SaliencyVector:
    vec = SaliencyVector.from_dense([params.groups[s].value for s in mask.slots], mask)
    flips = SaliencyVector.from_dense(state.flips, mask).scores
    vec.scores = np.atleast_1d(flipout_saliency(vec.scores, flips, config.p, config.zero_flips))
    return vec


def flipout_prune_step(params: ParameterStore, mask: Mask, state: FlipState, config: FlipOutConfig,
                       r: float) -> Mask:
    return global_rank_and_prune(flipout_saliency_vector(params, mask, state, config), mask, r)


def annealing_check(before: NoiseReport, after: NoiseReport) -> bool:
    """True iff no layer's noise variance grew across a prune event."""
    return all(after.sigma2[k] <= before.sigma2[k] for k in before.sigma2)
