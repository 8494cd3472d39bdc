"""Comparison methods: global magnitude, random, SNIP and Hoyer-Square."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .nn import LayerSpec, ParameterStore, loss_and_grads
from .pruning import Mask, SaliencyVector, check_layer_collapse, global_rank_and_prune, prune_lowest

METHOD_KINDS = (
    "flipout",
    "global_magnitude",
    "random",
    "snip",
    "hoyer_square",
    "flipout_no_noise",
    "noisy_global_magnitude",
    "dense",
)
ITERATIVE_KINDS = ("flipout", "global_magnitude", "random", "flipout_no_noise", "noisy_global_magnitude")


@dataclass(frozen=True)
class MethodSpec:
    """Pruning method and its knobs.

    ``lam`` is the gradient-noise scale for the noisy kinds; the
    ``flipout_no_noise`` kind forces it to 0, and the plain
    ``global_magnitude``/``random``/``snip``/``hoyer_square`` kinds never add
    noise.  ``dense`` trains without pruning and serves as the reference.
    """

    kind: str = "flipout"
    lam: float = 1.0
    p: float = 2.0
    zero_flips: str = "floor"
    alpha: float = 1e-4
    threshold: float = 1e-4
    finetune_epochs: int | None = None
    hoyer_scope: str = "layer"

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ConfigError(f"unknown method kind {self.kind!r}; choose from {METHOD_KINDS}")
        if self.hoyer_scope not in ("layer", "global"):
            raise ConfigError("hoyer_scope must be 'layer' or 'global'")
        if self.lam < 0 or self.p < 0 or self.alpha < 0 or self.threshold < 0:
            raise ConfigError("method parameters must be nonnegative")

    @property
    def noise_scale(self) -> float:
        if self.kind in ("flipout", "noisy_global_magnitude"):
            return self.lam
        return 0.0

    @property
    def iterative(self) -> bool:
        return self.kind in ITERATIVE_KINDS

    @property
    def saliency(self) -> str:
        return {
            "flipout": "flipout",
            "flipout_no_noise": "flipout",
            "global_magnitude": "magnitude",
            "noisy_global_magnitude": "magnitude",
            "random": "random",
        }.get(self.kind, "")

    def to_dict(self) -> dict:
        return asdict(self)


def magnitude_saliency(theta):
    return np.abs(theta)


def magnitude_vector(params: ParameterStore, mask: Mask) -> SaliencyVector:
    return SaliencyVector.from_dense([np.abs(params.groups[s].value) for s in mask.slots], mask)


def random_saliency(rng: np.random.Generator, n: int | None = None):
    """I.i.d. uniform scores; a scalar when ``n`` is None."""
    return rng.random() if n is None else rng.random(n)


def random_vector(mask: Mask, rng: np.random.Generator) -> SaliencyVector:
    vec = SaliencyVector.from_dense([np.zeros(b.shape) for b in mask.bits], mask)
    vec.scores = random_saliency(rng, len(vec))
    return vec


def magnitude_prune_step(params, mask, r):
    return global_rank_and_prune(magnitude_vector(params, mask), mask, r)


def random_prune_step(mask, r, rng):
    return global_rank_and_prune(random_vector(mask, rng), mask, r)


# ---------------------------------------------------------------------------
# SNIP


def snip_scores(network: Sequence[LayerSpec], params: ParameterStore, x: np.ndarray,
                y: np.ndarray, mask: Mask) -> list[np.ndarray]:
    """Connection sensitivity |g * theta| per prunable weight, normalized to sum 1."""
    _, grads, _ = loss_and_grads(network, params, x, y)
    scores = [np.abs(grads[s] * params.groups[s].value) for s in mask.slots]
    total = sum(float(s.sum()) for s in scores)
    if total > 0:
        scores = [s / total for s in scores]
    return scores


def snip_remove_count(total: int, target_sparsity: float) -> int:
    # the 1e-9 slack keeps e.g. 0.999 * 1000 from rounding up to 1000
    return int(math.ceil(target_sparsity * total - 1e-9))


def snip_prune(network, params, x, y, target_sparsity: float, mask: Mask | None = None):
    """One-shot prune at initialization to ``target_sparsity`` of all prunable weights.

    Returns ``(mask, collapsed_layer_names)``; a LayerCollapseWarning is issued
    when any layer loses every weight.
    """
    if not 0 < target_sparsity < 1:
        raise ConfigError("target_sparsity must lie in (0, 1)")
    mask = Mask.full(params) if mask is None else mask
    scores = snip_scores(network, params, x, y, mask)
    n = snip_remove_count(mask.total, target_sparsity) - (mask.total - mask.alive)
    out = prune_lowest(SaliencyVector.from_dense(scores, mask), mask, n)
    return out, check_layer_collapse(out)


# ---------------------------------------------------------------------------
# Hoyer-Square


def hoyer_square(theta: np.ndarray) -> tuple[float, np.ndarray]:
    """(sum|theta|)^2 / sum theta^2 and its gradient; 0 and a zero gradient for all-zero input."""
    t = theta.reshape(-1)
    s1 = float(np.abs(t).sum())
    s2 = float(np.dot(t, t))
    if s2 == 0.0:
        return 0.0, np.zeros_like(theta)
    grad = 2.0 * s1 / s2 * np.sign(theta) - 2.0 * s1 * s1 / (s2 * s2) * theta
    return s1 * s1 / s2, grad


def hoyer_square_penalty(params: ParameterStore, mask: Mask | None = None,
                         scope: str = "layer") -> tuple[float, dict[int, np.ndarray]]:
    """Unscaled Hoyer-Square penalty over the prunable weights.

    Returns ``(value, grads)`` with ``grads`` keyed by ParameterStore index.
    ``scope="layer"`` sums one term per layer; ``"global"`` uses a single
    term over all prunable weights.
    """
    slots = mask.slots if mask is not None else [k for k, g in enumerate(params.groups) if g.prunable]
    if scope == "layer":
        total, grads = 0.0, {}
        for s in slots:
            h, g = hoyer_square(params.groups[s].value)
            total += h
            grads[s] = g
        return total, grads
    flat = np.concatenate([params.groups[s].value.reshape(-1) for s in slots]) if slots else np.zeros(0)
    h, g = hoyer_square(flat)
    grads, offset = {}, 0
    for s in slots:
        n = params.groups[s].value.size
        grads[s] = g[offset:offset + n].reshape(params.groups[s].value.shape)
        offset += n
    return h, grads


def hoyer_threshold_prune(params: ParameterStore, threshold: float, mask: Mask | None = None) -> Mask:
    """Prune every alive weight with |theta| < threshold, in one shot."""
    mask = Mask.full(params) if mask is None else mask
    out = mask.copy()
    for i, s in enumerate(out.slots):
        out.bits[i] &= ~(np.abs(params.groups[s].value) < threshold)
    return out
