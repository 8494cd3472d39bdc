"""Masks, sign-flip bookkeeping, global ranking and prune schedules."""

from __future__ import annotations

import base64
import json
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, LayerCollapseWarning, PruningError
from .nn import ParameterStore


def prunable_set(params: ParameterStore) -> list[int]:
    """Indices of the dense/conv weight tensors; biases and BN parameters excluded."""
    return [k for k, g in enumerate(params.groups) if g.prunable]


@dataclass
class Mask:
    """One boolean per prunable weight; True means alive.

    ``slots`` holds the ParameterStore group index of each tensor and
    ``layers`` the network layer index used for tie-breaking.
    """

    slots: list[int]
    layers: list[int]
    names: list[str]
    bits: list[np.ndarray]

    @classmethod
    def full(cls, params: ParameterStore) -> "Mask":
        slots = prunable_set(params)
        return cls(
            slots,
            [params.groups[k].layer for k in slots],
            [params.groups[k].name for k in slots],
            [np.ones(params.groups[k].value.shape, dtype=bool) for k in slots],
        )

    def copy(self) -> "Mask":
        return Mask(list(self.slots), list(self.layers), list(self.names), [b.copy() for b in self.bits])

    def alive_per_layer(self) -> list[int]:
        return [int(b.sum()) for b in self.bits]

    @property
    def alive(self) -> int:
        return sum(self.alive_per_layer())

    @property
    def total(self) -> int:
        return sum(b.size for b in self.bits)

    @property
    def sparsity(self) -> float:
        return 1.0 - self.alive / self.total if self.total else 0.0

    def collapsed_layers(self) -> list[str]:
        return [n for n, b in zip(self.names, self.bits) if not b.any()]

    def to_json(self) -> str:
        layers = []
        for name, b in zip(self.names, self.bits):
            layers.append({
                "name": name,
                "shape": list(b.shape),
                "alive": int(b.sum()),
                "bitmap": base64.b64encode(np.packbits(b.reshape(-1)).tobytes()).decode("ascii"),
            })
        doc = {"format": "fliplab-mask/1", "alive": self.alive, "total": self.total, "layers": layers}
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, params: ParameterStore | None = None) -> "Mask":
        doc = json.loads(text)
        names, bits = [], []
        for entry in doc["layers"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape))
            raw = np.frombuffer(base64.b64decode(entry["bitmap"]), dtype=np.uint8)
            bits.append(np.unpackbits(raw)[:n].astype(bool).reshape(shape))
            names.append(entry["name"])
        if params is None:
            return cls(list(range(len(names))), list(range(len(names))), names, bits)
        lookup = {g.name: k for k, g in enumerate(params.groups)}
        slots = [lookup[n] for n in names]
        return cls(slots, [params.groups[k].layer for k in slots], names, bits)


def apply_mask(params: ParameterStore, mask: Mask) -> None:
    """Zero masked weights and their momentum buffers, in place."""
    for slot, b in zip(mask.slots, mask.bits):
        params.groups[slot].value[~b] = 0.0
        params.momentum[slot][~b] = 0.0


def mask_grads(grads: Sequence[np.ndarray], mask: Mask) -> None:
    """Zero gradient entries of masked weights, in place."""
    for slot, b in zip(mask.slots, mask.bits):
        grads[slot][~b] = 0.0


def check_layer_collapse(mask: Mask) -> list[str]:
    """Warn with LayerCollapseWarning when some layer has no alive weight."""
    dead = mask.collapsed_layers()
    if dead:
        warnings.warn(LayerCollapseWarning(dead), stacklevel=2)
    return dead


# ---------------------------------------------------------------------------
# flips


@dataclass
class FlipState:
    prev_sign: list[np.ndarray]
    flips: list[np.ndarray]
    steps_recorded: int = 0

    @classmethod
    def start(cls, params: ParameterStore, mask: Mask) -> "FlipState":
        """Initial signs are taken from the weights before the first step."""
        return cls(
            [np.sign(params.groups[k].value).astype(np.int8) for k in mask.slots],
            [np.zeros(params.groups[k].value.shape, dtype=np.int64) for k in mask.slots],
        )

    def summary(self, mask: Mask) -> dict:
        alive = np.concatenate([f[b] for f, b in zip(self.flips, mask.bits)]) if mask.alive else np.zeros(0)
        if alive.size == 0:
            return {"min": 0, "median": 0.0, "max": 0}
        return {"min": int(alive.min()), "median": float(np.median(alive)), "max": int(alive.max())}


def record_flips(state: FlipState, params: ParameterStore, mask: Mask) -> None:
    """Count sign flips since the previous call, for alive weights only.

    A flip needs two nonzero signs that differ; passing through exactly 0
    does not count.  Masked weights keep their counters frozen.
    """
    for i, (slot, b) in enumerate(zip(mask.slots, mask.bits)):
        cur = np.sign(params.groups[slot].value).astype(np.int8)
        prev = state.prev_sign[i]
        flipped = (prev * cur) < 0
        state.flips[i] += flipped & b
        state.prev_sign[i] = cur
    state.steps_recorded += 1


# ---------------------------------------------------------------------------
# ranking


@dataclass
class SaliencyVector:
    """Scores for the alive prunable weights with their (layer, index) addresses.

    ``slot`` is the position in the mask; ``layer`` the network layer index;
    ``index`` the flat position inside the weight tensor.
    """

    scores: np.ndarray
    slot: np.ndarray
    layer: np.ndarray
    index: np.ndarray

    @classmethod
    def from_dense(cls, per_layer: Sequence[np.ndarray], mask: Mask) -> "SaliencyVector":
        """Collect scores from full-size per-layer arrays at the alive positions."""
        scores, slots, layers, idx = [], [], [], []
        for i, (s, b) in enumerate(zip(per_layer, mask.bits)):
            flat = np.flatnonzero(b.reshape(-1))
            scores.append(np.asarray(s, dtype=np.float64).reshape(-1)[flat])
            slots.append(np.full(flat.size, i))
            layers.append(np.full(flat.size, mask.layers[i]))
            idx.append(flat)
        cat = (lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt))
        return cls(cat(scores, np.float64), cat(slots, np.int64), cat(layers, np.int64), cat(idx, np.int64))

    def __len__(self):
        return self.scores.size


def prune_count(alive: int, r: float) -> int:
    """round(r * alive) with halves rounded up."""
    return int(math.floor(r * alive + 0.5))


def global_rank_and_prune(saliency: SaliencyVector, mask: Mask, r: float) -> Mask:
    """Remove the ``round(r * alive)`` lowest-saliency weights across all layers.

    Ties break by ascending (layer, index).  Returns a new mask.
    """
    if not 0 < r < 1:
        raise ConfigError(f"prune rate must lie in (0, 1), got {r}")
    alive = mask.alive
    if len(saliency) != alive:
        raise PruningError(f"saliency covers {len(saliency)} weights, mask has {alive} alive")
    if not np.all(np.isfinite(saliency.scores)):
        raise PruningError("saliency scores must be finite")
    n = prune_count(alive, r)
    return prune_lowest(saliency, mask, n)


def prune_lowest(saliency: SaliencyVector, mask: Mask, n: int) -> Mask:
    alive = mask.alive
    if n <= 0:
        warnings.warn("prune count rounds to 0; mask unchanged", RuntimeWarning, stacklevel=3)
        return mask.copy()
    if n >= alive:
        raise PruningError(f"refusing to prune {n} of {alive} alive weights")
    order = np.lexsort((saliency.index, saliency.layer, saliency.scores))[:n]
    out = mask.copy()
    for slot in np.unique(saliency.slot[order]):
        sel = order[saliency.slot[order] == slot]
        flat = out.bits[slot].reshape(-1)
        flat[saliency.index[sel]] = False
    return out


# ---------------------------------------------------------------------------
# schedules


def final_sparsity(r: float, m: int) -> float:
    return 1.0 - (1.0 - r) ** m


@dataclass(frozen=True)
class PruneSchedule:
    rate: float
    steps: int
    total_epochs: int
    prune_epochs: tuple[int, ...]

    @property
    def interval(self) -> int:
        return self.prune_epochs[0] if self.prune_epochs else 0

    @property
    def target_sparsity(self) -> float:
        return final_sparsity(self.rate, self.steps)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_schedule(E: int, m: int, r: float) -> PruneSchedule:
    """Prune at epochs k * round(E / (m + 1)), k = 1..m.

    A prune at epoch e happens before epoch e trains.  When the rounded
    interval would put the last prune at or past E, the interval falls back
    to floor(E / (m + 1)) so every prune lands inside training.
    """
    if not 0 < r < 1:
        raise ConfigError(f"prune rate must lie in (0, 1), got {r}")
    if m == 0:
        return PruneSchedule(r, 0, E, ())
    if not E > m >= 1:
        raise ConfigError(f"need E > m >= 1, got E={E}, m={m}")
    interval = _round_half_up(E / (m + 1))
    if m * interval >= E:
        interval = E // (m + 1)
    if interval < 1:
        raise ConfigError(f"prune interval < 1 for E={E}, m={m}")
    return PruneSchedule(r, m, E, tuple(k * interval for k in range(1, m + 1)))
