"""Brute-force reference computations: finite-difference gradients and flip recounts.

These deliberately avoid the analytic paths they check.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import nn
from .pruning import FlipState, Mask, record_flips


def central_difference(f: Callable[[], float], arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """d f / d arr by central differences, perturbing ``arr`` in place."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def network_loss(network, params, x, y) -> float:
    # train mode so batch-norm uses batch statistics; running stats are restored
    saved = {k: (s.running_mean.copy(), s.running_var.copy()) for k, s in params.bn_states.items()}
    logits, _ = nn.forward(network, params, x, "train")
    for k, (m, v) in saved.items():
        params.bn_states[k].running_mean, params.bn_states[k].running_var = m, v
    return nn.softmax_cross_entropy(logits, y)[0]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-4) -> float:
    """||a - b|| / max(||a||, ||b||, floor) over a whole tensor.

    The floor keeps structurally zero gradients (a bias feeding batch-norm)
    from turning finite-difference round-off into a large ratio.
    """
    if not a.size:
        return 0.0
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return float(np.linalg.norm(a - b)) / denom


def elementwise_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - b| / max(|a|, |b|, floor); strict, and noisy for tiny entries."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def gradient_check(network, params, x, y, h: float = 1e-6) -> dict[str, float]:
    """Relative error of backward vs central differences for each parameter group."""
    _, grads, _ = nn.loss_and_grads(network, params, x, y)
    saved = {k: (s.running_mean.copy(), s.running_var.copy()) for k, s in params.bn_states.items()}
    out = {}
    for g, analytic in zip(params.groups, grads):
        numeric = central_difference(lambda: network_loss(network, params, x, y), g.value, h)
        out[g.name] = relative_error(analytic, numeric)
    for k, (m, v) in saved.items():
        params.bn_states[k].running_mean, params.bn_states[k].running_var = m, v
    return out


def count_flips_bruteforce(trajectory: Sequence[float]) -> int:
    """Flip count of one scalar trajectory, as a plain loop over consecutive pairs."""
    def sgn(v):
        return (v > 0) - (v < 0)

    count = 0
    values = [float(v) for v in trajectory]
    for a, b in zip(values[:-1], values[1:]):
        sa, sb = sgn(a), sgn(b)
        if sa != 0 and sb != 0 and sa != sb:
            count += 1
    return count


def flip_counts_match(trajectories: np.ndarray) -> bool:
    """Feed (T, n) trajectories through record_flips and compare with per-column loops."""
    t_len, n = trajectories.shape
    params = nn.ParameterStore([nn.ParamGroup("w", "weight", 0, trajectories[0].copy())],
                               [np.zeros(n)])
    mask = Mask.full(params)
    state = FlipState.start(params, mask)
    for t in range(1, t_len):
        params.groups[0].value[...] = trajectories[t]
        record_flips(state, params, mask)
    expected = np.array([count_flips_bruteforce(trajectories[:, j].tolist()) for j in range(n)])
    return bool(np.array_equal(state.flips[0], expected))


def random_trajectories(rng: np.random.Generator, count: int, length: int) -> np.ndarray:
    """Random walks with occasional exact zeros, shape (length, count)."""
    steps = rng.standard_normal((length, count))
    walk = np.cumsum(steps, axis=0) * 0.1 + rng.standard_normal(count) * 0.1
    walk[rng.random(walk.shape) < 0.02] = 0.0
    return walk


def small_network(kind: str = "mixed") -> tuple[list[nn.LayerSpec], tuple[int, ...]]:
    """Tiny networks covering every layer kind, for gradient checks."""
    if kind == "dense":
        return [nn.dense(4, 5), nn.relu(), nn.dense(5, 3)], (4,)
    return [
        nn.conv2d(2, 3, 3, padding=1), nn.batchnorm(3), nn.relu(),
        nn.conv2d(3, 2, 2), nn.relu(), nn.flatten(),
        nn.dense(2 * 4 * 4, 6), nn.batchnorm(6), nn.relu(), nn.dense(6, 3),
    ], (2, 5, 5)


def run_oracles(seed: int = 0, trajectories: int = 1000, length: int = 1000) -> dict:
    rng = np.random.default_rng(seed)
    report = {"flips_match": flip_counts_match(random_trajectories(rng, trajectories, length))}
    for kind in ("dense", "mixed"):
        net, shape = small_network(kind)
        params = nn.init_params(net, rng)
        for g in params.groups:
            if g.role in ("bias", "bn_beta"):
                g.value[...] = rng.normal(0, 0.1, g.value.shape)
            elif g.role == "bn_gamma":
                g.value[...] = rng.uniform(0.5, 1.5, g.value.shape)
        x = rng.standard_normal((5, *shape))
        y = rng.integers(0, 3, 5)
        report[f"grad_{kind}"] = gradient_check(net, params, x, y)
    return report
