"""Single training run: data loading, the per-step event sequence, prune hooks, metrics."""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import baselines, data, flipout, nn, pruning
from ..errors import ConfigError, LayerCollapseWarning, NonFiniteError
from .config import ExperimentConfig

log = logging.getLogger(__name__)


@dataclass
class Splits:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    preprocess: data.Preprocess
    num_classes: int


def load_splits(cfg: ExperimentConfig) -> Splits:
    """Build train/val/test arrays; normalization statistics come from train only."""
    dc = cfg.dataset
    test = None
    if dc.kind == "synthetic":
        full = data.gen_synthetic(dc.num_classes, dc.samples, dc.dims, dc.split_seed, dc.separation)
    elif dc.kind == "digits":
        img, lbl = data.fetch_digits(dc.data_dir or None)
        full = data.load_idx(img, lbl)
    else:
        full = data.load_idx(dc.images, dc.labels)
        if dc.test_images:
            test = data.load_idx(dc.test_images, dc.test_labels)
    if test is None:
        if dc.test_size <= 0:
            raise ConfigError("dataset.test_size must be > 0 when no test files are given")
        full, test = data.split(full, dc.test_size, dc.split_seed)
    train, val = data.split(full, dc.val_size, dc.split_seed + 1)
    if dc.replicate_channels > 1:
        for d in (train, val, test):
            d.features = data.replicate_channels(d.features, dc.replicate_channels)
    pre = data.Preprocess.fit(train, dc.pad_crop, dc.horizontal_flip)
    norm = pre.normalize if dc.normalize else (lambda x: x)
    return Splits(norm(train.features), train.labels, norm(val.features), val.labels,
                  norm(test.features), test.labels, pre, full.num_classes)


@dataclass
class RunResult:
    run_id: str
    seed: int
    status: str
    records: list[dict] = field(default_factory=list)
    mask: pruning.Mask | None = None
    params: nn.ParameterStore | None = None
    timings: list[dict] = field(default_factory=list)

    @property
    def final(self) -> dict:
        return self.records[-1] if self.records else {}


def run_id_for(cfg: ExperimentConfig, seed: int, tag: str = "") -> str:
    m = cfg.method
    parts = [m.kind]
    if m.kind in ("flipout", "noisy_global_magnitude"):
        parts.append(f"lam{m.lam:g}")
    if m.kind in ("flipout", "flipout_no_noise"):
        parts.append(f"p{m.p:g}")
    if m.kind == "hoyer_square":
        parts.append(f"a{m.alpha:g}")
    elif m.kind != "dense":
        parts.append(f"m{cfg.schedule.num_steps}")
    if tag:
        parts.append(tag)
    parts.append(f"s{seed}")
    return "-".join(parts)


class _Trainer:
    def __init__(self, cfg: ExperimentConfig, seed: int, splits: Splits, run_id: str):
        self.cfg, self.seed, self.s, self.run_id = cfg, seed, splits, run_id
        self.network = cfg.model.network()
        init_ss, data_ss, noise_ss, method_ss = np.random.SeedSequence(seed).spawn(4)
        self.data_rng = np.random.default_rng(data_ss)
        self.noise_rng = np.random.default_rng(noise_ss)
        self.method_rng = np.random.default_rng(method_ss)
        tc = cfg.training
        self.params = nn.init_params(self.network, np.random.default_rng(init_ss), tc.bn_eps, tc.bn_momentum)
        self.mask = pruning.Mask.full(self.params)
        self.flips = pruning.FlipState.start(self.params, self.mask)
        self.step = 0
        self.records: list[dict] = []
        self.timings: list[dict] = []
        self.events: list[dict] = []
        self.collapsed: list[str] = []
        self.t0 = time.perf_counter()

    # -- per-step sequence: forward, backward, penalty, mask grads, noise, step, mask, flips
    def train_epoch(self, epoch: int, hoyer_alpha: float = 0.0) -> float:
        cfg, s = self.cfg, self.s
        lam = cfg.method.noise_scale
        perm = self.data_rng.permutation(len(s.y_train))
        losses = []
        for start in range(0, len(perm), cfg.training.batch_size):
            idx = perm[start:start + cfg.training.batch_size]
            xb = data.augment(s.x_train[idx], s.preprocess, self.data_rng, "train")
            loss, grads, _ = nn.loss_and_grads(self.network, self.params, xb, s.y_train[idx])
            if hoyer_alpha:
                pen, pgrads = baselines.hoyer_square_penalty(self.params, self.mask, cfg.method.hoyer_scope)
                loss += hoyer_alpha * pen
                for k, g in pgrads.items():
                    grads[k] = grads[k] + hoyer_alpha * g
            if not np.isfinite(loss):
                raise NonFiniteError(f"loss is {loss} at epoch {epoch}, step {self.step}")
            pruning.mask_grads(grads, self.mask)
            grads = flipout.inject_noise(grads, self.params, self.mask, lam, self.noise_rng)
            nn.sgd_step(self.params, grads, cfg.optimizer, epoch)
            pruning.apply_mask(self.params, self.mask)
            pruning.record_flips(self.flips, self.params, self.mask)
            self.step += 1
            losses.append(loss)
        return float(np.mean(losses))

    def set_mask(self, new_mask: pruning.Mask, epoch: int, reason: str) -> None:
        before = flipout.noise_report(self.params, self.mask)
        alive_before = self.mask.alive
        self.mask = new_mask
        pruning.apply_mask(self.params, self.mask)
        after = flipout.noise_report(self.params, self.mask)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LayerCollapseWarning)
            dead = pruning.check_layer_collapse(self.mask)
        if dead:
            warnings.warn(LayerCollapseWarning(dead), stacklevel=2)
            self.collapsed = sorted(set(self.collapsed) | set(dead))
        self.events.append({
            "type": "prune",
            "reason": reason,
            "epoch": epoch,
            "step": self.step,
            "alive_before": alive_before,
            "alive_after": self.mask.alive,
            "sigma2_before": before.sigma2,
            "sigma2_after": after.sigma2,
            "annealing_ok": flipout.annealing_check(before, after),
            "collapsed_layers": dead,
        })

    def prune_iterative(self, epoch: int) -> None:
        m, r = self.cfg.method, self.cfg.schedule.rate
        if m.saliency == "flipout":
            fc = flipout.FlipOutConfig(p=m.p, lam=m.noise_scale, zero_flips=m.zero_flips)
            new = flipout.flipout_prune_step(self.params, self.mask, self.flips, fc, r)
        elif m.saliency == "magnitude":
            new = baselines.magnitude_prune_step(self.params, self.mask, r)
        else:
            new = baselines.random_prune_step(self.mask, r, self.method_rng)
        self.set_mask(new, epoch, "schedule")

    def prune_snip(self) -> None:
        s, bs = self.s, self.cfg.training.batch_size
        idx = self.method_rng.choice(len(s.y_train), size=min(bs, len(s.y_train)), replace=False)
        target = self.cfg.schedule.target_sparsity
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LayerCollapseWarning)
            new, _ = baselines.snip_prune(self.network, self.params, s.x_train[idx], s.y_train[idx],
                                          target, self.mask)
        self.set_mask(new, 0, "snip")

    def evaluate(self, epoch: int, train_loss: float, lr: float) -> dict:
        s, net, p = self.s, self.network, self.params
        rec = {
            "type": "epoch",
            "run_id": self.run_id,
            "seed": self.seed,
            "method": self.cfg.method.kind,
            "epoch": epoch,
            "step": self.step,
            "lr": lr,
            "train_loss": train_loss,
            "test_acc": nn.accuracy(net, p, s.x_test, s.y_test),
            "sparsity": self.mask.sparsity,
            "alive": dict(zip(self.mask.names, self.mask.alive_per_layer())),
            "sigma2": flipout.noise_report(p, self.mask).sigma2,
            "flips": self.flips.summary(self.mask),
        }
        if len(s.y_val):
            rec["val_acc"] = nn.accuracy(net, p, s.x_val, s.y_val)
        return rec

    def emit_epoch(self, epoch: int, train_loss: float) -> None:
        self.records.extend(self.events)
        self.events = []
        self.records.append(self.evaluate(epoch, train_loss, nn.lr_at(self.cfg.optimizer, epoch)))
        self.timings.append({"epoch": epoch, "wall_clock": round(time.perf_counter() - self.t0, 3)})

    def train(self) -> None:
        cfg, m = self.cfg, self.cfg.method
        E = cfg.schedule.epochs
        prune_epochs: tuple[int, ...] = ()
        if m.iterative:
            prune_epochs = pruning.make_schedule(E, cfg.schedule.num_steps, cfg.schedule.rate).prune_epochs
        if m.kind == "snip":
            self.prune_snip()
        alpha = m.alpha if m.kind == "hoyer_square" else 0.0
        for epoch in range(E):
            if epoch in prune_epochs:
                self.prune_iterative(epoch)
            self.emit_epoch(epoch, self.train_epoch(epoch, alpha))
        if m.kind == "hoyer_square":
            self.set_mask(baselines.hoyer_threshold_prune(self.params, m.threshold, self.mask), E, "threshold")
            ft = m.finetune_epochs if m.finetune_epochs is not None else E // 2
            for epoch in range(E, E + ft):
                self.emit_epoch(epoch, self.train_epoch(epoch))
        self.records.extend(self.events)
        self.events = []

    def final_record(self, status: str, error: str = "") -> dict:
        last = next((r for r in reversed(self.records) if r["type"] == "epoch"), {})
        rec = {
            "type": "final",
            "run_id": self.run_id,
            "seed": self.seed,
            "method": self.cfg.method.to_dict(),
            "schedule": {"epochs": self.cfg.schedule.epochs, "steps": self.cfg.schedule.num_steps,
                         "rate": self.cfg.schedule.rate},
            "status": status,
            "steps": self.step,
            "test_acc": last.get("test_acc", float("nan")) if status == "ok" else None,
            "val_acc": last.get("val_acc") if status == "ok" else None,
            "sparsity": self.mask.sparsity,
            "alive": self.mask.alive,
            "total": self.mask.total,
            "collapsed_layers": self.collapsed,
            "annealing_ok": all(e["annealing_ok"] for e in self.records if e["type"] == "prune"),
        }
        if error:
            rec["error"] = error
        return rec


def run(cfg: ExperimentConfig, seed: int, out_dir=None, splits: Splits | None = None,
        tag: str = "") -> RunResult:
    """Train one seed of ``cfg``; optionally persist metrics and mask under ``out_dir/run_id``.

    A NaN/Inf loss or update ends the run with a ``failed`` final record
    instead of raising.
    """
    splits = splits if splits is not None else load_splits(cfg)
    rid = run_id_for(cfg, seed, tag)
    tr = _Trainer(cfg, seed, splits, rid)
    status, err = "ok", ""
    try:
        tr.train()
    except NonFiniteError as exc:
        status, err = "failed", str(exc)
        log.warning("run %s failed: %s", rid, exc)
    tr.records.extend(tr.events)
    tr.records.append(tr.final_record(status, err))
    result = RunResult(rid, seed, status, tr.records, tr.mask, tr.params, tr.timings)
    if out_dir is not None:
        write_run(result, cfg, Path(out_dir))
    return result


def _dumps(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, allow_nan=True)


def write_run(result: RunResult, cfg: ExperimentConfig, out_dir: Path) -> Path:
    d = out_dir / result.run_id
    d.mkdir(parents=True, exist_ok=True)
    (d / "metrics.jsonl").write_text("".join(_dumps(r) + "\n" for r in result.records))
    (d / "timing.jsonl").write_text("".join(_dumps(r) + "\n" for r in result.timings))
    (d / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=1))
    if result.mask is not None:
        (d / "mask.json").write_text(result.mask.to_json())
    return d
