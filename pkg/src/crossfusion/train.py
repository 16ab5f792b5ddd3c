"""Adam with linear warm-up, the per-fold training loop, and evaluation reports.

A run directory is laid out as:

    config.json
    fold_<k>/checkpoint.xfckpt
    fold_<k>/metrics.json
    fold_<k>/risks.tsv
    summary.json

Everything written is byte-deterministic given the seed and input data.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import FeatureBag, kfold_split, load_dataset
from .errors import ConfigError, ContractError, MetricUndefinedError, TrainingDiverged
from .layers import named_params
from .model import ModelConfig, ModelParams, forward, init_params, save_checkpoint
from .survival import KMCurve, assign_bins, bin_of, c_index, km_curve, logrank_p, nll_loss, risk_score
from .tensor import DropoutRng, no_grad


class OptimState:
    """Classic Adam with coupled L2 weight decay (decay folded into the gradient).

    Parameter storage is rebound onto one flat buffer so the update is a
    handful of vector operations; per-parameter moment views are exposed as
    ``m[name]`` / ``v[name]``. Do not rebind a parameter's ``data`` attribute
    while an OptimState aliases it.
    """

    def __init__(self, params, base_lr: float, weight_decay: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step = 0
        self._entries = []  # (name, tensor, start, stop)
        offset = 0
        for name, t in named_params(params):
            self._entries.append((name, t, offset, offset + t.data.size))
            offset += t.data.size
        self._flat = np.empty(offset)
        self._m = np.zeros(offset)
        self._v = np.zeros(offset)
        self._gbuf = np.empty(offset)
        for name, t, lo, hi in self._entries:
            self._flat[lo:hi] = t.data.reshape(-1)
            t.data = self._flat[lo:hi].reshape(t.data.shape)
        self.m = {name: self._m[lo:hi].reshape(t.data.shape) for name, t, lo, hi in self._entries}
        self.v = {name: self._v[lo:hi].reshape(t.data.shape) for name, t, lo, hi in self._entries}

    @classmethod
    def for_params(cls, params, base_lr: float, weight_decay: float) -> "OptimState":
        return cls(params, base_lr, weight_decay)

    def state_bytes(self) -> bytes:
        """Snapshot of parameters and moments (used to assert isolation)."""
        return self._flat.tobytes() + self._m.tobytes() + self._v.tobytes() + bytes([self.step % 256])


@dataclass
class RunConfig:
    model: ModelConfig
    epochs: int = 20
    warmup_epochs: int = 5
    folds: int = 5
    seed: int = 0
    lr: float = 1e-4
    weight_decay: float = 4e-6

    def __post_init__(self):
        if self.warmup_epochs > self.epochs:
            raise ConfigError(
                f"warmup_epochs={self.warmup_epochs} exceeds epochs={self.epochs}"
            )
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")


@dataclass
class EvalReport:
    slide_ids: list[str]
    risks: list[float]
    times: list[float]
    events: list[int]
    c_index: float
    km_high: KMCurve | None
    km_low: KMCurve | None
    logrank_chi2: float | None
    logrank_p: float | None

    def to_json(self) -> str:
        def curve(c: KMCurve | None):
            if c is None:
                return None
            return {
                "times": [float(x) for x in c.times],
                "survival": [float(x) for x in c.survival],
                "at_risk": [int(x) for x in c.at_risk],
                "events": [int(x) for x in c.events],
            }

        payload = {
            "slide_ids": self.slide_ids,
            "risks": self.risks,
            "times": self.times,
            "events": self.events,
            "c_index": self.c_index,
            "km_high": curve(self.km_high),
            "km_low": curve(self.km_low),
            "logrank_chi2": self.logrank_chi2,
            "logrank_p": self.logrank_p,
        }
        return json.dumps(payload, sort_keys=True, indent=1)


@dataclass
class FoldResult:
    fold: int
    bin_edges: list[float]
    epoch_losses: list[float]
    n_train: int
    report: EvalReport
    params: ModelParams | None = field(repr=False, default=None)


def adam_step(state: OptimState, lr: float | None = None) -> None:
    """One bias-corrected Adam update over every parameter; grads are zeroed after."""
    if lr is None:
        lr = state.base_lr
    g = state._gbuf
    for name, t, lo, hi in state._entries:
        if t.grad is None:
            raise ContractError(f"adam_step: parameter {name!r} has no gradient")
        g[lo:hi] = t.grad.reshape(-1)
        t.grad = None
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    if state.weight_decay != 0.0:
        g += state.weight_decay * state._flat
    state._m *= b1
    state._m += (1.0 - b1) * g
    state._v *= b2
    g *= g
    state._v += (1.0 - b2) * g
    state._flat -= lr * (state._m / c1) / (np.sqrt(state._v / c2) + state.eps)


def lr_at(epoch: int, cfg: RunConfig) -> float:
    """Linear per-epoch warm-up to the base rate, constant afterwards."""
    if epoch < cfg.warmup_epochs:
        return cfg.lr * (epoch + 1) / cfg.warmup_epochs
    return cfg.lr


def evaluate(params: ModelParams, model_cfg: ModelConfig, bags: list[FeatureBag]) -> EvalReport:
    """Eval-mode forward per slide, risk scores, concordance, and the median-split
    Kaplan-Meier / log-rank comparison."""
    if not bags:
        raise ContractError("evaluate requires at least one slide")
    risks, times, events, ids = [], [], [], []
    for bag in bags:
        with no_grad():
            out = forward(bag, params, model_cfg, mode="eval")
        risks.append(risk_score(out.survival.data))
        times.append(bag.label.event_time)
        events.append(bag.label.event)
        ids.append(bag.slide_id)
    ci = c_index(risks, times, events)

    r = np.asarray(risks)
    t = np.asarray(times)
    e = np.asarray(events)
    thr = float(np.median(r))
    hi = r > thr
    km_high = km_low = None
    chi2 = p = None
    if hi.any() and (~hi).any():
        km_high = km_curve(t[hi], e[hi])
        km_low = km_curve(t[~hi], e[~hi])
        try:
            chi2, p = logrank_p(t[hi], e[hi], t[~hi], e[~hi])
        except MetricUndefinedError:
            pass
    return EvalReport(
        slide_ids=ids,
        risks=risks,
        times=times,
        events=events,
        c_index=ci,
        km_high=km_high,
        km_low=km_low,
        logrank_chi2=chi2,
        logrank_p=p,
    )


def train_fold(
    bags: list[FeatureBag],
    split: tuple[np.ndarray, np.ndarray],
    fold: int,
    cfg: RunConfig,
    out_dir: Path | None = None,
) -> FoldResult:
    """Train on the fold's training slides (batch size 1) and evaluate on its
    validation slides. Bin edges come from the training split only."""
    train_idx, val_idx = split
    train_bags = [bags[i] for i in train_idx]
    val_bags = [bags[i] for i in val_idx]

    edges = assign_bins(
        [b.label.event_time for b in train_bags],
        [b.label.event for b in train_bags],
        cfg.model.n_bins,
    )
    for b in bags:
        b.label.bin = bin_of(b.label.event_time, edges)

    params = init_params(cfg.model, seed=_derive_seed(cfg.seed, fold, 0))
    opt = OptimState.for_params(params, cfg.lr, cfg.weight_decay)
    drop_rng = DropoutRng(_derive_seed(cfg.seed, fold, 1))
    shuffle_rng = np.random.default_rng(_derive_seed(cfg.seed, fold, 2))

    epoch_losses: list[float] = []
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = shuffle_rng.permutation(len(train_bags))
        total = 0.0
        for j in order:
            bag = train_bags[j]
            out = forward(bag, params, cfg.model, mode="train", dropout_rng=drop_rng)
            loss = nll_loss(out.hazards, bag.label)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at fold {fold}, epoch {epoch}, slide {bag.slide_id}"
                )
            loss.backward()
            adam_step(opt, lr)
            total += value
        epoch_losses.append(total / len(train_bags))

    report = evaluate(params, cfg.model, val_bags)
    result = FoldResult(
        fold=fold,
        bin_edges=edges,
        epoch_losses=epoch_losses,
        n_train=len(train_bags),
        report=report,
        params=params,
    )
    if out_dir is not None:
        write_fold_outputs(result, cfg, Path(out_dir))
    return result


def _derive_seed(seed: int, fold: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, fold, stream]).generate_state(1)[0])


def write_fold_outputs(result: FoldResult, cfg: RunConfig, out_dir: Path) -> None:
    fold_dir = out_dir / f"fold_{result.fold}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(fold_dir / "checkpoint.xfckpt", cfg.model, result.params)
    metrics = {
        "fold": result.fold,
        "bin_edges": result.bin_edges,
        "epoch_losses": result.epoch_losses,
        "c_index": result.report.c_index,
        "logrank_chi2": result.report.logrank_chi2,
        "p_value": result.report.logrank_p,
        "n_train": result.n_train,
        "n_val": len(result.report.slide_ids),
    }
    (fold_dir / "metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=1))
    with open(fold_dir / "risks.tsv", "w", encoding="utf-8") as f:
        f.write("# slide_id\trisk\ttime\tevent\n")
        rep = result.report
        for sid, risk, time, event in zip(rep.slide_ids, rep.risks, rep.times, rep.events):
            f.write(f"{sid}\t{risk!r}\t{time!r}\t{event}\n")


def run_experiment(data_dir, cfg: RunConfig, out_dir) -> dict:
    """Full cross-validated run: all folds, per-fold outputs, and summary.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bags = load_dataset(Path(data_dir) / "manifest.tsv")
    splits = kfold_split(len(bags), cfg.folds, cfg.seed)

    run_config = {
        "data_dir": str(Path(data_dir).resolve()),
        "model": dataclasses.asdict(cfg.model),
        "epochs": cfg.epochs,
        "warmup_epochs": cfg.warmup_epochs,
        "folds": cfg.folds,
        "seed": cfg.seed,
        "lr": cfg.lr,
        "weight_decay": cfg.weight_decay,
    }
    (out_dir / "config.json").write_text(json.dumps(run_config, sort_keys=True, indent=1))

    fold_summaries = []
    cis = []
    for fold, split in enumerate(splits):
        result = train_fold(bags, split, fold, cfg, out_dir=out_dir)
        fold_summaries.append(
            {
                "fold": fold,
                "c_index": result.report.c_index,
                "p_value": result.report.logrank_p,
                "final_loss": result.epoch_losses[-1],
            }
        )
        cis.append(result.report.c_index)
    summary = {
        "folds": fold_summaries,
        "c_index_mean": float(np.mean(cis)),
        "c_index_std": float(np.std(cis)),
        "variant": cfg.model.variant,
        "seed": cfg.seed,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1))
    return summary
