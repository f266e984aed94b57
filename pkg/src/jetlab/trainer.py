"""Adam training loop with coupled L2 decay, argmin-validation selection, seed ensembles."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .datasets import DatasetSplit, PackedJets, pack
from .diffengine import NonFiniteError, ParamVector, value_and_grad
from .evalrobust import evaluate
from .model import Batch, Checkpoint, ModelConfig, forward, init_params
from .objectives import LossConfig, bce_loss, boosted_view, consistency_penalty, sample_view, total_loss_with_view
from .kinematics import sample_boosts

log = logging.getLogger(__name__)

# stream ids for np.random.SeedSequence([seed, stream, ...])
_SHUFFLE, _BOOSTS, _VAL_BOOSTS = 1, 2, 3


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 0.005
    weight_decay: float = 0.0005
    batch_size: int = 128
    seeds: tuple[int, ...] = (0, 1, 2)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    decoupled_weight_decay: bool = False

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> AdamState:
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grads, state: AdamState, tc: TrainConfig):
    """One Adam update.  Coupled L2 (the default) adds ``weight_decay * w`` to the gradient."""
    w = params.values if isinstance(params, ParamVector) else np.asarray(params, dtype=np.float64)
    g = grads.values if isinstance(grads, ParamVector) else np.asarray(grads, dtype=np.float64)
    if w.shape != state.m.shape or g.shape != w.shape:
        raise ValueError("parameter, gradient and optimiser state shapes differ")
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("grad")
    if tc.weight_decay and not tc.decoupled_weight_decay:
        g = g + tc.weight_decay * w
    t = state.t + 1
    b1, b2 = tc.adam_beta1, tc.adam_beta2
    m = b1 * state.m + (1 - b1) * g
    v = b2 * state.v + (1 - b2) * g * g
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    new = w - tc.lr * m_hat / (np.sqrt(v_hat) + tc.adam_eps)
    if tc.weight_decay and tc.decoupled_weight_decay:
        new = new - tc.lr * tc.weight_decay * w
    if isinstance(params, ParamVector):
        new = params.replace(new)
    return new, AdamState(m, v, t)


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def content_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


@dataclass
class RunRecord:
    variant: str
    seed: int
    train_loss: list[float]
    val_loss: list[float]
    selected_epoch: int
    final_metrics: dict
    config: dict
    diagnostics: dict = field(default_factory=dict)
    curvature: dict | None = None
    wall_time: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_time")
        return d

    def to_json(self) -> str:
        """Canonical, timing-free serialisation (byte-stable across reruns)."""
        return canonical_json(self.to_dict())

    def hash(self) -> str:
        return content_hash(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> RunRecord:
        return cls(**d)


# ------------------------------------------------------------------ training


def validation_view(val: PackedJets, seed: int, lc: LossConfig):
    """Boosted validation view, drawn once per run and frozen."""
    if lc.lambda_seal == 0:
        return None
    batch = Batch.from_packed(val)
    if lc.boost_y_max == 0:
        return boosted_view(batch, np.tile([0.0, 0.0, 1.0], (len(batch), 1)), np.zeros(len(batch))).batch
    n, y = sample_boosts(stream(seed, _VAL_BOOSTS), lc.boost_y_max, len(batch))
    return boosted_view(batch, n, y).batch


def objective_value(params, config: ModelConfig, batch: Batch, view: Batch | None, lambda_seal: float, chunk: int = 1024) -> float:
    """Graph-free total loss against a fixed view; per-sample means combined by chunk weights."""
    total = 0.0
    with torch.no_grad():
        for s in range(0, len(batch), chunk):
            sl = slice(s, s + chunk)
            b = batch.slice(sl)
            logits = forward(params, config, b)
            value = bce_loss(logits, b.labels)
            if lambda_seal and view is not None:
                value = value + lambda_seal * consistency_penalty(params, config, b, view.slice(sl), logits=logits)
            total += float(value) * len(b)
    return total / len(batch)


def train(
    model_config: ModelConfig,
    loss_config: LossConfig,
    train_config: TrainConfig,
    data: DatasetSplit,
    seed: int | None = None,
    variant: str = "",
) -> tuple[Checkpoint, RunRecord]:
    """Train one model; returns the checkpoint with the lowest validation loss."""
    if not data.train or not data.val:
        raise ValueError("train and val splits must be non-empty")
    seed = train_config.seeds[0] if seed is None else int(seed)
    t0 = time.perf_counter()
    tc, lc = train_config, loss_config
    tr = pack(data.train, model_config.n_max)
    va = pack(data.val, model_config.n_max)
    val_batch = Batch.from_packed(va)
    val_view = validation_view(va, seed, lc)

    params = init_params(model_config, seed)
    state = AdamState.zeros(len(params))
    best, best_val, best_epoch = params, np.inf, -1
    train_curve, val_curve = [], []
    n_clamped = 0
    n = len(tr)
    for epoch in range(tc.epochs):
        order = stream(seed, _SHUFFLE, epoch).permutation(n)
        boost_rng = stream(seed, _BOOSTS, epoch)
        running = 0.0
        for b, start in enumerate(range(0, n, tc.batch_size)):
            batch = Batch.from_packed(tr, order[start : start + tc.batch_size])
            view = None
            if lc.lambda_seal:
                v = sample_view(batch, boost_rng, lc.boost_y_max)
                n_clamped += v.n_clamped
                view = v.batch

            def loss(theta, batch=batch, view=view):
                return total_loss_with_view(theta, model_config, batch, view, lc.lambda_seal)

            try:
                value, grad = value_and_grad(loss, params)
                params, state = adam_step(params, grad, state, tc)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite value at epoch {epoch}, batch {b}: {exc}", epoch, b) from exc
            running += value * len(batch)
        train_curve.append(running / n)
        val = objective_value(params, model_config, val_batch, val_view, lc.lambda_seal)
        val_curve.append(val)
        if val < best_val:
            best, best_val, best_epoch = params, val, epoch
        log.info("%s seed=%d epoch=%d train=%.5f val=%.5f", variant, seed, epoch, train_curve[-1], val)

    config_snapshot = {
        "model": model_config.to_dict(),
        "loss": asdict(lc),
        "train": {**asdict(tc), "seeds": list(tc.seeds)},
        "data": data.provenance,
    }
    ckpt = Checkpoint(model_config, best)
    test_report = evaluate(ckpt, data.test) if data.test else None
    record = RunRecord(
        variant=variant,
        seed=seed,
        train_loss=train_curve,
        val_loss=val_curve,
        selected_epoch=best_epoch,
        final_metrics=(
            {"accuracy": test_report.accuracy, "auc": test_report.roc_auc, "best_val_loss": best_val}
            if test_report
            else {"best_val_loss": best_val}
        ),
        config=config_snapshot,
        diagnostics={"pt_floor_clamps": n_clamped, "batch_size": tc.batch_size},
        wall_time=time.perf_counter() - t0,
    )
    ckpt.meta = {
        "variant": variant,
        "seed": seed,
        "epochs": tc.epochs,
        "selected_epoch": best_epoch,
        "best_val_loss": best_val,
        "final_train_loss": train_curve[-1],
        "config_hash": content_hash(config_snapshot),
    }
    return ckpt, record


# ------------------------------------------------------------------ ensembles


@dataclass
class EnsembleResult:
    variant: str
    runs: dict[int, tuple[Checkpoint, RunRecord]]
    failed: dict[int, str]
    summary: dict
    champion: int | None


def summarize(values) -> dict:
    vals = np.asarray(values, dtype=np.float64)
    n = len(vals)
    return {
        "mean": float(vals.mean()),
        "std": float(vals.std(ddof=1)) if n > 1 else 0.0,
        "n": n,
        "single": n == 1,
    }


def _train_job(args):
    variant, mc, lc, tc, data, seed = args
    torch.set_num_threads(1)
    try:
        return variant, seed, train(mc, lc, tc, data, seed=seed, variant=variant), None
    except TrainingError as exc:
        return variant, seed, None, str(exc)


def run_ensemble(configs: dict, data: DatasetSplit, seeds=None, jobs: int = 1) -> dict[str, EnsembleResult]:
    """Train every (variant, seed) pair and summarise each variant.

    ``configs`` maps a variant name to ``(ModelConfig, LossConfig, TrainConfig)``.
    The champion of a variant is the seed with the lowest selected validation loss.
    """
    tasks = []
    for variant, (mc, lc, tc) in configs.items():
        for seed in seeds if seeds is not None else tc.seeds:
            tasks.append((variant, mc, lc, tc, data, int(seed)))
    if not tasks:
        raise ValueError("need at least one seed")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_job, tasks))
    else:
        results = [_train_job(t) for t in tasks]

    out = {}
    for variant in configs:
        runs, failed = {}, {}
        for v, seed, res, err in results:
            if v != variant:
                continue
            if res is None:
                failed[seed] = err
            else:
                runs[seed] = res
        summary = {}
        champion = None
        if runs:
            recs = [r for _, r in runs.values()]
            for key in recs[0].final_metrics:
                summary[key] = summarize([r.final_metrics[key] for r in recs])
            champion = min(runs, key=lambda s: (runs[s][1].final_metrics["best_val_loss"], s))
        out[variant] = EnsembleResult(variant, runs, failed, summary, champion)
    return out
