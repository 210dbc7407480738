"""Mini-batch curriculum training with Adam.

The contrastive weight follows beta(k) = max(alpha, gamma * k) over the
0-based epoch index k ("curriculum" mode); "fixed" pins beta = alpha and
"random" draws beta ~ U(0, 2 * alpha) per epoch from a seeded stream.

Each batch shares one geo propagation over the union of its samples'
required nodes (exact thanks to the hop-ball locality of geo_propagate),
runs every sample forward on one tape, backpropagates the mean loss once,
and applies one Adam step. Sample shuffling is seeded by (seed, epoch), so a
run is fully determined by (config, seed, data).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import evaluator
from .errors import DataError, ShapeMismatch
from .graphs import GeoGraph
from .ingest import DatasetSplit, Sample
from .model import (GeoCache, ModelDims, ModelParams, forward_batch,
                    geo_propagate)

CURRICULUM_MODES = ("curriculum", "fixed", "random")


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.001
    batch_size: int = 256
    alpha: float = 0.2
    gamma: float = 0.004
    D: int = 64
    L: int = 2
    T: int = 2
    H: int = 0              # 0 -> 2 * D
    delta_d: float = 1.0    # km
    max_seq_len: int = 100
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    curriculum_mode: str = "curriculum"
    disable_geo_graph: bool = False
    disable_seq_graph: bool = False
    train_fraction: float = 1.0
    threads: int = 1

    def __post_init__(self):
        if self.curriculum_mode not in CURRICULUM_MODES:
            raise DataError(f"curriculum_mode must be one of {CURRICULUM_MODES}")
        for name in ("epochs", "batch_size", "D", "L", "T", "max_seq_len"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be non-negative")
        if self.lr <= 0 or self.batch_size <= 0:
            raise DataError("lr and batch_size must be positive")
        if self.alpha < 0 or self.gamma < 0:
            raise DataError("alpha and gamma must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def dims(self, num_pois: int) -> ModelDims:
        return ModelDims(num_pois=num_pois, D=self.D, L=self.L,
                         T=self.T, H=self.H)


def curriculum_beta(alpha: float, gamma: float, k: int) -> float:
    """max(alpha, gamma * k) over the 0-based epoch index."""
    if k < 0:
        raise DataError(f"epoch index must be non-negative, got {k}")
    return max(alpha, gamma * k)


def beta_for_epoch(cfg: TrainConfig, k: int) -> float:
    if cfg.curriculum_mode == "curriculum":
        return curriculum_beta(cfg.alpha, cfg.gamma, k)
    if cfg.curriculum_mode == "fixed":
        return cfg.alpha
    rng = np.random.default_rng([cfg.seed, 104729, k])
    return float(rng.uniform(0.0, 2.0 * cfg.alpha))


class AdamState:
    """First/second moment estimates per parameter plus the step counter."""

    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: ModelParams, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in manifest order; gradients are zeroed."""
    state.step += 1
    t = state.step
    for name, tensor in params.items():
        grad = tensor.grad
        if grad is None:
            grad = np.zeros_like(tensor.data)
        if grad.shape != tensor.shape:
            raise ShapeMismatch(f"gradient shape {grad.shape} for {name} "
                                f"{tensor.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        tensor.data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    params.zero_grads()


def train_epoch(params: ModelParams, train_samples: list[Sample],
                geo: GeoGraph, cfg: TrainConfig, k: int,
                adam_state: AdamState,
                geo_cache: GeoCache | None = None) -> dict:
    """One pass over the shuffled training set; returns loss aggregates."""
    beta = beta_for_epoch(cfg, k)
    order = np.random.default_rng([cfg.seed, k]).permutation(len(train_samples))
    cache = geo_cache or (None if cfg.disable_geo_graph else GeoCache(geo))

    sum_rec = 0.0
    sum_con = 0.0
    seen = 0
    for start in range(0, len(order), cfg.batch_size):
        batch = [train_samples[i] for i in order[start:start + cfg.batch_size]]
        n = len(batch)
        with ad.Tape() as tape:
            state = None
            if not cfg.disable_geo_graph:
                nodes = set()
                for s in batch:
                    nodes.update(s.context)
                    nodes.add(s.target)
                state = geo_propagate(params, geo, nodes, cache=cache)
            out = forward_batch(params, batch, geo, state,
                                disable_geo=cfg.disable_geo_graph,
                                disable_seq=cfg.disable_seq_graph)
            mean_rec = ad.mean_rows(out.l_rec_vec)
            mean_con = ad.mean_rows(out.l_con_vec)
            if beta == 0.0:
                loss = mean_rec
            else:
                loss = ad.add(mean_rec, ad.scalar_mul(beta, mean_con))
        tape.backward(loss, params=params.tensors())
        adam_step(params, adam_state, cfg.lr,
                  cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        sum_rec += mean_rec.item() * n
        sum_con += mean_con.item() * n
        seen += n
    return {"mean_lrec": sum_rec / max(seen, 1),
            "mean_lcon": sum_con / max(seen, 1),
            "beta": beta}


@dataclass
class FitResult:
    params_best: ModelParams
    params_final: ModelParams
    log: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_auc: float = float("nan")

    def checkpoint_extra(self, cfg: TrainConfig) -> dict:
        config = cfg.to_dict()
        config.pop("threads")  # wall-time knob; keeps checkpoints byte-stable
        return {"config": config,
                "disable_geo_graph": cfg.disable_geo_graph,
                "disable_seq_graph": cfg.disable_seq_graph,
                "best_epoch": self.best_epoch,
                "best_val_auc": self.best_val_auc}


def fit(cfg: TrainConfig, split: DatasetSplit, geo: GeoGraph,
        log_path=None) -> FitResult:
    """Train for cfg.epochs epochs, keeping the best-validation-AUC weights.

    With epochs = 0 the initial weights are the result and the log is empty.
    """
    dims = cfg.dims(split.num_pois)
    params = ModelParams.build(dims, cfg.seed)
    adam_state = AdamState()
    cache = None if cfg.disable_geo_graph else GeoCache(geo)

    best_values = params.copy_values()
    best_auc = float("nan")
    best_epoch = -1
    log: list[dict] = []
    sink = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for k in range(cfg.epochs):
            stats = train_epoch(params, split.train, geo, cfg, k, adam_state,
                                geo_cache=cache)
            val_scores = evaluator.score_samples(
                params, split.validation, geo,
                disable_geo=cfg.disable_geo_graph,
                disable_seq=cfg.disable_seq_graph,
                cache=cache, threads=cfg.threads)
            val_labels = [s.label for s in split.validation]
            val_auc = evaluator.auc(val_scores, val_labels)
            val_logloss = evaluator.logloss(val_scores, val_labels)
            entry = {"epoch": k, "beta": stats["beta"],
                     "train_lrec": stats["mean_lrec"],
                     "train_lcon": stats["mean_lcon"],
                     "val_auc": val_auc, "val_logloss": val_logloss}
            log.append(entry)
            if sink is not None:
                sink.write(json.dumps(entry, sort_keys=True) + "\n")
                sink.flush()
            if best_epoch < 0 or val_auc > best_auc:
                best_auc = val_auc
                best_epoch = k
                best_values = params.copy_values()
    finally:
        if sink is not None:
            sink.close()

    params_best = ModelParams.build(dims, cfg.seed)
    params_best.load_values(best_values)
    return FitResult(params_best=params_best, params_final=params,
                     log=log, best_epoch=best_epoch, best_val_auc=best_auc)
