"""Training loop with AdamW, cosine annealing and per-batch memory caching."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .data import Dataset
from .memory import MemoryBank, ScheduleState, alpha_schedule, cache_or_update
from .tensor import Tensor
from .vit import ViTConfig, init_params, vit_forward

log = logging.getLogger(__name__)


class OptimizerError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 2e-3
    total_epochs: int = 50
    batch_size: int = 32
    weight_decay: float = 0.05
    alpha0: float = 0.01
    t0_fraction: float = 0.10
    knn_k: int = 32
    tau: float = 0.5
    prototype_multiplier: int = 32
    seed: int = 0
    data_fraction: float = 1.0
    mmd_variant: str = "standard"
    ema_orientation: str = "paper"
    knn_mode: str = "exact"
    cache_token: str = "cls"

    def __post_init__(self):
        positive = ("learning_rate", "total_epochs", "batch_size", "alpha0", "t0_fraction", "knn_k", "tau",
                    "prototype_multiplier", "data_fraction")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0 or self.seed < 0:
            raise ValueError("weight_decay and seed must be non-negative")
        if self.data_fraction > 1:
            raise ValueError(f"data_fraction must be <= 1, got {self.data_fraction}")

    def schedule(self) -> ScheduleState:
        return ScheduleState.from_fraction(self.total_epochs, self.alpha0, self.t0_fraction)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Metrics:
    accuracy: float = 0.0
    auc: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    loss: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> Metrics:
        return cls(**{f.name: float(d[f.name]) for f in fields(cls)})


# ---------------------------------------------------------------- optimization

@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamWState, lr: float,
               betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0,
               decay_mask: dict[str, bool] | None = None) -> None:
    """One AdamW update in place: decoupled decay, then the bias-corrected Adam step."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if weight_decay and (decay_mask is None or decay_mask.get(name, True)):
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def cosine_lr(t: float, total: float, lr_max: float, lr_min: float = 0.0) -> float:
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


def decay_mask(params: dict[str, Tensor]) -> dict[str, bool]:
    """Decay only weight matrices; skip biases, norms, tokens, positions and gates."""
    return {k: (v.ndim == 2 and k.endswith(".w")) for k, v in params.items()}


# ---------------------------------------------------------------- metrics

def _binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney AUC with mid-ranks for ties; 0.5 when a class is absent."""
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.5
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def compute_metrics(probs: np.ndarray, labels: np.ndarray, loss: float = 0.0) -> Metrics:
    """Accuracy, AUC, precision, recall and F1.

    Binary tasks score class 1 as positive.  Multiclass AUC, precision and
    recall are macro one-vs-rest averages.  F1 is the harmonic mean of the
    reported precision and recall.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    C = probs.shape[1]
    pred = probs.argmax(axis=1)
    acc = float((pred == labels).mean()) if len(labels) else 0.0
    classes = [1] if C == 2 else range(C)
    precs, recs, aucs = [], [], []
    for c in classes:
        tp = int(((pred == c) & (labels == c)).sum())
        fp = int(((pred == c) & (labels != c)).sum())
        fn = int(((pred != c) & (labels == c)).sum())
        precs.append(tp / (tp + fp) if tp + fp else 0.0)
        recs.append(tp / (tp + fn) if tp + fn else 0.0)
        aucs.append(_binary_auc(probs[:, c], labels == c))
    p, r = float(np.mean(precs)), float(np.mean(recs))
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return Metrics(acc, float(np.mean(aucs)), p, r, f1, float(loss))


# ---------------------------------------------------------------- model + loops

@dataclass
class Model:
    cfg: ViTConfig
    params: dict[str, Tensor]

    @classmethod
    def create(cls, cfg: ViTConfig, seed: int = 0) -> Model:
        return cls(cfg, init_params(cfg, seed))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def new_bank(self, ema_orientation: str = "paper") -> MemoryBank | None:
        if self.cfg.movit_layer is None:
            return None
        return MemoryBank(self.cfg.head_dim, self.cfg.num_heads, ema_orientation)


@dataclass
class EpochRecord:
    epoch: int
    alpha: float
    lr: float
    seconds: float
    metrics: Metrics
    bank_size: int


def train_epoch(model: Model, bank: MemoryBank | None, dataset: Dataset, cfg: TrainConfig, epoch: int,
                opt: AdamWState, rng: np.random.Generator) -> EpochRecord:
    """One seeded pass: forward, backward, AdamW, then write this batch's facts into the bank."""
    if len(dataset) == 0:
        raise ValueError("empty training set")
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    start = time.perf_counter()
    alpha = alpha_schedule(epoch, cfg.schedule())
    lr = cosine_lr(epoch, cfg.total_epochs, cfg.learning_rate)
    mask = decay_mask(model.params)
    order = rng.permutation(len(dataset))
    probs = np.zeros((len(dataset), dataset.num_classes))
    total_loss = 0.0
    for s in range(0, len(order), cfg.batch_size):
        ids = order[s:s + cfg.batch_size]
        model.zero_grad()
        logits, facts = vit_forward(dataset.images[ids], model.cfg, model.params, bank=bank, mode="train",
                                    sample_ids=ids, knn_k=cfg.knn_k, knn_mode=cfg.knn_mode,
                                    cache_token=cfg.cache_token)
        loss = T.cross_entropy(logits, dataset.labels[ids])
        loss.backward()
        adamw_step(model.params, {k: p.grad for k, p in model.params.items()}, opt, lr,
                   weight_decay=cfg.weight_decay, decay_mask=mask)
        if bank is not None:
            for fact in facts:
                cache_or_update(bank, fact, alpha, alpha)
        total_loss += loss.item() * len(ids)
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        probs[ids] = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    if bank is not None:
        bank.epoch_counter = epoch + 1
    metrics = compute_metrics(probs, dataset.labels, total_loss / len(dataset))
    return EpochRecord(epoch, alpha, lr, time.perf_counter() - start, metrics, len(bank) if bank is not None else 0)


def predict_proba(model: Model, bank, dataset: Dataset, knn_k: int = 32, knn_mode: str = "exact",
                  batch_size: int = 128) -> np.ndarray:
    out = np.zeros((len(dataset), model.cfg.num_classes))
    with T.no_grad():
        for s in range(0, len(dataset), batch_size):
            logits, _ = vit_forward(dataset.images[s:s + batch_size], model.cfg, model.params, bank=bank,
                                    mode="infer", knn_k=knn_k, knn_mode=knn_mode)
            z = logits.data.astype(np.float64)
            z -= z.max(axis=1, keepdims=True)
            out[s:s + batch_size] = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    return out


def evaluate(model: Model, bank, dataset: Dataset, knn_k: int = 32, knn_mode: str = "exact") -> Metrics:
    """Metrics on ``dataset``; touches neither parameters nor the bank."""
    probs = predict_proba(model, bank, dataset, knn_k, knn_mode)
    rows = np.arange(len(dataset))
    loss = float(-np.log(np.clip(probs[rows, dataset.labels], 1e-12, None)).mean())
    return compute_metrics(probs, dataset.labels, loss)


def fit(model: Model, train: Dataset, cfg: TrainConfig, callback=None):
    """Train for ``cfg.total_epochs``; returns ``(bank, epoch records)``."""
    bank = model.new_bank(cfg.ema_orientation)
    opt = AdamWState()
    rng = np.random.default_rng([cfg.seed, 7])
    records = []
    for epoch in range(cfg.total_epochs):
        rec = train_epoch(model, bank, train, cfg, epoch, opt, rng)
        log.info("epoch %d loss %.4f acc %.3f alpha %.6f bank %d", epoch, rec.metrics.loss,
                 rec.metrics.accuracy, rec.alpha, rec.bank_size)
        records.append(rec)
        if callback is not None:
            callback(rec)
    return bank, records
