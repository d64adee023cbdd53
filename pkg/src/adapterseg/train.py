"""Adapter fine-tuning loop: combined dice + BCE objective, AdamW on the
trainable parameters only, validation-loss plateau LR decay, and early
stopping on validation DSC.  Everything is driven by one seed so a run
is reproducible byte for byte.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, TrainingAbort
from .metrics import dsc as dsc_metric
from .tokenizer import Tokenizer

log = logging.getLogger("adapterseg")


def segmentation_loss(logits, mask, lambda_d=1.5, lambda_ce=1.0, dice_eps=1.0):
    """lambda_d * dice + lambda_ce * BCE, differentiable through logits.

    The dice term is computed per sample and averaged; BCE uses the
    stable log-sum-exp form softplus(x) - x * m.
    """
    m = np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise ContractError("loss: mask is not binary")
    if m.shape != logits.shape:
        raise ContractError(f"loss: mask shape {m.shape} does not match logits {logits.shape}")
    m = T.Tensor(m.astype(logits.dtype))

    probs = T.sigmoid(logits)
    axes = (-2, -1)
    inter = T.sum_(T.mul(probs, m), axis=axes)
    totals = T.add(T.sum_(probs, axis=axes), T.sum_(m, axis=axes))
    dice = T.mean(
        T.sub(
            T.Tensor(np.asarray(1.0, dtype=logits.dtype)),
            T.div(inter * 2.0 + dice_eps, totals + dice_eps),
        )
    )
    bce = T.mean(T.sub(T.softplus(logits), T.mul(logits, m)))
    return dice * lambda_d + bce * lambda_ce


class AdamW:
    """Adam with decoupled weight decay applied before the update direction."""

    def __init__(self, params, lr, weight_decay=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        for p in params:
            if not p.trainable:
                raise ContractError(f"AdamW: parameter {p.name} is frozen")
        self.params = list(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = {p.name: np.zeros_like(p.data) for p in self.params}
        self._v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p in self.params:
            if not p.trainable:
                continue
            g = p.tensor.grad
            if g is None:
                g = np.zeros_like(p.data)
            data = p.data * (1.0 - self.lr * self.weight_decay)
            m = self._m[p.name] = self.beta1 * self._m[p.name] + (1.0 - self.beta1) * g
            v = self._v[p.name] = self.beta2 * self._v[p.name] + (1.0 - self.beta2) * (g * g)
            p.tensor.data = data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


class PlateauScheduler:
    """Scale the LR by a fixed factor when the watched loss stops improving.

    Improvement is strict with an absolute tolerance; ties count as no
    improvement.  The patience counter resets after each decay.
    """

    def __init__(self, optimizer, factor=0.3, patience=5, tol=1e-6):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.tol = tol
        self.best = float("inf")
        self.bad_epochs = 0

    def observe(self, value):
        if value < self.best - self.tol:
            self.best = value
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.optimizer.lr *= self.factor
            self.bad_epochs = 0
            return True
        return False


class EarlyStopper:
    """Stop when the watched score has not improved for `patience` epochs."""

    def __init__(self, patience=20, tol=1e-6):
        self.patience = patience
        self.tol = tol
        self.best = float("-inf")
        self.best_epoch = 0
        self.bad_epochs = 0

    def observe(self, value, epoch):
        if value > self.best + self.tol:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self):
        return self.bad_epochs >= self.patience


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float | None = None          # None: 1e-3 for dense plans, 3e-4 for shallow
    weight_decay: float = 1e-3
    plateau_factor: float = 0.3
    plateau_patience: int = 5
    early_stop_patience: int = 20
    lambda_d: float = 1.5
    lambda_ce: float = 1.0
    seed: int = 0
    max_epochs: int = 200
    dice_eps: float = 1.0
    improve_tol: float = 1e-6
    dtype: str = "float32"

    def __post_init__(self):
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError(f"plateau_factor: must be in (0, 1), got {self.plateau_factor}")
        for name in ("plateau_patience", "early_stop_patience", "batch_size", "max_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1, got {getattr(self, name)}")
        for name in ("lambda_d", "lambda_ce"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0, got {getattr(self, name)}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype: expected float32 or float64, got {self.dtype!r}")

    def resolve_lr(self, kind):
        if self.lr is not None:
            return self.lr
        return 1e-3 if kind == "dense" else 3e-4

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"train: unknown fields {sorted(extra)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_dsc: float
    lr: float
    wall_time: float = 0.0


@dataclass
class RunHistory:
    records: list = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = 0
    best_val_dsc: float = 0.0

    def to_jsonl(self):
        # wall_time is measured but kept out of the canonical log so two
        # identical runs serialize to identical bytes
        lines = []
        for r in self.records:
            d = asdict(r)
            d.pop("wall_time")
            lines.append(json.dumps(d, sort_keys=True))
        lines.append(json.dumps(
            {"stop_reason": self.stop_reason, "best_epoch": self.best_epoch,
             "best_val_dsc": self.best_val_dsc}, sort_keys=True))
        return "\n".join(lines) + "\n"


def compute_validation(model, triplets, tokenizer, cfg):
    """Mean loss and mean DSC on a split, prompt index 0, threshold 0.5."""
    losses, dscs = [], []
    for start in range(0, len(triplets), cfg.batch_size):
        chunk = triplets[start : start + cfg.batch_size]
        images = np.stack([t.image for t in chunk])
        masks = np.stack([t.mask for t in chunk]).astype(np.float64)
        ids = [tokenizer.encode(t.prompts[0]) for t in chunk]
        with T.no_grad():
            logits = model.forward(images, ids)
            loss = segmentation_loss(
                logits, masks.astype(logits.dtype),
                lambda_d=cfg.lambda_d, lambda_ce=cfg.lambda_ce, dice_eps=cfg.dice_eps,
            )
        losses.append(loss.item() * len(chunk))
        probs = 1.0 / (1.0 + np.exp(-logits.numpy().astype(np.float64)))
        preds = probs >= 0.5
        for pred, t in zip(preds, chunk):
            dscs.append(dsc_metric(pred.astype(np.uint8), t.mask))
    return sum(losses) / len(triplets), float(np.mean(dscs))


def sample_prompt(rng, prompts):
    """Uniform draw over a sample's prompt list."""
    return prompts[int(rng.integers(len(prompts)))]


def train(model, splits, cfg):
    """Fine-tune the adapters of an AdaptedModel on DatasetSplits.

    Returns (state, history): `state` is a name->array snapshot of the
    full model at the best-validation-DSC epoch (also restored into the
    live model), `history` the per-epoch RunHistory.
    """
    if not splits.train or not splits.val:
        raise ConfigError("data: train and val splits must be non-empty")
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xA11)))
    tokenizer = Tokenizer(model.cfg.vocab_size)
    opt = AdamW(
        model.trainable_parameters(),
        lr=cfg.resolve_lr(model.plan.kind),
        weight_decay=cfg.weight_decay,
    )
    scheduler = PlateauScheduler(
        opt, factor=cfg.plateau_factor, patience=cfg.plateau_patience, tol=cfg.improve_tol)
    stopper = EarlyStopper(patience=cfg.early_stop_patience, tol=cfg.improve_tol)
    dtype = np.float32 if cfg.dtype == "float32" else np.float64

    history = RunHistory()
    best_trainable = {p.name: p.data.copy() for p in model.trainable_parameters()}
    n_train = len(splits.train)

    for epoch in range(1, cfg.max_epochs + 1):
        tic = time.monotonic()
        lr_in_effect = opt.lr
        order = rng.permutation(n_train)
        total, seen = 0.0, 0
        for bi, start in enumerate(range(0, n_train, cfg.batch_size)):
            batch = [splits.train[i] for i in order[start : start + cfg.batch_size]]
            images = np.stack([t.image for t in batch]).astype(dtype)
            masks = np.stack([t.mask for t in batch]).astype(dtype)
            ids = [tokenizer.encode(sample_prompt(rng, t.prompts)) for t in batch]
            logits = model.forward(images, ids)
            loss = segmentation_loss(
                logits, masks, lambda_d=cfg.lambda_d, lambda_ce=cfg.lambda_ce,
                dice_eps=cfg.dice_eps,
            )
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingAbort(
                    f"non-finite loss at epoch {epoch}, batch {bi}, seed {cfg.seed}"
                )
            loss.backward()
            opt.step()
            opt.zero_grad()
            total += value * len(batch)
            seen += len(batch)
        train_loss = total / seen

        val_loss, val_dsc = compute_validation(model, splits.val, tokenizer, cfg)
        history.records.append(EpochRecord(
            epoch=epoch, train_loss=train_loss, val_loss=val_loss,
            val_dsc=val_dsc, lr=lr_in_effect, wall_time=time.monotonic() - tic,
        ))
        log.info(
            "epoch %d: train %.4f val %.4f dsc %.2f lr %.2e",
            epoch, train_loss, val_loss, val_dsc, lr_in_effect,
        )

        if stopper.observe(val_dsc, epoch):
            best_trainable = {p.name: p.data.copy() for p in model.trainable_parameters()}
        scheduler.observe(val_loss)
        if stopper.should_stop:
            history.stop_reason = "early_stop"
            break
    else:
        history.stop_reason = "max_epochs"

    history.best_epoch = stopper.best_epoch
    history.best_val_dsc = stopper.best
    for p in model.trainable_parameters():
        p.tensor.data = best_trainable[p.name].copy()
    state = {name: arr.copy() for name, arr in model.state_arrays().items()}
    return state, history
