#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Training Service - Сервис обучения

AdamW with decoupled weight decay, global-norm gradient clipping, a triangular
learning-rate schedule and a mini-batch loop over the toy dataset.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from app.core import ops
from app.core.errors import ConfigError, ContractError, DimensionError, NumericError, \
    TrainingDivergedError
from app.core.rng import Rng
from app.core.tensor import Tape, Tensor
from app.models.davit import DaViT
from app.models.layers import Mode
from app.services.toy_data import ToyDataset
from app.utils.export_manager import ReportExporter

logger = logging.getLogger(__name__)

SCHEDULES = ("triangular", "constant")


@dataclass
class TrainHyperparams:
    """
    Optimisation recipe
    Параметры обучения
    """
    epochs: int = 30
    batch_size: int = 32
    peak_lr: float = 2e-3
    floor_lr: float = 0.0
    peak_fraction: float = 0.5
    weight_decay: float = 0.05
    max_grad_norm: float = 1.0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    schedule: str = "triangular"
    decay_exclude_1d: bool = True
    eval_batch_size: int = 64
    progress: bool = True

    def validate(self) -> "TrainHyperparams":
        if self.epochs < 1 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("epochs and batch sizes must be >= 1")
        if self.peak_lr < 0 or self.floor_lr < 0:
            raise ConfigError("learning rates must be >= 0")
        if not 0.0 <= self.peak_fraction <= 1.0:
            raise ConfigError(f"peak_fraction must lie in [0, 1], got {self.peak_fraction}")
        if self.max_grad_norm <= 0:
            raise ConfigError(f"max_grad_norm must be > 0, got {self.max_grad_norm}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got '{self.schedule}'")
        self.betas = tuple(self.betas)
        return self


@dataclass
class AdamWState:
    """Moments are keyed by parameter name and mirror parameter shapes"""
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    decay_exclude_1d: bool = True
    step: int = 0
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_hyperparams(cls, hp: TrainHyperparams) -> "AdamWState":
        return cls(lr=hp.peak_lr, betas=tuple(hp.betas), eps=hp.eps, weight_decay=hp.weight_decay,
                   decay_exclude_1d=hp.decay_exclude_1d)


@dataclass
class TriangularSchedule:
    peak_lr: float
    total_steps: int
    peak_fraction: float = 0.5
    floor_lr: float = 0.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError(f"schedule needs at least one step, got {self.total_steps}")
        if not 0.0 <= self.peak_fraction <= 1.0:
            raise ConfigError(f"peak_fraction must lie in [0, 1], got {self.peak_fraction}")

    @property
    def peak_step(self) -> float:
        return self.peak_fraction * self.total_steps


def triangular_lr(schedule: TriangularSchedule, step: int) -> float:
    """Piecewise linear floor -> peak -> floor over ``0..total_steps``"""
    if not 0 <= step <= schedule.total_steps:
        raise ContractError(f"step {step} outside schedule range 0..{schedule.total_steps}")
    rise = schedule.peak_lr - schedule.floor_lr
    peak = schedule.peak_step
    if step <= peak:
        fraction = step / peak if peak > 0 else 1.0
    else:
        fraction = (schedule.total_steps - step) / (schedule.total_steps - peak)
    return schedule.floor_lr + rise * fraction


def clip_grad_global_norm(grads: Dict[str, np.ndarray],
                          max_norm: float = 1.0) -> Tuple[Dict[str, np.ndarray], float]:
    """Scale every gradient by ``max_norm / norm`` when the global L2 norm exceeds ``max_norm``"""
    if max_norm <= 0:
        raise ContractError(f"max_norm must be > 0, got {max_norm}")
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if not norm > max_norm:
        return grads, norm
    factor = max_norm / norm
    return {name: (g * factor).astype(g.dtype, copy=False) for name, g in grads.items()}, norm


def _decays(param: Tensor, state: AdamWState) -> bool:
    return state.weight_decay > 0 and not (state.decay_exclude_1d and param.ndim <= 1)


def adamw_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray],
               state: AdamWState) -> Dict[str, Tensor]:
    """
    One AdamW update in place.

    All gradients are checked before any parameter moves, so a non-finite
    gradient leaves both parameters and state untouched.
    """
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            raise ContractError(f"no gradient for parameter '{name}'")
        if grad.shape != param.shape:
            raise DimensionError.mismatch(f"adamw_step '{name}'", param.shape, grad.shape)
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient for '{name}' at step {state.step + 1}")

    state.step += 1
    beta1, beta2 = state.betas
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, param in params.items():
        grad = grads[name].astype(np.float64)
        m = state.exp_avg.get(name)
        v = state.exp_avg_sq.get(name)
        if m is None:
            m = np.zeros(param.shape)
            v = np.zeros(param.shape)
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.exp_avg[name] = m
        state.exp_avg_sq[name] = v

        value = param.data.astype(np.float64)
        if _decays(param, state):
            value = value - state.lr * state.weight_decay * value
        value = value - state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param.assign(value)
    return params


def _plain(value: Any) -> Any:
    """numpy containers to JSON-ready Python values"""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


@dataclass
class TrainState:
    """Optimizer state plus the random stream position"""
    optimizer: AdamWState
    rng_state: Dict[str, Any] = field(default_factory=dict)
    epoch: int = 0

    @property
    def step(self) -> int:
        return self.optimizer.step

    def to_dict(self, include_moments: bool = False) -> Dict[str, Any]:
        data = {
            "step": self.optimizer.step,
            "epoch": self.epoch,
            "lr": self.optimizer.lr,
            "betas": list(self.optimizer.betas),
            "eps": self.optimizer.eps,
            "weight_decay": self.optimizer.weight_decay,
            "decay_exclude_1d": self.optimizer.decay_exclude_1d,
            "rng_state": _plain(self.rng_state),
        }
        if include_moments:
            data["exp_avg"] = {k: v.tolist() for k, v in self.optimizer.exp_avg.items()}
            data["exp_avg_sq"] = {k: v.tolist() for k, v in self.optimizer.exp_avg_sq.items()}
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainState":
        optimizer = AdamWState(lr=data["lr"], betas=tuple(data["betas"]), eps=data["eps"],
                               weight_decay=data["weight_decay"],
                               decay_exclude_1d=data.get("decay_exclude_1d", True),
                               step=data["step"])
        optimizer.exp_avg = {k: np.asarray(v) for k, v in data.get("exp_avg", {}).items()}
        optimizer.exp_avg_sq = {k: np.asarray(v) for k, v in data.get("exp_avg_sq", {}).items()}
        return cls(optimizer, data.get("rng_state", {}), data.get("epoch", 0))


@dataclass
class TrainLog:
    """Step and epoch records in the order they happened"""
    records: List[Dict[str, Any]] = field(default_factory=list)

    def add_step(self, step: int, epoch: int, lr: float, loss: float, accuracy: float,
                 grad_norm: float):
        self.records.append({"kind": "step", "step": step, "epoch": epoch, "lr": lr,
                             "loss": loss, "accuracy": accuracy, "grad_norm": grad_norm})

    def add_epoch(self, epoch: int, train_loss: float, train_accuracy: float,
                  test_accuracy: Optional[float]):
        self.records.append({"kind": "epoch", "epoch": epoch, "train_loss": train_loss,
                             "train_accuracy": train_accuracy, "test_accuracy": test_accuracy})

    @property
    def steps(self) -> List[Dict[str, Any]]:
        return [r for r in self.records if r["kind"] == "step"]

    @property
    def epochs(self) -> List[Dict[str, Any]]:
        return [r for r in self.records if r["kind"] == "epoch"]

    @property
    def final_test_accuracy(self) -> Optional[float]:
        epochs = self.epochs
        return epochs[-1]["test_accuracy"] if epochs else None

    def to_jsonl(self) -> str:
        return ReportExporter().export_to_jsonl(self.records)

    def write(self, path: Union[str, Path]) -> Path:
        ReportExporter().export_train_log(self, path)
        return Path(path)


def predict(model: DaViT, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode logits ``[N, num_classes]``"""
    outputs = []
    for start in range(0, images.shape[0], batch_size):
        batch = Tensor(images[start:start + batch_size], dtype=model.dtype)
        outputs.append(np.array(model(batch, Mode.EVAL).data))
    if not outputs:
        return np.zeros((0, model.config.num_classes), dtype=model.dtype)
    return np.concatenate(outputs, axis=0)


def evaluate(model: DaViT, images: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> float:
    """Eval-mode top-1 accuracy"""
    if images.shape[0] != labels.shape[0]:
        raise DimensionError.mismatch("evaluate", images.shape, labels.shape)
    if labels.size == 0:
        return 0.0
    predictions = predict(model, images, batch_size).argmax(axis=1)
    return float((predictions == labels).mean())


def _gradients(params: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    return {name: p.grad if p.grad is not None else np.zeros_like(p.data)
            for name, p in params.items()}


class Trainer:
    """
    Mini-batch trainer for the backbone
    Тренер для мини-пакетного обучения
    """

    def __init__(self, model: DaViT, hyperparams: TrainHyperparams, rng: Rng):
        self.logger = logging.getLogger(__name__)
        self.model = model
        self.hp = hyperparams.validate()
        self.rng = rng
        self.state = TrainState(AdamWState.from_hyperparams(hyperparams))
        self.params = model.parameters()
        self.log = TrainLog()

    def _lr(self, schedule: Optional[TriangularSchedule], step: int) -> float:
        if schedule is None:
            return self.hp.peak_lr
        return triangular_lr(schedule, step)

    def train_step(self, images: np.ndarray, labels: np.ndarray, lr: float, mode: Mode):
        step = self.state.step + 1
        self.model.zero_grad()
        try:
            with Tape() as tape:
                logits = self.model(Tensor(images, dtype=self.model.dtype), mode, self.rng)
                loss = ops.cross_entropy(logits, labels)
            tape.backward(loss)
            grads, norm = clip_grad_global_norm(_gradients(self.params), self.hp.max_grad_norm)
            self.state.optimizer.lr = lr
            adamw_step(self.params, grads, self.state.optimizer)
        except NumericError as exc:
            raise TrainingDivergedError(step, str(exc)) from exc
        accuracy = float((logits.data.argmax(axis=1) == labels).mean())
        return loss.item(), accuracy, norm

    def fit(self, dataset: ToyDataset) -> TrainLog:
        images, labels = dataset.train_images, dataset.train_labels
        n = labels.shape[0]
        steps_per_epoch = math.ceil(n / self.hp.batch_size)
        total_steps = steps_per_epoch * self.hp.epochs
        schedule = None
        if self.hp.schedule == "triangular":
            schedule = TriangularSchedule(self.hp.peak_lr, total_steps, self.hp.peak_fraction,
                                          self.hp.floor_lr)
        self.logger.info(f"training {self.model.config.name}: {self.hp.epochs} epochs x "
                         f"{steps_per_epoch} steps, batch {self.hp.batch_size}")

        for epoch in range(1, self.hp.epochs + 1):
            order = self.rng.permutation(n)
            losses, correct = [], 0.0
            batches = range(0, n, self.hp.batch_size)
            progress = tqdm(batches, desc=f"epoch {epoch}/{self.hp.epochs}", unit="batch",
                            disable=not self.hp.progress, leave=False)
            for start in progress:
                index = order[start:start + self.hp.batch_size]
                lr = self._lr(schedule, self.state.step + 1)
                loss, accuracy, norm = self.train_step(images[index], labels[index], lr, Mode.TRAIN)
                losses.append(loss * index.size)
                correct += accuracy * index.size
                self.log.add_step(self.state.step, epoch, lr, loss, accuracy, norm)
                self.logger.debug(f"step {self.state.step}: lr={lr:.3g} loss={loss:.4f} "
                                  f"acc={accuracy:.3f} |g|={norm:.3f}")
                progress.set_postfix(loss=f"{loss:.4f}")

            self.state.epoch = epoch
            train_loss = sum(losses) / n
            test_accuracy = None
            if dataset.test_labels.size:
                test_accuracy = evaluate(self.model, dataset.test_images, dataset.test_labels,
                                         self.hp.eval_batch_size)
            self.log.add_epoch(epoch, train_loss, correct / n, test_accuracy)
            self.logger.info(f"epoch {epoch}: loss {train_loss:.4f}, train acc {correct / n:.3f}, "
                             f"test acc {test_accuracy if test_accuracy is not None else 'n/a'}")
        self.state.rng_state = self.rng.state
        return self.log


def train_loop(model: DaViT, dataset: ToyDataset, hyperparams: TrainHyperparams,
               rng: Rng) -> TrainLog:
    """Train ``model`` in place; drop path is active during steps, evaluation runs in eval mode"""
    return Trainer(model, hyperparams, rng).fit(dataset)


def overfit_batch(model: DaViT, images: np.ndarray, labels: np.ndarray, steps: int = 200,
                  lr: float = 2e-3, target_loss: Optional[float] = None) -> List[float]:
    """
    Repeated full-batch steps on one batch without decay or drop path.

    Returns the loss before each step; stops early once ``target_loss`` is reached.
    """
    hp = TrainHyperparams(epochs=1, batch_size=max(1, labels.shape[0]), peak_lr=lr,
                          weight_decay=0.0, schedule="constant", progress=False)
    trainer = Trainer(model, hp, Rng(0))
    losses = []
    for _ in range(steps):
        loss, _, _ = trainer.train_step(images, labels, lr, Mode.EVAL)
        losses.append(loss)
        if target_loss is not None and loss < target_loss:
            break
    return losses
