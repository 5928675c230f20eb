"""
AdamW with decoupled weight decay, the two-group step schedule and the
training loop.
"""
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import collate, iterate_batches
from .evaluation import evaluate
from .exceptions import ConfigError, ContractError
from .losses import LossConfig, grounding_loss
from .model import BRANCH_GROUP, FUSION_GROUP
from .tensor import Tape

logger = logging.getLogger(__name__)


@dataclass
class AdamWState:
    """Moments per parameter name, mirroring parameter shapes."""
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adamw_step(params, grads, state, lr, weight_decay):
    """
    One bias-corrected Adam update plus decoupled decay θ ← θ − lr·wd·θ.

    `params` is a list of (name, Parameter); `grads` maps parameters to
    arrays; a missing gradient counts as zero. `state.step` must already be
    advanced for this update.
    """
    t = state.step
    if t < 1:
        raise ContractError("advance the optimizer step before applying an update")
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, param in params:
        if not param.requires_grad:
            continue
        grad = grads.get(param)
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise ContractError(f"gradient for '{name}' has shape {grad.shape}, parameter has {param.shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = (state.beta1 * m + (1.0 - state.beta1) * grad).astype(param.data.dtype)
        v = (state.beta2 * v + (1.0 - state.beta2) * grad * grad).astype(param.data.dtype)
        state.first_moment[name], state.second_moment[name] = m, v
        update = (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param.data = (param.data - lr * weight_decay * param.data - lr * update).astype(param.data.dtype)


class AdamW:
    """Optimizer over named parameter groups, each with its own learning rate."""

    def __init__(self, groups, lrs, weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8):
        missing = set(groups) - set(lrs)
        if missing:
            raise ConfigError(f"no learning rate given for groups {sorted(missing)}")
        self.groups = groups
        self.lrs = dict(lrs)
        self.weight_decay = weight_decay
        self.state = AdamWState(beta1=betas[0], beta2=betas[1], eps=eps)

    def named_parameters(self):
        for params in self.groups.values():
            yield from params

    def step(self, grads):
        self.state.step += 1
        for group, params in self.groups.items():
            adamw_step(params, grads, self.state, self.lrs[group], self.weight_decay)


@dataclass(frozen=True)
class Schedule:
    """
    Per-group base learning rates dropped by `drop_factor` from `drop_epoch` on.

    The defaults are tuned desk values: both groups train from scratch here, so
    they share one raised rate. `full_scale()` keeps 1e-4 / 1e-5 for the
    pretrained-branch setting.
    """
    lr_fusion: float = 1e-3
    lr_branch: float = 1e-3
    drop_epoch: int = 30
    drop_factor: float = 10.0
    total_epochs: int = 40

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be at least 1")
        if not 0 <= self.drop_epoch < self.total_epochs:
            raise ConfigError(f"drop_epoch {self.drop_epoch} must lie in [0, {self.total_epochs})")
        if self.lr_fusion <= 0 or self.lr_branch <= 0 or self.drop_factor <= 0:
            raise ConfigError("learning rates and drop factor must be positive")

    @classmethod
    def full_scale(cls):
        return cls(lr_fusion=1e-4, lr_branch=1e-5, drop_epoch=60, drop_factor=10.0, total_epochs=90)

    def base_lr(self, group):
        if group == FUSION_GROUP:
            return self.lr_fusion
        if group == BRANCH_GROUP:
            return self.lr_branch
        raise ContractError(f"unknown parameter group '{group}'")


def lr_at_epoch(schedule, group, epoch):
    if not 0 <= epoch < schedule.total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    base = schedule.base_lr(group)
    return base if epoch < schedule.drop_epoch else base / schedule.drop_factor


def clip_gradients(grads, max_norm):
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    factor = max_norm / total
    return {param: g * factor for param, g in grads.items()}


@dataclass
class EpochRecord:
    epoch: int
    lr_fusion: float
    lr_branch: float
    loss: float
    l1_term: float
    giou_term: float
    val_acc: float

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]


@dataclass
class FitResult:
    log: list
    model: object
    optimizer: AdamW
    steps: int


def fit(model, train_samples, vocab, schedule, batch_size, seed, loss_cfg=None, val_samples=None,
        optimizer=None, start_epoch=0, weight_decay=1e-4, grad_clip=0.0, on_epoch=None):
    """
    Train for epochs start_epoch .. total_epochs - 1.

    Shuffling and dropout draw from generators seeded by (seed, epoch), so a
    resumed run replays the same batches as an uninterrupted one.
    """
    if not train_samples:
        raise ContractError("cannot train on an empty dataset")
    loss_cfg = loss_cfg or LossConfig()
    if optimizer is None:
        optimizer = AdamW(
            model.param_groups(),
            {group: schedule.base_lr(group) for group in (BRANCH_GROUP, FUSION_GROUP)},
            weight_decay=weight_decay,
        )

    log = []
    steps = 0
    for epoch in range(start_epoch, schedule.total_epochs):
        for group in optimizer.groups:
            optimizer.lrs[group] = lr_at_epoch(schedule, group, epoch)
        shuffle_rng = np.random.default_rng([seed, epoch, 0])
        dropout_rng = np.random.default_rng([seed, epoch, 1])

        model.train()
        totals = np.zeros(3)
        seen = 0
        for samples in iterate_batches(train_samples, batch_size, shuffle_rng):
            batch = collate(samples, vocab, model.config)
            with Tape() as tape:
                prediction = model(batch, dropout_rng)
                losses = grounding_loss(prediction.boxes, batch.boxes, loss_cfg)
            grads = tape.backward(losses.total)
            if grad_clip > 0:
                grads = clip_gradients(grads, grad_clip)
            optimizer.step(grads)
            steps += 1
            totals += len(batch) * np.array([losses.total.item(), losses.l1_term, losses.giou_term])
            seen += len(batch)

        mean_loss, mean_l1, mean_giou = totals / seen
        val_acc = evaluate(model, val_samples, vocab, batch_size).accuracy if val_samples else float('nan')
        record = EpochRecord(
            epoch=epoch,
            lr_fusion=optimizer.lrs[FUSION_GROUP],
            lr_branch=optimizer.lrs[BRANCH_GROUP],
            loss=float(mean_loss),
            l1_term=float(mean_l1),
            giou_term=float(mean_giou),
            val_acc=val_acc,
        )
        if not math.isfinite(record.loss):
            logger.warning(f"Epoch {epoch}: loss is not finite")
        logger.info(
            f"Epoch {epoch}: loss={record.loss:.4f} l1={record.l1_term:.4f} giou={record.giou_term:.4f} "
            f"lr_fusion={record.lr_fusion:.2e} lr_branch={record.lr_branch:.2e} val_acc={record.val_acc:.4f}"
        )
        log.append(record)
        if on_epoch is not None:
            on_epoch(record, optimizer)
    return FitResult(log, model, optimizer, steps)


def write_training_log(path, records, append=False):
    """Write epoch records as CSV: epoch, lr_fusion, lr_branch, loss, l1_term, giou_term, val_acc."""
    mode = 'a' if append else 'w'
    with open(path, mode, newline='', encoding='utf-8') as handle:
        writer = csv.DictWriter(handle, fieldnames=EpochRecord.columns())
        if not append or handle.tell() == 0:
            writer.writeheader()
        for record in records:
            writer.writerow(asdict(record))


def read_training_log(path):
    with open(path, newline='', encoding='utf-8') as handle:
        return [
            EpochRecord(epoch=int(row['epoch']), **{k: float(v) for k, v in row.items() if k != 'epoch'})
            for row in csv.DictReader(handle)
        ]
