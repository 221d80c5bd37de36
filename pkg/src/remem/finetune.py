"""Teacher fine-tuning: cross-entropy with SGD-momentum or SAM, plus checkpoints."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import NumericError
from .nn import ReMemConfig, VitModel, accuracy, forward, predict
from .optim import SamConfig, Schedule, SgdState, sam_step, sgd_step, zero_grad
from .seeding import derive_seed


@dataclass
class FinetuneConfig:
    steps: int = 600
    lr: float = 0.05
    warmup_steps: int = 50
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64
    rho: float = 0.0
    ckpt_steps: Sequence[int] = ()


@dataclass
class FinetuneResult:
    model: VitModel
    checkpoints: dict = field(default_factory=dict)  # step -> state dict
    trace: list = field(default_factory=list)  # (step, loss)


def finetune(model: VitModel, remem: ReMemConfig | None, train: Dataset, cfg: FinetuneConfig,
             seed: int = 0) -> FinetuneResult:
    """Fine-tune ``model`` in place on ``train`` with the interventions in ``remem`` active."""
    remem = remem or ReMemConfig()
    rng = np.random.default_rng(derive_seed(seed, "finetune-batches"))
    opt = SgdState(Schedule(cfg.lr, min(cfg.warmup_steps, cfg.steps), max(cfg.steps, 1)),
                   cfg.momentum, cfg.weight_decay)
    sam = SamConfig(cfg.rho)
    params = model.parameters()
    res = FinetuneResult(model)
    if 0 in cfg.ckpt_steps:
        res.checkpoints[0] = model.state_dict()
    n = len(train)
    bs = min(cfg.batch_size, n)
    order, cursor = rng.permutation(n), 0
    for step in range(1, cfg.steps + 1):
        if cursor + bs > n:
            order, cursor = rng.permutation(n), 0
        idx = order[cursor:cursor + bs]
        cursor += bs
        xb, yb = train.images[idx], train.labels[idx]

        def loss_fn():
            return T.cross_entropy(forward(model, remem, xb).logits, yb)

        if cfg.rho > 0:
            loss = sam_step(sam, opt, params, loss_fn, step).loss
        else:
            zero_grad(params)
            out = loss_fn()
            loss = out.item()
            if not np.isfinite(loss):
                raise NumericError(f"non-finite fine-tuning loss at step {step}")
            T.backward(out)
            # blocks pruned away receive no gradient
            grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
            sgd_step(opt, params, grads, step=step)
            zero_grad(params)
        res.trace.append((step, loss))
        if step in cfg.ckpt_steps:
            res.checkpoints[step] = model.state_dict()
    return res


def evaluate(model: VitModel, remem: ReMemConfig | None, dataset: Dataset) -> float:
    return accuracy(predict(model, remem, dataset.images), dataset.labels)


class VitTeacher:
    """Picklable frozen teacher: images -> logits."""

    def __init__(self, model: VitModel, remem: ReMemConfig | None = None):
        self.model = model
        self.remem = remem

    def __call__(self, images: np.ndarray) -> np.ndarray:
        return predict(self.model, self.remem, images)
