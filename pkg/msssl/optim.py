"""
LARS optimizer and the warmup + cosine learning-rate schedule shared by CAE training and pretraining
"""
import math
import typing

import torch
from torch.optim.lr_scheduler import LambdaLR
from torch.optim.optimizer import Optimizer

from .exceptions import ArgumentError

LR_SCALINGS = ('linear', 'none')
REFERENCE_BATCH = 256


class LarsSchedule(typing.Protocol):
    lr: float
    epochs: int
    warmup_epochs: int
    batch_size: int
    lr_scaling: str
    momentum: float
    weight_decay: float
    trust_coefficient: float


class Lars(Optimizer):
    """
    SGD with momentum and layer-wise trust ratio trust * |w| / (|g| + wd * |w|).
    Biases and normalization weights (ndim <= 1) get neither the trust ratio nor weight decay.
    """

    def __init__(
            self,
            params: typing.Iterable,
            lr: float = 1.0,
            momentum: float = 0.9,
            weight_decay: float = 0.0,
            trust_coefficient: float = 0.001,
            eps: float = 1e-8,
    ) -> None:
        if lr < 0.0:
            raise ArgumentError(f'Invalid learning rate: {lr}')

        if momentum < 0.0:
            raise ArgumentError(f'Invalid momentum value: {momentum}')

        if weight_decay < 0.0:
            raise ArgumentError(f'Invalid weight_decay value: {weight_decay}')

        if trust_coefficient <= 0.0:
            raise ArgumentError(f'Invalid trust_coefficient value: {trust_coefficient}')

        defaults = dict(
                lr=lr,
                momentum=momentum,
                weight_decay=weight_decay,
                trust_coefficient=trust_coefficient,
                eps=eps,
        )
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure: typing.Callable = None):
        loss = None

        if closure is not None:
            with torch.enable_grad():
                loss = closure()

        for group in self.param_groups:
            for p in group['params']:
                if p.grad is None:
                    continue

                grad = p.grad

                if p.ndim > 1:
                    grad = grad.add(p, alpha=group['weight_decay'])
                    w_norm = torch.norm(p)
                    g_norm = torch.norm(grad)
                    trust_ratio = torch.where(
                            w_norm > 0,
                            torch.where(g_norm > 0, group['trust_coefficient'] * w_norm / (g_norm + group['eps']), 1.0),
                            1.0,
                    )
                    grad = grad.mul(trust_ratio)

                state = self.state[p]

                if 'momentum_buffer' not in state:
                    state['momentum_buffer'] = torch.clone(grad).detach()
                else:
                    state['momentum_buffer'].mul_(group['momentum']).add_(grad)

                p.add_(state['momentum_buffer'], alpha=-group['lr'])

        return loss


def peak_lr(cfg: LarsSchedule) -> float:
    if cfg.lr_scaling not in LR_SCALINGS:
        raise ArgumentError(f'Unknown lr scaling {cfg.lr_scaling}, expected one of {", ".join(LR_SCALINGS)}')

    if cfg.lr_scaling == 'linear':
        return cfg.lr * cfg.batch_size / REFERENCE_BATCH

    return cfg.lr


def lr_at(step: int, cfg: LarsSchedule, steps_per_epoch: int = 1) -> float:
    """Linear warmup from 0 to the peak rate, then cosine annealing reaching 0 at the final step"""
    total = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch

    if not 0 <= step < total:
        raise ArgumentError(f'Step {step} is out of range 0..{total - 1}')

    if warmup > total:
        raise ArgumentError(f'Warmup of {cfg.warmup_epochs} epochs exceeds {cfg.epochs} epochs')

    peak = peak_lr(cfg)

    if step < warmup:
        return peak * step / warmup

    progress = (step - warmup) / max(total - 1 - warmup, 1)

    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def build_lars(parameters: typing.Iterable, cfg: LarsSchedule, steps_per_epoch: int) -> typing.Tuple[Lars, LambdaLR]:
    # unit base rate, the schedule supplies the absolute value
    optimizer = Lars(
            parameters,
            lr=1.0,
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
            trust_coefficient=cfg.trust_coefficient,
    )
    last = cfg.epochs * steps_per_epoch - 1
    scheduler = LambdaLR(optimizer, lambda step: lr_at(min(step, last), cfg, steps_per_epoch))

    return optimizer, scheduler
