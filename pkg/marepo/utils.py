import collections
import math
import os

import numpy as np
import torch
from torch import nn, optim

from errors import EmptySequence


def update_metrics(metrics, new_metrics, prefix=''):
    """Adds scalar metrics (numbers or detached one-element tensors) under `prefix + key`."""
    for key, value in new_metrics.items():
        if torch.is_tensor(value):
            assert value.numel() == 1 and not value.requires_grad, key
            value = value.detach().clone()
        metrics[prefix + key] = value
    return metrics


class MetricsSummarizer:
    """Collects per-step metric dicts and averages them on `summarize`; `except_keys` keep their last value."""

    def __init__(self, except_keys=()):
        self.history = collections.defaultdict(list)
        self.except_keys = set(except_keys)

    def append(self, metrics):
        for key, value in metrics.items():
            self.history[key].append(value)

    def summarize(self):
        summary = {}
        for key, values in self.history.items():
            if key in self.except_keys:
                summary[key] = values[-1]
            else:
                summary[key] = torch.stack([torch.as_tensor(v, dtype=torch.float64) for v in values]).mean()
        self.history = collections.defaultdict(list)
        return summary


def to_scalars(metrics):
    return {key: float(value) for key, value in metrics.items()}


def median(values):
    """Median of a non-empty sequence; the mean of the two middle values for even lengths."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise EmptySequence('Median of an empty sequence')
    return float(np.median(values))


def one_cycle_lr(step, total_steps, lr_min, lr_max, warmup_frac=0.3):
    """Linear warmup lr_min -> lr_max, then cosine annealing to lr_min / 10. Step 0 is always lr_min."""
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step < warmup:
        return lr_min + (lr_max - lr_min) * step / warmup
    progress = min(1.0, (step - warmup) / max(1, total_steps - 1 - warmup))
    lr_end = lr_min / 10
    return lr_end + 0.5 * (lr_max - lr_end) * (1 + math.cos(math.pi * progress))


class AdamWOptim:
    """AdamW with optional gradient clipping; `lr_schedule(step)` drives a LambdaLR scheduler."""

    def __init__(self, parameters, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0, grad_clip=0,
                 lr_schedule=None):
        self.parameters = list(parameters)
        self.grad_clip = grad_clip
        self.optimizer = optim.AdamW(self.parameters, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        self.scheduler = None
        if lr_schedule is not None:
            self.scheduler = optim.lr_scheduler.LambdaLR(self.optimizer, lambda step: lr_schedule(step) / lr)
        self.num_steps = 0

    @staticmethod
    def from_config(parameters, config, total_steps=None, lr=None):
        if lr is None:
            lr_min, lr_max = config['optim_lr_min'], config['optim_lr_max']
            schedule = lambda step: one_cycle_lr(step, total_steps, lr_min, lr_max)
            lr = lr_max
        else:
            schedule = None
        return AdamWOptim(
            parameters, lr, betas=(config['optim_beta1'], config['optim_beta2']), eps=config['optim_eps'],
            weight_decay=config['optim_wd'], grad_clip=config['optim_grad_clip'], lr_schedule=schedule)

    @property
    def lr(self):
        return self.optimizer.param_groups[0]['lr']

    def apply_gradients(self, grads):
        """Applies precomputed gradients given as (parameter, tensor) pairs."""
        for p, g in grads:
            p.grad = g.detach().to(p.dtype).clone()
        if self.grad_clip > 0:
            nn.utils.clip_grad_norm_(self.parameters, self.grad_clip)
        self.optimizer.step()
        if self.scheduler is not None:
            self.scheduler.step()
        self.num_steps += 1


def adamw_step(model, grads, optimizer):
    """One optimizer step from a {parameter name: gradient} mapping, as produced by compute_gradients."""
    params = dict(model.named_parameters())
    missing = set(params) - set(grads)
    if missing:
        raise KeyError(f'Missing gradients for {sorted(missing)}')
    optimizer.apply_gradients([(params[name], grads[name]) for name in params])
    return model


def num_workers():
    threads = os.environ.get('MAREPO_THREADS')
    if threads:
        return max(1, int(threads))
    return os.cpu_count() or 1


def sample_rng(seed, *keys):
    """Independent generator for (seed, split, index, ...) so results do not depend on scheduling."""
    return np.random.default_rng([int(seed)] + [int(k) for k in keys])
