"""Supervised fine-tuning of the adapters on synthetic tasks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, FrozenWeightError, NonFiniteLossError, NumericError
from .router import load_balance_penalty
from .tasks import Batch
from .tensor import backward, cross_entropy, no_grad


@dataclass
class TrainConfig:
    """Optimizer and schedule settings.

    The defaults are the large-model recipe (AdamW, lr 2e-4, 16 x 8
    accumulation, 2 epochs, dropout 0.05).  :meth:`desk` returns the
    settings used for the toy backbone, which needs far fewer, larger steps.
    """

    lr: float = 2e-4
    batch_size: int = 16
    accumulation_steps: int = 8
    epochs: int = 2
    dropout: float = 0.05
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seeds: tuple = (0,)
    audit_every: int = 25
    eval_batch: int = 256
    schedule: str = "constant"

    @classmethod
    def desk(cls, **overrides):
        values = dict(lr=3e-3, batch_size=16, accumulation_steps=1, epochs=3, schedule="linear")
        values.update(overrides)
        return cls(**values)

    def validate(self):
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ConfigError("train.lr", "must be a finite non-negative number")
        for name in ("batch_size", "accumulation_steps", "epochs", "audit_every", "eval_batch"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"train.{name}", "must be a positive integer")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("train.dropout", "must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay", "must be non-negative")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError("train.betas", "need two values in [0, 1)")
        if not self.seeds:
            raise ConfigError("train.seeds", "need at least one seed")
        if self.schedule not in ("constant", "linear"):
            raise ConfigError("train.schedule", "must be 'constant' or 'linear'")

    def lr_at(self, step, total_steps):
        """Learning rate for 1-based optimizer ``step``; ``linear`` decays to zero."""
        if self.schedule == "linear":
            return self.lr * max(0.0, 1.0 - (step - 1) / max(total_steps, 1))
        return self.lr


class AdamW:
    """Adam with decoupled weight decay over a list of tensors."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        if self.lr == 0.0:
            return
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def sft_loss(model, batch, training=False):
    """Mean cross-entropy of the answer tokens; no orthogonality penalty."""
    if len(batch) == 0:
        raise ContractError("sft_loss needs a non-empty batch")
    logits = model(batch.tokens, positions=batch.positions, training=training)
    return cross_entropy(logits, batch.answers)


def evaluate(model, batch, chunk=256):
    """Exact-match accuracy of the argmax answer token."""
    hits = 0
    with no_grad():
        for s in range(0, len(batch), chunk):
            part = batch.take(slice(s, s + chunk))
            logits = model(part.tokens, positions=part.positions).data
            hits += int((logits.argmax(axis=-1) == part.answers).sum())
    return hits / len(batch)


@dataclass
class TrainHistory:
    task_names: list
    losses: list = field(default_factory=list)      # (step, loss)
    evals: list = field(default_factory=list)       # (step, {task: acc})
    degenerate_tokens: int = 0

    @property
    def steps(self):
        return len(self.losses)

    @property
    def final_accuracy(self):
        return dict(self.evals[-1][1]) if self.evals else {}

    @property
    def final_loss(self):
        return self.losses[-1][1] if self.losses else float("nan")

    def write_csv(self, path):
        evals = dict(self.evals)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"] + [f"acc_{t}" for t in self.task_names])
            for step, loss in self.losses:
                accs = evals.get(step)
                w.writerow([step, repr(float(loss))] + ([repr(float(accs[t])) for t in self.task_names]
                                                        if accs else [""] * len(self.task_names)))


def _grad_norms(model):
    out = {}
    for name, ad in model.adapters():
        sq = sum(float(np.sum(p.grad * p.grad)) for p in ad.parameters() if p.grad is not None)
        out[name] = math.sqrt(sq)
    return out


def _raise_nonfinite(model, step):
    norms = _grad_norms(model)
    bad = None
    for name, ad in model.adapters():
        if not all(np.isfinite(p.data).all() for p in ad.parameters()) or not math.isfinite(norms[name]):
            bad = name
            break
    raise NonFiniteLossError(step, bad, norms)


def train(model, tasks, cfg, seed=None, log=None):
    """Fine-tune ``model``'s adapters on the mixture of ``tasks``.

    Returns a :class:`TrainHistory` with one loss per optimizer step and the
    per-task test accuracy after every epoch.  Frozen weights are audited
    every ``cfg.audit_every`` steps.
    """
    cfg.validate()
    seed = cfg.seeds[0] if seed is None else seed
    vocab = model.cfg.vocab_size
    splits = [t.generate(seed, vocab) for t in tasks]
    train_set = Batch.concat([s[0] for s in splits])
    names = [t.name for t in tasks]

    params = model.parameters()
    opt = AdamW(params, cfg.lr, cfg.betas, cfg.adam_eps, cfg.weight_decay)
    adapters = [ad for _, ad in model.adapters()]
    balanced = [ad for ad in adapters if ad.balance_coef > 0]
    for ad in balanced:
        ad.track_gates = True
    fingerprint = model.frozen_fingerprint()
    rng = np.random.default_rng([seed, 104729])
    hist = TrainHistory(names)
    micro = cfg.batch_size
    per_step = micro * cfg.accumulation_steps
    total_steps = cfg.epochs * math.ceil(len(train_set) / per_step)
    step = 0

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        for s in range(0, len(order), per_step):
            chunk = order[s:s + per_step]
            parts = [chunk[i:i + micro] for i in range(0, len(chunk), micro)]
            opt.zero_grad()
            total = 0.0
            for idx in parts:
                batch = train_set.take(idx)
                try:
                    loss = sft_loss(model, batch, training=True)
                except NumericError:
                    _raise_nonfinite(model, step + 1)
                for ad in balanced:
                    loss = loss + ad.balance_coef * load_balance_penalty(ad.last_gates)
                weight = len(idx) / len(chunk)
                value = loss.item()
                if not math.isfinite(value):
                    _raise_nonfinite(model, step + 1)
                backward(loss * weight)
                total += value * weight
            opt.lr = cfg.lr_at(step + 1, total_steps)
            opt.step()
            step += 1
            hist.losses.append((step, total))
            if step % cfg.audit_every == 0 and model.frozen_fingerprint() != fingerprint:
                raise FrozenWeightError(f"frozen weights changed by step {step}")
            if log is not None:
                log(step, total)
        accs = {n: evaluate(model, s[1], cfg.eval_batch) for n, s in zip(names, splits)}
        hist.evals.append((step, accs))
    if model.frozen_fingerprint() != fingerprint:
        raise FrozenWeightError("frozen weights changed during training")
    hist.degenerate_tokens = sum(ad.degenerate_tokens for ad in adapters)
    return hist
