"""Synthetic token-pattern classification tasks.

Every example is ``[TASK_t, c_1 .. c_L, SEP]`` and the model must emit the
answer token (``YES`` or ``NO``) as the next token after ``SEP``.  Four rule
families give the multi-task mixture some heterogeneity; labels are
balanced and train/test splits never share a sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError

SEP = 1
TASK_BASE = 2          # task tokens 2..5
NO, YES = 6, 7
CONTENT_START = 8
KEY = CONTENT_START    # the token "contains" looks for

RULES = ("contains", "majority", "first_low", "last_even")


def content_range(vocab_size):
    return CONTENT_START, vocab_size


def _label(rule, seq, vocab_size):
    lo, hi = content_range(vocab_size)
    mid = (lo + 1 + hi) // 2
    if rule == "contains":
        return bool((seq == KEY).any())
    if rule == "majority":
        return int(((seq > KEY) & (seq < mid)).sum()) > int((seq >= mid).sum())
    if rule == "first_low":
        return bool(seq[0] < mid)
    if rule == "last_even":
        return bool(seq[-1] % 2 == 0)
    raise ContractError(f"unknown rule {rule!r}")


def _sample(rule, want, length, vocab_size, rng):
    lo, hi = content_range(vocab_size)
    if rule == "contains":
        seq = rng.integers(lo + 1, hi, size=length)
        if want:
            seq[rng.integers(length)] = KEY
        return seq
    if rule == "majority":
        # never uses KEY so the two groups always split an odd length
        seq = rng.integers(lo + 1, hi, size=length)
    else:
        seq = rng.integers(lo, hi, size=length)
    while _label(rule, seq, vocab_size) != want:
        seq = rng.integers(lo + 1 if rule == "majority" else lo, hi, size=length)
    return seq


@dataclass
class Batch:
    tokens: np.ndarray     # [B, T] int
    positions: np.ndarray  # [B] index whose next-token prediction is scored
    answers: np.ndarray    # [B] target token ids
    task_ids: np.ndarray   # [B]

    def __len__(self):
        return len(self.answers)

    def take(self, idx):
        return Batch(self.tokens[idx], self.positions[idx], self.answers[idx], self.task_ids[idx])

    @staticmethod
    def concat(batches):
        return Batch(*(np.concatenate([getattr(b, f) for b in batches])
                       for f in ("tokens", "positions", "answers", "task_ids")))


@dataclass
class SynthTask:
    """A deterministic generator of labelled sequences for one rule."""

    task_id: int
    rule: str
    n_train: int = 512
    n_test: int = 128
    length: int = 9

    def __post_init__(self):
        if self.rule not in RULES:
            raise ConfigError("tasks", f"unknown rule {self.rule!r}; expected one of {', '.join(RULES)}")
        if not 0 <= self.task_id < 4:
            raise ConfigError("tasks", "task_id must lie in [0, 4)")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("tasks", "split sizes must be positive")
        if self.rule == "majority" and self.length % 2 == 0:
            raise ConfigError("tasks", "majority needs an odd length")

    @property
    def name(self):
        return self.rule

    @property
    def seq_len(self):
        return self.length + 2

    def generate(self, seed, vocab_size=64):
        """Return ``(train, test)`` batches; identical for identical ``seed``."""
        if vocab_size < CONTENT_START + 8:
            raise ConfigError("backbone.vocab_size", f"synthetic tasks need vocab_size >= {CONTENT_START + 8}")
        rng = np.random.default_rng([seed, self.task_id, 7919])
        total = self.n_train + self.n_test
        seen, rows, labels = set(), [], []
        attempts = 0
        while len(rows) < total:
            attempts += 1
            if attempts > 50 * total:
                raise ContractError(f"task {self.rule}: cannot draw {total} distinct sequences")
            want = len(rows) % 2 == 0
            seq = _sample(self.rule, want, self.length, vocab_size, rng)
            key = seq.tobytes()
            if key in seen:
                continue
            seen.add(key)
            rows.append(seq)
            labels.append(want)
        order = rng.permutation(total)
        content = np.stack(rows)[order]
        ans = np.where(np.asarray(labels)[order], YES, NO)
        n = total
        tokens = np.empty((n, self.seq_len), dtype=np.int64)
        tokens[:, 0] = TASK_BASE + self.task_id
        tokens[:, 1:-1] = content
        tokens[:, -1] = SEP
        batch = Batch(tokens, np.full(n, self.seq_len - 1), ans.astype(np.int64), np.full(n, self.task_id))
        return batch.take(slice(0, self.n_train)), batch.take(slice(self.n_train, n))


def default_tasks(n_train=512, n_test=128, length=9):
    return [SynthTask(i, rule, n_train, n_test, length) for i, rule in enumerate(RULES)]
