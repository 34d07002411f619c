import math

import numpy as np
import pytest

from omoe.backbone import AdapterConfig, BackboneConfig, InjectionSpec, build_backbone, inject_adapters
from omoe.errors import ConfigError, ContractError, FrozenWeightError, NonFiniteLossError
from omoe.tasks import CONTENT_START, KEY, NO, RULES, SEP, TASK_BASE, YES, Batch, SynthTask, default_tasks
from omoe.tensor import Tensor, cross_entropy
from omoe.train import AdamW, TrainConfig, evaluate, sft_loss, train

BB = BackboneConfig(n_layers=2, d_model=16, n_heads=2, vocab_size=32, max_seq=16)


def label_oracle(rule, content, vocab):
    mid = (CONTENT_START + 1 + vocab) // 2
    c = list(content)
    if rule == "contains":
        return KEY in c
    if rule == "majority":
        return sum(KEY < t < mid for t in c) > sum(t >= mid for t in c)
    if rule == "first_low":
        return c[0] < mid
    return c[-1] % 2 == 0


@pytest.mark.parametrize("rule", RULES)
def test_task_generation(rule):
    task = SynthTask(RULES.index(rule), rule, n_train=60, n_test=20)
    train_b, test_b = task.generate(3, vocab_size=32)
    both = Batch.concat([train_b, test_b])
    assert len(train_b) == 60 and len(test_b) == 20
    assert np.all(both.tokens[:, 0] == TASK_BASE + task.task_id)
    assert np.all(both.tokens[:, -1] == SEP)
    assert np.all(both.positions == task.seq_len - 1)
    assert np.sum(both.answers == YES) == np.sum(both.answers == NO) == 40
    for row, ans in zip(both.tokens, both.answers):
        assert label_oracle(rule, row[1:-1], 32) == (ans == YES)
    seqs = {r.tobytes() for r in both.tokens}
    assert len(seqs) == 80
    assert not {r.tobytes() for r in train_b.tokens} & {r.tobytes() for r in test_b.tokens}
    again = task.generate(3, vocab_size=32)[0]
    np.testing.assert_array_equal(again.tokens, train_b.tokens)


def test_task_validation():
    with pytest.raises(ConfigError):
        SynthTask(0, "parity")
    with pytest.raises(ConfigError):
        SynthTask(1, "majority", length=4)
    with pytest.raises(ConfigError):
        SynthTask(0, "contains").generate(0, vocab_size=10)


def small_model(seed=0, **adapter):
    base = build_backbone(BB)
    cfg = dict(rank=2, alpha=4)
    cfg.update(adapter)
    return inject_adapters(base, InjectionSpec(targets=("Q", "V")), AdapterConfig(**cfg), seed=seed)


def test_sft_loss_values():
    m = small_model()
    empty = Batch(np.zeros((0, 5), int), np.zeros(0, int), np.zeros(0, int), np.zeros(0, int))
    with pytest.raises(ContractError):
        sft_loss(m, empty)
    # the hand oracle: two examples, two classes
    logits = Tensor([[2.0, 0.0], [0.0, 1.0]])
    expect = (math.log(1 + math.exp(-2)) + math.log(1 + math.exp(-1))) / 2
    assert abs(cross_entropy(logits, [0, 1]).item() - expect) < 1e-15


def test_zero_lr_leaves_weights_bitwise():
    m = small_model()
    before = [p.data.copy() for p in m.parameters()]
    tasks = [SynthTask(0, "contains", 32, 8)]
    hist = train(m, tasks, TrainConfig.desk(lr=0.0, epochs=1, dropout=0.0))
    assert hist.steps == 2
    for a, p in zip(before, m.parameters()):
        assert a.tobytes() == p.data.tobytes()


def test_training_reduces_loss_and_keeps_base_frozen():
    m = small_model()
    fp = m.frozen_fingerprint()
    tasks = [SynthTask(0, "contains", 64, 16), SynthTask(2, "first_low", 64, 16)]
    data = Batch.concat([t.generate(0, 32)[0] for t in tasks])
    before = sft_loss(m, data).item()
    hist = train(m, tasks, TrainConfig.desk(epochs=2, audit_every=1), seed=0)
    assert m.frozen_fingerprint() == fp
    assert sft_loss(m, data).item() < before
    assert all(math.isfinite(l) for _, l in hist.losses)
    assert set(hist.final_accuracy) == {"contains", "first_low"}
    assert len(hist.evals) == 2


def test_training_is_deterministic():
    tasks = [SynthTask(0, "contains", 32, 8)]
    h1 = train(small_model(), tasks, TrainConfig.desk(epochs=1), seed=4)
    h2 = train(small_model(), tasks, TrainConfig.desk(epochs=1), seed=4)
    assert h1.losses == h2.losses


def test_frozen_audit_detects_tampering():
    m = small_model()
    tasks = [SynthTask(0, "contains", 32, 8)]

    def tamper(step, loss):
        m.blocks[0].q.W0.data[0, 0] += 1.0

    with pytest.raises(FrozenWeightError):
        train(m, tasks, TrainConfig.desk(epochs=1, audit_every=1), log=tamper)


def test_nonfinite_loss_raises_with_grad_norms():
    m = small_model()
    tasks = [SynthTask(0, "contains", 64, 8)]

    def poison(step, loss):
        if step == 2:
            m.blocks[1].v.experts[0].B.data[0, 0] = np.nan

    with pytest.raises(NonFiniteLossError) as info:
        train(m, tasks, TrainConfig.desk(epochs=1), log=poison)
    assert info.value.step == 3
    assert info.value.layer == "layers.1.V"
    assert set(info.value.grad_norms) == {n for n, _ in m.adapters()}


def test_adamw_first_step_hand_oracle():
    p = Tensor([1.0, -2.0], requires_grad=True)
    p.grad = np.array([0.5, -4.0])
    opt = AdamW([p], lr=0.1, weight_decay=0.01)
    opt.step()
    # bias-corrected first step moves each coordinate by lr * sign(g), after decay
    expect = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * np.array([0.5, -4.0]) / (np.abs([0.5, -4.0]) + 1e-8)
    np.testing.assert_allclose(p.data, expect, rtol=1e-15)


def test_lr_schedule():
    cfg = TrainConfig(lr=1.0, schedule="linear")
    assert [cfg.lr_at(s, 4) for s in (1, 2, 3, 4)] == [1.0, 0.75, 0.5, 0.25]
    assert TrainConfig(lr=1.0).lr_at(3, 4) == 1.0


def test_train_config_validation():
    with pytest.raises(ConfigError, match="train.lr"):
        TrainConfig(lr=float("nan")).validate()
    with pytest.raises(ConfigError, match="train.batch_size"):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ConfigError, match="train.schedule"):
        TrainConfig(schedule="cosine").validate()
    d = TrainConfig()
    assert (d.lr, d.batch_size, d.accumulation_steps, d.epochs, d.dropout) == (2e-4, 16, 8, 2, 0.05)


def test_accumulation_matches_large_batch():
    tasks = [SynthTask(0, "contains", 32, 8)]
    a = train(small_model(), tasks, TrainConfig.desk(epochs=1, batch_size=16, accumulation_steps=2, dropout=0.0))
    b = train(small_model(), tasks, TrainConfig.desk(epochs=1, batch_size=32, accumulation_steps=1, dropout=0.0))
    assert abs(a.losses[0][1] - b.losses[0][1]) < 1e-12


def test_single_task_learnable():
    # a full default-size task on the default backbone; OMoE with two experts
    base = build_backbone(BackboneConfig())
    m = inject_adapters(base, InjectionSpec(), AdapterConfig(), seed=0, dropout=0.05)
    hist = train(m, [SynthTask(0, "contains")], TrainConfig.desk())
    assert hist.final_accuracy["contains"] >= 0.95


def test_evaluate_counts_hits():
    m = small_model()
    _, test = SynthTask(0, "contains", 8, 16).generate(0, vocab_size=32)
    acc = evaluate(m, test, chunk=5)
    logits = m(test.tokens, positions=test.positions).data
    assert acc == np.mean(logits.argmax(-1) == test.answers)
    assert len(default_tasks()) == 4
