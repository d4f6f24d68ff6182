import numpy as np
import pytest
import torch

from conftest import random_sample
from groupformer.config import NoiseConfig, TrainConfig
from groupformer.net import FrameTransformer
from groupformer.train import (
    BatchOrder,
    compensation_batch,
    finetune_compensation,
    gap_limit,
    lr_at,
    make_optimizer,
    masked_mse,
    mse_loss,
    pretrain,
    prediction_mse,
)


def test_mse_examples():
    assert mse_loss(torch.zeros(3), torch.zeros(3)).item() == 0.0
    assert mse_loss(torch.tensor([1.0, 2.0]), torch.tensor([0.0, 0.0])).item() == 2.5
    with pytest.raises(ValueError):
        mse_loss(torch.zeros(2), torch.zeros(3))


def test_mse_matches_oracle(rng):
    for _ in range(50):
        a, b = rng.random((3, 5, 7)), rng.random((3, 5, 7))
        oracle = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert mse_loss(torch.tensor(a), torch.tensor(b)).item() == pytest.approx(oracle, abs=1e-12)


def test_lr_schedule_values():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 1e-4 and lr_at(4000, cfg) == 1e-4
    assert abs(lr_at(204000, cfg) - 5e-5) <= 1e-12
    assert lr_at(404000, cfg) == 0.0
    with pytest.raises(ValueError):
        lr_at(404001, cfg)
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_lr_schedule_monotone_after_warmup():
    cfg = TrainConfig(warmup_steps=10, total_steps=100)
    lrs = [lr_at(s, cfg) for s in range(101)]
    assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))
    assert set(lrs[:11]) == {1e-4}


def test_adam_zero_gradient_leaves_weights():
    w = torch.nn.Parameter(torch.tensor([1.0, -2.0]))
    m = torch.nn.Module()
    m.w = w
    opt = make_optimizer(m, TrainConfig())
    w.grad = torch.zeros(2)
    opt.step()
    assert torch.equal(w.detach(), torch.tensor([1.0, -2.0]))


def test_batch_order_covers_epoch(rng):
    order = BatchOrder(10, 4, rng)
    seen = np.concatenate([order.next() for _ in range(5)])
    assert sorted(seen[:10]) == list(range(10))


@pytest.fixture
def corpus(rng):
    return [random_sample(rng, n_frames=8, max_slots=2) for _ in range(12)]


def _tc(**kw):
    return TrainConfig(**{"base_lr": 1e-3, "warmup_steps": 2, "total_steps": 20, "batch_size": 4, **kw})


def test_zero_steps_returns_initial_weights(corpus, tiny_cfg):
    from groupformer.config import stream_seed

    init = FrameTransformer(tiny_cfg, seed=stream_seed(0, "init"))
    res = pretrain(corpus, tiny_cfg, NoiseConfig(), _tc(), steps=0)
    assert res.trace == []
    assert all(torch.equal(a, b) for a, b in zip(init.parameters(), res.model.parameters()))


def test_trace_and_determinism(corpus, tiny_cfg):
    a = pretrain(corpus, tiny_cfg, NoiseConfig(), _tc(), steps=6)
    b = pretrain(corpus, tiny_cfg, NoiseConfig(), _tc(), steps=6)
    assert len(a.trace) == 6 and [r.step for r in a.trace] == list(range(6))
    assert a.trace_csv() == b.trace_csv()
    assert all(torch.equal(x, y) for x, y in zip(a.model.parameters(), b.model.parameters()))
    c = pretrain(corpus, tiny_cfg, NoiseConfig(), _tc(seed=1), steps=6)
    assert c.trace_csv() != a.trace_csv()


def test_loss_decreases_on_tiny_corpus(corpus, tiny_cfg):
    res = pretrain(corpus[:4], tiny_cfg, NoiseConfig(p_mask=0, p_swap=0), _tc(total_steps=150, batch_size=4), steps=150)
    first = np.mean([r.loss for r in res.trace[:10]])
    last = np.mean([r.loss for r in res.trace[-10:]])
    assert last < 0.5 * first


def test_empty_corpus_and_shape_errors(corpus, tiny_cfg, rng):
    with pytest.raises(ValueError):
        pretrain([], tiny_cfg, NoiseConfig(), _tc())
    with pytest.raises(ValueError):
        pretrain([random_sample(rng, n_frames=5, max_slots=2)], tiny_cfg, NoiseConfig(), _tc())
    with pytest.raises(ValueError):
        pretrain(corpus, tiny_cfg, NoiseConfig(), _tc(), steps=21)


def test_compensation_batch_layout(corpus):
    src, marks, masked, prompt, prompt_marks, target, valid = compensation_batch(corpus[:2], [(2, 3), (5, 1)], torch.float64)
    assert masked[0].tolist() == [False, False, True, True, True, False, False, False]
    assert valid.tolist() == [[True, True, True], [True, False, False]]
    assert torch.equal(prompt[0, 0], src[0, 1]) and torch.equal(target[0], src[0, 2:5])
    assert prompt_marks[1].tolist() == [4, 5, 6]


def test_compensation_loss_depends_only_on_gap(corpus):
    _, _, _, _, _, target, valid = compensation_batch(corpus[:2], [(2, 3), (5, 1)], torch.float64)
    pred = torch.rand_like(target)
    base = masked_mse(pred, target, valid)
    junk = pred.clone()
    junk[1, 1:] += 100.0  # padding positions
    assert masked_mse(junk, target, valid).item() == base.item()


def test_gap_limit_default(tiny_cfg):
    from groupformer.config import ModelConfig

    assert gap_limit(ModelConfig(), NoiseConfig()) == 5  # floor(0.15 * 30 + 0.5)
    assert 1 <= gap_limit(tiny_cfg, NoiseConfig()) <= tiny_cfg.pred_len


def test_finetune_runs_and_is_deterministic(corpus, tiny_cfg):
    def run():
        model = FrameTransformer(tiny_cfg, seed=1)
        return finetune_compensation(model, corpus, NoiseConfig(), _tc(), steps=4)

    a, b = run(), run()
    assert len(a.trace) == 4 and a.trace_csv() == b.trace_csv()
    with pytest.raises(ValueError):
        finetune_compensation(FrameTransformer(tiny_cfg), [], NoiseConfig(), _tc())


def test_prediction_mse_of_oracle_copy_is_zero_for_static_scene(tiny_cfg):
    model = FrameTransformer(tiny_cfg, seed=0)
    with torch.no_grad():  # residual output with a zero projection copies the prompt forward
        model.out_proj.weight.zero_()
        model.out_proj.bias.zero_()
    frame = np.tile(np.array([0.3, 0.4, 0.5, 0.5]), (2, 1))
    from groupformer.ingest import Sample

    s = Sample(np.tile(frame, (8, 1, 1)), np.ones((8, 2), bool), np.arange(8), np.zeros(8, bool), {})
    assert prediction_mse(model, [s]) == pytest.approx(0.0, abs=1e-12)
