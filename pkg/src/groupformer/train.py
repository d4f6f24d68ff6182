"""Pretraining on noised histories and compensation fine-tuning."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .config import ModelConfig, NoiseConfig, NumericAbort, TrainConfig, rng_stream, stream_seed
from .ingest import Sample
from .net import FrameTransformer
from .noise import corrupt, mask_total, plan_gap

logger = logging.getLogger(__name__)


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Constant ``base_lr`` through warmup, then linear decay to zero at ``total_steps``."""
    if step < 0 or step > cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step <= cfg.warmup_steps:
        return cfg.base_lr
    return cfg.base_lr * (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)


def make_optimizer(model: FrameTransformer, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.base_lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)


@dataclass
class TraceRow:
    step: int
    lr: float
    loss: float


@dataclass
class TrainResult:
    model: FrameTransformer
    trace: List[TraceRow] = field(default_factory=list)

    def trace_csv(self) -> str:
        lines = ["step,lr,loss"]
        lines += [f"{r.step},{r.lr!r},{r.loss!r}" for r in self.trace]
        return "\n".join(lines) + "\n"


def _flat(boxes: np.ndarray) -> np.ndarray:
    return boxes.reshape(*boxes.shape[:-2], -1)


def stack_samples(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(B, N, token_dim) frames, (B, N) marks, (B, N) masked flags."""
    boxes = np.stack([_flat(s.boxes) for s in samples])
    marks = np.stack([s.marks for s in samples])
    masked = np.stack([s.masked for s in samples])
    return boxes, marks, masked


class BatchOrder:
    """Epoch-wise shuffled batches drawn from a dedicated generator."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, min(batch_size, n), rng
        self._perm = np.zeros(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        if self._perm.size < self.batch_size:
            self._perm = np.concatenate([self._perm, self.rng.permutation(self.n)])
        idx, self._perm = self._perm[: self.batch_size], self._perm[self.batch_size:]
        return idx


def prediction_batch(clean: Sequence[Sample], noised: Sequence[Sample], hist_len: int, pred_len: int, dtype):
    """Tensors for one teacher-forced prediction step.

    The encoder sees the (possibly corrupted) history; the decoder prompt is the
    clean last history frame followed by the clean targets shifted by one.
    """
    c_boxes, c_marks, _ = stack_samples(clean)
    n_boxes, n_marks, n_masked = stack_samples([s.slice(0, hist_len) for s in noised])
    t = torch.as_tensor
    src = t(n_boxes, dtype=dtype)
    src_marks = t(n_marks)
    src_masked = t(n_masked)
    prompt = t(c_boxes[:, hist_len - 1: hist_len + pred_len - 1], dtype=dtype)
    prompt_marks = t(c_marks[:, hist_len - 1: hist_len + pred_len - 1])
    target = t(c_boxes[:, hist_len: hist_len + pred_len], dtype=dtype)
    return src, src_marks, src_masked, prompt, prompt_marks, target


def _aux_loss(model, memory, noised: Sequence[Sample], clean: Sequence[Sample], hist_len: int, dtype):
    """Reconstruct masked history frames from the encoder output through the output projection."""
    rows, targets = [], []
    for b, (ns, cs) in enumerate(zip(noised, clean)):
        for pos in np.flatnonzero(ns.masked[:hist_len]):
            rows.append((b, int(pos)))
            targets.append(cs.boxes[ns.marks[pos]].reshape(-1))
    if not rows:
        return None
    b_idx = torch.tensor([r[0] for r in rows])
    p_idx = torch.tensor([r[1] for r in rows])
    recon = model.project(memory[b_idx, p_idx])
    return mse_loss(recon, torch.as_tensor(np.stack(targets), dtype=dtype))


def _apply_step(model, optimizer, loss, step, tcfg) -> float:
    lr = lr_at(step, tcfg)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=False)
    loss.backward()
    if tcfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.grad_clip)
    optimizer.step()
    return lr


def pretrain(
    samples: Sequence[Sample],
    mcfg: ModelConfig,
    ncfg: NoiseConfig,
    tcfg: TrainConfig,
    steps: Optional[int] = None,
    model: Optional[FrameTransformer] = None,
    log_every: int = 0,
) -> TrainResult:
    """Denoising prediction pretraining.

    Runs ``steps`` optimizer steps (default ``tcfg.total_steps``). Randomness is
    drawn from per-purpose streams of ``tcfg.seed``: ``init``, ``batch`` and
    ``noise`` (the latter mixed with ``ncfg.seed``).
    """
    if not samples:
        raise ValueError("empty training corpus")
    steps = tcfg.total_steps if steps is None else steps
    if steps > tcfg.total_steps:
        raise ValueError(f"steps {steps} exceeds total_steps {tcfg.total_steps}")
    hist_len, pred_len = mcfg.hist_len, mcfg.pred_len
    for s in samples[:1]:
        if s.n_frames < hist_len + pred_len or s.max_slots != mcfg.max_slots:
            raise ValueError("samples do not match the model's hist_len/pred_len/max_slots")
    if model is None:
        model = FrameTransformer(mcfg, seed=stream_seed(tcfg.seed, "init"))
    dtype = model.dtype
    model.train()
    opt = make_optimizer(model, tcfg)
    order = BatchOrder(len(samples), tcfg.batch_size, rng_stream(tcfg.seed, "batch"))
    noise_rng = rng_stream(tcfg.seed ^ ncfg.seed, "noise")
    result = TrainResult(model)
    for step in range(steps):
        clean = [samples[i] for i in order.next()]
        noised = [corrupt(s, ncfg, noise_rng, hist_len)[0] for s in clean]
        for c, n in zip(clean, noised):
            # targets must come through corruption untouched
            assert np.array_equal(c.boxes[hist_len:], n.boxes[hist_len:]) and not n.masked[hist_len:].any()
        src, src_marks, src_masked, prompt, prompt_marks, target = prediction_batch(clean, noised, hist_len, pred_len, dtype)
        memory = model.encode(model.embed(src, src_marks, src_masked))
        pred = model.decode_frames(prompt, prompt_marks, memory)
        loss = mse_loss(pred, target)
        if tcfg.aux_denoise_loss:
            aux = _aux_loss(model, memory, noised, clean, hist_len, dtype)
            if aux is not None:
                loss = loss + aux
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NumericAbort(f"non-finite loss at step {step}", payload=result)
        lr = _apply_step(model, opt, loss, step, tcfg)
        result.trace.append(TraceRow(step, lr, value))
        if log_every and step % log_every == 0:
            logger.info("pretrain step %d lr %.3g loss %.6f", step, lr, value)
    model.eval()
    return result


# --- compensation ----------------------------------------------------------


def compensation_batch(samples: Sequence[Sample], gaps: Sequence[Tuple[int, int]], dtype):
    """Tensors for teacher-forced gap filling.

    The encoder sees the whole sequence with the gap masked. The decoder prompt
    is the frame just before the gap followed by the gap's ground truth shifted
    by one; prompts are right-padded to the longest gap and ``valid`` marks the
    real positions.
    """
    boxes, marks, _ = stack_samples(samples)
    B, N, D = boxes.shape
    longest = max(g[1] for g in gaps)
    src_masked = np.zeros((B, N), dtype=bool)
    prompt = np.zeros((B, longest, D))
    prompt_marks = np.zeros((B, longest), dtype=np.int64)
    target = np.zeros((B, longest, D))
    valid = np.zeros((B, longest), dtype=bool)
    for b, (start, length) in enumerate(gaps):
        src_masked[b, start:start + length] = True
        prompt[b, :length] = boxes[b, start - 1:start + length - 1]
        target[b, :length] = boxes[b, start:start + length]
        prompt_marks[b] = marks[b, start - 1] + np.arange(longest)
        valid[b, :length] = True
    t = torch.as_tensor
    return (t(boxes, dtype=dtype), t(marks), t(src_masked), t(prompt, dtype=dtype), t(prompt_marks), t(target, dtype=dtype), t(valid))


def masked_mse(pred: torch.Tensor, target: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    diff = (pred - target) ** 2 * valid.unsqueeze(-1)
    return diff.sum() / (valid.sum() * pred.shape[-1])


def gap_limit(mcfg: ModelConfig, ncfg: NoiseConfig) -> int:
    n = mcfg.hist_len + mcfg.pred_len
    return max(1, min(mask_total(n, ncfg.mask_rate), mcfg.pred_len, n - 2))


def finetune_compensation(
    model: FrameTransformer,
    samples: Sequence[Sample],
    ncfg: NoiseConfig,
    tcfg: TrainConfig,
    steps: Optional[int] = None,
    log_every: int = 0,
) -> TrainResult:
    """Fine-tune a pretrained model to fill an interior gap. Nothing is frozen."""
    if not samples:
        raise ValueError("empty training corpus")
    steps = tcfg.total_steps if steps is None else steps
    mcfg = model.cfg
    n_frames = samples[0].n_frames
    limit = gap_limit(mcfg, ncfg)
    model.train()
    dtype = model.dtype
    opt = make_optimizer(model, tcfg)
    order = BatchOrder(len(samples), tcfg.batch_size, rng_stream(tcfg.seed, "ft-batch"))
    gap_rng = rng_stream(tcfg.seed ^ ncfg.seed, "ft-gap")
    result = TrainResult(model)
    for step in range(steps):
        batch = [samples[i] for i in order.next()]
        gaps = [plan_gap(n_frames, ncfg, gap_rng, max_len=limit) for _ in batch]
        src, src_marks, src_masked, prompt, prompt_marks, target, valid = compensation_batch(batch, gaps, dtype)
        memory = model.encode(model.embed(src, src_marks, src_masked))
        pred = model.decode_frames(prompt, prompt_marks, memory)
        loss = masked_mse(pred, target, valid)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NumericAbort(f"non-finite loss at fine-tune step {step}", payload=result)
        lr = _apply_step(model, opt, loss, step, tcfg)
        result.trace.append(TraceRow(step, lr, value))
        if log_every and step % log_every == 0:
            logger.info("finetune step %d lr %.3g loss %.6f", step, lr, value)
    model.eval()
    return result


def compensation_example(sample: Sample, gap: Tuple[int, int]):
    """None for an empty gap, otherwise ``(sample, gap)``."""
    if gap[1] == 0:
        return None
    return sample, gap


@torch.no_grad()
def compensate(model: FrameTransformer, sample: Sample, gap: Tuple[int, int]) -> np.ndarray:
    """Autoregressively fill ``gap``; returns (length, max_slots, 4)."""
    start, length = gap
    boxes, marks, _ = stack_samples([sample])
    masked = np.zeros_like(marks, dtype=bool)
    masked[0, start:start + length] = True
    t = torch.as_tensor
    out = model.generate(
        t(boxes, dtype=model.dtype), t(marks), t(masked),
        t(boxes[:, start - 1], dtype=model.dtype), t(marks[:, start - 1]), length,
    )
    return out[0].double().numpy().reshape(length, -1, 4)


@torch.no_grad()
def prediction_mse(model: FrameTransformer, samples: Sequence[Sample], batch_size: int = 256) -> float:
    """Autoregressive next-``pred_len``-frame MSE on clean histories."""
    from .infer import predict_batch

    cfg = model.cfg
    total, count = 0.0, 0
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        pred = predict_batch(model, chunk)
        gt = np.stack([s.boxes[cfg.hist_len: cfg.hist_len + cfg.pred_len] for s in chunk])
        total += float(((pred - gt) ** 2).sum())
        count += gt.size
    return total / count
