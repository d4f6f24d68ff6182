"""Encoder-decoder transformer over frame tokens.

Each frame (``max_slots`` boxes of 4 values) is flattened into one token of
``4 * max_slots`` values, embedded linearly and offset by a sinusoidal code of
its frame mark. Masked frames use a learned vector in place of the linear
embedding. Blocks are post-norm, FFNs use GELU.

Gradients come from torch autograd; ``tests/test_net_grad.py`` checks them
against central finite differences.
"""

from __future__ import annotations

import math
from typing import Dict, List, Optional, Tuple

import torch
from torch import nn
from torch.nn import functional as F

from .config import ModelConfig


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention.

    Args:
        q: (..., m, d_k) queries.
        k: (..., n, d_k) keys.
        v: (..., n, d_v) values.
        mask: optional boolean (m, n) or broadcastable; True marks an allowed
            entry. Every row needs at least one allowed entry.

    Returns:
        ``(output, weights)`` with output (..., m, d_v) and weights (..., m, n).
        Disallowed entries get exactly zero weight.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=torch.bool, device=scores.device)
        if mask.shape[-2:] != scores.shape[-2:]:
            raise ValueError(f"mask shape {tuple(mask.shape)} does not match scores {tuple(scores.shape[-2:])}")
        if not bool(mask.any(-1).all()):
            raise ValueError("attention mask has a fully masked row")
        scores = scores.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    return weights @ v, weights


def causal_mask(n: int, device=None) -> torch.Tensor:
    return torch.ones(n, n, dtype=torch.bool, device=device).tril()


def sinusoidal(marks: torch.Tensor, d_model: int, dtype=torch.float32) -> torch.Tensor:
    """Original-transformer position code evaluated at (possibly shuffled) frame marks."""
    half = (d_model + 1) // 2
    inv_freq = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) * 2 / d_model)
    angles = marks.to(torch.float64).unsqueeze(-1) * inv_freq
    pe = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).flatten(-2)
    return pe[..., :d_model].to(dtype)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.wq = nn.Linear(d_model, d_model)
        self.wk = nn.Linear(d_model, d_model)
        self.wv = nn.Linear(d_model, d_model)
        self.wo = nn.Linear(d_model, d_model)
        self.last_weights: Optional[torch.Tensor] = None

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, s, d = x.shape
        return x.reshape(*lead, s, self.n_heads, d // self.n_heads).transpose(-3, -2)

    def forward(self, x_q, x_k, x_v, mask=None):
        q = self._split(self.wq(x_q))
        k = self._split(self.wk(x_k))
        v = self._split(self.wv(x_v))
        out, w = attention(q, k, v, mask)
        self.last_weights = w.detach()
        out = out.transpose(-3, -2).flatten(-2)
        return self.wo(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ff)
        self.fc2 = nn.Linear(d_ff, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.drop(F.gelu(self.fc1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x):
        x = self.norm1(x + self.drop(self.self_attn(x, x, x)))
        return self.norm2(x + self.drop(self.ff(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.paper_wiring = cfg.paper_cross_wiring
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, memory):
        n = x.shape[-2]
        x = self.norm1(x + self.drop(self.self_attn(x, x, x, causal_mask(n, x.device))))
        if self.paper_wiring:
            # Queries and keys from the encoder output, values from the decoder stream.
            if memory.shape[-2] != n:
                raise ValueError(
                    f"paper_cross_wiring needs equal encoder/decoder lengths, got {memory.shape[-2]} and {n}"
                )
            cross = self.cross_attn(memory, memory, x)
        else:
            cross = self.cross_attn(x, memory, memory)
        x = self.norm2(x + self.drop(cross))
        return self.norm3(x + self.drop(self.ff(x)))


class FrameTransformer(nn.Module):
    """The full network. Parameter registration order is the checkpoint inventory order."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        self.embed_proj = nn.Linear(cfg.token_dim, cfg.d_model)
        self.mask_vector = nn.Parameter(torch.zeros(cfg.d_model))
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_enc))
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_dec))
        self.out_proj = nn.Linear(cfg.d_model, cfg.token_dim)
        self.to(dtype)
        self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(int(seed))
        for name, p in self.named_parameters():
            if name == "mask_vector":
                p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * 0.02)
            elif p.ndim == 2:
                bound = math.sqrt(6.0 / (p.shape[0] + p.shape[1]))
                p.copy_((torch.rand(p.shape, generator=g, dtype=torch.float64) * 2 - 1) * bound)
            elif "norm" in name and name.endswith("weight"):
                p.fill_(1.0)
            else:
                p.zero_()

    @property
    def dtype(self) -> torch.dtype:
        return self.out_proj.weight.dtype

    # --- pieces ---------------------------------------------------------

    def embed(self, frames: torch.Tensor, marks: torch.Tensor, masked: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Embed flattened frames of shape (..., S, token_dim) at the given marks."""
        cfg = self.cfg
        if frames.shape[-1] != cfg.token_dim:
            raise ValueError(f"frame has {frames.shape[-1]} values, expected {cfg.token_dim} (max_slots={cfg.max_slots})")
        tokens = self.embed_proj(frames.to(self.dtype))
        if masked is not None:
            masked = torch.as_tensor(masked, dtype=torch.bool)
            tokens = torch.where(masked.unsqueeze(-1), self.mask_vector.expand_as(tokens), tokens)
        return tokens + sinusoidal(torch.as_tensor(marks), cfg.d_model, self.dtype)

    def encode(self, tokens: torch.Tensor) -> torch.Tensor:
        x = tokens
        for layer in self.encoder:
            x = layer(x)
        return x

    def decode(self, prompt_tokens: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        if prompt_tokens.shape[-2] > self.cfg.pred_len:
            raise ValueError(f"prompt of {prompt_tokens.shape[-2]} frames exceeds pred_len={self.cfg.pred_len}")
        x = prompt_tokens
        for layer in self.decoder:
            x = layer(x, memory)
        return x

    def project(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.out_proj(hidden)

    # --- full passes ----------------------------------------------------

    def forward(self, src, src_marks, src_masked, prompt, prompt_marks) -> torch.Tensor:
        """Teacher-forced pass: one output frame per prompt position."""
        memory = self.encode(self.embed(src, src_marks, src_masked))
        return self.decode_frames(prompt, prompt_marks, memory)

    def decode_frames(self, prompt, prompt_marks, memory) -> torch.Tensor:
        """Decoder pass from prompt frames to one predicted frame per position.

        With ``residual_output`` the projection is an offset added to the
        prompt frame at the same position.
        """
        prompt = torch.as_tensor(prompt, dtype=self.dtype)
        out = self.project(self.decode(self.embed(prompt, prompt_marks), memory))
        if self.cfg.residual_output:
            out = out + prompt
        return out

    def generate(self, src, src_marks, src_masked, start, start_mark, steps: int) -> torch.Tensor:
        """Autoregressive decoding from a single start frame.

        Args:
            start: (B, token_dim) first prompt frame.
            start_mark: (B,) mark of the start frame; each later prompt frame's
                mark is one more than its predecessor.

        Returns:
            (B, steps, token_dim) predicted frames.
        """
        if steps > self.cfg.pred_len:
            raise ValueError(f"cannot decode {steps} steps, pred_len is {self.cfg.pred_len}")
        memory = self.encode(self.embed(src, src_marks, src_masked))
        start = torch.as_tensor(start, dtype=self.dtype)
        start_mark = torch.as_tensor(start_mark)
        prompt = [start]
        outputs = []
        for t in range(steps):
            frames = torch.stack(prompt, dim=-2)
            marks = start_mark.unsqueeze(-1) + torch.arange(t + 1)
            nxt = self.decode_frames(frames, marks, memory)[..., -1, :]
            outputs.append(nxt)
            prompt.append(nxt)
        return torch.stack(outputs, dim=-2)


def layer_sizes(cfg: ModelConfig) -> Dict[str, int]:
    d, ff, td = cfg.d_model, cfg.d_ff, cfg.token_dim
    attn = 4 * (d * d + d)
    ffn = d * ff + ff + ff * d + d
    norm = 2 * d
    return {
        "embed": td * d + d,
        "mask_vector": d,
        "encoder_layer": attn + ffn + 2 * norm,
        "decoder_layer": 2 * attn + ffn + 3 * norm,
        "out_proj": d * td + td,
    }


def param_count(cfg: ModelConfig) -> int:
    s = layer_sizes(cfg)
    return s["embed"] + s["mask_vector"] + cfg.n_enc * s["encoder_layer"] + cfg.n_dec * s["decoder_layer"] + s["out_proj"]


def parameter_gradients(model: nn.Module, loss: torch.Tensor, retain_graph: bool = False) -> Dict[str, torch.Tensor]:
    """d loss / d parameter for every parameter (zeros for ones the loss does not touch)."""
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params, retain_graph=retain_graph, allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, params, grads)}


def parameter_inventory(model: nn.Module) -> List[Tuple[str, Tuple[int, ...]]]:
    return [(n, tuple(p.shape)) for n, p in model.named_parameters()]
