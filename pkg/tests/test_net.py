import math

import numpy as np
import pytest
import torch

from groupformer.config import ModelConfig
from groupformer.net import (
    FrameTransformer,
    MultiHeadAttention,
    attention,
    causal_mask,
    layer_sizes,
    param_count,
    parameter_gradients,
    sinusoidal,
)

T = torch.tensor


def test_attention_scalar():
    out, w = attention(T([[0.7]]), T([[-2.0]]), T([[5.0]]))
    assert out.item() == 5.0 and w.item() == 1.0


def test_attention_zero_query_averages_values():
    v = torch.randn(4, 3, dtype=torch.float64)
    out, _ = attention(torch.zeros(2, 3, dtype=torch.float64), torch.randn(4, 3, dtype=torch.float64), v)
    assert torch.allclose(out, v.mean(0).expand(2, 3), atol=1e-15)


def test_attention_hand_example():
    x = T([[1.0], [0.0]], dtype=torch.float64)
    out, _ = attention(x, x, x)
    assert out[0, 0].item() == pytest.approx(math.e / (math.e + 1), abs=1e-12)
    assert out[1, 0].item() == pytest.approx(0.5, abs=1e-12)


def test_attention_errors():
    with pytest.raises(ValueError):
        attention(torch.zeros(2, 3), torch.zeros(2, 4), torch.zeros(2, 4))
    with pytest.raises(ValueError):
        attention(torch.zeros(2, 3), torch.zeros(3, 3), torch.zeros(2, 3))
    with pytest.raises(ValueError):
        attention(torch.zeros(2, 3), torch.zeros(2, 3), torch.zeros(2, 3), mask=T([[True, False], [False, False]]))


def test_attention_contract_random(rng):
    g = torch.Generator().manual_seed(0)
    for _ in range(300):
        m, n, d = (int(v) for v in rng.integers(1, [9, 9, 17]))
        q, k, v = (torch.randn(s, d, generator=g, dtype=torch.float64) for s in (m, n, n))
        mask = torch.rand(m, n, generator=g) < 0.6
        mask[torch.arange(m), torch.randint(0, n, (m,), generator=g)] = True
        out, w = attention(q, k, v, mask)
        assert torch.all((w.sum(-1) - 1).abs() <= 1e-6)
        assert torch.all(w[~mask] == 0)
        # brute-force oracle
        s = (q @ k.T / math.sqrt(d)).numpy()
        s[~mask.numpy()] = -np.inf
        e = np.exp(s - s.max(1, keepdims=True))
        ref = e / e.sum(1, keepdims=True)
        assert np.allclose(w.numpy(), ref, atol=1e-12)
        assert np.allclose(out.numpy(), ref @ v.numpy(), atol=1e-12)


def test_multi_head_matches_per_head_computation():
    torch.manual_seed(3)
    mha = MultiHeadAttention(4, 2).double()
    x = torch.randn(3, 4, dtype=torch.float64)
    y = torch.randn(5, 4, dtype=torch.float64)
    out = mha(x, y, y)
    W = {n: (getattr(mha, n).weight.detach().numpy(), getattr(mha, n).bias.detach().numpy()) for n in ("wq", "wk", "wv", "wo")}
    lin = lambda a, n: a @ W[n][0].T + W[n][1]
    q, k, v = lin(x.numpy(), "wq"), lin(y.numpy(), "wk"), lin(y.numpy(), "wv")
    heads = []
    for h in range(2):
        sl = slice(2 * h, 2 * h + 2)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(2)
        e = np.exp(s - s.max(1, keepdims=True))
        heads.append((e / e.sum(1, keepdims=True)) @ v[:, sl])
    ref = lin(np.concatenate(heads, 1), "wo")
    assert out.shape == (3, 4)
    assert np.allclose(out.detach().numpy(), ref, atol=1e-12)


def test_single_head_is_plain_attention():
    torch.manual_seed(4)
    mha = MultiHeadAttention(3, 1).double()
    x = torch.randn(2, 3, dtype=torch.float64)
    ref, _ = attention(mha.wq(x), mha.wk(x), mha.wv(x))
    assert torch.allclose(mha(x, x, x), mha.wo(ref), atol=1e-14)


def test_sinusoidal_values():
    pe = sinusoidal(T([0, 3]), 6, torch.float64)
    assert torch.equal(pe[0], T([0.0, 1.0, 0.0, 1.0, 0.0, 1.0], dtype=torch.float64))
    for i in range(3):
        freq = 10000 ** (-2 * i / 6)
        assert pe[1, 2 * i].item() == pytest.approx(math.sin(3 * freq), abs=1e-14)
        assert pe[1, 2 * i + 1].item() == pytest.approx(math.cos(3 * freq), abs=1e-14)


@pytest.fixture
def model():
    cfg = ModelConfig(d_model=16, n_heads=4, n_enc=2, n_dec=2, max_slots=3, hist_len=6, pred_len=4)
    return FrameTransformer(cfg, seed=5, dtype=torch.float64)


def test_embed_zero_frame_is_position_code(model):
    with torch.no_grad():
        model.embed_proj.bias.zero_()
    tok = model.embed(torch.zeros(2, 12, dtype=torch.float64), T([0, 7]))
    assert torch.equal(tok, sinusoidal(T([0, 7]), 16, torch.float64))


def test_embed_same_content_differs_by_position_only(model):
    f = torch.rand(1, 12, dtype=torch.float64).expand(2, 12)
    tok = model.embed(f, T([1, 4]))
    pe = sinusoidal(T([1, 4]), 16, torch.float64)
    assert torch.allclose(tok[0] - tok[1], pe[0] - pe[1], atol=1e-14)


def test_masked_token_ignores_content(model):
    a = torch.rand(3, 12, dtype=torch.float64)
    b = a.clone()
    b[1] = torch.rand(12, dtype=torch.float64)
    masked = T([False, True, False])
    ta = model.embed(a, T([0, 1, 2]), masked)
    tb = model.embed(b, T([0, 1, 2]), masked)
    assert torch.equal(ta[1], tb[1])
    assert torch.equal(ta[1], model.mask_vector + sinusoidal(T([1]), 16, torch.float64)[0])


def test_embed_rejects_wrong_slot_count(model):
    with pytest.raises(ValueError):
        model.embed(torch.zeros(2, 8, dtype=torch.float64), T([0, 1]))


def test_encoder_permutation_equivariance(model):
    tok = torch.randn(6, 16, dtype=torch.float64)
    perm = torch.randperm(6)
    assert torch.allclose(model.encode(tok[perm]), model.encode(tok)[perm], atol=1e-10)


def test_encoder_single_token_finite(model):
    assert torch.isfinite(model.encode(torch.randn(1, 16, dtype=torch.float64))).all()


def test_decoder_causality(model):
    memory = torch.randn(6, 16, dtype=torch.float64)
    prompt = torch.randn(4, 16, dtype=torch.float64)
    base = model.decode(prompt, memory)
    for t in range(4):
        pert = prompt.clone()
        pert[t + 1:] += torch.randn(3 - t, 16, dtype=torch.float64)
        assert torch.equal(model.decode(pert, memory)[: t + 1], base[: t + 1])


def test_cross_attention_row_sums(model):
    model.decode(torch.randn(1, 16, dtype=torch.float64), torch.randn(6, 16, dtype=torch.float64))
    w = model.decoder[0].cross_attn.last_weights
    assert w.shape[-2:] == (1, 6)
    assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-12)


def test_decode_rejects_long_prompt(model):
    with pytest.raises(ValueError):
        model.decode(torch.randn(5, 16, dtype=torch.float64), torch.randn(6, 16, dtype=torch.float64))
    with pytest.raises(ValueError):
        model.generate(torch.zeros(1, 6, 12), torch.arange(6)[None], None, torch.zeros(1, 12), T([5]), 5)


def test_alternate_cross_wiring_needs_equal_lengths():
    cfg = ModelConfig(d_model=8, n_heads=2, n_enc=1, n_dec=1, max_slots=1, hist_len=4, pred_len=4, paper_cross_wiring=True)
    m = FrameTransformer(cfg, dtype=torch.float64)
    assert m.decode(torch.randn(4, 8, dtype=torch.float64), torch.randn(4, 8, dtype=torch.float64)).shape == (4, 8)
    with pytest.raises(ValueError):
        m.decode(torch.randn(3, 8, dtype=torch.float64), torch.randn(4, 8, dtype=torch.float64))


def _batch(model, B=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    cfg = model.cfg
    src = torch.rand(B, cfg.hist_len, cfg.token_dim, generator=g, dtype=torch.float64)
    marks = torch.arange(cfg.hist_len).expand(B, -1)
    return src, marks


def test_teacher_and_autoregressive_agree(model):
    src, marks = _batch(model)
    start = src[:, -1]
    start_mark = torch.full((3,), model.cfg.hist_len - 1)
    gen = model.generate(src, marks, None, start, start_mark, 4)
    assert gen.shape == (3, 4, 12)
    prompt = torch.cat([start[:, None], gen[:, :-1]], 1)
    prompt_marks = start_mark[:, None] + torch.arange(4)
    tf = model(src, marks, None, prompt, prompt_marks)
    assert torch.allclose(tf, gen, atol=1e-12)


def test_finite_outputs_on_random_inputs():
    cfg = ModelConfig()
    m = FrameTransformer(cfg, seed=1)
    g = torch.Generator().manual_seed(1)
    with torch.no_grad():
        for _ in range(10):
            src = torch.rand(100, 20, 40, generator=g)
            src[torch.rand(100, 20, 40, generator=g) < 0.4] = 0
            out = m.generate(src, torch.arange(20).expand(100, -1), None, src[:, -1], torch.full((100,), 19), 10)
            assert out.shape == (100, 10, 40) and torch.isfinite(out).all()


def _np_layernorm(x, w, b):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * w + b


def _np_gelu(x):
    return 0.5 * x * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))


def _np_mha(p, pre, xq, xk, xv, n_heads, mask=None):
    lin = lambda a, n: a @ p[f"{pre}.{n}.weight"].T + p[f"{pre}.{n}.bias"]
    q, k, v = lin(xq, "wq"), lin(xk, "wk"), lin(xv, "wv")
    dk = q.shape[1] // n_heads
    heads = []
    for h in range(n_heads):
        sl = slice(h * dk, (h + 1) * dk)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(dk)
        if mask is not None:
            s = np.where(mask, s, -np.inf)
        e = np.exp(s - s.max(1, keepdims=True))
        heads.append(e / e.sum(1, keepdims=True) @ v[:, sl])
    return lin(np.concatenate(heads, 1), "wo")


def _np_forward(model, src, src_marks, prompt, prompt_marks):
    """Straight-line numpy evaluation of the full network for one sequence."""
    cfg = model.cfg
    p = {n: t.detach().numpy() for n, t in model.named_parameters()}
    pe = lambda m: sinusoidal(torch.as_tensor(m), cfg.d_model, torch.float64).numpy()
    emb = lambda f, m: f @ p["embed_proj.weight"].T + p["embed_proj.bias"] + pe(m)
    ln = lambda x, pre: _np_layernorm(x, p[pre + ".weight"], p[pre + ".bias"])
    ffn = lambda x, pre: _np_gelu(x @ p[pre + ".fc1.weight"].T + p[pre + ".fc1.bias"]) @ p[pre + ".fc2.weight"].T + p[pre + ".fc2.bias"]
    x = emb(src, src_marks)
    for i in range(cfg.n_enc):
        pre = f"encoder.{i}"
        x = ln(x + _np_mha(p, pre + ".self_attn", x, x, x, cfg.n_heads), pre + ".norm1")
        x = ln(x + ffn(x, pre + ".ff"), pre + ".norm2")
    y = emb(prompt, prompt_marks)
    causal = np.tril(np.ones((len(y), len(y)), dtype=bool))
    for i in range(cfg.n_dec):
        pre = f"decoder.{i}"
        y = ln(y + _np_mha(p, pre + ".self_attn", y, y, y, cfg.n_heads, causal), pre + ".norm1")
        y = ln(y + _np_mha(p, pre + ".cross_attn", y, x, x, cfg.n_heads), pre + ".norm2")
        y = ln(y + ffn(y, pre + ".ff"), pre + ".norm3")
    out = y @ p["out_proj.weight"].T + p["out_proj.bias"]
    return out + prompt if cfg.residual_output else out


@pytest.mark.parametrize("residual", [True, False])
def test_forward_matches_unrolled_oracle(residual):
    cfg = ModelConfig(d_model=8, n_heads=2, n_enc=2, n_dec=2, max_slots=2, hist_len=5, pred_len=3, residual_output=residual)
    m = FrameTransformer(cfg, seed=11, dtype=torch.float64)
    with torch.no_grad():
        for prm in m.parameters():  # non-trivial biases and norms
            prm.add_(0.1 * torch.randn_like(prm))
    rng = np.random.default_rng(0)
    src, prompt = rng.random((5, 8)), rng.random((3, 8))
    sm, pm = np.array([3, 0, 1, 2, 4]), np.array([4, 5, 6])
    got = m(T(src)[None], T(sm)[None], None, T(prompt)[None], T(pm)[None])[0].detach().numpy()
    assert np.allclose(got, _np_forward(m, src, sm, prompt, pm), atol=1e-10)


def test_param_count_hand_enumeration():
    cfg = ModelConfig(d_model=2, d_ff=4, max_slots=1, n_heads=1, n_enc=1, n_dec=1)
    sizes = layer_sizes(cfg)
    assert (sizes["embed"], sizes["mask_vector"], sizes["encoder_layer"], sizes["decoder_layer"], sizes["out_proj"]) == (10, 2, 54, 82, 12)
    assert param_count(cfg) == 160
    assert sum(p.numel() for p in FrameTransformer(cfg).parameters()) == 160


def test_param_count_linear_in_layers():
    a = ModelConfig(n_enc=2)
    b = ModelConfig(n_enc=4)
    assert param_count(b) - param_count(a) == 2 * layer_sizes(a)["encoder_layer"]
    assert sum(p.numel() for p in FrameTransformer(a).parameters()) == param_count(a)


def test_full_scale_count():
    cfg = ModelConfig(d_model=1024, n_heads=8, n_enc=6, n_dec=6, d_ff=2048, max_slots=10)
    assert param_count(cfg) == 126_085_160


def test_mask_vector_gradient_zero_without_masks(model):
    src, marks = _batch(model)
    out = model(src, marks, None, src[:, -2:], marks[:, -2:])
    grads = parameter_gradients(model, (out ** 2).mean())
    assert torch.count_nonzero(grads["mask_vector"]) == 0
    masked = torch.zeros(3, 6, dtype=torch.bool)
    masked[:, 2] = True
    out = model(src, marks, masked, src[:, -2:], marks[:, -2:])
    assert torch.count_nonzero(parameter_gradients(model, (out ** 2).mean())["mask_vector"]) > 0


def test_every_parameter_receives_gradient(model):
    src, marks = _batch(model)
    masked = torch.zeros(3, 6, dtype=torch.bool)
    masked[:, 1] = True
    out = model(src, marks, masked, src[:, -3:], marks[:, -3:])
    grads = parameter_gradients(model, ((out - 0.3) ** 2).mean())
    for name, g in grads.items():
        if name.endswith("wk.bias"):
            # softmax is shift invariant: a key bias moves every score in a row equally
            assert torch.allclose(g, torch.zeros_like(g), atol=1e-12)
        else:
            assert torch.count_nonzero(g) > 0, name


def test_zero_loss_gives_zero_output_gradients():
    cfg = ModelConfig(d_model=8, n_heads=2, n_enc=1, n_dec=1, max_slots=2, hist_len=4, pred_len=4, residual_output=False)
    m = FrameTransformer(cfg, dtype=torch.float64)
    with torch.no_grad():
        m.out_proj.weight.zero_()
        m.out_proj.bias.zero_()
    src = torch.rand(2, 4, 8, dtype=torch.float64)
    marks = torch.arange(4).expand(2, -1)
    out = m(src, marks, None, src, marks)
    grads = parameter_gradients(m, ((out - torch.zeros_like(out)) ** 2).mean())
    assert torch.count_nonzero(grads["out_proj.weight"]) == 0 and torch.count_nonzero(grads["out_proj.bias"]) == 0


def test_init_is_seeded():
    cfg = ModelConfig(d_model=8, n_heads=2, max_slots=2)
    a, b, c = FrameTransformer(cfg, seed=1), FrameTransformer(cfg, seed=1), FrameTransformer(cfg, seed=2)
    assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
    assert not torch.equal(a.embed_proj.weight, c.embed_proj.weight)


def test_causal_mask_shape():
    assert torch.equal(causal_mask(3), T([[True, False, False], [True, True, False], [True, True, True]]))
