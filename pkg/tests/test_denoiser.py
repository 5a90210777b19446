import math

import pytest
import torch

from conftest import randomize_, tiny_config
from dualdiff.denoiser import (
    Attention,
    LoraSet,
    StreamRun,
    TextEncoder,
    UNet,
    attention_probs,
    build_base,
    encode_prompt,
    forward,
    make_prompt_pair,
    multihead_attention,
    tokenize,
)
from dualdiff.denoiser import DenoiserConfig
from dualdiff.errors import ConfigError, ShapeError, VocabularyError


def test_tokenize_pads_and_rejects():
    assert tokenize("a vfx with sks") == [1, 2, 3, 4, 0, 0, 0, 0]
    with pytest.raises(VocabularyError):
        tokenize("a cat")
    with pytest.raises(VocabularyError):
        tokenize(" ".join(["a"] * 9))


def test_prompt_pair_nesting():
    pp = make_prompt_pair()
    assert pp.p_prime_tokens[0] == 4 and set(pp.null_tokens) == {0}
    with pytest.raises(ConfigError):
        make_prompt_pair("a vfx", "sks")


def test_config_validation():
    with pytest.raises(ConfigError):
        DenoiserConfig(image_size=64, attention_resolutions=(24,))
    with pytest.raises(ConfigError):
        DenoiserConfig(base_channels=30, heads=4)
    with pytest.raises(ConfigError):
        DenoiserConfig(lora_rank=0)


def naive_attention(q, k, v, heads):
    b, n, d = q.shape
    dh = d // heads
    out = torch.zeros(b, n, d, dtype=torch.float64)
    for bi in range(b):
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            for i in range(n):
                logits = [float(q[bi, i, sl] @ k[bi, j, sl]) / math.sqrt(dh) for j in range(k.shape[1])]
                mx = max(logits)
                w = [math.exp(x - mx) for x in logits]
                s = sum(w)
                for j, wj in enumerate(w):
                    out[bi, i, sl] += wj / s * v[bi, j, sl].double()
    return out


def test_attention_matches_naive_oracle():
    g = torch.Generator().manual_seed(0)
    q, k, v = (torch.randn(2, 16, 8, generator=g) for _ in range(3))
    ref = naive_attention(q, k, v, heads=2)
    assert torch.max(torch.abs(multihead_attention(q, k, v, 2).double() - ref)) < 1e-5
    probs = []
    assert torch.max(torch.abs(multihead_attention(q, k, v, 2, probs).double() - ref)) < 1e-5
    assert torch.allclose(probs[0].sum(-1), torch.ones(2, 2, 16))


def test_cross_attention_probs_rows_sum_to_one():
    g = torch.Generator().manual_seed(1)
    p = attention_probs(torch.randn(3, 10, 8, generator=g), torch.randn(3, 5, 8, generator=g), 4)
    assert p.shape == (3, 4, 10, 5)
    assert torch.allclose(p.sum(-1), torch.ones(3, 4, 10))


def test_zero_b_lora_is_bitwise_noop():
    cfg = tiny_config()
    unet, text = build_base(cfg, 0)
    lora = LoraSet(unet.attention_sites(), cfg.lora_rank, cfg.lora_scale)
    z = torch.randn(2, 3, 16, 16)
    t = torch.tensor([3, 700])
    ctx = text(torch.tensor([tokenize("a vfx")] * 2))
    with torch.no_grad():
        assert torch.equal(unet(z, t, ctx), unet(z, t, ctx, lora))


def test_lora_merged_weight_oracle():
    torch.manual_seed(0)
    attn = Attention(16, 4, 8, "s", "cross")
    lora = LoraSet([attn], rank=3, scale=0.5)
    randomize_([a.B for a in lora.adapters.values()], seed=4)
    x, c = torch.randn(2, 10, 16), torch.randn(2, 6, 8)
    merged = Attention(16, 4, 8, "s", "cross")
    with torch.no_grad():
        for proj in "qkvo":
            ad = lora.get("s", proj)
            merged.projection(proj).weight.copy_(attn.projection(proj).weight + 0.5 * ad.B @ ad.A)
        merged.to_out.bias.copy_(attn.to_out.bias)
        assert torch.max(torch.abs(attn(x, c, lora=lora) - merged(x, c))) < 1e-5


def test_streams_equal_separate_forwards():
    cfg = tiny_config()
    unet, text = build_base(cfg, 1)
    loras = [LoraSet(unet.attention_sites(), 2, 1.0) for _ in range(2)]
    randomize_([a.B for lo in loras for a in lo.adapters.values()], seed=2)
    z = [torch.randn(2, 3, 16, 16) for _ in range(2)]
    t = torch.tensor([10, 20])
    ctx = [text(torch.tensor([tokenize("a vfx")] * 2)), text(torch.tensor([tokenize("sks")] * 2))]
    with torch.no_grad():
        both = unet.forward_streams(z, t, ctx, StreamRun(loras))
        for i in range(2):
            assert torch.equal(both[i], unet(z[i], t, ctx[i], loras[i]))


def test_site_layout():
    unet = UNet(DenoiserConfig(image_size=32, base_channels=16, time_embed_dim=64, context_dim=32))
    ids = unet.site_ids()
    assert len(ids) == len(set(ids)) == 14
    assert {a.resolution for a in unet.attention_sites()} == {16, 8}


def test_taps_and_shape_errors():
    cfg = tiny_config()
    unet, text = build_base(cfg)
    taps = {}
    ctx = encode_prompt(text, tokenize("a vfx"))
    assert ctx.shape == (8, 8)
    out = forward(unet, torch.zeros(1, 3, 16, 16), 5, ctx, taps=taps)
    assert out.shape == (1, 3, 16, 16)
    assert set(taps) == set(unet.site_ids())
    with pytest.raises(ShapeError):
        forward(unet, torch.zeros(1, 3, 8, 8), 5, ctx)
    with pytest.raises(ConfigError):
        forward(unet, torch.zeros(1, 3, 16, 16), 5, ctx, adapters=LoraSet([], 2, 1.0))


def test_text_encoder_errors():
    enc = TextEncoder(5, 8, 8, 2)
    with pytest.raises(VocabularyError):
        enc(torch.tensor([[0, 1, 2, 9, 0, 0, 0, 0]]))
    with pytest.raises(ShapeError):
        enc(torch.tensor([[0, 1]]))
