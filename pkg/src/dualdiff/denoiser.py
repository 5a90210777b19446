"""Epsilon-prediction U-Net with self/cross attention, a toy text encoder and LoRA.

The U-Net runs a *list* of streams in lockstep. A plain forward is a single
stream; the dual model (see :mod:`dualcore`) runs the global, anomaly and
optional background streams together and couples them at attention sites
through a :class:`StreamRun` subclass. Streams are never batched together,
so coupling-free multi-stream runs are bit-identical to separate forwards.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError, VocabularyError

VOCAB = ("<null>", "a", "vfx", "with", "sks")
NULL_ID = 0
MAX_TOKENS = 8
PROJECTIONS = ("q", "k", "v", "o")


@dataclass
class DenoiserConfig:
    image_size: int = 64
    in_channels: int = 3
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2, 4)
    num_res_blocks: int = 1
    attention_resolutions: tuple = (16, 8)
    heads: int = 4
    time_embed_dim: int = 128
    context_dim: int = 64
    vocab: tuple = VOCAB
    max_tokens: int = MAX_TOKENS
    lora_rank: int = 4
    lora_alpha: float | None = None
    norm_groups: int = 8

    def __post_init__(self):
        self.channel_multipliers = tuple(self.channel_multipliers)
        self.attention_resolutions = tuple(self.attention_resolutions)
        self.vocab = tuple(self.vocab)
        self.validate()

    def validate(self):
        if self.lora_rank < 1:
            raise ConfigError(f"lora_rank must be >= 1, got {self.lora_rank}")
        for r in self.attention_resolutions:
            if r < 1 or self.image_size % r:
                raise ConfigError(f"attention resolution {r} does not divide image_size {self.image_size}")
        if self.image_size % (2 ** (len(self.channel_multipliers) - 1)):
            raise ConfigError("image_size must be divisible by 2**(levels-1)")
        for m in self.channel_multipliers:
            if (self.base_channels * m) % self.heads:
                raise ConfigError("every level's channel count must be divisible by heads")
        if self.context_dim % self.heads:
            raise ConfigError("context_dim must be divisible by heads")
        if len(set(self.vocab)) != len(self.vocab) or self.vocab[0] != "<null>":
            raise ConfigError("vocab must be unique and start with '<null>'")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["attention_resolutions"] = list(self.attention_resolutions)
        d["vocab"] = list(self.vocab)
        return d

    @property
    def lora_scale(self) -> float:
        alpha = self.lora_rank if self.lora_alpha is None else self.lora_alpha
        return alpha / self.lora_rank


def _groups(channels: int, wanted: int) -> int:
    return math.gcd(channels, wanted)


# ------------------------------------------------------------------ prompts

def tokenize(prompt: str, vocab: Sequence[str] = VOCAB, max_tokens: int = MAX_TOKENS) -> list[int]:
    ids = []
    for word in prompt.split():
        if word not in vocab:
            raise VocabularyError(f"unknown token {word!r}")
        ids.append(vocab.index(word))
    if len(ids) > max_tokens:
        raise VocabularyError(f"prompt has {len(ids)} tokens, max is {max_tokens}")
    return ids + [NULL_ID] * (max_tokens - len(ids))


def prompt_length(tokens: Sequence[int]) -> int:
    n = len(tokens)
    while n and tokens[n - 1] == NULL_ID:
        n -= 1
    return n


@dataclass(frozen=True)
class PromptPair:
    p_tokens: tuple
    p_prime_tokens: tuple
    null_tokens: tuple
    p_text: str = ""
    p_prime_text: str = ""


def make_prompt_pair(p: str = "a vfx with sks", p_prime: str = "sks", vocab=VOCAB,
                     max_tokens: int = MAX_TOKENS) -> PromptPair:
    pt = tokenize(p, vocab, max_tokens)
    ppt = tokenize(p_prime, vocab, max_tokens)
    outer = list(pt[: prompt_length(pt)])
    for tok in ppt[: prompt_length(ppt)]:
        if tok not in outer:
            raise ConfigError(f"prompt {p_prime!r} is not nested in {p!r}")
        outer.remove(tok)
    return PromptPair(tuple(pt), tuple(ppt), (NULL_ID,) * max_tokens, p, p_prime)


# --------------------------------------------------------------------- LoRA

class LoraAdapter(nn.Module):
    """Low-rank update ``scale * B @ A`` for one frozen projection."""

    def __init__(self, d_in: int, d_out: int, rank: int, scale: float = 1.0):
        super().__init__()
        self.A = nn.Parameter(torch.empty(rank, d_in))
        self.B = nn.Parameter(torch.zeros(d_out, rank))
        nn.init.kaiming_uniform_(self.A, a=math.sqrt(5))
        self.scale = scale

    def delta(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(F.linear(x, self.A), self.B) * self.scale


class LoraSet(nn.Module):
    """One branch's adapters, keyed by ``{site_id}_{projection}``."""

    def __init__(self, sites: Sequence["Attention"], rank: int, scale: float):
        super().__init__()
        self.adapters = nn.ModuleDict()
        for site in sites:
            for proj in PROJECTIONS:
                lin = site.projection(proj)
                self.adapters[f"{site.site_id}_{proj}"] = LoraAdapter(
                    lin.in_features, lin.out_features, rank, scale
                )

    def get(self, site_id: str, proj: str) -> LoraAdapter | None:
        key = f"{site_id}_{proj}"
        return self.adapters[key] if key in self.adapters else None

    def check_sites(self, site_ids: Sequence[str]) -> None:
        expected = {f"{s}_{p}" for s in site_ids for p in PROJECTIONS}
        if set(self.adapters.keys()) != expected:
            raise ConfigError("adapter set does not match the model's attention sites")


def lora_linear(x: torch.Tensor, linear: nn.Linear, adapter: LoraAdapter | None) -> torch.Tensor:
    y = F.linear(x, linear.weight, linear.bias)
    if adapter is not None:
        y = y + adapter.delta(x)
    return y


# ---------------------------------------------------------------- attention

def attention_probs(q, k, heads):
    b, n, d = q.shape
    m = k.shape[1]
    dh = d // heads
    qh = q.reshape(b, n, heads, dh).transpose(1, 2)
    kh = k.reshape(b, m, heads, dh).transpose(1, 2)
    return torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(dh), dim=-1)


def multihead_attention(q, k, v, heads: int, probs_out: list | None = None):
    b, n, d = q.shape
    vh = v.reshape(b, v.shape[1], heads, d // heads).transpose(1, 2)
    if probs_out is None:
        qh = q.reshape(b, n, heads, d // heads).transpose(1, 2)
        kh = k.reshape(b, k.shape[1], heads, d // heads).transpose(1, 2)
        out = F.scaled_dot_product_attention(qh, kh, vh)
    else:
        probs = attention_probs(q, k, heads)
        probs_out.append(probs.detach())
        out = probs @ vh
    return out.transpose(1, 2).reshape(b, n, d)


class Attention(nn.Module):
    """Multi-head attention with Q/K/V/O projections; one attention site."""

    def __init__(self, dim: int, heads: int, context_dim: int | None = None,
                 site_id: str = "", kind: str = "self", resolution: int = 0):
        super().__init__()
        kv_dim = dim if context_dim is None else context_dim
        self.heads = heads
        self.site_id = site_id
        self.kind = kind
        self.resolution = resolution
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(kv_dim, dim, bias=False)
        self.to_v = nn.Linear(kv_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def projection(self, name: str) -> nn.Linear:
        return {"q": self.to_q, "k": self.to_k, "v": self.to_v, "o": self.to_out}[name]

    def project_qkv(self, x, context=None, lora: LoraSet | None = None,
                    inject: Callable[[torch.Tensor], torch.Tensor] | None = None):
        """Q from ``x``; K and V from ``context`` (cross) or from ``x``,
        optionally replaced by ``inject(x)`` before projection."""
        get = (lambda p: lora.get(self.site_id, p)) if lora is not None else (lambda p: None)
        q = lora_linear(x, self.to_q, get("q"))
        src = x if context is None else context
        if inject is not None:
            src = inject(src)
        k = lora_linear(src, self.to_k, get("k"))
        v = lora_linear(src, self.to_v, get("v"))
        return q, k, v

    def forward(self, x, context=None, lora: LoraSet | None = None, inject=None,
                probs_out: list | None = None):
        q, k, v = self.project_qkv(x, context, lora, inject)
        out = multihead_attention(q, k, v, self.heads, probs_out)
        o = lora.get(self.site_id, "o") if lora is not None else None
        return lora_linear(out, self.to_out, o)


class StreamRun:
    """Per-call stream bookkeeping: adapters, feature taps, cross-stream hooks.

    The base class runs streams independently.
    """

    def __init__(self, loras: Sequence[LoraSet | None], taps: dict | None = None,
                 probs: dict | None = None):
        self.loras = list(loras)
        self.taps = taps
        self.probs = probs

    def self_attention(self, attn: Attention, xs: list) -> list:
        return [attn(x, lora=lo) for x, lo in zip(xs, self.loras)]

    def cross_attention(self, attn: Attention, xs: list, ctxs: list) -> list:
        outs = []
        for i, (x, c, lo) in enumerate(zip(xs, ctxs, self.loras)):
            sink = None
            if self.probs is not None:
                sink = self.probs.setdefault(attn.site_id, [[] for _ in xs])[i]
            outs.append(attn(x, c, lora=lo, probs_out=sink))
        return outs

    def after_attention(self, site_id: str, xs: list) -> list:
        if self.taps is not None:
            self.taps[site_id] = [x.detach() for x in xs]
        return xs


# ------------------------------------------------------------------- blocks

class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin, groups), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout, groups), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class TransformerBlock(nn.Module):
    """Self-attention, cross-attention and feed-forward on a feature map."""

    def __init__(self, ch, context_dim, heads, groups, name, resolution):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch, groups), ch)
        self.proj_in = nn.Linear(ch, ch)
        self.norm1 = nn.LayerNorm(ch)
        self.attn1 = Attention(ch, heads, None, f"{name}_self", "self", resolution)
        self.norm2 = nn.LayerNorm(ch)
        self.attn2 = Attention(ch, heads, context_dim, f"{name}_cross", "cross", resolution)
        self.norm3 = nn.LayerNorm(ch)
        self.ff = nn.Sequential(nn.Linear(ch, 2 * ch), nn.GELU(), nn.Linear(2 * ch, ch))
        self.proj_out = nn.Linear(ch, ch)

    def forward(self, hs: list, ctxs: list, run: StreamRun) -> list:
        b, c, H, W = hs[0].shape
        xs = [self.proj_in(self.norm(h).flatten(2).transpose(1, 2)) for h in hs]
        outs = run.self_attention(self.attn1, [self.norm1(x) for x in xs])
        xs = run.after_attention(self.attn1.site_id, [x + o for x, o in zip(xs, outs)])
        outs = run.cross_attention(self.attn2, [self.norm2(x) for x in xs], ctxs)
        xs = run.after_attention(self.attn2.site_id, [x + o for x, o in zip(xs, outs)])
        xs = [x + self.ff(self.norm3(x)) for x in xs]
        return [h + self.proj_out(x).transpose(1, 2).reshape(b, c, H, W) for h, x in zip(hs, xs)]


def timestep_embedding(t: torch.Tensor, dim: int, dtype=torch.float32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb.to(dtype)


class UNet(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        C, g = cfg.base_channels, cfg.norm_groups
        tdim = cfg.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(C, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.conv_in = nn.Conv2d(cfg.in_channels, C, 3, padding=1)

        chans = [C * m for m in cfg.channel_multipliers]
        res = cfg.image_size
        self.down = nn.ModuleList()
        skip_ch = [C]
        ch = C
        for lvl, cout in enumerate(chans):
            level = nn.ModuleDict()
            level["res"] = nn.ModuleList()
            level["attn"] = nn.ModuleList()
            for j in range(cfg.num_res_blocks):
                level["res"].append(ResBlock(ch, cout, tdim, g))
                ch = cout
                level["attn"].append(self._attn(ch, res, f"down{lvl}_{j}"))
                skip_ch.append(ch)
            if lvl < len(chans) - 1:
                level["downsample"] = nn.Conv2d(ch, ch, 3, stride=2, padding=1)
                skip_ch.append(ch)
                res //= 2
            self.down.append(level)

        self.mid_res1 = ResBlock(ch, ch, tdim, g)
        self.mid_attn = TransformerBlock(ch, cfg.context_dim, cfg.heads, g, "mid_0", res)
        self.mid_res2 = ResBlock(ch, ch, tdim, g)

        self.up = nn.ModuleList()
        for lvl, cout in reversed(list(enumerate(chans))):
            level = nn.ModuleDict()
            level["res"] = nn.ModuleList()
            level["attn"] = nn.ModuleList()
            for j in range(cfg.num_res_blocks + 1):
                level["res"].append(ResBlock(ch + skip_ch.pop(), cout, tdim, g))
                ch = cout
                level["attn"].append(self._attn(ch, res, f"up{lvl}_{j}"))
            if lvl > 0:
                level["upsample"] = nn.Conv2d(ch, ch, 3, padding=1)
                res *= 2
            self.up.append(level)

        self.norm_out = nn.GroupNorm(_groups(ch, g), ch)
        self.conv_out = nn.Conv2d(ch, cfg.in_channels, 3, padding=1)

    def _attn(self, ch, res, name):
        if res in self.cfg.attention_resolutions:
            return TransformerBlock(ch, self.cfg.context_dim, self.cfg.heads, self.cfg.norm_groups, name, res)
        return nn.Identity()

    def attention_sites(self) -> list[Attention]:
        """All attention sites in stable (module registration) order."""
        return [m for m in self.modules() if isinstance(m, Attention)]

    def site_ids(self) -> list[str]:
        return [a.site_id for a in self.attention_sites()]

    def _check(self, z):
        cfg = self.cfg
        if z.dim() != 4 or z.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ShapeError(
                f"latent shape {tuple(z.shape)} does not match "
                f"(b, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size})"
            )

    def forward_streams(self, zs: list, t: torch.Tensor, ctxs: list, run: StreamRun) -> list:
        for z in zs:
            self._check(z)
        if len({z.shape[0] for z in zs}) != 1:
            raise ShapeError("streams must share a batch size")
        temb = self.time_mlp(timestep_embedding(t, self.cfg.base_channels, zs[0].dtype))

        def each(fn, hs):
            return [fn(h) for h in hs]

        hs = each(self.conv_in, zs)
        skips = [hs]
        for level in self.down:
            for res, attn in zip(level["res"], level["attn"]):
                hs = each(lambda h: res(h, temb), hs)
                if isinstance(attn, TransformerBlock):
                    hs = attn(hs, ctxs, run)
                skips.append(hs)
            if "downsample" in level:
                hs = each(level["downsample"], hs)
                skips.append(hs)

        hs = each(lambda h: self.mid_res1(h, temb), hs)
        hs = self.mid_attn(hs, ctxs, run)
        hs = each(lambda h: self.mid_res2(h, temb), hs)

        for level in self.up:
            for res, attn in zip(level["res"], level["attn"]):
                skip = skips.pop()
                hs = [res(torch.cat([h, s], dim=1), temb) for h, s in zip(hs, skip)]
                if isinstance(attn, TransformerBlock):
                    hs = attn(hs, ctxs, run)
            if "upsample" in level:
                hs = each(lambda h: level["upsample"](F.interpolate(h, scale_factor=2.0, mode="nearest")), hs)

        return each(lambda h: self.conv_out(F.silu(self.norm_out(h))), hs)

    def forward(self, z, t, context, lora: LoraSet | None = None, taps: dict | None = None):
        run = StreamRun([lora], taps=taps)
        return self.forward_streams([z], t, [context], run)[0]


class TextEncoder(nn.Module):
    """Token embedding plus learned positions and one self-attention mixing layer."""

    def __init__(self, vocab_size: int, dim: int, max_tokens: int = MAX_TOKENS, heads: int = 4):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_tokens = max_tokens
        self.token = nn.Embedding(vocab_size, dim)
        self.pos = nn.Parameter(torch.randn(max_tokens, dim) * 0.02)
        self.norm = nn.LayerNorm(dim)
        self.mix = Attention(dim, heads, site_id="text_mix")

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.dim() == 1:
            tokens = tokens[None]
        if tokens.shape[-1] != self.max_tokens:
            raise ShapeError(f"expected {self.max_tokens} tokens, got {tokens.shape[-1]}")
        if int(tokens.min()) < 0 or int(tokens.max()) >= self.vocab_size:
            raise VocabularyError(f"token id outside vocabulary of size {self.vocab_size}")
        x = self.token(tokens) + self.pos
        return x + self.mix(self.norm(x))


def encode_prompt(encoder: TextEncoder, tokens) -> torch.Tensor:
    """Context sequence (max_tokens, context_dim) for one padded token list."""
    t = torch.as_tensor(list(tokens), dtype=torch.long)
    return encoder(t)[0]


def forward(model: UNet, z_t, t, context, adapters: LoraSet | None = None,
            taps: dict | None = None) -> torch.Tensor:
    """eps prediction; ``taps``, if given, is filled with site_id -> [feature]."""
    if adapters is not None:
        adapters.check_sites(model.site_ids())
    if not isinstance(t, torch.Tensor):
        t = torch.full((z_t.shape[0],), int(t), dtype=torch.long)
    if context.dim() == 2:
        context = context.expand(z_t.shape[0], -1, -1)
    return model(z_t, t, context, adapters, taps)


def build_base(cfg: DenoiserConfig, seed: int = 0) -> tuple[UNet, TextEncoder]:
    torch.manual_seed(seed)
    unet = UNet(cfg)
    text = TextEncoder(len(cfg.vocab), cfg.context_dim, cfg.max_tokens, cfg.heads)
    return unet, text
