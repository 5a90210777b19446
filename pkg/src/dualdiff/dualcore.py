"""Two LoRA branches of one frozen denoiser, coupled at every attention site.

The global branch denoises the whole anomaly image, the anomaly branch the
isolated anomaly part. After each self- and cross-attention block the two
branches' token features are stacked per spatial position and mixed by a
2-token shared attention with a residual (SAIM). Optionally a third,
background stream feeds its self-attention outputs into the global branch's
keys and values through a gamma-scaled MLP (BCM).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .denoiser import (
    Attention,
    DenoiserConfig,
    LoraSet,
    PromptPair,
    StreamRun,
    TextEncoder,
    UNet,
    make_prompt_pair,
    multihead_attention,
    tokenize,
)
from .errors import ConfigError, FormatError, ShapeError, TrainingDivergence
from .sched import NoiseSchedule, TimestepSampler, ddim_step, q_sample, timestep_subsequence
from .synthdata import SamplePair

log = logging.getLogger(__name__)

BRANCHES = ("global", "anomaly")
BCM_GAMMA_INIT = 0.1


# --------------------------------------------------------------------- SAIM

class SaimSite(nn.Module):
    """Shared attention across the two branches at one site, per spatial position."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)
        nn.init.zeros_(self.to_out.weight)
        nn.init.zeros_(self.to_out.bias)

    def attend(self, stacked: torch.Tensor) -> torch.Tensor:
        out = multihead_attention(self.to_q(stacked), self.to_k(stacked), self.to_v(stacked), self.heads)
        return self.to_out(out)

    def forward(self, h_g, h_a):
        return saim_share(h_g, h_a, self)


def stack_branches(h_g, h_a):
    """(b, w, c) x 2 -> (b*w, 2, c); position j of each branch become one 2-token sequence."""
    b, w, c = h_g.shape
    return torch.stack([h_g, h_a], dim=2).reshape(b * w, 2, c)


def split_branches(stacked, b, w):
    c = stacked.shape[-1]
    s = stacked.reshape(b, w, 2, c)
    return s[:, :, 0], s[:, :, 1]


def saim_share(h_g: torch.Tensor, h_a: torch.Tensor, site: SaimSite):
    if h_g.shape != h_a.shape or h_g.dim() != 3:
        raise ShapeError(f"branch features differ: {tuple(h_g.shape)} vs {tuple(h_a.shape)}")
    b, w, _ = h_g.shape
    stacked = stack_branches(h_g, h_a)
    return split_branches(site.attend(stacked) + stacked, b, w)


# ---------------------------------------------------------------------- BCM

class BcmSite(nn.Module):
    def __init__(self, dim: int, gamma: float = BCM_GAMMA_INIT):
        super().__init__()
        self.gamma = nn.Parameter(torch.tensor(float(gamma)))
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))
        nn.init.zeros_(self.mlp[2].weight)
        nn.init.zeros_(self.mlp[2].bias)

    def fuse(self, phi_z, phi_zb):
        return phi_z + self.gamma * self.mlp(phi_zb)


def bcm_inject(phi_z, phi_zb, site: BcmSite, attn: Attention, lora: LoraSet | None = None):
    """(Q, K, V) of the global branch: Q from the raw feature, K/V from the fused one."""
    if phi_z.shape != phi_zb.shape:
        raise ConfigError(f"background feature {tuple(phi_zb.shape)} does not match {tuple(phi_z.shape)}")
    return attn.project_qkv(phi_z, lora=lora, inject=lambda x: site.fuse(x, phi_zb))


# -------------------------------------------------------------- dual model

class DualRun(StreamRun):
    """Streams: 0 global, 1 anomaly, 2 background (optional)."""

    def __init__(self, model: "DualDiffusion", loras, bcm: bool, taps=None, probs=None):
        super().__init__(loras, taps, probs)
        self.model = model
        self.bcm = bcm

    def self_attention(self, attn: Attention, xs):
        if not self.bcm:
            return super().self_attention(attn, xs)
        g, a, bg = xs
        lo_g, lo_a, lo_bg = self.loras
        out_bg = attn(bg, lora=lo_bg)
        site = self.model.bcm[attn.site_id]
        out_g = attn(g, lora=lo_g, inject=lambda phi: site.fuse(phi, out_bg))
        out_a = attn(a, lora=lo_a)
        return [out_g, out_a, out_bg]

    def after_attention(self, site_id, xs):
        xs = super().after_attention(site_id, xs)
        g, a = saim_share(xs[0], xs[1], self.model.saim[site_id])
        return [g, a, *xs[2:]]


@dataclass
class DualState:
    z_t: torch.Tensor
    z_prime_t: torch.Tensor
    t: torch.Tensor
    z_bg_t: torch.Tensor | None = None
    features: dict = field(default_factory=dict)


class DualDiffusion(nn.Module):
    def __init__(self, cfg: DenoiserConfig, bcm_enabled: bool = False,
                 unet: UNet | None = None, text_encoder: TextEncoder | None = None):
        super().__init__()
        self.cfg = cfg
        self.bcm_enabled = bcm_enabled
        self.unet = unet if unet is not None else UNet(cfg)
        self.text_encoder = text_encoder if text_encoder is not None else TextEncoder(
            len(cfg.vocab), cfg.context_dim, cfg.max_tokens, cfg.heads)
        sites = self.unet.attention_sites()
        self.lora = nn.ModuleDict({b: LoraSet(sites, cfg.lora_rank, cfg.lora_scale) for b in BRANCHES})
        self.saim = nn.ModuleDict({s.site_id: SaimSite(s.to_q.in_features, cfg.heads) for s in sites})
        self.bcm = nn.ModuleDict(
            {s.site_id: BcmSite(s.to_q.in_features) for s in sites if s.kind == "self"} if bcm_enabled else {}
        )
        self.freeze_base()

    def freeze_base(self):
        for p in self.unet.parameters():
            p.requires_grad_(False)

    def dual_eps(self, z, z_prime, t, ctx_g, ctx_a, z_bg=None, taps=None, probs=None,
                 use_bcm: bool | None = None):
        bcm = self.bcm_enabled if use_bcm is None else use_bcm
        if bcm and not self.bcm_enabled:
            raise ConfigError("this model was built without BCM sites")
        if bcm and z_bg is None:
            raise ConfigError("BCM is enabled but no background latent was given")
        zs = [z, z_prime] + ([z_bg] if bcm else [])
        ctxs = [ctx_g, ctx_a] + ([ctx_g] if bcm else [])
        loras = [self.lora["global"], self.lora["anomaly"]] + ([self.lora["global"]] if bcm else [])
        run = DualRun(self, loras, bcm, taps, probs)
        out = self.unet.forward_streams(zs, t, ctxs, run)
        return out[0], out[1]

    def single_eps(self, z, t, ctx, branch: str | None):
        lora = self.lora[branch] if branch is not None else None
        return self.unet(z, t, ctx, lora)

    def encode(self, tokens: Sequence[int] | torch.Tensor, batch: int) -> torch.Tensor:
        t = torch.as_tensor(tokens, dtype=torch.long)
        if t.dim() == 1:
            t = t[None].expand(batch, -1)
        return self.text_encoder(t)


def dual_forward(model: DualDiffusion, state: DualState, prompts: PromptPair, bcm_enabled: bool | None = None):
    """(eps_hat, eps_hat_star) for a DualState under the prompt pair."""
    bcm = model.bcm_enabled if bcm_enabled is None else bcm_enabled
    if bcm and state.z_bg_t is None:
        raise ConfigError("bcm_enabled needs a background latent in the state")
    b = state.z_t.shape[0]
    t = state.t if isinstance(state.t, torch.Tensor) else torch.full((b,), int(state.t), dtype=torch.long)
    ctx_g = model.encode(prompts.p_tokens, b)
    ctx_a = model.encode(prompts.p_prime_tokens, b)
    return model.dual_eps(state.z_t, state.z_prime_t, t, ctx_g, ctx_a,
                          state.z_bg_t if bcm else None, taps=state.features, use_bcm=bcm)


def dual_loss(eps, eps_star, eps_hat, eps_hat_star):
    if eps.shape != eps_hat.shape or eps_star.shape != eps_hat_star.shape:
        raise ShapeError("noise and prediction shapes differ")
    return F.mse_loss(eps_hat, eps) + F.mse_loss(eps_hat_star, eps_star)


def lora_params(adapters: LoraSet) -> list[torch.Tensor]:
    out = []
    for adapter in adapters.adapters.values():
        out += [adapter.A, adapter.B]
    return out


def trainable_named_params(model: DualDiffusion, branch: str | None = None) -> list[tuple[str, nn.Parameter]]:
    """LoRA of ``branch`` (both if None), text encoder, SAIM and BCM. Never base U-Net weights."""
    branches = BRANCHES if branch is None else (branch,)
    out = []
    for name, p in model.named_parameters():
        head = name.split(".")[0]
        if head == "lora" and name.split(".")[1] in branches:
            out.append((name, p))
        elif head in ("text_encoder", "saim", "bcm"):
            out.append((name, p))
    return out


def trainable_params(model: DualDiffusion, branch: str | None = None) -> list[nn.Parameter]:
    return [p for _, p in trainable_named_params(model, branch)]


# ------------------------------------------------------------ checkpoints

def _spec_name(name: str) -> str:
    # lora.global.adapters.<site>_<proj>.A -> lora.global.<site>_<proj>.A
    return name.replace(".adapters.", ".", 1) if name.startswith("lora.") else name


def _module_name(name: str) -> str:
    if name.startswith("lora."):
        _, branch, rest = name.split(".", 2)
        return f"lora.{branch}.adapters.{rest}"
    return name


def save_base(directory, unet: UNet, text_encoder: TextEncoder, meta: dict | None = None):
    tensors = {f"unet.{k}": v for k, v in unet.state_dict().items()}
    tensors.update({f"text_encoder.{k}": v for k, v in text_encoder.state_dict().items()})
    info = {"kind": "base", "config": unet.cfg.to_dict(), **(meta or {})}
    return ckpt.save_tensors(directory, tensors, info)


def load_base(directory) -> tuple[UNet, TextEncoder, dict]:
    meta, tensors = ckpt.load_tensors(directory)
    if "config" not in meta:
        raise FormatError(f"{directory}: checkpoint manifest lacks the model config")
    cfg = DenoiserConfig(**meta["config"])
    unet = UNet(cfg)
    text = TextEncoder(len(cfg.vocab), cfg.context_dim, cfg.max_tokens, cfg.heads)
    _load_into(unet, {k[5:]: v for k, v in tensors.items() if k.startswith("unet.")}, directory)
    _load_into(text, {k[13:]: v for k, v in tensors.items() if k.startswith("text_encoder.")}, directory)
    return unet, text, meta


def _load_into(module: nn.Module, state: dict, directory):
    expected = set(module.state_dict().keys())
    missing = expected - set(state)
    if missing:
        raise FormatError(f"{directory}: checkpoint lacks tensor {sorted(missing)[0]!r}")
    extra = set(state) - expected
    if extra:
        raise FormatError(f"{directory}: unexpected tensor {sorted(extra)[0]!r}")
    module.load_state_dict(state)


def save_dual(directory, model: DualDiffusion, meta: dict | None = None):
    tensors = {_spec_name(k): v for k, v in model.state_dict().items()}
    info = {"kind": "dual", "config": model.cfg.to_dict(), "bcm_enabled": model.bcm_enabled, **(meta or {})}
    return ckpt.save_tensors(directory, tensors, info)


def load_dual(directory) -> tuple[DualDiffusion, dict]:
    meta, tensors = ckpt.load_tensors(directory)
    if meta.get("kind") != "dual":
        raise FormatError(f"{directory}: not a dual checkpoint (kind={meta.get('kind')!r})")
    cfg = DenoiserConfig(**meta["config"])
    model = DualDiffusion(cfg, bool(meta.get("bcm_enabled", False)))
    state = {_module_name(k): v for k, v in tensors.items()}
    names = set(state)
    for b in BRANCHES:
        if not any(n.startswith(f"lora.{b}.") for n in names):
            raise FormatError(f"{directory}: checkpoint has no '{b}' adapter set")
    _load_into(model, state, directory)
    return model, meta


# --------------------------------------------------------------- training

@dataclass
class TrainConfig:
    batch_size: int = 4
    learning_rate: float = 5e-6
    steps: int = 5000
    bcm_enabled: bool = False
    cfg_dropout: float = 0.1
    flip: bool = True
    seed: int = 0
    checkpoint_every: int = 0
    grad_clip: float = 1.0
    lr_schedule: str = "constant"  # or "cosine": decay to zero over `steps`
    stratify_steps: int = 10  # timesteps stratified over this many steps; 0 = iid
    offset_noise: float = 0.0

    def validate(self):
        if self.batch_size < 1 or self.steps < 0 or self.learning_rate <= 0:
            raise ConfigError("batch_size >= 1, steps >= 0 and learning_rate > 0 are required")
        if not 0.0 <= self.cfg_dropout < 1.0:
            raise ConfigError("cfg_dropout must lie in [0, 1)")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.stratify_steps < 0:
            raise ConfigError("stratify_steps must be >= 0")
        if self.offset_noise < 0:
            raise ConfigError("offset_noise must be >= 0")
        return self


@dataclass
class PretrainConfig:
    batch_size: int = 16
    learning_rate: float = 2e-4
    steps: int = 1500
    cfg_dropout: float = 0.1
    flip: bool = True
    seed: int = 0
    prompt: str = "a vfx"
    grad_clip: float = 1.0
    lr_schedule: str = "constant"
    stratify_steps: int = 10
    offset_noise: float = 0.0


def to_latent(images: np.ndarray | Sequence[np.ndarray]) -> torch.Tensor:
    """[0, 1] HxWx3 images -> [-1, 1] (N, 3, H, W) float32."""
    arr = np.stack([np.asarray(x, dtype=np.float32) for x in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous() * 2.0 - 1.0


def from_latent(z: torch.Tensor) -> np.ndarray:
    return ((z.detach().clamp(-1, 1) + 1.0) / 2.0).permute(0, 2, 3, 1).cpu().numpy().astype(np.float32)


def flip_batch(tensors: Sequence[torch.Tensor], hflip: torch.Tensor, vflip: torch.Tensor) -> list[torch.Tensor]:
    """Flip item i of every tensor by the same (hflip[i], vflip[i])."""
    out = []
    for x in tensors:
        x = torch.where(hflip[:, None, None, None], x.flip(-1), x)
        x = torch.where(vflip[:, None, None, None], x.flip(-2), x)
        out.append(x)
    return out


class _Batcher:
    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        self.n, self.batch, self.rng = n, batch, rng
        self.order: list[int] = []

    def next(self) -> np.ndarray:
        idx = []
        while len(idx) < self.batch:
            if not self.order:
                self.order = list(self.rng.permutation(self.n))
            idx.append(self.order.pop())
        return np.array(idx)


def _check_finite(loss: torch.Tensor, step: int):
    if not torch.isfinite(loss):
        raise TrainingDivergence(f"non-finite loss {loss.item()} at step {step}")


def training_noise(shape, generator: torch.Generator, offset: float = 0.0) -> torch.Tensor:
    """Gaussian noise plus, when ``offset`` > 0, a per-item per-channel constant of std ``offset``.

    In pixel space the image mean leaks into z_t long before the content
    does, so a plain-noise model reads brightness off its input and sampling
    from zero-mean noise stays at mid grey. The shared offset hides that
    leak, which forces brightness to come from the conditioning (the anomaly
    branch must learn that its background is black).
    """
    eps = torch.randn(shape, generator=generator)
    if offset > 0:
        eps = eps + offset * torch.randn((*shape[:2], 1, 1), generator=generator)
    return eps


def _lr_factor(kind: str, steps: int) -> Callable[[int], float]:
    if kind == "cosine":
        return lambda step: 0.5 * (1.0 + math.cos(math.pi * step / max(steps, 1)))
    return lambda step: 1.0


def pretrain(unet: UNet, text_encoder: TextEncoder, normals: Sequence[SamplePair], sched: NoiseSchedule,
             cfg: PretrainConfig, on_step: Callable[[int, float], None] | None = None) -> list[float]:
    """Single-branch training of base U-Net and text encoder on normal images."""
    if not normals:
        raise ConfigError("pretraining needs at least one normal sample")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    x0 = to_latent([s.image for s in normals])
    vocab = unet.cfg.vocab
    tokens = torch.tensor(tokenize(cfg.prompt, vocab, unet.cfg.max_tokens))
    null = torch.zeros_like(tokens)
    params = list(unet.parameters()) + list(text_encoder.parameters())
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=0.0)
    lr_at = _lr_factor(cfg.lr_schedule, cfg.steps)
    tsampler = TimestepSampler(sched.T, cfg.stratify_steps * cfg.batch_size, gen)
    batcher = _Batcher(len(x0), cfg.batch_size, rng)
    losses = []
    unet.train()
    for step in range(cfg.steps):
        idx = batcher.next()
        x = x0[idx]
        b = len(idx)
        if cfg.flip:
            hf = torch.rand(b, generator=gen) < 0.5
            vf = torch.rand(b, generator=gen) < 0.5
            (x,) = flip_batch([x], hf, vf)
        t = tsampler.draw(b)
        eps = training_noise(x.shape, gen, cfg.offset_noise)
        drop = torch.rand(b, generator=gen) < cfg.cfg_dropout
        tok = torch.where(drop[:, None], null[None], tokens[None])
        ctx = text_encoder(tok)
        loss = F.mse_loss(unet(q_sample(x, t, eps, sched), t, ctx), eps)
        _check_finite(loss, step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        for group in opt.param_groups:
            group["lr"] = cfg.learning_rate * lr_at(step)
        opt.step()
        losses.append(float(loss.item()))
        if on_step:
            on_step(step, losses[-1])
    unet.eval()
    return losses


def finetune(model: DualDiffusion, pairs: Sequence[SamplePair], sched: NoiseSchedule, cfg: TrainConfig,
             prompts: PromptPair | None = None,
             on_step: Callable[[int, float], None] | None = None,
             on_checkpoint: Callable[[int], None] | None = None) -> list[float]:
    """Joint training of both branches on (image, anomaly part[, background]) triples.

    Each item gets one timestep shared by all its streams; the global and
    background latents share one noise draw, the anomaly part has its own.
    Only :func:`trainable_params` are updated.
    """
    cfg.validate()
    if not pairs:
        raise ConfigError("fine-tuning needs at least one sample pair")
    if cfg.bcm_enabled and not model.bcm_enabled:
        raise ConfigError("TrainConfig enables BCM but the model was built without it")
    prompts = prompts or make_prompt_pair(vocab=model.cfg.vocab, max_tokens=model.cfg.max_tokens)
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    data = [to_latent([s.image for s in pairs]), to_latent([s.anomaly_part for s in pairs])]
    if cfg.bcm_enabled:
        data.append(to_latent([s.background for s in pairs]))
    p_tok = torch.tensor(prompts.p_tokens)
    pp_tok = torch.tensor(prompts.p_prime_tokens)
    null = torch.tensor(prompts.null_tokens)

    model.freeze_base()
    params = trainable_params(model)
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=0.0)
    lr_at = _lr_factor(cfg.lr_schedule, cfg.steps)
    tsampler = TimestepSampler(sched.T, cfg.stratify_steps * cfg.batch_size, gen)
    batcher = _Batcher(len(pairs), cfg.batch_size, rng)
    losses = []
    model.train()
    for step in range(cfg.steps):
        idx = batcher.next()
        b = len(idx)
        batch = [d[idx] for d in data]
        if cfg.flip:
            hf = torch.rand(b, generator=gen) < 0.5
            vf = torch.rand(b, generator=gen) < 0.5
            batch = flip_batch(batch, hf, vf)
        t = tsampler.draw(b)
        eps = training_noise(batch[0].shape, gen, cfg.offset_noise)
        eps_star = training_noise(batch[1].shape, gen, cfg.offset_noise)
        z = q_sample(batch[0], t, eps, sched)
        zp = q_sample(batch[1], t, eps_star, sched)
        zb = q_sample(batch[2], t, eps, sched) if cfg.bcm_enabled else None
        drop = torch.rand(b, generator=gen) < cfg.cfg_dropout
        ctx_g = model.text_encoder(torch.where(drop[:, None], null[None], p_tok[None]))
        ctx_a = model.text_encoder(torch.where(drop[:, None], null[None], pp_tok[None]))
        eps_hat, eps_hat_star = model.dual_eps(z, zp, t, ctx_g, ctx_a, zb)
        loss = dual_loss(eps, eps_star, eps_hat, eps_hat_star)
        _check_finite(loss, step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        for group in opt.param_groups:
            group["lr"] = cfg.learning_rate * lr_at(step)
        opt.step()
        losses.append(float(loss.item()))
        if on_step:
            on_step(step, losses[-1])
        if on_checkpoint and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(step + 1)
    model.eval()
    return losses


# --------------------------------------------------------------- sampling

@dataclass
class SampleConfig:
    n_steps: int = 50
    guidance_scale: float = 2.5
    eta: float = 0.0
    batch_size: int = 25


def _seeded_noise(seeds: Sequence[int], shape) -> tuple[torch.Tensor, torch.Tensor]:
    zs, zps = [], []
    for s in seeds:
        g = torch.Generator().manual_seed(int(s))
        zs.append(torch.randn(shape, generator=g))
        zps.append(torch.randn(shape, generator=g))
    return torch.stack(zs), torch.stack(zps)


@torch.no_grad()
def sample_pairs(model: DualDiffusion, prompts: PromptPair, seeds: Sequence[int], sched: NoiseSchedule,
                 cfg: SampleConfig | None = None, backgrounds: Sequence[np.ndarray] | None = None,
                 probs_sink: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
    """DDIM sampling of (whole image, anomaly part) pairs, one pair per seed.

    Classifier-free guidance is applied per branch. With a BCM checkpoint,
    ``backgrounds`` (one [0, 1] image per seed) condition the global branch;
    the background latent is noised with that pair's initial global noise.
    ``probs_sink`` collects cross-attention probabilities from the second
    half of the steps (global branch, conditional pass).
    """
    cfg = cfg or SampleConfig()
    if model.bcm_enabled and backgrounds is None:
        raise ConfigError("this checkpoint was trained with BCM; a background source is required")
    if backgrounds is not None and len(backgrounds) != len(seeds):
        raise ConfigError("need one background per seed")
    model.eval()
    c = model.cfg
    shape = (c.in_channels, c.image_size, c.image_size)
    ts = timestep_subsequence(sched.T, cfg.n_steps)
    guided = cfg.guidance_scale != 1.0
    images, parts = [], []
    for start in range(0, len(seeds), cfg.batch_size):
        chunk = list(seeds[start:start + cfg.batch_size])
        b = len(chunk)
        z, zp = _seeded_noise(chunk, shape)
        bg0 = to_latent(backgrounds[start:start + b]) if model.bcm_enabled else None
        eps_bg = z.clone()
        noise_gen = torch.Generator().manual_seed(int(chunk[0]) ^ 0x5EED)
        ctx_g = model.encode(prompts.p_tokens, b)
        ctx_a = model.encode(prompts.p_prime_tokens, b)
        if guided:
            null = model.encode(prompts.null_tokens, b)
            ctx_g = torch.cat([ctx_g, null])
            ctx_a = torch.cat([ctx_a, null])
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else -1
            reps = 2 if guided else 1
            tt = torch.full((b * reps,), t, dtype=torch.long)
            zb = None
            if model.bcm_enabled:
                zb = q_sample(bg0, torch.full((b,), t, dtype=torch.long), eps_bg, sched)
                zb = zb.repeat(reps, 1, 1, 1)
            probs = {} if probs_sink is not None and i >= len(ts) // 2 else None
            e, es = model.dual_eps(z.repeat(reps, 1, 1, 1), zp.repeat(reps, 1, 1, 1), tt, ctx_g, ctx_a, zb,
                                   probs=probs)
            if probs:
                for site, per_stream in probs.items():
                    probs_sink.setdefault(site, []).extend(p[:b] for p in per_stream[0])
            if guided:
                s = cfg.guidance_scale
                e = e[b:] + s * (e[:b] - e[b:])
                es = es[b:] + s * (es[:b] - es[b:])
            noise = noise2 = None
            if cfg.eta > 0:
                noise = torch.randn(z.shape, generator=noise_gen)
                noise2 = torch.randn(zp.shape, generator=noise_gen)
            z = ddim_step(z, e, t, t_prev, sched, cfg.eta, noise)
            zp = ddim_step(zp, es, t, t_prev, sched, cfg.eta, noise2)
        images.append(from_latent(z))
        parts.append(from_latent(zp))
    return np.concatenate(images), np.concatenate(parts)


def sample_pair(model, prompts, seed: int, sched, n_steps: int = 50, guidance_scale: float = 2.5,
                background: np.ndarray | None = None):
    cfg = SampleConfig(n_steps=n_steps, guidance_scale=guidance_scale)
    bgs = None if background is None else [background]
    img, part = sample_pairs(model, prompts, [seed], sched, cfg, bgs)
    return img[0], part[0]


@torch.no_grad()
def export_attention_maps(model: DualDiffusion, prompts: PromptPair, seed: int, sched: NoiseSchedule,
                          cfg: SampleConfig | None = None, background: np.ndarray | None = None):
    """Per-token cross-attention heatmaps of the global branch.

    Returns (maps, image, part) where ``maps[(site_id, token_index)]`` is a
    [0, 1] array at the site's resolution, averaged over heads, queries'
    second-half sampling steps, and min-max normalised.
    """
    sink: dict = {}
    bgs = None if background is None else [background]
    img, part = sample_pairs(model, prompts, [seed], sched, cfg, bgs, probs_sink=sink)
    n_tok = sum(1 for tok in prompts.p_tokens if tok != 0)
    cross = {a.site_id: a.resolution for a in model.unet.attention_sites() if a.kind == "cross"}
    maps = {}
    for site, res in cross.items():
        probs = torch.stack(sink[site]).mean(0)[0].mean(0)  # (queries, tokens)
        for k in range(n_tok):
            m = probs[:, k].reshape(res, res).double().numpy()
            lo, hi = m.min(), m.max()
            maps[(site, k)] = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    return maps, img[0], part[0]


def attention_mass_ratio(heatmap: np.ndarray, mask: np.ndarray) -> float:
    """Mean heat inside ``mask`` over mean heat outside, at the heatmap's resolution."""
    res = heatmap.shape[0]
    m = torch.from_numpy(np.asarray(mask, dtype=np.float32))[None, None]
    m = F.adaptive_avg_pool2d(m, res)[0, 0].numpy() > 0.25
    if not m.any() or m.all():
        return float("nan")
    return float(heatmap[m].mean() / max(heatmap[~m].mean(), 1e-12))
