import math

import numpy as np
import pytest
import torch

from conftest import micro_config, randomize_, tiny_config
from dualdiff import dualcore
from dualdiff.denoiser import Attention, make_prompt_pair
from dualdiff.dualcore import (
    BcmSite,
    DualDiffusion,
    DualState,
    SaimSite,
    SampleConfig,
    TrainConfig,
    bcm_inject,
    dual_forward,
    dual_loss,
    finetune,
    flip_batch,
    sample_pairs,
    saim_share,
    split_branches,
    stack_branches,
    to_latent,
    trainable_named_params,
    trainable_params,
)
from dualdiff.errors import ConfigError, ShapeError, TrainingDivergence
from dualdiff.sched import ddim_step, linear_schedule, timestep_subsequence
from dualdiff.synthdata import DatasetSpec, generate_dataset

PROMPTS = make_prompt_pair()


def make_state(cfg, b=2, seed=0, dtype=torch.float32, bg=True):
    g = torch.Generator().manual_seed(seed)
    shape = (b, cfg.in_channels, cfg.image_size, cfg.image_size)
    z = torch.randn(shape, generator=g, dtype=dtype)
    zp = torch.randn(shape, generator=g, dtype=dtype)
    zb = torch.randn(shape, generator=g, dtype=dtype) if bg else None
    t = torch.randint(0, 1000, (b,), generator=g)
    return DualState(z, zp, t, zb)


def independent_eps(model, state):
    b = state.z_t.shape[0]
    ctx_g = model.encode(PROMPTS.p_tokens, b)
    ctx_a = model.encode(PROMPTS.p_prime_tokens, b)
    return (model.single_eps(state.z_t, state.t, ctx_g, "global"),
            model.single_eps(state.z_prime_t, state.t, ctx_a, "anomaly"))


# ---------------------------------------------------------------- SAIM

def saim_oracle(h_g, h_a, site):
    """Per position: attention over the two tokens {h_g[b,j], h_a[b,j]} in float64."""
    Wq, Wk, Wv = (w.weight.double() for w in (site.to_q, site.to_k, site.to_v))
    Wo, bo = site.to_out.weight.double(), site.to_out.bias.double()
    b, w, c = h_g.shape
    dh = c // site.heads
    out_g = torch.empty(b, w, c, dtype=torch.float64)
    out_a = torch.empty(b, w, c, dtype=torch.float64)
    for i in range(b):
        for j in range(w):
            x = torch.stack([h_g[i, j], h_a[i, j]]).double()
            q, k, v = x @ Wq.T, x @ Wk.T, x @ Wv.T
            mixed = torch.empty(2, c, dtype=torch.float64)
            for h in range(site.heads):
                sl = slice(h * dh, (h + 1) * dh)
                for r in range(2):
                    logits = [float(q[r, sl] @ k[s, sl]) / math.sqrt(dh) for s in range(2)]
                    m = max(logits)
                    e = [math.exp(l - m) for l in logits]
                    mixed[r, sl] = (e[0] * v[0, sl] + e[1] * v[1, sl]) / (e[0] + e[1])
            y = mixed @ Wo.T + bo + x
            out_g[i, j], out_a[i, j] = y[0], y[1]
    return out_g, out_a


def test_saim_matches_oracle_on_random_inputs():
    g = torch.Generator().manual_seed(0)
    worst = 0.0
    for case in range(100):
        heads = [1, 2, 4][case % 3]
        c = heads * int(torch.randint(1, 4, (1,), generator=g))
        b, w = int(torch.randint(1, 3, (1,), generator=g)), int(torch.randint(1, 5, (1,), generator=g))
        torch.manual_seed(case)
        site = SaimSite(c, heads)
        randomize_(site.parameters(), scale=0.5, seed=case)
        h_g, h_a = torch.randn(b, w, c, generator=g), torch.randn(b, w, c, generator=g)
        og, oa = saim_share(h_g, h_a, site)
        rg, ra = saim_oracle(h_g, h_a, site)
        worst = max(worst, (og.double() - rg).abs().max().item(), (oa.double() - ra).abs().max().item())
    assert worst <= 1e-5


def test_stack_split_round_trip_exact():
    h_g, h_a = torch.randn(3, 7, 5), torch.randn(3, 7, 5)
    s = stack_branches(h_g, h_a)
    assert s.shape == (21, 2, 5)
    assert torch.equal(s[7 + 2, 0], h_g[1, 2]) and torch.equal(s[7 + 2, 1], h_a[1, 2])
    g2, a2 = split_branches(s, 3, 7)
    assert torch.equal(g2, h_g) and torch.equal(a2, h_a)


def test_saim_zero_init_is_identity_and_shape_checked():
    site = SaimSite(8, 2)
    h_g, h_a = torch.randn(2, 4, 8), torch.randn(2, 4, 8)
    og, oa = saim_share(h_g, h_a, site)
    assert torch.equal(og, h_g) and torch.equal(oa, h_a)
    with pytest.raises(ShapeError):
        saim_share(h_g, torch.randn(2, 5, 8), site)


# ----------------------------------------------------------------- BCM

def test_bcm_contract():
    torch.manual_seed(0)
    attn = Attention(8, 2, None, "x_self", "self")
    site = BcmSite(8)
    assert site.gamma.item() == pytest.approx(0.1)
    randomize_(site.mlp.parameters(), seed=1)
    phi, phi_b = torch.randn(2, 6, 8), torch.randn(2, 6, 8)
    q1, k1, v1 = bcm_inject(phi, phi_b, site, attn)
    with torch.no_grad():
        site.gamma.fill_(0.7)
    q2, k2, v2 = bcm_inject(phi, phi_b, site, attn)
    assert torch.equal(q1, q2)
    assert not torch.allclose(k1, k2) and not torch.allclose(v1, v2)
    with torch.no_grad():
        site.gamma.zero_()
    q0, k0, v0 = bcm_inject(phi, phi_b, site, attn)
    qr, kr, vr = attn.project_qkv(phi)
    assert torch.equal(k0, kr) and torch.equal(v0, vr) and torch.equal(q0, qr)


def test_gamma_zero_forward_equals_non_bcm_forward():
    cfg = tiny_config()
    torch.manual_seed(0)
    model = DualDiffusion(cfg, bcm_enabled=True)
    randomize_([p for n, p in trainable_named_params(model) if not n.startswith("text")], scale=0.2, seed=3)
    with torch.no_grad():
        for site in model.bcm.values():
            site.gamma.zero_()
        state = make_state(cfg)
        with_bcm = dual_forward(model, state, PROMPTS, bcm_enabled=True)
        without = dual_forward(model, state, PROMPTS, bcm_enabled=False)
    assert torch.equal(with_bcm[0], without[0]) and torch.equal(with_bcm[1], without[1])


def test_bcm_only_touches_global_branch():
    cfg = tiny_config()
    torch.manual_seed(0)
    model = DualDiffusion(cfg, bcm_enabled=True)
    randomize_(model.bcm.parameters(), scale=0.3, seed=5)
    with torch.no_grad():
        state = make_state(cfg)
        e_bcm = dual_forward(model, state, PROMPTS, bcm_enabled=True)
        e_off = dual_forward(model, state, PROMPTS, bcm_enabled=False)
    # SAIM is still zero, so the anomaly branch cannot see the background
    assert torch.equal(e_bcm[1], e_off[1])
    assert not torch.allclose(e_bcm[0], e_off[0])


def test_bcm_needs_background():
    cfg = tiny_config()
    model = DualDiffusion(cfg, bcm_enabled=True)
    with pytest.raises(ConfigError):
        dual_forward(model, make_state(cfg, bg=False), PROMPTS)


# ---------------------------------------------------------- dual model

@pytest.mark.parametrize("bcm", [False, True])
def test_decoupled_at_init(bcm):
    cfg = tiny_config()
    torch.manual_seed(0)
    model = DualDiffusion(cfg, bcm_enabled=bcm)
    # non-trivial adapters so the two branches differ; SAIM/BCM output layers stay at zero
    randomize_([a.B for lo in model.lora.values() for a in lo.adapters.values()], scale=0.2, seed=1)
    with torch.no_grad():
        state = make_state(cfg)
        e, es = dual_forward(model, state, PROMPTS)
        r, rs = independent_eps(model, state)
    assert e.shape == state.z_t.shape and es.shape == state.z_prime_t.shape
    assert (e - r).abs().max().item() <= 1e-6 and (es - rs).abs().max().item() <= 1e-6


def test_branch_swap_symmetry():
    cfg = tiny_config()
    torch.manual_seed(0)
    model = DualDiffusion(cfg)
    randomize_([p for n, p in trainable_named_params(model) if n.startswith(("lora", "saim"))], 0.2, 2)
    state = make_state(cfg)
    b = state.z_t.shape[0]
    with torch.no_grad():
        cg, ca = model.encode(PROMPTS.p_tokens, b), model.encode(PROMPTS.p_prime_tokens, b)
        e, es = model.dual_eps(state.z_t, state.z_prime_t, state.t, cg, ca)
        model.lora["global"], model.lora["anomaly"] = model.lora["anomaly"], model.lora["global"]
        f, fs = model.dual_eps(state.z_prime_t, state.z_t, state.t, ca, cg)
    assert (f - es).abs().max().item() < 1e-5 and (fs - e).abs().max().item() < 1e-5
    assert not torch.allclose(e, es)


def test_dual_loss_cases():
    eps, eps_s = torch.randn(2, 3, 2, 2), torch.randn(2, 3, 2, 2)
    assert dual_loss(eps, eps_s, eps, eps_s).item() == 0.0
    assert dual_loss(eps, eps_s, eps + 1, eps_s).item() == pytest.approx(1.0)
    a, b, c, d = (torch.randn(1, 1, 2, 2, dtype=torch.float64) for _ in range(4))
    ref = sum(float(x) ** 2 for x in (c - a).ravel()) / 4 + sum(float(x) ** 2 for x in (d - b).ravel()) / 4
    assert dual_loss(a, b, c, d).item() == pytest.approx(ref, rel=1e-12)
    with pytest.raises(ShapeError):
        dual_loss(eps, eps_s, eps[:1], eps_s)


def test_trainable_set_excludes_base():
    model = DualDiffusion(tiny_config(), bcm_enabled=True)
    names = [n for n, _ in trainable_named_params(model)]
    assert not any(n.startswith("unet.") for n in names)
    assert any(n.startswith("lora.global") for n in names) and any(n.startswith("lora.anomaly") for n in names)
    assert any(n.startswith("saim") for n in names) and any(n.startswith("bcm") for n in names)
    assert any(n.startswith("text_encoder") for n in names)
    assert not any(n.startswith("lora.global") for n, _ in trainable_named_params(model, "anomaly"))
    assert all(not p.requires_grad for p in model.unet.parameters())


@pytest.mark.parametrize("bcm", [False, True])
def test_gradient_check_full_dual_loss(bcm):
    cfg = micro_config()
    torch.manual_seed(0)
    model = DualDiffusion(cfg, bcm_enabled=bcm).double()
    params = trainable_params(model)
    n_params = sum(p.numel() for p in params)
    assert 800 <= n_params <= 1600
    # move away from the zero-init point so every parameter has a gradient
    randomize_(params, scale=0.3, seed=7)
    state = make_state(cfg, b=2, seed=3, dtype=torch.float64, bg=bcm)
    g = torch.Generator().manual_seed(9)
    eps = torch.randn(state.z_t.shape, generator=g, dtype=torch.float64)
    eps_s = torch.randn(state.z_t.shape, generator=g, dtype=torch.float64)

    def loss_fn():
        e, es = dual_forward(model, state, PROMPTS)
        return dual_loss(eps, eps_s, e, es)

    model.zero_grad()
    loss_fn().backward()
    analytic = torch.cat([p.grad.ravel() for p in params])
    numeric = torch.empty_like(analytic)
    h = 1e-3
    k = 0
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                numeric[k] = (up - down) / (2 * h)
                k += 1
    rel = ((analytic - numeric).norm() / max(analytic.norm(), numeric.norm())).item()
    assert rel < 1e-3
    scale = analytic.abs().max().item()
    assert (analytic - numeric).abs().max().item() < 1e-3 * scale + 1e-7


# ------------------------------------------------------------ training

def small_pairs(n=4):
    return generate_dataset(DatasetSpec(image_size=32, anomaly_type="spot", count=n, rng_seed=1))


def small_model(bcm=False):
    cfg = tiny_config(image_size=32, attention_resolutions=(16,))
    torch.manual_seed(0)
    return DualDiffusion(cfg, bcm_enabled=bcm)


def test_finetune_freezes_base_and_updates_trainables():
    model = small_model(bcm=True)
    base = {k: v.clone() for k, v in model.unet.state_dict().items()}
    before = {n: p.detach().clone() for n, p in trainable_named_params(model)}
    losses = finetune(model, small_pairs(), linear_schedule(), TrainConfig(steps=3, learning_rate=1e-3,
                                                                            bcm_enabled=True))
    assert len(losses) == 3 and all(np.isfinite(losses))
    after = model.unet.state_dict()
    assert all(torch.equal(base[k], after[k]) for k in base)
    changed = [n for n, p in trainable_named_params(model) if not torch.equal(before[n], p)]
    assert any(n.startswith("lora.anomaly") for n in changed)
    assert any(n.startswith("lora.global") for n in changed)


def test_finetune_is_deterministic():
    runs = []
    for _ in range(2):
        model = small_model()
        runs.append(finetune(model, small_pairs(), linear_schedule(), TrainConfig(steps=2, learning_rate=1e-3)))
    assert runs[0] == runs[1]


def test_training_noise_offset():
    g = torch.Generator().manual_seed(0)
    plain = dualcore.training_noise((4, 3, 8, 8), g)
    assert torch.equal(plain, torch.randn((4, 3, 8, 8), generator=torch.Generator().manual_seed(0)))
    eps = dualcore.training_noise((4000, 3, 8, 8), torch.Generator().manual_seed(1), offset=0.5)
    # the per-channel spatial mean carries the offset: var = 0.25 + 1/64
    var = eps.mean(dim=(2, 3)).var().item()
    assert abs(var - (0.25 + 1 / 64)) < 0.02
    assert abs(eps.var().item() - 1.25) < 0.03


def test_cosine_lr_decays_to_zero(monkeypatch):
    model = small_model()
    seen = []
    real_step = torch.optim.AdamW.step

    def spy(self, *a, **kw):
        seen.append(self.param_groups[0]["lr"])
        return real_step(self, *a, **kw)

    monkeypatch.setattr(torch.optim.AdamW, "step", spy)
    finetune(model, small_pairs(), linear_schedule(), TrainConfig(steps=4, learning_rate=1e-3, lr_schedule="cosine"))
    np.testing.assert_allclose(seen, [1e-3 * 0.5 * (1 + math.cos(math.pi * k / 4)) for k in range(4)])


def test_finetune_errors(monkeypatch):
    model = small_model()
    with pytest.raises(ConfigError):
        finetune(model, [], linear_schedule(), TrainConfig(steps=1))
    with pytest.raises(ConfigError):
        finetune(model, small_pairs(), linear_schedule(), TrainConfig(steps=1, bcm_enabled=True))
    with pytest.raises(ConfigError):
        finetune(model, small_pairs(), linear_schedule(), TrainConfig(steps=1, lr_schedule="step"))
    monkeypatch.setattr(dualcore, "dual_loss", lambda *a: torch.tensor(float("nan"), requires_grad=True))
    with pytest.raises(TrainingDivergence):
        finetune(model, small_pairs(), linear_schedule(), TrainConfig(steps=1))


def test_flip_is_shared_across_streams():
    p = small_pairs(2)
    img = to_latent([s.image for s in p])
    part = to_latent([s.anomaly_part for s in p])
    mask = to_latent([np.repeat(s.anomaly_mask[..., None], 3, -1).astype(np.float32) for s in p])
    hf, vf = torch.tensor([True, False]), torch.tensor([True, True])
    fi, fp, fm = flip_batch([img, part, mask], hf, vf)
    # anomaly part remains the image restricted to the mask after flipping
    on = fm > 0
    assert torch.equal(fp[on], fi[on]) and torch.all(fp[~on] == -1)
    assert torch.equal(fi[0], img[0].flip(-1).flip(-2)) and torch.equal(fi[1], img[1].flip(-2))


# ------------------------------------------------------------ sampling

def test_sampling_is_seed_deterministic():
    model = small_model()
    cfg = SampleConfig(n_steps=3, guidance_scale=2.5)
    a = sample_pairs(model, PROMPTS, [5, 6], linear_schedule(), cfg)
    b = sample_pairs(model, PROMPTS, [5, 6], linear_schedule(), cfg)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert a[0].shape == (2, 32, 32, 3) and a[0].min() >= 0 and a[0].max() <= 1


def test_unit_guidance_equals_conditional_sampling():
    model = small_model()
    randomize_([a.B for lo in model.lora.values() for a in lo.adapters.values()], scale=0.1, seed=2)
    sched = linear_schedule()
    img, part = sample_pairs(model, PROMPTS, [3], sched, SampleConfig(n_steps=3, guidance_scale=1.0))
    g = torch.Generator().manual_seed(3)
    z = torch.randn(1, 3, 32, 32, generator=g)
    zp = torch.randn(1, 3, 32, 32, generator=g)
    ts = timestep_subsequence(1000, 3)
    with torch.no_grad():
        cg, ca = model.encode(PROMPTS.p_tokens, 1), model.encode(PROMPTS.p_prime_tokens, 1)
        for i, t in enumerate(ts):
            e, es = model.dual_eps(z, zp, torch.tensor([t]), cg, ca)
            t_prev = ts[i + 1] if i + 1 < len(ts) else -1
            z, zp = ddim_step(z, e, t, t_prev, sched), ddim_step(zp, es, t, t_prev, sched)
    assert np.array_equal(img[0], dualcore.from_latent(z)[0])
    assert np.array_equal(part[0], dualcore.from_latent(zp)[0])


def test_bcm_sampling_requires_backgrounds():
    model = small_model(bcm=True)
    with pytest.raises(ConfigError):
        sample_pairs(model, PROMPTS, [1], linear_schedule(), SampleConfig(n_steps=2))
    bg = [small_pairs(1)[0].background]
    img, _ = sample_pairs(model, PROMPTS, [1], linear_schedule(), SampleConfig(n_steps=2), bg)
    assert img.shape == (1, 32, 32, 3)


def test_attention_maps_are_normalised():
    model = small_model()
    maps, img, part = dualcore.export_attention_maps(model, PROMPTS, 1, linear_schedule(),
                                                     SampleConfig(n_steps=4))
    cross = [a.site_id for a in model.unet.attention_sites() if a.kind == "cross"]
    assert set(maps) == {(s, k) for s in cross for k in range(4)}
    for m in maps.values():
        assert m.shape == (16, 16) and m.min() >= 0 and m.max() <= 1
