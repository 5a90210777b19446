import numpy as np
import pytest
import torch

from dualdiff.denoiser import DenoiserConfig

torch.set_num_threads(1)


def tiny_config(**kw) -> DenoiserConfig:
    """Two-level 16x16 denoiser with attention at 8x8; fast enough for unit tests."""
    base = dict(image_size=16, base_channels=8, channel_multipliers=(1, 2), attention_resolutions=(8,),
                heads=2, time_embed_dim=16, context_dim=8, lora_rank=2, norm_groups=4)
    base.update(kw)
    return DenoiserConfig(**base)


def micro_config(**kw) -> DenoiserConfig:
    """Single-level 8x8 denoiser, about a thousand trainable parameters in the dual model."""
    base = dict(image_size=8, base_channels=4, channel_multipliers=(1,), attention_resolutions=(8,),
                heads=1, time_embed_dim=8, context_dim=4, lora_rank=1, norm_groups=2)
    base.update(kw)
    return DenoiserConfig(**base)


def randomize_(params, scale=0.3, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in params:
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
