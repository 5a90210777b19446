import json

import numpy as np
import pytest
import torch

from conftest import randomize_, tiny_config
from dualdiff.checkpoint import load_tensors, save_tensors
from dualdiff.dualcore import DualDiffusion, load_base, load_dual, save_base, save_dual, trainable_params
from dualdiff.denoiser import build_base
from dualdiff.errors import FormatError, PathError


def test_tensor_round_trip_is_little_endian_f32(tmp_path):
    t = {"a": torch.arange(6, dtype=torch.float32).reshape(2, 3), "b": torch.tensor([1.5])}
    save_tensors(tmp_path, t, {"x": 1})
    raw = np.fromfile(tmp_path / "weights.bin", dtype="<f4")
    assert raw.tolist() == [0, 1, 2, 3, 4, 5, 1.5]
    meta, back = load_tensors(tmp_path)
    assert meta == {"x": 1} and torch.equal(back["a"], t["a"])


def test_dual_round_trip_and_names(tmp_path):
    torch.manual_seed(0)
    model = DualDiffusion(tiny_config(), bcm_enabled=True)
    randomize_(trainable_params(model), 0.1, seed=1)
    save_dual(tmp_path, model, {"step": 7})
    names = {e["name"] for e in json.loads((tmp_path / "manifest").read_text())["tensors"]}
    site = model.unet.site_ids()[0]
    for branch in ("global", "anomaly"):
        for proj in "qkvo":
            assert f"lora.{branch}.{site}_{proj}.A" in names and f"lora.{branch}.{site}_{proj}.B" in names
    back, meta = load_dual(tmp_path)
    assert meta["step"] == 7 and back.bcm_enabled
    sd, sb = model.state_dict(), back.state_dict()
    assert all(torch.equal(sd[k], sb[k]) for k in sd)


def test_base_round_trip(tmp_path):
    unet, text = build_base(tiny_config(), 3)
    save_base(tmp_path, unet, text)
    u2, t2, meta = load_base(tmp_path)
    assert meta["kind"] == "base"
    assert all(torch.equal(a, b) for a, b in zip(unet.state_dict().values(), u2.state_dict().values()))


def test_base_is_not_a_dual_checkpoint(tmp_path):
    unet, text = build_base(tiny_config())
    save_base(tmp_path, unet, text)
    with pytest.raises(FormatError, match="not a dual checkpoint"):
        load_dual(tmp_path)


def test_missing_adapter_set(tmp_path):
    model = DualDiffusion(tiny_config())
    save_dual(tmp_path, model)
    m = json.loads((tmp_path / "manifest").read_text())
    m["tensors"] = [e for e in m["tensors"] if not e["name"].startswith("lora.anomaly.")]
    (tmp_path / "manifest").write_text(json.dumps(m))
    with pytest.raises(FormatError, match="'anomaly' adapter set"):
        load_dual(tmp_path)


def test_truncated_weights(tmp_path):
    save_tensors(tmp_path, {"a": torch.zeros(10)})
    (tmp_path / "weights.bin").write_bytes(b"\0" * 8)
    with pytest.raises(FormatError, match="truncated"):
        load_tensors(tmp_path)


def test_missing_directory(tmp_path):
    with pytest.raises(PathError):
        load_tensors(tmp_path / "none")
