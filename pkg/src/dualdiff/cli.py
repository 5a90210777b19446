"""Command-line entry point: ``dualdiff <command> [--config FILE] [--key value ...]``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import shutil
import sys
import time
import traceback
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import config as C
from .denoiser import DenoiserConfig, UNet, TextEncoder, make_prompt_pair
from .dualcore import (
    DualDiffusion,
    PretrainConfig,
    SampleConfig,
    TrainConfig,
    export_attention_maps,
    finetune,
    load_base,
    load_dual,
    pretrain,
    sample_pairs,
    save_base,
    save_dual,
)
from .errors import ConfigError, DualDiffError, FormatError, PathError
from .evalkit import DetectorConfig, evaluate, ic_diversity, mask_alignment, train_detector
from .maskgen import MaskExtractionConfig, extract_mask, mask_stats
from .sched import linear_schedule
from .synthdata import (
    DatasetSpec,
    generate_dataset,
    load_mask,
    load_rgb,
    read_dataset,
    sample_seed,
    save_gray,
    save_gray_mask,
    save_rgb,
    write_dataset,
)

log = logging.getLogger("dualdiff")

DATA_SPLITS = {
    # name: (seed offset, count key, anomalous)
    "fewshot": (1, "fewshot_count", True),
    "normal": (2, "normal_count", False),
    "heldout_normal": (3, "heldout_normal_count", False),
    "test_anomaly": (4, "test_anomaly_count", True),
    "test_normal": (5, "test_normal_count", False),
}


# ------------------------------------------------------------------ helpers

def _require_dir(value: str, key: str) -> Path:
    if not value:
        raise PathError(f"{key} is not set")
    p = Path(value)
    if not p.is_dir():
        raise PathError(f"{key}: {p} does not exist")
    return p


def _spec(cfg: C.RunConfig, split: str) -> DatasetSpec:
    offset, count_key, anomalous = DATA_SPLITS[split]
    return DatasetSpec(
        image_size=cfg.image_size, object_kind=cfg.object_kind,
        anomaly_type=cfg.anomaly_type if anomalous else "normal",
        count=getattr(cfg, count_key), rng_seed=cfg.seed * 100 + offset,
    )


def _schedule(cfg):
    return linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)


def _denoiser_config(cfg) -> DenoiserConfig:
    return DenoiserConfig(
        image_size=cfg.image_size, base_channels=cfg.base_channels,
        channel_multipliers=tuple(cfg.channel_multipliers), num_res_blocks=cfg.num_res_blocks,
        attention_resolutions=tuple(cfg.attention_resolutions), heads=cfg.heads,
        time_embed_dim=cfg.time_embed_dim, context_dim=cfg.context_dim,
        lora_rank=cfg.lora_rank, lora_alpha=cfg.lora_alpha,
    )


def _prompts(cfg, vocab):
    return make_prompt_pair(cfg.prompt, cfg.prompt_anomaly, vocab)


def _write_losses(path: Path, losses):
    path.write_text("step,loss\n" + "".join(f"{i},{v:.8f}\n" for i, v in enumerate(losses)))


def read_pairs(directory) -> tuple[list, list, list | None]:
    directory = _require_dir(str(directory), "pairs_dir")
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise FormatError(f"{directory}: missing manifest.json")
    manifest = json.loads(mpath.read_text())
    if "count" not in manifest:
        raise FormatError(f"{mpath}: missing key 'count'")
    images, parts, masks = [], [], []
    for k in range(manifest["count"]):
        for suffix in ("image", "anomaly_part"):
            if not (directory / f"{k}_{suffix}.png").exists():
                raise FormatError(f"{directory}: pair {k} lacks {suffix}")
        images.append(load_rgb(directory / f"{k}_image.png"))
        parts.append(load_rgb(directory / f"{k}_anomaly_part.png"))
        mp = directory / f"{k}_mask.png"
        masks.append(load_mask(mp) if mp.exists() else None)
    if any(m is None for m in masks):
        masks = None
    return images, parts, masks


# ----------------------------------------------------------------- commands

def cmd_gen_data(cfg, run_dir: Path):
    out = run_dir / "data"
    for split in DATA_SPLITS:
        spec = _spec(cfg, split)
        samples = generate_dataset(spec)
        write_dataset(samples, out / split, extra={"object_kind": spec.object_kind, "rng_seed": spec.rng_seed})
        log.info("wrote %d samples to %s", len(samples), out / split)
    return out


def cmd_pretrain(cfg, run_dir: Path):
    data = _require_dir(cfg.data_dir, "data_dir")
    normals = read_dataset(data / "normal")
    torch.manual_seed(cfg.seed)
    dcfg = _denoiser_config(cfg)
    unet = UNet(dcfg)
    text = TextEncoder(len(dcfg.vocab), dcfg.context_dim, dcfg.max_tokens, dcfg.heads)
    pcfg = PretrainConfig(batch_size=cfg.pretrain_batch_size, learning_rate=cfg.pretrain_learning_rate,
                          lr_schedule=cfg.pretrain_lr_schedule, stratify_steps=cfg.stratify_steps,
                          steps=cfg.pretrain_steps, offset_noise=cfg.offset_noise,
                          cfg_dropout=cfg.cfg_dropout, flip=cfg.flip, seed=cfg.seed)
    losses = pretrain(unet, text, normals, _schedule(cfg), pcfg, on_step=_progress("pretrain", cfg.pretrain_steps))
    save_base(run_dir / "base", unet, text, {"pretrain_steps": cfg.pretrain_steps})
    _write_losses(run_dir / "pretrain_loss.csv", losses)
    return run_dir / "base"


def cmd_finetune(cfg, run_dir: Path):
    data = _require_dir(cfg.data_dir, "data_dir")
    base = _require_dir(cfg.base_checkpoint, "base_checkpoint")
    pairs = read_dataset(data / "fewshot")
    unet, text, _ = load_base(base)
    dcfg = replace(unet.cfg, lora_rank=cfg.lora_rank, lora_alpha=cfg.lora_alpha)
    torch.manual_seed(cfg.seed)
    model = DualDiffusion(dcfg, cfg.bcm_enabled, unet=unet, text_encoder=text)
    tcfg = TrainConfig(batch_size=cfg.batch_size, learning_rate=cfg.learning_rate, steps=cfg.steps,
                       lr_schedule=cfg.lr_schedule, stratify_steps=cfg.stratify_steps,
                       offset_noise=cfg.offset_noise, bcm_enabled=cfg.bcm_enabled, cfg_dropout=cfg.cfg_dropout,
                       flip=cfg.flip, seed=cfg.seed, checkpoint_every=cfg.checkpoint_every)
    losses = finetune(
        model, pairs, _schedule(cfg), tcfg, _prompts(cfg, dcfg.vocab),
        on_step=_progress("finetune", cfg.steps),
        on_checkpoint=lambda step: save_dual(run_dir / f"checkpoint-{step}", model, {"step": step}),
    )
    save_dual(run_dir / "checkpoint", model, {"step": cfg.steps})
    _write_losses(run_dir / "finetune_loss.csv", losses)
    return run_dir / "checkpoint"


def _backgrounds(cfg, n: int) -> list[np.ndarray]:
    if cfg.background_source:
        src = _require_dir(cfg.background_source, "background_source")
    else:
        src = _require_dir(cfg.data_dir, "data_dir (background source)") / "heldout_normal"
    pool = read_dataset(src)
    rng = np.random.default_rng(cfg.seed)
    return [pool[int(i)].background for i in rng.integers(len(pool), size=n)]


def cmd_generate(cfg, run_dir: Path, n: int | None = None):
    model, meta = load_dual(_require_dir(cfg.checkpoint, "checkpoint"))
    n = cfg.n_generate if n is None else n
    seeds = [sample_seed(cfg.seed, k) for k in range(n)]
    bgs = _backgrounds(cfg, n) if model.bcm_enabled else None
    scfg = SampleConfig(cfg.inference_steps, cfg.guidance_scale, cfg.eta, cfg.sample_batch_size)
    images, parts = sample_pairs(model, _prompts(cfg, model.cfg.vocab), seeds, _schedule(cfg), scfg, bgs)
    out = run_dir / "pairs"
    out.mkdir(parents=True, exist_ok=True)
    for k, (img, part) in enumerate(zip(images, parts)):
        save_rgb(out / f"{k}_image.png", img)
        save_rgb(out / f"{k}_anomaly_part.png", part)
    manifest = {"count": n, "seeds": seeds, "image_size": int(images.shape[1]),
                "bcm_enabled": model.bcm_enabled}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def _mask_cfg(cfg):
    return MaskExtractionConfig(cfg.mask_threshold, cfg.close_radius, cfg.min_component_area)


def cmd_extract_masks(cfg, run_dir: Path):
    src = _require_dir(cfg.pairs_dir, "pairs_dir")
    images, parts, _ = read_pairs(src)
    out = run_dir / "pairs"
    out.mkdir(parents=True, exist_ok=True)
    mcfg = _mask_cfg(cfg)
    meta = []
    for k, part in enumerate(parts):
        shutil.copyfile(src / f"{k}_image.png", out / f"{k}_image.png")
        shutil.copyfile(src / f"{k}_anomaly_part.png", out / f"{k}_anomaly_part.png")
        mask = extract_mask(part, mcfg)
        save_gray_mask(out / f"{k}_mask.png", mask)
        st = mask_stats(mask)
        meta.append({"index": k, "area": st.area, "n_components": st.n_components, "empty": st.area == 0})
    manifest = json.loads((src / "manifest.json").read_text())
    manifest["masks"] = meta
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def _detector_cfg(cfg):
    return DetectorConfig(epochs=cfg.detector_epochs, learning_rate=cfg.detector_learning_rate,
                          batch_size=cfg.detector_batch_size, repeats=cfg.detector_repeats, seed=cfg.seed)


def cmd_evaluate(cfg, run_dir: Path):
    data = _require_dir(cfg.data_dir, "data_dir")
    images, parts, masks = read_pairs(cfg.pairs_dir)
    if masks is None:
        mcfg = _mask_cfg(cfg)
        masks = [extract_mask(p, mcfg) for p in parts]
    fewshot = read_dataset(data / "fewshot")
    normals = read_dataset(data / "heldout_normal")
    test = read_dataset(data / "test_anomaly") + read_dataset(data / "test_normal")
    normal_imgs = [normals[i % len(normals)].image for i in range(len(images))]
    keep = [i for i, m in enumerate(masks) if m.any()]
    det = train_detector([images[i] for i in keep], [masks[i] for i in keep], normal_imgs, _detector_cfg(cfg))
    report = evaluate(det, [s.image for s in test], [s.anomaly_mask for s in test])
    align = mask_alignment(images, masks, cfg.mask_threshold)
    report.ic_diversity = ic_diversity(images, [s.image for s in fewshot])
    report.mask_iou_mean = align.mask_iou_mean
    report.nonempty_mask_fraction = align.nonempty_mask_fraction
    report.inside_object_fraction_mean = align.inside_object_fraction_mean
    report.write(run_dir)
    return run_dir / "report.json"


def cmd_inspect_attn(cfg, run_dir: Path):
    model, _ = load_dual(_require_dir(cfg.checkpoint, "checkpoint"))
    prompts = _prompts(cfg, model.cfg.vocab)
    bg = _backgrounds(cfg, 1)[0] if model.bcm_enabled else None
    scfg = SampleConfig(cfg.inference_steps, cfg.guidance_scale, cfg.eta, 1)
    maps, img, part = export_attention_maps(model, prompts, sample_seed(cfg.seed, 0), _schedule(cfg), scfg, bg)
    out = run_dir / "attn"
    out.mkdir(parents=True, exist_ok=True)
    save_rgb(out / "image.png", img)
    save_rgb(out / "anomaly_part.png", part)
    words = cfg.prompt.split()
    for (site, k), m in maps.items():
        save_gray(out / f"{site}_tok{k}_{words[k]}.png", m)
    return out


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "generate": cmd_generate,
    "extract-masks": cmd_extract_masks,
    "evaluate": cmd_evaluate,
    "inspect-attn": cmd_inspect_attn,
}


def cmd_pipeline(cfg, run_dir: Path):
    """gen-data -> pretrain -> finetune -> generate -> extract-masks -> evaluate, in one run directory."""
    cfg = replace(cfg, data_dir=str(cmd_gen_data(cfg, run_dir)))
    cfg = replace(cfg, base_checkpoint=str(cmd_pretrain(cfg, run_dir)))
    cfg = replace(cfg, checkpoint=str(cmd_finetune(cfg, run_dir)))
    gen_dir = run_dir / "generated"
    cfg = replace(cfg, pairs_dir=str(cmd_generate(cfg, gen_dir)))
    cfg = replace(cfg, pairs_dir=str(cmd_extract_masks(cfg, run_dir / "masked")))
    return cmd_evaluate(cfg, run_dir / "eval")


COMMANDS["pipeline"] = cmd_pipeline


def _progress(name: str, total: int):
    every = max(1, total // 20)

    def report(step, loss):
        if step % every == 0 or step == total - 1:
            log.info("%s step %d/%d loss %.5f", name, step + 1, total, loss)

    return report


# ---------------------------------------------------------------- plumbing

def _parse_value(name: str, raw: str):
    default = getattr(C.RunConfig(), name)
    if isinstance(default, str) and name != "lora_alpha":
        return raw
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        raise ConfigError(f"invalid config:\n  {name}: cannot parse {raw!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualdiff", description=__doc__)
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help=f"JSON config file (default: ${C.CONFIG_ENV})")
        p.add_argument("--run-dir", help="explicit output directory instead of a timestamped one")
        if name == "generate":
            p.add_argument("--n", type=int, help="number of pairs (overrides n_generate)")
        for f in fields(C.RunConfig):
            p.add_argument(f"--{f.name.replace('_', '-')}", dest=f"opt_{f.name}", metavar="VALUE")
    return parser


def make_run_dir(cfg: C.RunConfig, command: str, explicit: str | None) -> Path:
    if explicit:
        path = Path(explicit)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        path = Path(cfg.output_dir) / f"{command}-{stamp}"
        k = 1
        while path.exists():
            path = Path(cfg.output_dir) / f"{command}-{stamp}-{k}"
            k += 1
    path.mkdir(parents=True, exist_ok=True)
    return path


def _file_digests(run_dir: Path) -> dict:
    out = {}
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name != "run_manifest.json":
            out[str(p.relative_to(run_dir))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def write_run_manifest(run_dir: Path, command: str, cfg: C.RunConfig, wall: float) -> dict:
    manifest = {
        "command": command,
        "config_sha256": cfg.digest(),
        "versions": {"dualdiff": __version__, "torch": torch.__version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "wall_time_s": round(wall, 3),
        "files": _file_digests(run_dir),
    }
    tmp = run_dir / "run_manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, run_dir / "run_manifest.json")
    return manifest


def _provenance(exc: BaseException) -> str:
    mod = "dualdiff"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        name = frame.f_globals.get("__name__", "")
        if name.startswith("dualdiff."):
            mod = name
    return mod


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        cfg_path = args.config or C.default_config_path()
        file_values = C.load_file(cfg_path) if cfg_path else {}
        overrides = {}
        for f in fields(C.RunConfig):
            raw = getattr(args, f"opt_{f.name}")
            if raw is not None:
                overrides[f.name] = _parse_value(f.name, raw)
        cfg = C.resolve(file_values, overrides)
        run_dir = make_run_dir(cfg, args.command, args.run_dir)
        C.write_config(cfg, run_dir / "config.json")
        start = time.time()
        fn = COMMANDS[args.command]
        if args.command == "generate":
            fn(cfg, run_dir, args.n)
        else:
            fn(cfg, run_dir)
        write_run_manifest(run_dir, args.command, cfg, time.time() - start)
        print(run_dir)
        return 0
    except DualDiffError as exc:
        print(f"error [{_provenance(exc)}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
