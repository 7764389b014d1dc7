"""Training loop, model construction from a RunConfig, and model checkpoints."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .chain import Adam, FusionModel, NonFiniteLossError, fuse, train_step
from .config import RunConfig
from .dataio import ImagePair, pair_dataset, sample_patches, synth_pairs
from .revnet import EstimatorConfig
from .rng import SplitMix64
from .tensor import ShapeError

CHECKPOINT_NAME = "checkpoint.redc"
LOG_NAME = "train.jsonl"


def estimator_config(cfg: RunConfig) -> EstimatorConfig:
    return EstimatorConfig(in_channels=1, width=cfg.width, blocks=cfg.blocks, groups=cfg.groups)


def build_model(cfg: RunConfig, rng: SplitMix64) -> FusionModel:
    return FusionModel.create(
        T=cfg.T, estimator=estimator_config(cfg), seed=rng, dtype=cfg.dtype,
        reverse1=cfg.reverse1, reverse2=cfg.reverse2, ddim=cfg.ddim,
    )


def load_pairs(cfg: RunConfig, rng: SplitMix64) -> list[ImagePair]:
    if cfg.synth:
        return synth_pairs(cfg.synth, cfg.synth_size, cfg.synth_count, rng)
    root = Path(cfg.data)
    return pair_dataset(root / "vis", root / "ir")


def model_snapshot(model: FusionModel, cfg: RunConfig | None = None) -> dict:
    est = model.estimator
    snap = {
        "T": model.T,
        "estimator": {"in_channels": est.in_channels, "width": est.width, "blocks": est.blocks, "groups": est.groups},
        "reverse1": model.reverse1, "reverse2": model.reverse2, "ddim": model.ddim,
    }
    if cfg is not None:
        # where the run was written is not part of its identity
        snap["run"] = {k: v for k, v in cfg.as_dict().items() if k != "out"}
    return snap


def save_model(path: str | os.PathLike, model: FusionModel, cfg: RunConfig | None = None) -> None:
    checkpoint.save(path, model.params, model_snapshot(model, cfg))


def load_model(path: str | os.PathLike) -> tuple[FusionModel, dict]:
    params, snap = checkpoint.load(path)
    try:
        est = EstimatorConfig(**snap["estimator"])
        model = FusionModel(params, int(snap["T"]), est, bool(snap["reverse1"]), bool(snap["reverse2"]), bool(snap["ddim"]))
    except (KeyError, TypeError) as e:
        raise checkpoint.CheckpointError(f"checkpoint config is incomplete: {e}") from None
    expected = set(FusionModel.create(model.T, est).params)
    if set(params) != expected:
        missing, extra = sorted(expected - set(params)), sorted(set(params) - expected)
        raise checkpoint.CheckpointError(f"parameter table mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    return model, snap


@dataclass
class TrainOutcome:
    model: FusionModel
    losses: list
    ws: list
    log_path: Path
    checkpoint_path: Path


def train(cfg: RunConfig, out: str | os.PathLike | None = None, pairs: list[ImagePair] | None = None) -> TrainOutcome:
    """Run ``cfg.steps`` Adam steps; writes the JSON-lines log and final checkpoint.

    One SplitMix64 stream seeded with ``cfg.seed`` drives, in order, the
    parameter init, synthetic data (if any) and patch sampling. A non-finite
    loss writes the last good checkpoint and re-raises.
    """
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = SplitMix64(cfg.seed)
    model = build_model(cfg, rng)
    if pairs is None:
        pairs = load_pairs(cfg, rng)
    opt = Adam(lr=cfg.lr)
    ckpt, log_path = out / CHECKPOINT_NAME, out / LOG_NAME
    losses, ws = [], []
    with open(log_path, "w") as log:
        for step in range(cfg.steps):
            batch = sample_patches(pairs, cfg.patch, cfg.batch, rng)
            good = model.params
            try:
                res = train_step(batch.vis.astype(cfg.dtype), batch.ir.astype(cfg.dtype), model, opt)
                bad = [k for k, v in model.params.items() if not np.all(np.isfinite(v))]
                if bad:
                    raise NonFiniteLossError(f"step {step}: non-finite parameters after update: {bad[:3]}")
            except FloatingPointError:
                model.params = good
                save_model(ckpt, model, cfg)
                raise
            losses.append(res.loss.total)
            ws.append(model.w)
            rec = {"step": step, "loss": res.loss.as_dict(), "w": model.w, "memory": res.memory}
            log.write(json.dumps(rec, sort_keys=True) + "\n")
    save_model(ckpt, model, cfg)
    return TrainOutcome(model, losses, ws, log_path, ckpt)


def pad_to_multiple(img: np.ndarray, m: int = 4) -> tuple[np.ndarray, tuple[int, int]]:
    """Mirror-pad the bottom/right edges up to a multiple of ``m``."""
    h, w = img.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph == 0 and pw == 0:
        return img, (h, w)
    mode = "reflect" if ph < h and pw < w else "symmetric"
    return np.pad(img, [(0, 0)] * (img.ndim - 2) + [(0, ph), (0, pw)], mode=mode), (h, w)


def fuse_pair(model: FusionModel, pair: ImagePair, pad: bool = False) -> np.ndarray:
    """Full-resolution fusion of one pair, clamped to [0, 1]."""
    v, i = pair.vis, pair.ir
    h, w = v.shape[-2:]
    if h % 4 or w % 4:
        if not pad:
            raise ShapeError(
                f"{pair.name}: {h}x{w} is not divisible by 4; rerun with --pad-to-even to pad and crop"
            )
        v, _ = pad_to_multiple(v)
        i, _ = pad_to_multiple(i)
    f = fuse(model, v, i)[..., :h, :w]
    if not math.isfinite(float(np.sum(f))):
        raise NonFiniteLossError(f"{pair.name}: fused output is not finite")
    return np.clip(f, 0.0, 1.0)
