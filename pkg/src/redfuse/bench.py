"""Memory/time benchmark over chain length and reversibility modes."""

from __future__ import annotations

import time

import numpy as np

from .chain import FusionModel, compute_gradients
from .config import RunConfig
from .dataio import sample_patches, synth_pairs
from .rng import SplitMix64
from .training import estimator_config

MODES = ((False, False), (True, False), (False, True), (True, True))


def gradient_residual(grads: dict, reference: dict) -> float:
    """Relative L-infinity distance between two gradient sets, each seen as one vector.

    Per-tensor ratios are meaningless for gradients that vanish
    analytically (a bias feeding a normalization), so the denominator is the
    largest reference entry over the whole set.
    """
    diff = max((float(np.max(np.abs(np.asarray(grads[k], np.float64) - ref))) for k, ref in reference.items()), default=0.0)
    scale = max((float(np.max(np.abs(ref))) for ref in reference.values()), default=0.0)
    return diff / scale if scale else diff


def bench_batch(cfg: RunConfig):
    rng = SplitMix64(cfg.seed)
    pairs = synth_pairs(cfg.synth or "complementary-halves", max(cfg.synth_size, cfg.patch), 2, rng)
    b = sample_patches(pairs, cfg.patch, cfg.batch, rng)
    return b.vis.astype(cfg.dtype), b.ir.astype(cfg.dtype)


def bench_cell(model: FusionModel, v, i, repeats: int, reference: dict | None = None) -> dict:
    times, res = [], None
    for _ in range(repeats):
        t0 = time.perf_counter()
        res = compute_gradients(model, v, i)
        times.append(time.perf_counter() - t0)
    row = {
        "T": model.T, "reverse1": model.reverse1, "reverse2": model.reverse2, "ddim": model.ddim,
        "peak_bytes": res.memory["peak_bytes"],
        "seconds_per_step": min(times),  # noise only ever adds time
        "loss": res.loss.total,
    }
    row["grad_residual"] = gradient_residual(res.grads, reference) if reference is not None else 0.0
    return row


def bench_memory(cfg: RunConfig, ts=(2, 4, 6, 8), repeats: int = 3) -> dict:
    """Mode table at ``cfg.T`` and a T sweep with both reversible modes on and off.

    Gradient residuals are measured against the store-all pass (both modes
    off) of the same model and batch.
    """
    v, i = bench_batch(cfg)
    est = estimator_config(cfg)

    def model_for(T, r1, r2):
        m = FusionModel.create(T=T, estimator=est, seed=SplitMix64(cfg.seed + 1), dtype=cfg.dtype, ddim=cfg.ddim)
        return m.with_flags(reverse1=r1, reverse2=r2)

    def sweep(T):
        ref = compute_gradients(model_for(T, False, False), v, i).grads
        return {(r1, r2): bench_cell(model_for(T, r1, r2), v, i, repeats, ref) for r1, r2 in MODES}

    table = sweep(cfg.T)
    rows = [table[m] for m in MODES]
    t_sweep = []
    for T in ts:
        cells = table if T == cfg.T else sweep(T)
        on, off = cells[(True, True)], cells[(False, False)]
        t_sweep.append({
            "T": T,
            "peak_bytes_reversible": on["peak_bytes"], "seconds_reversible": on["seconds_per_step"],
            "peak_bytes_store_all": off["peak_bytes"], "seconds_store_all": off["seconds_per_step"],
            "grad_residual": on["grad_residual"],
        })
    return {
        "batch": list(v.shape), "precision": cfg.precision, "repeats": repeats,
        "mode_table": rows, "t_sweep": t_sweep,
    }
