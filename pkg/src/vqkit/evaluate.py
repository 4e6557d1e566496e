"""Metrics and desk-scale trend experiments.

PSNR/MSE stand in for reconstruction quality and nearest-class-embedding
accuracy stands in for zero-shot classification; comparisons against
published numbers are sign/ordering checks only, never magnitudes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import heldout_mask
from .errors import ShapeError
from .quantize import (
    fit_kmeans,
    fit_mcq,
    fit_rq,
    lookup_batch,
    quantize_mcq_batch,
    quantize_rq_batch,
    stats,
    vocab_bits,
)
from .train import eval_metrics, from_ini, psnr_from_mse, to_ini

COMPARE_COLUMNS = ("scheme", "n", "K", "seed", "bits", "mean_error", "std_error",
                   "utilization", "perplexity")
ROADMAP_COLUMNS = ("variant", "seed", "zs_acc", "psnr")

ROADMAP_STAGES = (
    ("contrastive", dict(factorization="none", scheme="none", recon=False)),
    ("contrastive_linear", dict(factorization="linear", scheme="none", recon=False)),
    ("contrastive_attention", dict(factorization="attention", scheme="none", recon=False)),
    ("contrastive_linear_mcq", dict(factorization="linear", scheme="mcq", recon=False)),
    ("joint_linear_mcq", dict(factorization="linear", scheme="mcq", recon=True)),
)


def mse(x, x_hat) -> float:
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shapes differ: {a.shape} vs {b.shape}")
    return float(((a - b) ** 2).mean())


def psnr(x, x_hat) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images, capped at 99."""
    for arr in (x, x_hat):
        a = np.asarray(arr)
        if a.min() < 0.0 or a.max() > 1.0:
            raise ShapeError("psnr expects values in [0, 1]")
    return psnr_from_mse(mse(x, x_hat))


@dataclass
class EvalReport:
    """Reproducible evaluation summary for one (checkpoint, dataset, seed)."""

    psnr: float
    mse: float
    zs_accuracy: float
    sub_stats: list = field(default_factory=list)
    quant_error_mean: float = 0.0
    quant_error_std: float = 0.0
    config_fingerprint: str = ""
    seed: int = 0
    untrained_tower: bool = False

    def to_dict(self) -> dict:
        return {
            "psnr": self.psnr,
            "mse": self.mse,
            "zs_accuracy": self.zs_accuracy,
            "quant_error_mean": self.quant_error_mean,
            "quant_error_std": self.quant_error_std,
            "config_fingerprint": self.config_fingerprint,
            "seed": self.seed,
            "untrained_tower": self.untrained_tower,
            "sub_codebooks": [
                {"utilization": s.utilization, "perplexity": s.perplexity}
                for s in self.sub_stats
            ],
        }


def zero_shot_accuracy(model, images, labels, batch_size: int = 256) -> float:
    """Fraction of images whose nearest class embedding matches the label."""
    labels = np.asarray(labels)
    n = len(labels)
    hits = 0
    from .data import patchify

    for start in range(0, n, batch_size):
        sel = slice(start, min(start + batch_size, n))
        patches = patchify(np.asarray(images[sel], dtype=np.float32), model.cfg.patch)
        out = model.forward(patches, count_usage=False)
        logits = model.class_logits(out.pooled).data
        hits += int((logits.argmax(axis=1) == labels[sel]).sum())
    return hits / max(n, 1)


def evaluate_state(state) -> EvalReport:
    """Full held-out evaluation of a training state."""
    row = eval_metrics(state)
    return EvalReport(
        psnr=row["psnr"],
        mse=row["recon"],
        zs_accuracy=row["zs_acc"],
        sub_stats=row["sub_stats"],
        quant_error_mean=row.get("quant_error_mean", 0.0),
        quant_error_std=row.get("quant_error_std", 0.0),
        config_fingerprint=state.config.fingerprint(),
        seed=state.config.seed,
        untrained_tower=state.config.loss.lambda_contra == 0,
    )


# ---------------------------------------------------------------------------
# quantizer comparison (vocabulary-shape and MCQ-vs-RQ trends)


def _fit_and_measure(train_x, test_x, scheme, n, k, seed, shared=True):
    if scheme == "vq":
        cb = fit_kmeans(train_x, k, seed=seed)
        cb.reset_usage()
        _, errors = lookup_batch(cb, test_x)
        books = [cb]
        bits = vocab_bits([k])
    elif scheme == "mcq":
        q = fit_mcq(train_x, n, k, seed=seed)
        for cb in q.sub_codebooks:
            cb.reset_usage()
        _, _, sub_errors = quantize_mcq_batch(q, test_x)
        errors = sub_errors.sum(axis=1)
        books = q.sub_codebooks
        bits = q.vocab_bits()
    elif scheme == "rq":
        q = fit_rq(train_x, n, k, seed=seed, shared=shared)
        seen = []
        for cb in q.levels:
            if not any(cb is s for s in seen):
                cb.reset_usage()
                seen.append(cb)
        _, _, errors, _ = quantize_rq_batch(q, test_x)
        books = seen
        bits = vocab_bits([k] * n)
    else:
        raise ShapeError(f"unknown scheme {scheme!r}")
    book_stats = [stats(cb) for cb in books]
    return {
        "bits": bits,
        "mean_error": float(errors.mean()),
        "std_error": float(errors.std()),
        "utilization": float(np.mean([s.utilization for s in book_stats])),
        "perplexity": float(np.mean([s.perplexity for s in book_stats])),
    }


def compare_quantizers(vectors, configs, seeds) -> list:
    """Fit each {scheme, n, K} config per seed and measure held-out error.

    Splits `vectors` 90/10 by index hash; returns one row dict per
    config x seed with vocabulary bits, held-out mean/std quantization error,
    utilization, and perplexity.
    """
    x = np.asarray(vectors, dtype=np.float32)
    if x.ndim != 2:
        raise ShapeError(f"vectors must be 2-d, got {x.shape}")
    mask = heldout_mask(x.shape[0])
    train_x, test_x = x[~mask], x[mask]
    rows = []
    for cfg in configs:
        scheme = cfg["scheme"]
        n = int(cfg.get("n", 1))
        k = int(cfg["K"])
        if scheme == "mcq" and x.shape[1] % n != 0:
            raise ShapeError(f"dim {x.shape[1]} not divisible by n={n} for MCQ")
        for seed in seeds:
            measured = _fit_and_measure(
                train_x, test_x, scheme, n, k, int(seed), shared=cfg.get("shared", True)
            )
            rows.append({"scheme": scheme, "n": n, "K": k, "seed": int(seed), **measured})
    return rows


def rows_to_csv(rows, columns) -> str:
    """Deterministic CSV text for a list of row dicts."""

    def cell(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return format(v, ".8g")
        return str(v)

    lines = [",".join(columns)]
    lines += [",".join(cell(r.get(c)) for c in columns) for r in rows]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# roadmap ablation (factorization / discretization / reconstruction stages)


def _stage_config(base_config, seed: int, changes: dict):
    cfg = from_ini(to_ini(base_config))  # deep copy via the canonical text
    cfg.seed = int(seed)
    cfg.model.factorization = changes["factorization"]
    cfg.model.supervision = "post"
    cfg.quantizer.scheme = changes["scheme"]
    cfg.loss.recon = changes["recon"]
    cfg.loss.lambda_contra = 1.0
    if cfg.model.factorization != "attention":
        # keep the factorized width identical across stages
        cfg.model.latent_dim = cfg.model.width // cfg.model.heads
    cfg.validate()
    return cfg


def roadmap_ablation(base_config, seeds, progress=None) -> list:
    """Train the pipeline stage by stage and report zs accuracy (and PSNR
    where reconstruction is trained).

    Stages: contrastive-only unfactorized, + linear factorization, the
    attention-projection alternative, + discretization (MCQ), and finally
    + reconstruction. The contrastive embedding is pooled after the bottleneck
    for every stage so factorization/discretization genuinely gate it.
    """
    from .train import fit

    rows = []
    for name, changes in ROADMAP_STAGES:
        for seed in seeds:
            cfg = _stage_config(base_config, seed, changes)
            state = fit(cfg)
            report = evaluate_state(state)
            row = {
                "variant": name,
                "seed": int(seed),
                "zs_acc": report.zs_accuracy,
                "psnr": report.psnr if changes["recon"] else None,
            }
            rows.append(row)
            if progress:
                progress(row)
    return rows
