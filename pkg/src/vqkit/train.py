"""Deterministic training loop for the toy tokenizer.

The configuration lives in an INI-style text file with sections [train],
[model], [quantizer], [loss], [optim], [data]; every key has a default and
unknown keys are rejected. All randomness (init, data order, revival) derives
from the single seed through named substreams, so (seed, config, data) fully
determine every checkpoint, and resuming from any checkpoint reproduces the
uninterrupted run bit for bit.

Checkpoint container: magic "UTKC", u32 version, the canonical config text,
the step counter, every named array (parameters, optimizer moments, codebook
EMA/usage state), an embedded UTKQ codebook section, and the metric history.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import math
import os
import struct
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .data import LabeledDataset, gen_shapes, heldout_mask, load_dataset, patchify
from .errors import ConfigError, FormatError, NonFiniteInputError, TrainingDiverged
from .formats import atomic_write, decode_codebooks, encode_codebooks
from .losses import LossReport, LossWeights, contrastive_loss, recon_loss, total_loss, vq_loss
from .model import Codebook, ModelConfig, MultiCodebookQuantizer, QuantizerConfig, TokenizerModel
from .quantize import ema_update, revive_dead_codes, stats_from_histogram
from .seeding import derive_seed, substream

CHECKPOINT_MAGIC = b"UTKC"
CHECKPOINT_VERSION = 1
METRICS_HEADER = "step,recon,vq,contrastive,total,perplexity,utilization,psnr,zs_acc"

PSNR_CAP_DB = 99.0


def psnr_from_mse(mse: float) -> float:
    """10*log10(1/MSE) for unit-range images, capped at 99 dB."""
    if mse <= 1e-10:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


@dataclass
class OptimConfig:
    optimizer: str = "adam"  # adam | sgd
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    grad_clip: float = 1.0

    def validate(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")


@dataclass
class DataConfig:
    kind: str = "shapes"  # shapes | dir
    count: int = 4096
    num_classes: int = 8
    path: str = ""
    seed: int = -1  # < 0: use the training seed

    def validate(self):
        if self.kind not in ("shapes", "dir"):
            raise ConfigError(f"unknown data kind {self.kind!r}")
        if self.kind == "dir" and not self.path:
            raise ConfigError("data kind 'dir' needs a path")


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 2000
    batch_size: int = 64
    eval_interval: int = 250
    checkpoint_interval: int = 500
    model: ModelConfig = field(default_factory=ModelConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.loss.lambda_contra > 0 and self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 when lambda_contra > 0")
        self.model.validate()
        self.quantizer.validate()
        self.loss.validate()
        self.optim.validate()
        self.data.validate()

    def fingerprint(self) -> str:
        return hashlib.sha256(to_ini(self).encode("utf-8")).hexdigest()[:12]


_TOP_FIELDS = ["seed", "steps", "batch_size", "eval_interval", "checkpoint_interval"]
# num_classes is owned by [data]; the model copy is synced at state init
_MODEL_SKIP = {"num_classes"}


def _sections(cfg: TrainConfig):
    return [
        ("train", cfg, _TOP_FIELDS),
        ("model", cfg.model, [f.name for f in fields(cfg.model) if f.name not in _MODEL_SKIP]),
        ("quantizer", cfg.quantizer, [f.name for f in fields(cfg.quantizer)]),
        ("loss", cfg.loss, [f.name for f in fields(cfg.loss)]),
        ("optim", cfg.optim, [f.name for f in fields(cfg.optim)]),
        ("data", cfg.data, [f.name for f in fields(cfg.data)]),
    ]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"expected a number, got {raw!r}") from None
    return raw.strip()


def to_ini(cfg: TrainConfig) -> str:
    """Canonical text form; identical configs serialize to identical bytes."""
    lines = []
    for section, obj, names in _sections(cfg):
        lines.append(f"[{section}]")
        for name in names:
            lines.append(f"{name} = {_fmt(getattr(obj, name))}")
        lines.append("")
    return "\n".join(lines)


def from_ini(text: str, overrides=()) -> TrainConfig:
    """Parse config text, applying `section.key=value` override strings last."""
    cfg = TrainConfig()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse config: {e}") from None
    known = {section: (obj, set(names)) for section, obj, names in _sections(cfg)}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown config section [{section}]")
        obj, names = known[section]
        for key, raw in parser.items(section):
            if key not in names:
                raise ConfigError(f"unknown config key {section}.{key}")
            setattr(obj, key, _coerce(raw, getattr(obj, key)))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        target, raw = item.split("=", 1)
        if "." not in target:
            raise ConfigError(f"override key {target!r} must be section.key")
        section, key = target.split(".", 1)
        if section not in known:
            raise ConfigError(f"unknown config section [{section}]")
        obj, names = known[section]
        if key not in names:
            raise ConfigError(f"unknown config key {section}.{key}")
        setattr(obj, key, _coerce(raw, getattr(obj, key)))
    cfg.validate()
    return cfg


def load_config(path, overrides=()) -> TrainConfig:
    with open(path) as f:
        return from_ini(f.read(), overrides)


# ---------------------------------------------------------------------------
# training state


class TrainState:
    """Model, optimizer moments, data split, step counter, and metric rows."""

    def __init__(self, config: TrainConfig, model, dataset: LabeledDataset):
        self.config = config
        self.model = model
        self.dataset = dataset
        mask = heldout_mask(len(dataset))
        self.train = dataset.subset(~mask)
        self.held = dataset.subset(mask)
        p = config.model.patch
        self.train_patches = patchify(self.train.images, p)
        self.held_patches = patchify(self.held.images, p)
        self.moments = {
            name: (np.zeros_like(t.data), np.zeros_like(t.data))
            for name, t in sorted(model.params.items())
        }
        self.step = 0
        self.metric_rows: list = []  # raw CSV rows, header excluded

    @property
    def param_names(self):
        return sorted(self.model.params)


def build_dataset(config: TrainConfig) -> LabeledDataset:
    d = config.data
    if d.kind == "dir":
        return load_dataset(d.path)
    seed = d.seed if d.seed >= 0 else config.seed
    return gen_shapes(
        seed, d.count, num_classes=d.num_classes, image_size=config.model.image_size
    )


def init_state(config: TrainConfig) -> TrainState:
    config.validate()
    dataset = build_dataset(config)
    config.model.num_classes = dataset.num_classes
    if len(dataset) < config.batch_size + 1:
        raise ConfigError(
            f"dataset of {len(dataset)} images is too small for batch_size {config.batch_size}"
        )
    model = TokenizerModel(config.model, config.quantizer, seed=config.seed)
    return TrainState(config, model, dataset)


def batch_indices(state: TrainState, step: int) -> np.ndarray:
    """Seeded per-epoch shuffle; the remainder batch of each epoch is dropped."""
    n = len(state.train)
    b = state.config.batch_size
    per_epoch = n // b
    epoch, offset = divmod(step, per_epoch)
    perm = substream(state.config.seed, "order", epoch).permutation(n)
    return perm[offset * b : (offset + 1) * b]


def _compute_parts(model: TokenizerModel, patches, labels, weights: LossWeights,
                   force_all: bool = False, count_usage: bool = True):
    """Forward pass plus the loss parts the configuration enables.

    With `force_all` every part is computed regardless of weights (used by
    evaluation so disabled parts still get reported).
    """
    out = model.forward(patches, count_usage=count_usage)
    parts = {}
    if weights.recon or force_all:
        pred = model.decode_tokens(out.expanded)
        parts["recon"] = recon_loss(ad.Tensor(np.asarray(patches)), pred)
    if out.f_hat is not None:
        parts["vq"] = vq_loss(
            out.latents, out.f_hat, weights.beta,
            codebook_term=model.qcfg.learning == "grad",
        )
    if weights.lambda_contra > 0 or force_all:
        logits = model.class_logits(out.pooled)
        parts["contrastive"] = contrastive_loss(logits, labels)
    return parts, out


def _enabled_parts(parts: dict, weights: LossWeights) -> dict:
    enabled = {}
    if weights.recon and "recon" in parts:
        enabled["recon"] = parts["recon"]
    if "vq" in parts:
        enabled["vq"] = parts["vq"]
    if weights.lambda_contra > 0 and "contrastive" in parts:
        enabled["contrastive"] = parts["contrastive"]
    return enabled


def _apply_gradients(state: TrainState):
    cfg = state.config.optim
    params = state.model.params
    grads = {n: params[n].grad for n in state.param_names if params[n].grad is not None}
    if not grads:
        return
    if cfg.grad_clip > 0:
        norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
        if norm > cfg.grad_clip:
            factor = np.float32(cfg.grad_clip / norm)
            for g in grads.values():
                g *= factor
    t = state.step + 1
    for name, g in grads.items():
        p = params[name]
        if cfg.optimizer == "sgd":
            p.data -= np.asarray(cfg.learning_rate, dtype=p.dtype) * g
            continue
        m, v = state.moments[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        mhat = m / (1.0 - cfg.beta1**t)
        vhat = v / (1.0 - cfg.beta2**t)
        p.data -= (cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)).astype(p.dtype)
    for name in state.param_names:
        params[name].grad = None


def _codebook_batches(model: TokenizerModel, out):
    """(codebook, vectors, indices) triples for EMA/revival from one batch."""
    q = model.quantizer
    lat = out.latents.data
    flat = lat.reshape(-1, lat.shape[-1])
    if isinstance(q, Codebook):
        return [(q, flat, out.indices[:, 0])]
    if isinstance(q, MultiCodebookQuantizer):
        chunk = q.chunk_dim
        return [
            (cb, flat[:, j * chunk : (j + 1) * chunk], out.indices[:, j])
            for j, cb in enumerate(q.sub_codebooks)
        ]
    level_inputs = model._last_rq_level_inputs
    if q.shared:
        vectors = np.concatenate(level_inputs, axis=0)
        idx = np.concatenate([out.indices[:, j] for j in range(q.num_levels)])
        return [(q.levels[0], vectors, idx)]
    return [
        (cb, level_inputs[j], out.indices[:, j]) for j, cb in enumerate(q.levels)
    ]


def train_step(state: TrainState, batch: np.ndarray):
    """One forward/backward/update plus codebook maintenance; returns the report."""
    cfg = state.config
    model = state.model
    patches = state.train_patches[batch]
    labels = state.train.labels[batch]
    try:
        with ad.Tape() as tape:
            parts, out = _compute_parts(model, patches, labels, cfg.loss)
            total, report = total_loss(_enabled_parts(parts, cfg.loss), cfg.loss)
            tape.backward(total)
    except NonFiniteInputError as e:
        nan = float("nan")
        raise TrainingDiverged(
            f"non-finite values in forward pass at step {state.step}: {e}",
            report=LossReport(recon=nan, vq=nan, contrastive=nan, total=nan),
        ) from e
    if out.sub_errors is not None:
        report.per_sub_vq = [float(x) for x in out.sub_errors.mean(axis=0)]
    _apply_gradients(state)
    model.clamp_temperature()

    if model.quantizer is not None and model.qcfg.learning == "ema":
        for cb, vectors, idx in _codebook_batches(model, out):
            ema_update(cb, vectors, idx, cfg.quantizer.ema_decay)
        interval = cfg.quantizer.revive_interval
        if interval > 0 and (state.step + 1) % interval == 0:
            for j, (cb, vectors, _idx) in enumerate(_codebook_batches(model, out)):
                revive_dead_codes(
                    cb, vectors, cfg.quantizer.revive_threshold,
                    seed=derive_seed(cfg.seed, "revive", state.step, j),
                )
    state.step += 1
    return report


# ---------------------------------------------------------------------------
# evaluation during training


def _histogram_columns(model: TokenizerModel, indices: np.ndarray):
    """Index columns aligned with `model._codebooks()` (levels pooled when shared)."""
    q = model.quantizer
    if isinstance(q, (Codebook, MultiCodebookQuantizer)):
        return [indices[:, j] for j in range(indices.shape[1])]
    if q.shared:
        return [indices.reshape(-1)]
    return [indices[:, j] for j in range(indices.shape[1])]


def eval_metrics(state: TrainState, batch_size: int = 256) -> dict:
    """Held-out losses, PSNR, zero-shot accuracy, and codebook health."""
    cfg = state.config
    model = state.model
    n = len(state.held)
    sums = {"recon": 0.0, "vq": 0.0, "contrastive": 0.0, "total": 0.0}
    histograms = [np.zeros(cb.num_entries, dtype=np.int64) for _, cb in model._codebooks()]
    hits = 0
    sq_err_sum = 0.0
    sq_err_sqsum = 0.0
    token_count = 0
    weight = 0.0
    for start in range(0, n, batch_size):
        sel = slice(start, min(start + batch_size, n))
        patches = state.held_patches[sel]
        labels = state.held.labels[sel]
        parts, out = _compute_parts(
            model, patches, labels, cfg.loss, force_all=True, count_usage=False
        )
        _, rep = total_loss(_enabled_parts(parts, cfg.loss), cfg.loss)
        w = patches.shape[0]
        weight += w
        sums["recon"] += float(parts["recon"].data) * w
        sums["vq"] += (float(parts["vq"].data) if "vq" in parts else 0.0) * w
        sums["contrastive"] += float(parts["contrastive"].data) * w
        sums["total"] += rep.total * w
        logits = model.class_logits(out.pooled).data
        hits += int((logits.argmax(axis=1) == labels).sum())
        if out.indices is not None:
            for j, ((_, cb), col) in enumerate(
                zip(model._codebooks(), _histogram_columns(model, out.indices))
            ):
                histograms[j] += np.bincount(col, minlength=cb.num_entries)
            token_errors = out.sub_errors.sum(axis=1)
            sq_err_sum += float(token_errors.sum())
            sq_err_sqsum += float((token_errors**2).sum())
            token_count += token_errors.shape[0]
    mse = sums["recon"] / weight
    sub_stats = [stats_from_histogram(h) for h in histograms]
    row = {
        "step": state.step,
        "recon": mse,
        "vq": sums["vq"] / weight,
        "contrastive": sums["contrastive"] / weight,
        "total": sums["total"] / weight,
        "perplexity": float(np.mean([s.perplexity for s in sub_stats])) if sub_stats else 0.0,
        "utilization": float(np.mean([s.utilization for s in sub_stats])) if sub_stats else 0.0,
        "psnr": psnr_from_mse(mse),
        "zs_acc": hits / max(n, 1),
    }
    if token_count:
        mean = sq_err_sum / token_count
        row["quant_error_mean"] = mean
        row["quant_error_std"] = math.sqrt(max(sq_err_sqsum / token_count - mean * mean, 0.0))
    row["sub_stats"] = sub_stats
    return row


def _metrics_row_text(row: dict) -> str:
    return ",".join(
        [str(row["step"])]
        + [
            format(row[k], ".8g")
            for k in ("recon", "vq", "contrastive", "total", "perplexity", "utilization", "psnr", "zs_acc")
        ]
    )


def metrics_csv(state: TrainState) -> str:
    return METRICS_HEADER + "\n" + "".join(r + "\n" for r in state.metric_rows)


# ---------------------------------------------------------------------------
# checkpoints

_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}
_CODE_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8"}


def _named_arrays(state: TrainState) -> dict:
    arrays = {}
    for name in state.param_names:
        arrays[f"param.{name}"] = state.model.params[name].data
        m, v = state.moments[name]
        arrays[f"opt.m.{name}"] = m
        arrays[f"opt.v.{name}"] = v
    for name, cb in state.model._codebooks():
        arrays[f"qstate.{name}.usage"] = cb.usage_counts
        arrays[f"qstate.{name}.ema_size"] = cb.ema_cluster_size
        arrays[f"qstate.{name}.ema_sum"] = cb.ema_embed_sum
    return arrays


def encode_checkpoint(state: TrainState) -> bytes:
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_text = to_ini(state.config).encode("utf-8")
    out.write(struct.pack("<I", len(cfg_text)))
    out.write(cfg_text)
    out.write(struct.pack("<Q", state.step))
    arrays = _named_arrays(state)
    out.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = arrays[name]
        nb = name.encode("utf-8")
        out.write(struct.pack("<H", len(nb)))
        out.write(nb)
        code = _DTYPE_CODES[np.dtype(arr.dtype)]
        out.write(struct.pack("<BB", code, arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())
    if state.model.quantizer is not None:
        blob = encode_codebooks(state.model.quantizer)
    else:
        blob = b""
    out.write(struct.pack("<Q", len(blob)))
    out.write(blob)
    metrics = metrics_csv(state).encode("utf-8")
    out.write(struct.pack("<I", len(metrics)))
    out.write(metrics)
    return out.getvalue()


def save_checkpoint(state: TrainState, path) -> str:
    atomic_write(path, encode_checkpoint(state))
    return str(path)


def decode_checkpoint(data: bytes, path="<bytes>") -> TrainState:
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(data):
            raise FormatError(f"{path}: truncated while reading {what} at byte {off}")
        chunk = data[off : off + n]
        off += n
        return chunk

    magic = take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    cfg_text = take(cfg_len, "config").decode("utf-8")
    (step,) = struct.unpack("<Q", take(8, "step"))
    (n_arrays,) = struct.unpack("<I", take(4, "array count"))
    arrays = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack("<H", take(2, "array name length"))
        name = take(name_len, "array name").decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2, "array header"))
        if code not in _CODE_DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code} for array {name}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "array shape"))
        count = int(np.prod(shape)) if ndim else 1
        raw = take(count * np.dtype(_CODE_DTYPES[code]).itemsize, f"array {name}")
        arrays[name] = np.frombuffer(raw, dtype=_CODE_DTYPES[code]).reshape(shape).copy()
    (blob_len,) = struct.unpack("<Q", take(8, "codebook blob length"))
    blob = take(blob_len, "codebook blob")
    (metrics_len,) = struct.unpack("<I", take(4, "metrics length"))
    metrics_text = take(metrics_len, "metrics").decode("utf-8")
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes at byte {off}")

    config = from_ini(cfg_text)
    state = init_state(config)
    for name in state.param_names:
        key = f"param.{name}"
        if key not in arrays:
            raise FormatError(f"{path}: checkpoint is missing array {key}")
        np.copyto(state.model.params[name].data, arrays[key])
        np.copyto(state.moments[name][0], arrays[f"opt.m.{name}"])
        np.copyto(state.moments[name][1], arrays[f"opt.v.{name}"])
    if blob:
        loaded = decode_codebooks(blob, path=f"{path}#codebooks")
        loaded_books = (
            [loaded]
            if isinstance(loaded, Codebook)
            else loaded.sub_codebooks
            if isinstance(loaded, MultiCodebookQuantizer)
            else ([loaded.levels[0]] if loaded.shared else loaded.levels)
        )
        own = state.model._codebooks()
        if len(own) != len(loaded_books):
            raise FormatError(f"{path}: checkpoint codebook count does not match config")
        for (name, cb), src in zip(own, loaded_books):
            np.copyto(cb.entries, src.entries)
            np.copyto(cb.usage_counts, arrays[f"qstate.{name}.usage"])
            np.copyto(cb.ema_cluster_size, arrays[f"qstate.{name}.ema_size"])
            np.copyto(cb.ema_embed_sum, arrays[f"qstate.{name}.ema_sum"])
    state.step = int(step)
    lines = metrics_text.splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise FormatError(f"{path}: bad metrics header in checkpoint")
    state.metric_rows = lines[1:]
    return state


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read(), path=str(path))


# ---------------------------------------------------------------------------
# the fit loop


def fit(config: TrainConfig = None, out_dir=None, resume=None, progress=None) -> TrainState:
    """Run training to `config.steps`, checkpointing and logging on schedule.

    `resume` names a checkpoint to continue from; its embedded config is used
    (and must match `config` when both are given). Returns the final state.
    """
    if resume is not None:
        state = load_checkpoint(resume)
        if config is not None and to_ini(config) != to_ini(state.config):
            raise ConfigError("resume checkpoint config differs from the provided config")
        config = state.config
    else:
        if config is None:
            raise ConfigError("fit needs a config or a resume checkpoint")
        state = init_state(config)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    last_ckpt = str(resume) if resume is not None else None

    def checkpoint():
        nonlocal last_ckpt
        if out_dir:
            path = os.path.join(out_dir, f"ckpt_{state.step:06d}.utkc")
            last_ckpt = save_checkpoint(state, path)
            atomic_write(os.path.join(out_dir, "metrics.csv"), metrics_csv(state).encode())

    def log_eval():
        row = eval_metrics(state)
        state.metric_rows.append(_metrics_row_text(row))
        if progress:
            progress(row)
        return row

    if state.step == 0:
        log_eval()
    while state.step < config.steps:
        batch = batch_indices(state, state.step)
        try:
            train_step(state, batch)
        except TrainingDiverged as e:
            e.checkpoint_path = last_ckpt
            raise
        if state.step % config.eval_interval == 0 or state.step == config.steps:
            log_eval()
        if state.step % config.checkpoint_interval == 0 or state.step == config.steps:
            checkpoint()
    if out_dir and last_ckpt is None:
        checkpoint()
    return state
