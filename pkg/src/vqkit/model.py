"""The toy unified tokenizer.

Pipeline: patch-MLP encoder -> factorization (none | linear | attention
projection) -> quantizer (none | VQ | MCQ | RQ) -> mirrored expansion ->
patch-MLP decoder, plus a class-embedding contrastive tower. Every stage is
switchable so the pipeline can be ablated stage by stage.

The attention projection compresses channels by averaging head outputs
instead of concatenating them: with h heads of per-head width c, the wide
width is C = h*c, the down direction maps C -> c and the up direction maps
c -> C by per-head projection followed by ordinary concatenation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from . import autodiff as ad
from .data import patchify, unpatchify
from .errors import ConfigError, ShapeError
from .quantize import (
    Codebook,
    MultiCodebookQuantizer,
    ResidualQuantizer,
    lookup_batch,
    quantize_mcq_batch,
    quantize_rq_batch,
)
from .seeding import substream

TAU_MIN = 1e-2
TAU_MAX = 1e2


@dataclass
class ModelConfig:
    """Architecture switches and toy widths."""

    image_size: int = 32
    patch: int = 8
    width: int = 64  # C: encoder/decoder token width
    latent_dim: int = 16  # d: factorized width fed to the quantizer
    heads: int = 4
    blocks: int = 2
    mlp_ratio: int = 2
    factorization: str = "attention"  # none | linear | attention
    supervision: str = "pre"  # pre | post: where the contrastive embedding is pooled
    temperature: float = 0.1
    num_classes: int = 8

    def validate(self):
        if self.image_size % self.patch != 0:
            raise ConfigError(f"patch {self.patch} must divide image size {self.image_size}")
        if self.factorization not in ("none", "linear", "attention"):
            raise ConfigError(f"unknown factorization {self.factorization!r}")
        if self.supervision not in ("pre", "post"):
            raise ConfigError(f"unknown supervision point {self.supervision!r}")
        if self.factorization == "attention":
            if self.width % self.heads != 0:
                raise ConfigError("heads must divide width for attention factorization")
            if self.width // self.heads != self.latent_dim:
                raise ConfigError(
                    f"attention factorization needs latent_dim == width/heads "
                    f"({self.width}/{self.heads}), got {self.latent_dim}"
                )
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")

    @property
    def tokens(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch * self.patch

    @property
    def effective_latent_dim(self) -> int:
        return self.width if self.factorization == "none" else self.latent_dim


@dataclass
class QuantizerConfig:
    """Quantizer stage switches and codebook maintenance settings."""

    scheme: str = "mcq"  # none | vq | mcq | rq
    sub_codebooks: int = 4
    codebook_size: int = 64
    rq_shared: bool = True
    learning: str = "ema"  # ema | grad
    ema_decay: float = 0.99
    revive_threshold: float = 1.0
    revive_interval: int = 100

    def validate(self):
        if self.scheme not in ("none", "vq", "mcq", "rq"):
            raise ConfigError(f"unknown quantizer scheme {self.scheme!r}")
        if self.learning not in ("ema", "grad"):
            raise ConfigError(f"unknown codebook learning {self.learning!r}")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError("ema_decay must be in (0, 1)")
        if self.scheme != "none" and self.codebook_size < 1:
            raise ConfigError("codebook_size must be >= 1")


@dataclass
class AttentionProjection:
    """Multi-head attention whose output width differs from its input width."""

    heads: int
    head_dim: int
    wide_dim: int
    direction: str  # down: C -> c, up: c -> C
    wq: ad.Tensor
    wk: ad.Tensor
    wv: ad.Tensor
    wo: ad.Tensor

    def __post_init__(self):
        if self.wide_dim != self.heads * self.head_dim:
            raise ShapeError(
                f"wide_dim {self.wide_dim} != heads {self.heads} * head_dim {self.head_dim}"
            )
        if self.direction not in ("down", "up"):
            raise ShapeError(f"direction must be 'down' or 'up', got {self.direction!r}")

    @classmethod
    def create(cls, heads, head_dim, direction, rng) -> "AttentionProjection":
        wide = heads * head_dim
        in_dim = wide if direction == "down" else head_dim
        out_in = head_dim if direction == "down" else wide

        def w(fan_in, fan_out):
            return ad.Tensor(
                (rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)).astype(np.float32)
            )

        return cls(
            heads=heads,
            head_dim=head_dim,
            wide_dim=wide,
            direction=direction,
            wq=w(in_dim, wide),
            wk=w(in_dim, wide),
            wv=w(in_dim, wide),
            wo=w(out_in, out_in),
        )

    def parameters(self, prefix: str) -> dict:
        return {
            f"{prefix}.wq": self.wq,
            f"{prefix}.wk": self.wk,
            f"{prefix}.wv": self.wv,
            f"{prefix}.wo": self.wo,
        }


def _head_outputs(x, proj: AttentionProjection):
    q = ad.matmul(x, proj.wq)
    k = ad.matmul(x, proj.wk)
    v = ad.matmul(x, proj.wv)
    c = proj.head_dim
    outs = []
    for i in range(proj.heads):
        qi = ad.slice_last(q, i * c, (i + 1) * c)
        ki = ad.slice_last(k, i * c, (i + 1) * c)
        vi = ad.slice_last(v, i * c, (i + 1) * c)
        scores = ad.scale(ad.matmul(qi, ad.swap_last2(ki)), 1.0 / math.sqrt(c))
        outs.append(ad.matmul(ad.softmax_rows(scores), vi))
    return outs


def attention_project_down(x: ad.Tensor, proj: AttentionProjection) -> ad.Tensor:
    """Self-attention with head outputs averaged (not concatenated): C -> c."""
    if proj.direction != "down":
        raise ShapeError("projection was built for the up direction")
    if x.shape[-1] != proj.wide_dim:
        raise ShapeError(f"expected width {proj.wide_dim}, got {x.shape[-1]}")
    outs = _head_outputs(x, proj)
    acc = outs[0]
    for o in outs[1:]:
        acc = ad.add(acc, o)
    return ad.matmul(ad.scale(acc, 1.0 / proj.heads), proj.wo)


def attention_project_up(x: ad.Tensor, proj: AttentionProjection) -> ad.Tensor:
    """Self-attention with per-head c -> C projections and concatenation: c -> C."""
    if proj.direction != "up":
        raise ShapeError("projection was built for the down direction")
    if x.shape[-1] != proj.head_dim:
        raise ShapeError(f"expected width {proj.head_dim}, got {x.shape[-1]}")
    outs = _head_outputs(x, proj)
    return ad.matmul(ad.concat_last(outs), proj.wo)


class TokenizerModel:
    """Encoder, switchable bottleneck, decoder, and contrastive tower."""

    def __init__(self, model_cfg: ModelConfig, quant_cfg: QuantizerConfig, seed: int = 0):
        model_cfg.validate()
        quant_cfg.validate()
        self.cfg = model_cfg
        self.qcfg = quant_cfg
        rng = substream(seed, "init")
        self.params: dict = {}

        def linear(name, fan_in, fan_out):
            self.params[f"{name}.w"] = ad.Tensor(
                (rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)).astype(np.float32)
            )
            self.params[f"{name}.b"] = ad.Tensor(np.zeros(fan_out, dtype=np.float32))

        c_wide = model_cfg.width
        hidden = model_cfg.mlp_ratio * c_wide
        linear("enc.embed", model_cfg.patch_dim, c_wide)
        for i in range(model_cfg.blocks):
            linear(f"enc.b{i}.fc1", c_wide, hidden)
            linear(f"enc.b{i}.fc2", hidden, c_wide)

        d = model_cfg.effective_latent_dim
        if model_cfg.factorization == "linear":
            linear("fact.down", c_wide, d)
            linear("fact.up", d, c_wide)
            self.attn_down = self.attn_up = None
        elif model_cfg.factorization == "attention":
            self.attn_down = AttentionProjection.create(
                model_cfg.heads, model_cfg.latent_dim, "down", rng
            )
            self.attn_up = AttentionProjection.create(
                model_cfg.heads, model_cfg.latent_dim, "up", rng
            )
            self.params.update(self.attn_down.parameters("fact.down"))
            self.params.update(self.attn_up.parameters("fact.up"))
        else:
            self.attn_down = self.attn_up = None

        for i in range(model_cfg.blocks):
            linear(f"dec.b{i}.fc1", c_wide, hidden)
            linear(f"dec.b{i}.fc2", hidden, c_wide)
        linear("dec.out", c_wide, model_cfg.patch_dim)

        self.params["contrast.class_embed"] = ad.Tensor(
            (0.02 * rng.standard_normal((model_cfg.num_classes, c_wide))).astype(np.float32)
        )
        self.params["contrast.log_tau"] = ad.Tensor(
            np.asarray(math.log(model_cfg.temperature), dtype=np.float32)
        )

        self.quantizer = self._build_quantizer(rng)
        self._last_rq_level_inputs = None
        if self.quantizer is not None and quant_cfg.learning == "grad":
            # the param tensor shares the codebook's entry array, so optimizer
            # updates are visible to lookups without copying
            for name, cb in self._codebooks():
                self.params[f"quant.{name}.entries"] = ad.Tensor(cb.entries)

    def _build_quantizer(self, rng):
        d = self.cfg.effective_latent_dim
        q = self.qcfg
        if q.scheme == "none":
            return None
        if q.scheme == "vq":
            return Codebook.from_entries(
                rng.standard_normal((q.codebook_size, d)).astype(np.float32)
            )
        if q.scheme == "mcq":
            if d % q.sub_codebooks != 0:
                raise ConfigError(
                    f"sub_codebooks {q.sub_codebooks} must divide latent dim {d}"
                )
            chunk = d // q.sub_codebooks
            subs = [
                Codebook.from_entries(
                    rng.standard_normal((q.codebook_size, chunk)).astype(np.float32)
                )
                for _ in range(q.sub_codebooks)
            ]
            return MultiCodebookQuantizer(sub_codebooks=subs, token_dim=d)
        if q.rq_shared:
            cb = Codebook.from_entries(
                rng.standard_normal((q.codebook_size, d)).astype(np.float32)
            )
            return ResidualQuantizer.with_shared_codebook(cb, q.sub_codebooks)
        levels = [
            Codebook.from_entries(rng.standard_normal((q.codebook_size, d)).astype(np.float32))
            for _ in range(q.sub_codebooks)
        ]
        return ResidualQuantizer(levels=levels, shared=False)

    def _codebooks(self):
        """(name, Codebook) pairs, deduplicated for shared RQ codebooks."""
        if self.quantizer is None:
            return []
        if isinstance(self.quantizer, Codebook):
            return [("sub0", self.quantizer)]
        if isinstance(self.quantizer, MultiCodebookQuantizer):
            return [(f"sub{j}", cb) for j, cb in enumerate(self.quantizer.sub_codebooks)]
        if self.quantizer.shared:
            return [("shared", self.quantizer.levels[0])]
        return [(f"level{j}", cb) for j, cb in enumerate(self.quantizer.levels)]

    # ------------------------------------------------------------------
    # stages

    def _mlp_stack(self, x, prefix):
        for i in range(self.cfg.blocks):
            h = ad.layer_norm(x)
            h = ad.gelu(ad.add_bias(ad.matmul(h, self.params[f"{prefix}.b{i}.fc1.w"]),
                                    self.params[f"{prefix}.b{i}.fc1.b"]))
            h = ad.add_bias(ad.matmul(h, self.params[f"{prefix}.b{i}.fc2.w"]),
                            self.params[f"{prefix}.b{i}.fc2.b"])
            x = ad.add(x, h)
        return x

    def encoder_features(self, patches: ad.Tensor) -> ad.Tensor:
        x = ad.add_bias(ad.matmul(patches, self.params["enc.embed.w"]),
                        self.params["enc.embed.b"])
        return ad.layer_norm(self._mlp_stack(x, "enc"))

    def factor_down(self, feats: ad.Tensor) -> ad.Tensor:
        if self.cfg.factorization == "linear":
            return ad.add_bias(ad.matmul(feats, self.params["fact.down.w"]),
                               self.params["fact.down.b"])
        if self.cfg.factorization == "attention":
            return attention_project_down(feats, self.attn_down)
        return feats

    def expand_up(self, latents: ad.Tensor) -> ad.Tensor:
        if self.cfg.factorization == "linear":
            return ad.add_bias(ad.matmul(latents, self.params["fact.up.w"]),
                               self.params["fact.up.b"])
        if self.cfg.factorization == "attention":
            return attention_project_up(latents, self.attn_up)
        return latents

    def decode_tokens(self, tokens: ad.Tensor) -> ad.Tensor:
        x = self._mlp_stack(tokens, "dec")
        x = ad.add_bias(ad.matmul(x, self.params["dec.out.w"]), self.params["dec.out.b"])
        return ad.sigmoid(x)

    def quantize_latents(self, flat: np.ndarray, count_usage: bool = True):
        """Quantize (N, d) latent rows; returns (indices, values, sub_errors)."""
        q = self.quantizer
        if isinstance(q, Codebook):
            idx, err = lookup_batch(q, flat, count_usage=count_usage)
            return idx[:, None], q.entries[idx], err[:, None]
        if isinstance(q, MultiCodebookQuantizer):
            return quantize_mcq_batch(q, flat, count_usage=count_usage)
        idx, values, errors, level_inputs = quantize_rq_batch(q, flat, count_usage=count_usage)
        self._last_rq_level_inputs = level_inputs
        return idx, values, errors[:, None]

    def tracked_f_hat(self, indices: np.ndarray, batch_shape) -> ad.Tensor:
        """Gather quantized vectors through tracked codebook entries (grad mode)."""
        q = self.quantizer
        if isinstance(q, Codebook):
            flat = ad.take_rows(self.params["quant.sub0.entries"], indices[:, 0])
        elif isinstance(q, MultiCodebookQuantizer):
            parts = [
                ad.take_rows(self.params[f"quant.sub{j}.entries"], indices[:, j])
                for j in range(q.num_sub_codebooks)
            ]
            flat = ad.concat_last(parts)
        else:
            names = (
                ["shared"] * q.num_levels
                if q.shared
                else [f"level{j}" for j in range(q.num_levels)]
            )
            flat = ad.take_rows(self.params[f"quant.{names[0]}.entries"], indices[:, 0])
            for j in range(1, q.num_levels):
                flat = ad.add(
                    flat, ad.take_rows(self.params[f"quant.{names[j]}.entries"], indices[:, j])
                )
        return ad.reshape(flat, batch_shape)

    def forward(self, patches, quantize: bool = True, count_usage: bool = True):
        """Run the full pipeline on (B, T, P) patches (numpy or tensor).

        Returns a namespace with every intermediate the training loop needs.
        """
        x = patches if isinstance(patches, ad.Tensor) else ad.Tensor(np.asarray(patches))
        feats = self.encoder_features(x)
        pooled_pre = ad.mean_pool(feats, axis=-2)
        latents = self.factor_down(feats)

        indices = sub_errors = None
        f_hat = None
        if self.quantizer is not None and quantize:
            lat = latents.data
            flat = lat.reshape(-1, lat.shape[-1])
            indices, values, sub_errors = self.quantize_latents(flat, count_usage=count_usage)
            if self.qcfg.learning == "grad":
                f_hat = self.tracked_f_hat(indices, lat.shape)
            else:
                f_hat = ad.Tensor(values.reshape(lat.shape))
            st = ad.straight_through(latents, f_hat)
        else:
            st = latents

        expanded = self.expand_up(st)
        pooled_post = ad.mean_pool(expanded, axis=-2)
        return SimpleNamespace(
            feats=feats,
            pooled_pre=pooled_pre,
            pooled_post=pooled_post,
            pooled=pooled_pre if self.cfg.supervision == "pre" else pooled_post,
            latents=latents,
            indices=indices,
            sub_errors=sub_errors,
            f_hat=f_hat,
            st=st,
            expanded=expanded,
        )

    def class_logits(self, embeds: ad.Tensor) -> ad.Tensor:
        """Temperature-scaled cosine logits against the class embeddings."""
        img_n = ad.l2_normalize_rows(embeds)
        cls_n = ad.l2_normalize_rows(self.params["contrast.class_embed"])
        sims = ad.matmul(img_n, ad.swap_last2(cls_n))
        inv_tau = ad.exp(ad.scale(self.params["contrast.log_tau"], -1.0))
        return ad.scale(sims, inv_tau)

    def clamp_temperature(self):
        p = self.params["contrast.log_tau"]
        np.clip(p.data, math.log(TAU_MIN), math.log(TAU_MAX), out=p.data)

    @property
    def temperature(self) -> float:
        return float(np.exp(self.params["contrast.log_tau"].data))


def _check_images(model: TokenizerModel, images):
    x = np.asarray(images, dtype=np.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    s = model.cfg.image_size
    if x.ndim != 4 or x.shape[1:] != (s, s, 3):
        raise ShapeError(f"expected images of shape ({s}, {s}, 3), got {np.asarray(images).shape}")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ShapeError("image values must lie in [0, 1]")
    return x, single


def encode(model: TokenizerModel, images):
    """Continuous latent tokens ready for quantization plus the pooled embedding.

    Returns ((T, d), (C,)) for one image or ((B, T, d), (B, C)) for a batch.
    The embedding is mean-pooled over tokens before factorization.
    """
    x, single = _check_images(model, images)
    out = model.forward(patchify(x, model.cfg.patch), quantize=False)
    lat, emb = out.latents.data, out.pooled_pre.data
    return (lat[0], emb[0]) if single else (lat, emb)


def decode(model: TokenizerModel, latents):
    """Reconstruct images from (quantized) latent tokens; output in [0, 1]."""
    x = np.asarray(latents, dtype=np.float32)
    single = x.ndim == 2
    if single:
        x = x[None]
    d = model.cfg.effective_latent_dim
    if x.ndim != 3 or x.shape[1] != model.cfg.tokens or x.shape[2] != d:
        raise ShapeError(f"expected latents of shape (T={model.cfg.tokens}, d={d})")
    tokens = model.decode_tokens(model.expand_up(ad.Tensor(x)))
    imgs = unpatchify(tokens.data, model.cfg.image_size, model.cfg.image_size, model.cfg.patch)
    return imgs[0] if single else imgs


def contrastive_logits(model: TokenizerModel, embeddings, class_ids) -> np.ndarray:
    """Logit matrix (B, num_classes) for pooled image embeddings."""
    ids = np.asarray(class_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= model.cfg.num_classes):
        raise ShapeError(f"class id out of range [0, {model.cfg.num_classes})")
    e = np.asarray(embeddings, dtype=np.float32)
    if e.ndim != 2 or e.shape[0] != ids.shape[0] or e.shape[1] != model.cfg.width:
        raise ShapeError(f"embeddings shape {e.shape} incompatible with batch of {ids.shape}")
    return model.class_logits(ad.Tensor(e)).data
