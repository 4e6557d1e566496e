"""Attention-projection oracles, pipeline composability, and tower contracts."""

import math

import numpy as np
import pytest

from vqkit import autodiff as ad
from vqkit.autodiff import Tape, Tensor
from vqkit.data import gen_shapes, patchify
from vqkit.errors import ConfigError, ShapeError
from vqkit.model import (
    AttentionProjection,
    ModelConfig,
    QuantizerConfig,
    TokenizerModel,
    attention_project_down,
    attention_project_up,
    contrastive_logits,
    decode,
    encode,
)
from vqkit.seeding import substream

RNG = np.random.default_rng(31)


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _down_oracle(x, proj):
    """Independent per-head recomputation with averaged head outputs."""
    w = {k: getattr(proj, k).data.astype(np.float64) for k in ("wq", "wk", "wv", "wo")}
    x = x.astype(np.float64)
    q, k, v = x @ w["wq"], x @ w["wk"], x @ w["wv"]
    c = proj.head_dim
    heads = []
    for i in range(proj.heads):
        qi, ki, vi = (m[:, i * c : (i + 1) * c] for m in (q, k, v))
        heads.append(_softmax(qi @ ki.T / math.sqrt(c)) @ vi)
    return (np.mean(heads, axis=0)) @ w["wo"]


def _up_oracle(x, proj):
    w = {k: getattr(proj, k).data.astype(np.float64) for k in ("wq", "wk", "wv", "wo")}
    x = x.astype(np.float64)
    q, k, v = x @ w["wq"], x @ w["wk"], x @ w["wv"]
    c = proj.head_dim
    heads = []
    for i in range(proj.heads):
        qi, ki, vi = (m[:, i * c : (i + 1) * c] for m in (q, k, v))
        heads.append(_softmax(qi @ ki.T / math.sqrt(c)) @ vi)
    return np.concatenate(heads, axis=1) @ w["wo"]


class TestAttentionProjection:
    def test_wide_dim_invariant(self):
        proj = AttentionProjection.create(4, 8, "down", substream(0, "t"))
        assert proj.wide_dim == 32
        with pytest.raises(ShapeError):
            AttentionProjection(4, 8, 33, "down", proj.wq, proj.wk, proj.wv, proj.wo)

    def test_down_matches_per_head_oracle(self):
        proj = AttentionProjection.create(4, 8, "down", substream(1, "t"))
        x = RNG.standard_normal((4, 32)).astype(np.float32)
        got = attention_project_down(Tensor(x), proj).data
        assert got.shape == (4, 8)
        assert np.abs(got - _down_oracle(x, proj)).max() < 1e-6

    def test_down_single_head(self):
        proj = AttentionProjection.create(1, 8, "down", substream(2, "t"))
        x = RNG.standard_normal((5, 8)).astype(np.float32)
        got = attention_project_down(Tensor(x), proj).data
        assert np.abs(got - _down_oracle(x, proj)).max() < 1e-6

    def test_down_equal_heads_average_is_any_head(self):
        proj = AttentionProjection.create(4, 4, "down", substream(3, "t"))
        # make every head slice identical so all head outputs coincide
        for w in (proj.wq, proj.wk, proj.wv):
            block = w.data[:, :4].copy()
            for i in range(1, 4):
                w.data[:, 4 * i : 4 * (i + 1)] = block
        x = RNG.standard_normal((3, 16)).astype(np.float32)
        got = attention_project_down(Tensor(x), proj).data
        q = x @ proj.wq.data[:, :4]
        k = x @ proj.wk.data[:, :4]
        v = x @ proj.wv.data[:, :4]
        single = _softmax(q @ k.T / 2.0) @ v @ proj.wo.data
        assert np.abs(got - single).max() < 1e-5

    def test_up_matches_per_head_oracle(self):
        proj = AttentionProjection.create(4, 8, "up", substream(4, "t"))
        x = RNG.standard_normal((6, 8)).astype(np.float32)
        got = attention_project_up(Tensor(x), proj).data
        assert got.shape == (6, 32)
        assert np.abs(got - _up_oracle(x, proj)).max() < 1e-6

    def test_up_zero_values_annihilate(self):
        proj = AttentionProjection.create(2, 4, "up", substream(5, "t"))
        proj.wv.data[:] = 0.0
        x = RNG.standard_normal((3, 4)).astype(np.float32)
        assert np.abs(attention_project_up(Tensor(x), proj).data).max() == 0.0

    def test_batched_equals_per_image(self):
        proj = AttentionProjection.create(2, 4, "down", substream(6, "t"))
        x = RNG.standard_normal((3, 5, 8)).astype(np.float32)
        batched = attention_project_down(Tensor(x), proj).data
        for i in range(3):
            single = attention_project_down(Tensor(x[i]), proj).data
            assert np.abs(batched[i] - single).max() < 1e-6

    def test_direction_mismatch_rejected(self):
        down = AttentionProjection.create(2, 4, "down", substream(7, "t"))
        with pytest.raises(ShapeError):
            attention_project_up(Tensor(np.zeros((2, 4), dtype=np.float32)), down)


def tiny_model(factorization="linear", scheme="mcq", latent_dim=8, **kw):
    mc = ModelConfig(
        image_size=16,
        patch=8,
        width=16,
        latent_dim=latent_dim,
        heads=4,
        blocks=1,
        factorization=factorization,
        num_classes=4,
        **kw,
    )
    qc = QuantizerConfig(scheme=scheme, sub_codebooks=2, codebook_size=8)
    return TokenizerModel(mc, qc, seed=0)


class TestTokenizerModel:
    def test_init_deterministic(self):
        a = tiny_model()
        b = tiny_model()
        for name in a.params:
            assert a.params[name].data.tobytes() == b.params[name].data.tobytes()

    def test_attention_needs_matching_latent(self):
        with pytest.raises(ConfigError):
            ModelConfig(width=16, heads=4, latent_dim=8, factorization="attention").validate()

    @pytest.mark.parametrize("factorization", ["none", "linear", "attention"])
    @pytest.mark.parametrize("scheme", ["none", "vq", "mcq", "rq"])
    def test_pipeline_composability(self, factorization, scheme):
        latent = 4 if factorization == "attention" else 8
        model = tiny_model(factorization=factorization, scheme=scheme, latent_dim=latent)
        patches = RNG.random((3, 4, 192)).astype(np.float32)
        labels = np.array([0, 1, 2])
        with Tape() as tape:
            out = model.forward(patches)
            pred = model.decode_tokens(out.expanded)
            from vqkit.losses import contrastive_loss, recon_loss, total_loss, vq_loss, LossWeights

            parts = {"recon": recon_loss(Tensor(patches), pred)}
            if out.f_hat is not None:
                parts["vq"] = vq_loss(out.latents, out.f_hat, 0.25)
            parts["contrastive"] = contrastive_loss(model.class_logits(out.pooled), labels)
            total, report = total_loss(parts, LossWeights())
            tape.backward(total)
        assert report.is_finite()
        for name, p in model.params.items():
            if p.grad is not None:
                assert np.isfinite(p.grad).all(), name

    def test_supervision_points_agree_without_bottleneck(self):
        model = tiny_model(factorization="none", scheme="none")
        patches = RNG.random((2, 4, 192)).astype(np.float32)
        out = model.forward(patches)
        assert np.array_equal(out.pooled_pre.data, out.pooled_post.data)

    def test_temperature_clamped(self):
        model = tiny_model()
        model.params["contrast.log_tau"].data[...] = 50.0
        model.clamp_temperature()
        assert model.temperature <= 100.0 + 1e-3
        model.params["contrast.log_tau"].data[...] = -50.0
        model.clamp_temperature()
        assert model.temperature >= 0.01 - 1e-6


class TestEncodeDecode:
    def test_encode_deterministic_and_shapes(self):
        model = tiny_model()
        ds = gen_shapes(0, 4, num_classes=4, image_size=16)
        lat1, emb1 = encode(model, ds.images)
        lat2, emb2 = encode(model, ds.images)
        assert np.array_equal(lat1, lat2) and np.array_equal(emb1, emb2)
        assert lat1.shape == (4, 4, 8) and emb1.shape == (4, 16)
        # patch count arithmetic: T == (H/patch)^2
        assert lat1.shape[1] == (16 // 8) ** 2

    def test_single_image_roundtrip_shapes(self):
        model = tiny_model()
        img = gen_shapes(1, 1, num_classes=4, image_size=16).images[0]
        lat, emb = encode(model, img)
        assert lat.shape == (4, 8) and emb.shape == (16,)
        rec = decode(model, lat)
        assert rec.shape == (16, 16, 3)
        assert np.isfinite(rec).all() and rec.min() >= 0.0 and rec.max() <= 1.0

    def test_decode_zero_latents_finite(self):
        model = tiny_model()
        rec = decode(model, np.zeros((4, 8), dtype=np.float32))
        assert np.isfinite(rec).all()

    def test_encode_rejects_bad_inputs(self):
        model = tiny_model()
        with pytest.raises(ShapeError):
            encode(model, np.zeros((8, 8, 3), dtype=np.float32))
        with pytest.raises(ShapeError):
            encode(model, np.full((16, 16, 3), 2.0, dtype=np.float32))
        with pytest.raises(ShapeError):
            decode(model, np.zeros((4, 5), dtype=np.float32))


class TestContrastiveTower:
    def test_logits_match_normalize_dot_scale_oracle(self):
        model = tiny_model()
        embeds = RNG.standard_normal((5, 16)).astype(np.float32)
        ids = np.array([0, 1, 2, 3, 0])
        got = contrastive_logits(model, embeds, ids)
        e = embeds / np.linalg.norm(embeds, axis=1, keepdims=True)
        c = model.params["contrast.class_embed"].data
        c = c / np.linalg.norm(c, axis=1, keepdims=True)
        oracle = (e @ c.T) / model.temperature
        assert np.abs(got - oracle).max() < 1e-6

    def test_embedding_equal_to_class_embedding_wins(self):
        model = tiny_model()
        cls = model.params["contrast.class_embed"].data
        got = contrastive_logits(model, 3.0 * cls, np.arange(4))
        assert np.array_equal(got.argmax(axis=1), np.arange(4))

    def test_orthonormal_embeddings_identity(self):
        model = tiny_model(temperature=1.0)
        basis = np.eye(16, dtype=np.float32)[:4]
        model.params["contrast.class_embed"].data[:] = basis
        got = contrastive_logits(model, basis, np.arange(4))
        assert np.allclose(got, np.eye(4), atol=1e-6)

    def test_unknown_class_id_rejected(self):
        model = tiny_model()
        with pytest.raises(ShapeError):
            contrastive_logits(model, np.zeros((1, 16), dtype=np.float32), np.array([9]))


class TestStraightThroughIntegration:
    def test_encoder_gradients_identical_when_fhat_equals_f(self):
        model = tiny_model(factorization="linear", scheme="mcq", latent_dim=8)
        ds = gen_shapes(3, 2, num_classes=4, image_size=16)
        patches = patchify(ds.images, 8)
        labels = ds.labels

        # plant the exact latent chunks in the codebooks so f_hat == f bitwise
        probe = model.forward(patches, quantize=False)
        for j, cb in enumerate(model.quantizer.sub_codebooks):
            rows = probe.latents.data.reshape(-1, 8)[:, j * 4 : (j + 1) * 4]
            cb.entries[: len(rows)] = rows
            cb.entries[len(rows) :] = 1000.0

        def run(quantize):
            from vqkit.losses import contrastive_loss, recon_loss, total_loss, LossWeights

            for p in model.params.values():
                p.grad = None
            with Tape() as tape:
                out = model.forward(patches, quantize=quantize)
                pred = model.decode_tokens(out.expanded)
                parts = {
                    "recon": recon_loss(Tensor(patches), pred),
                    "contrastive": contrastive_loss(model.class_logits(out.pooled), labels),
                }
                if quantize and out.f_hat is not None:
                    from vqkit.losses import vq_loss

                    parts["vq"] = vq_loss(out.latents, out.f_hat, 0.25)
                total, _ = total_loss(parts, LossWeights())
                tape.backward(total)
            if quantize:
                assert np.array_equal(out.st.data, out.latents.data)  # f_hat == f
            return {n: p.grad.copy() for n, p in model.params.items() if p.grad is not None}

        with_q = run(quantize=True)
        without_q = run(quantize=False)
        for name in without_q:
            assert np.array_equal(with_q[name], without_q[name]), name
