"""Sampler: blending, preservation loss, exactness, guidance direction."""

import numpy as np
import pytest

from draftdiff import dataset as D
from draftdiff import schedule as S
from draftdiff import tensor as T
from draftdiff.codec import IdentityCodec, TinyAutoencoder
from draftdiff.masks import mask_for
from draftdiff.sampler import (
    EditRequest,
    SamplerConfig,
    blend,
    edit,
    edit_batch,
    edit_tokens,
    image_to_chw,
    mask_to_latent,
    preservation_loss,
    synthesize_draft,
    synthesize_draft_batch,
)
from draftdiff.tensor import Tensor
from draftdiff.trainer import DiffusionModel
from draftdiff.unet import UNetConfig

TINY_UNET = UNetConfig(
    in_channels=3, base_channels=8, channel_multipliers=(1, 2), res_blocks=1,
    time_embed_dim=16, cond_embed_dim=16, pose_channels=14, groups=4,
)


@pytest.fixture(scope="module")
def model():
    vocab = D.build_vocabulary(embedding_dim=16)
    m = DiffusionModel(vocab, TINY_UNET, rng=np.random.default_rng(0))
    m.freeze()
    return m


@pytest.fixture(scope="module")
def sched1000():
    return S.build_linear(1000)


@pytest.fixture(scope="module")
def glyph():
    spec = D.GlyphSpec(
        category="dress", style="navy", occasion="office",
        attributes={
            "clothing_length": "knee", "sleeve_length": "long",
            "sleeve_type": "straight", "collar": "round", "hem": "flat",
        },
        seed=5,
    )
    return D.render(spec)


FAST = SamplerConfig(steps=10, cfg_scale=2.0, seed=1)


class TestBlend:
    def test_all_ones_takes_model(self):
        a = Tensor(np.full((1, 2, 2, 2), 3.0, np.float32))
        b = Tensor(np.zeros((1, 2, 2, 2), np.float32))
        out = blend(a, b, np.ones((1, 2, 2, 2), np.float32))
        np.testing.assert_array_equal(out.data, a.data)

    def test_all_zeros_takes_known(self):
        a = Tensor(np.full((1, 2, 2, 2), 3.0, np.float32))
        b = Tensor(np.full((1, 2, 2, 2), 7.0, np.float32))
        out = blend(a, b, np.zeros((1, 2, 2, 2), np.float32))
        np.testing.assert_array_equal(out.data, b.data)

    def test_elementwise(self):
        model_s = Tensor(np.array([[[[2.0, 3.0]]]], np.float32))
        known = Tensor(np.array([[[[5.0, 7.0]]]], np.float32))
        m = np.array([[[[1.0, 0.0]]]], np.float32)
        out = blend(model_s, known, m)
        np.testing.assert_array_equal(out.data, [[[[2.0, 7.0]]]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            blend(
                Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))),
                np.zeros((2, 2)),
            )


class TestPreservationLoss:
    def test_zero_when_equal(self, glyph):
        xt = Tensor(image_to_chw(glyph.image))
        loss, grad = preservation_loss(xt, glyph.image, np.zeros((64, 64)), IdentityCodec())
        assert loss == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_analytic_two_pixel_case(self):
        # pixels: left differs by +1 and is kept, right is masked out
        x_h = np.zeros((1, 2, 3), np.float32)
        x = np.zeros((1, 2, 3), np.float32)
        x[0, 0, :] = 1.0
        mask = np.array([[0, 1]], np.float32)
        xt = Tensor(image_to_chw(x))
        loss, grad = preservation_loss(xt, x_h, mask, IdentityCodec())
        assert loss == pytest.approx(-3.0)  # one kept pixel, three channels
        np.testing.assert_array_equal(grad[0, :, 0, 0], [-1.0, -1.0, -1.0])
        np.testing.assert_array_equal(grad[0, :, 0, 1], [0.0, 0.0, 0.0])

    def test_gradient_matches_finite_differences_identity(self, glyph):
        rng = np.random.default_rng(3)
        x = Tensor(image_to_chw(glyph.image) + 0.3)
        mask = (rng.random((64, 64)) < 0.4).astype(np.float32)
        loss, grad = preservation_loss(x, glyph.image, mask, IdentityCodec())
        keep = np.repeat((1 - mask)[None, None], 3, axis=1)
        expected = -keep * np.sign(x.data - image_to_chw(glyph.image))
        np.testing.assert_allclose(grad, expected, atol=1e-6)

    def test_gradient_through_decoder_matches_finite_differences(self):
        # the through-decoder path of the guidance gradient
        rng = np.random.default_rng(4)
        ae = TinyAutoencoder(latent_channels=2, base=4, rng=rng)
        ae.freeze()
        z0 = rng.normal(size=(1, 2, 4, 4)).astype(np.float32)
        with T.no_grad():
            xh = ae.decode(Tensor(z0)).data[0].transpose(1, 2, 0) + 0.3
        mask = (rng.random((16, 16)) < 0.3).astype(np.float32)

        _, grad = preservation_loss(Tensor(z0), xh, mask, ae)

        def f(z):
            with T.no_grad():
                _l, _ = 0, None
                dec = ae.decode(Tensor(z.astype(np.float32)))
                keep = np.repeat((1 - mask)[None, None], 3, axis=1)
                return -float(np.abs(keep * (dec.data - image_to_chw(xh))).sum(dtype=np.float64))

        h = 1e-3
        num = np.zeros_like(z0, dtype=np.float64)
        it = np.nditer(z0, flags=["multi_index"])
        while not it.finished:
            i = it.multi_index
            zp = z0.astype(np.float64).copy(); zp[i] += h
            zm = z0.astype(np.float64).copy(); zm[i] -= h
            num[i] = (f(zp) - f(zm)) / (2 * h)
            it.iternext()
        denom = max(np.abs(num).max(), 1e-8)
        assert np.abs(grad - num).max() / denom < 1e-3


class TestDraftSynthesis:
    def test_deterministic(self, model, sched1000):
        tokens = ("category:dress", "style:navy", "occasion:office")
        a = synthesize_draft(tokens, model, IdentityCodec(), sched1000, FAST)
        b = synthesize_draft(tokens, model, IdentityCodec(), sched1000, FAST)
        assert a.tobytes() == b.tobytes()
        assert a.shape == (64, 64, 3)

    def test_single_step_boundary(self, model, sched1000):
        tokens = ("category:coat", "style:olive", "occasion:sport")
        cfg = SamplerConfig(steps=1, cfg_scale=1.0, seed=3)
        img = synthesize_draft(tokens, model, IdentityCodec(), sched1000, cfg)
        assert img.shape == (64, 64, 3)
        assert np.isfinite(img).all()

    def test_batch_matches_singles(self, model, sched1000):
        lists = [
            ("category:dress", "style:navy", "occasion:office"),
            ("category:pants", "style:crimson", "occasion:party"),
        ]
        batch = synthesize_draft_batch(
            lists, model, IdentityCodec(), sched1000, FAST, seeds=[11, 22]
        )
        for i, (tokens, seed) in enumerate(zip(lists, [11, 22])):
            cfg = SamplerConfig(steps=10, cfg_scale=2.0, seed=seed)
            single = synthesize_draft(tokens, model, IdentityCodec(), sched1000, cfg)
            assert batch[i].tobytes() == single.tobytes()


def make_request(glyph, attribute="clothing_length", level="long", **kw):
    rules_mask = mask_for(attribute, glyph.keypoints)
    defaults = dict(
        draft=glyph.image, attribute=attribute, level=level, mask=rules_mask,
        rho=0.5, inner_steps=1, keypoints=glyph.keypoints, seed=9,
    )
    defaults.update(kw)
    return EditRequest(**defaults)


class TestEdit:
    def test_zero_mask_u0_returns_draft_exactly(self, model, sched1000, glyph):
        req = make_request(glyph, mask=np.zeros((64, 64), np.uint8), inner_steps=0)
        out = edit(req, model, IdentityCodec(), sched1000, glyph.spec.hierarchy(), FAST)
        np.testing.assert_allclose(out, glyph.image, atol=1e-5)

    def test_u0_nontarget_equals_draft(self, model, sched1000, glyph):
        req = make_request(glyph, inner_steps=0)
        out = edit(req, model, IdentityCodec(), sched1000, glyph.spec.hierarchy(), FAST)
        keep = req.mask == 0
        np.testing.assert_allclose(out[keep], glyph.image[keep], atol=1e-5)

    def test_deterministic(self, model, sched1000, glyph):
        req = make_request(glyph)
        a = edit(req, model, IdentityCodec(), sched1000, glyph.spec.hierarchy(), FAST)
        b = edit(req, model, IdentityCodec(), sched1000, glyph.spec.hierarchy(), FAST)
        assert a.tobytes() == b.tobytes()

    def test_batch_matches_single(self, model, sched1000, glyph):
        reqs = [make_request(glyph, seed=1), make_request(glyph, level="short", seed=2)]
        hs = [glyph.spec.hierarchy()] * 2
        batch = edit_batch(reqs, model, IdentityCodec(), sched1000, hs, FAST)
        for r, want in zip(reqs, batch):
            single = edit(r, model, IdentityCodec(), sched1000, hs[0], FAST)
            assert single.tobytes() == want.tobytes()

    def test_latent_mode_round_trip_bound(self, model, sched1000, glyph):
        # untrained latent model, zero mask: output equals the codec round-trip
        rng = np.random.default_rng(7)
        ae = TinyAutoencoder(latent_channels=4, base=8, rng=rng)
        ae.freeze()
        lat_model = DiffusionModel(
            D.build_vocabulary(embedding_dim=16),
            UNetConfig(**{**TINY_UNET.to_dict(), "in_channels": 4}),
            rng=np.random.default_rng(1),
        )
        lat_model.freeze()
        req = make_request(glyph, mask=np.zeros((64, 64), np.uint8), inner_steps=0)
        cfg = SamplerConfig(steps=10, cfg_scale=2.0, seed=5, space="latent", clip_x0=False)
        out = edit(req, lat_model, ae, sched1000, glyph.spec.hierarchy(), cfg)
        with T.no_grad():
            rt = ae.decode(ae.encode(Tensor(image_to_chw(glyph.image)))).data
        np.testing.assert_allclose(
            out, np.clip(rt[0].transpose(1, 2, 0), 0, 1), atol=1e-5
        )

    def test_rejects_bad_mask(self, glyph):
        with pytest.raises(ValueError, match="binary"):
            make_request(glyph, mask=np.full((64, 64), 0.5))
        with pytest.raises(ValueError, match="mask"):
            make_request(glyph, mask=np.zeros((32, 32)))

    def test_rejects_negative_rho(self, glyph):
        with pytest.raises(ValueError):
            make_request(glyph, rho=-1.0)


def test_guidance_first_order_descent(sched1000):
    # a single guided DDIM update lowers the non-target error vs the
    # unguided update, for small rho
    rng = np.random.default_rng(0)
    x_h = np.full((8, 8, 3), 0.5, np.float32)
    delta = 0.3 * np.sign(rng.normal(size=(1, 3, 8, 8))).astype(np.float32)
    mask = np.zeros((8, 8), np.float32)
    mask[:2, :2] = 1.0
    t, t_prev = 500, 490
    x_t = Tensor(image_to_chw(x_h) + delta)
    eps_hat = Tensor(np.zeros((1, 3, 8, 8), np.float32))

    def nontarget_err(y):
        keep = np.repeat((1 - mask)[None, None], 3, axis=1)
        return float(np.abs(keep * (y - image_to_chw(x_h))).sum(dtype=np.float64))

    unguided = S.ddim_step(x_t, eps_hat, t, t_prev, sched1000)
    _, g = preservation_loss(x_t, x_h, mask, IdentityCodec())
    for rho in (0.01, 0.05):
        guided = S.ddim_step(Tensor(x_t.data), Tensor(eps_hat.data - rho * g), t, t_prev, sched1000)
        assert nontarget_err(guided.data) < nontarget_err(unguided.data)


def test_edit_tokens_substitution(glyph):
    h = glyph.spec.hierarchy()
    tokens = edit_tokens(h, "sleeve_length", "short")
    assert tokens == h.high + ("clothing_length:knee", "sleeve_length:short")
    with pytest.raises(KeyError):
        edit_tokens(h, "waistline", "low")


def test_mask_to_latent_max_pools():
    m = np.zeros((8, 8), np.uint8)
    m[0, 3] = 1

    class FourX:
        downsample = 4

    out = mask_to_latent(m, FourX(), channels=2)
    assert out.shape == (1, 2, 2, 2)
    assert out[0, 0, 0, 0] == 1.0 and out[0, 0, 1, 1] == 0.0
