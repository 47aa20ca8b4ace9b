import numpy as np
import pytest
import torch
import torch.nn.functional as F

from retalk.enet import (DegradationConfig, ENet, ENetConfig, EnhanceBatch,
                         IdentityEncoder, _CHROMA_TABLE, _LUMA_TABLE,
                         _scaled_table, build_enhanced_dataset, degrade,
                         enet_objective, identity_loss, jpeg_compress,
                         soft_round)
from retalk.errors import BadQuality, BadShape
from retalk.layers import PatchDiscriminator
from retalk.providers import (BicubicUpscale, FeaturePyramid,
                              IdentityRestoration, RandomProjectionIdentity)

TINY = ENetConfig(id_channels=(8, 16, 16, 16, 16, 16), up_channels=(8, 8), id_dim=32)


class TestJpeg:
    def test_quality_100_tables_all_ones(self):
        for table in (_LUMA_TABLE, _CHROMA_TABLE):
            assert torch.equal(_scaled_table(table, 100), torch.ones(8, 8))

    def test_tables_monotone_in_quality(self):
        coarse = _scaled_table(_LUMA_TABLE, 30)
        fine = _scaled_table(_LUMA_TABLE, 90)
        assert (coarse >= fine).all()
        assert coarse.sum() > fine.sum()
        assert coarse.min() >= 1.0 and coarse.max() <= 255.0

    def test_soft_round_near_integers(self):
        x = torch.tensor([0.0, 0.4, 0.5, 1.3, -2.7])
        r = soft_round(x)
        assert (r - torch.round(x)).abs().max() <= 0.125 + 1e-6
        # smooth: gradient exists and is 3(x-round(x))^2
        x = torch.tensor([0.3], requires_grad=True)
        soft_round(x).backward()
        assert abs(float(x.grad) - 3 * 0.3 ** 2) < 1e-6

    def test_high_quality_nearly_lossless(self):
        x = torch.rand(1, 3, 32, 32)
        out = jpeg_compress(x, 100)
        assert (out - x).abs().max() < 0.15
        assert (out - x).abs().mean() < 0.02

    def test_low_quality_destroys_detail(self):
        x = torch.rand(1, 3, 32, 32)
        err_hi = (jpeg_compress(x, 95) - x).abs().mean()
        err_lo = (jpeg_compress(x, 10) - x).abs().mean()
        assert err_lo > err_hi

    def test_differentiable(self):
        x = torch.rand(1, 3, 16, 16, requires_grad=True)
        jpeg_compress(x, 50).sum().backward()
        assert x.grad is not None and x.grad.abs().sum() > 0

    def test_bad_quality(self):
        x = torch.rand(1, 3, 16, 16)
        for q in (5, 101, 0):
            with pytest.raises(BadQuality):
                jpeg_compress(x, q)

    def test_bad_shape(self):
        with pytest.raises(BadShape):
            jpeg_compress(torch.rand(1, 1, 16, 16), 80)
        with pytest.raises(BadShape):
            jpeg_compress(torch.rand(1, 3, 20, 16), 80)

    def test_degrade_pipeline(self):
        x = torch.rand(2, 3, 96, 96)
        out = degrade(x, DegradationConfig(jpeg_quality=50, down_factor=4))
        assert out.shape == (2, 3, 24, 24)


class TestIdentityEncoder:
    def test_embedding_shape(self):
        enc = IdentityEncoder(TINY)
        assert enc(torch.rand(2, 3, 384, 384)).shape == (2, 32)

    def test_bad_shape(self):
        enc = IdentityEncoder(TINY)
        with pytest.raises(BadShape):
            enc(torch.rand(1, 3, 256, 256))


class TestENet:
    def test_untrained_equals_bilinear(self):
        model = ENet(TINY).eval()
        low = torch.rand(1, 3, 96, 96)
        with torch.no_grad():
            out = model.enhance(low, torch.randn(1, 32))
        base = torch.clamp(
            F.interpolate(low, scale_factor=4, mode="bilinear", align_corners=False), 0, 1)
        assert torch.equal(out, base)

    def test_output_shape_and_range(self):
        model = ENet(TINY)
        out = model(torch.rand(2, 3, 96, 96), torch.randn(2, 32))
        assert out.shape == (2, 3, 384, 384)
        assert 0.0 <= out.min() and out.max() <= 1.0

    def test_trained_weights_change_output(self):
        model = ENet(TINY).eval()
        with torch.no_grad():
            model.rgb2.conv.weight.normal_(0, 0.1)
        low = torch.rand(1, 3, 96, 96)
        with torch.no_grad():
            out = model.enhance(low, torch.randn(1, 32))
        base = torch.clamp(
            F.interpolate(low, scale_factor=4, mode="bilinear", align_corners=False), 0, 1)
        assert not torch.equal(out, base)

    def test_bad_input_size(self):
        with pytest.raises(BadShape):
            ENet(TINY).enhance(torch.rand(1, 3, 48, 48), torch.randn(1, 32))


class TestObjective:
    def _batch(self, seed=0):
        gen = torch.Generator().manual_seed(seed)
        return EnhanceBatch(
            i_gt=torch.rand(1, 3, 384, 384, generator=gen),
            id_ref=torch.rand(1, 3, 384, 384, generator=gen),
            o_lr=torch.rand(1, 3, 96, 96, generator=gen),
            o_hr=torch.rand(1, 3, 384, 384, generator=gen),
        )

    def test_identity_loss_zero_for_same_image(self):
        emb = RandomProjectionIdentity(seed=0)
        img = torch.rand(2, 3, 128, 128)
        assert float(identity_loss(img, img.clone(), emb)) == 0.0
        other = torch.rand(2, 3, 128, 128)
        assert float(identity_loss(img, other, emb)) > 0.0

    def test_weights_combine(self):
        fp = FeaturePyramid(seed=0)
        emb = RandomProjectionIdentity(seed=1)
        disc = PatchDiscriminator(base=8, layers=3)
        batch = self._batch()
        with torch.no_grad():
            terms, dl = enet_objective(batch, fp, emb, disc, lambda_l1=0.2,
                                       lambda_p=1.0, lambda_adv=2.0, lambda_id=0.4)
        assert set(terms) == {"l1", "perceptual", "identity", "adv", "total"}
        expected = (0.2 * terms["l1"] + 1.0 * terms["perceptual"]
                    + 2.0 * terms["adv"] + 0.4 * terms["identity"])
        assert torch.allclose(terms["total"], expected, atol=1e-6)
        assert float(dl) > 0.0

    def test_adv_disabled(self):
        fp = FeaturePyramid(seed=0)
        emb = RandomProjectionIdentity(seed=1)
        disc = PatchDiscriminator(base=8, layers=3)
        with torch.no_grad():
            terms, dl = enet_objective(self._batch(), fp, emb, disc, lambda_adv=0.0)
        assert float(terms["adv"]) == 0.0
        assert float(dl) > 0.0  # discriminator still trains

    def test_requires_generator_output(self):
        batch = self._batch()
        batch.o_hr = None
        with pytest.raises(BadShape):
            enet_objective(batch, FeaturePyramid(seed=0),
                           RandomProjectionIdentity(), PatchDiscriminator(base=8))

    def test_batch_source_label(self):
        assert self._batch().source == "lnet-degraded"


class TestEnhancedDataset:
    def test_bicubic_dataset_manifest(self):
        crops = np.random.default_rng(0).integers(0, 256, (3, 96, 96, 3), dtype=np.uint8)
        frames, manifest = build_enhanced_dataset(crops, BicubicUpscale(scale=4))
        assert frames.shape == (3, 384, 384, 3)
        assert manifest["provider"] == "bicubic-x4"
        assert len(manifest["samples"]) == 3
        assert all(len(s["sha256"]) == 64 for s in manifest["samples"])

    def test_manifest_hash_reproducible(self):
        crops = np.random.default_rng(1).integers(0, 256, (2, 96, 96, 3), dtype=np.uint8)
        _, m1 = build_enhanced_dataset(crops, BicubicUpscale(scale=4))
        _, m2 = build_enhanced_dataset(crops, BicubicUpscale(scale=4))
        assert m1["hash"] == m2["hash"]
        _, m3 = build_enhanced_dataset(crops[::-1].copy(), BicubicUpscale(scale=4))
        assert m3["hash"] != m1["hash"]

    def test_identity_provider_resized(self):
        crops = np.random.default_rng(2).integers(0, 256, (2, 96, 96, 3), dtype=np.uint8)
        frames, manifest = build_enhanced_dataset(crops, IdentityRestoration())
        assert frames.shape == (2, 384, 384, 3)
        assert manifest["provider"] == "identity"

    def test_empty_input(self):
        frames, manifest = build_enhanced_dataset(
            np.zeros((0, 96, 96, 3), np.uint8), IdentityRestoration())
        assert frames.shape == (0, 384, 384, 3)
        assert manifest["samples"] == []
