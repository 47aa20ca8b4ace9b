import numpy as np
import pytest
import torch

from retalk.dnet import (DNet, DNetConfig, MappingNet, WarpingNet, apply_flow,
                         coeff_window, dnet_loss, reenact_video)
from retalk.errors import BadWindowLength, LengthMismatch
from retalk.face_geometry import CoeffSequence, builtin_template
from retalk.layers import AdaIN
from retalk.media_io import VideoClip
from retalk.providers import FeaturePyramid

SMALL = DNetConfig(base_channels=8, max_channels=32, latent_dim=32, window=9, crop_size=64)


def _coeffs(n=20, seed=0):
    rng = np.random.default_rng(seed)
    return CoeffSequence(expression=rng.normal(size=(n, 64)), pose=rng.normal(size=(n, 6)))


def _wake_conditioning(model, seed=0):
    """Fresh AdaIN heads are zero, so a new model ignores its latent; give
    the heads small random weights to make the conditioning path active."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, AdaIN):
                m.head.weight.normal_(0.0, 0.05, generator=gen)
    return model


class TestMapping:
    def test_latent_shape(self):
        net = MappingNet(SMALL)
        z = net(torch.rand(2, 70, 9))
        assert z.shape == (2, 32)

    def test_rejects_wrong_window(self):
        net = MappingNet(SMALL)
        with pytest.raises(BadWindowLength):
            net(torch.rand(1, 70, 11))
        with pytest.raises(BadWindowLength):
            net(torch.rand(1, 64, 9))


class TestWarping:
    def test_fresh_network_is_identity_warp(self):
        net = WarpingNet(SMALL)
        src = torch.rand(1, 3, 64, 64)
        with torch.no_grad():
            flow, warped, skips = net(src, torch.randn(1, 32))
        assert torch.equal(flow, torch.zeros_like(flow))  # zero-init head
        assert torch.equal(warped, src)  # exact identity through the warp

    def test_flow_quarter_resolution(self):
        net = WarpingNet(SMALL)
        with torch.no_grad():
            flow, _, skips = net(torch.rand(1, 3, 64, 64), torch.randn(1, 32))
        assert flow.shape == (1, 2, 16, 16)
        assert [tuple(s.shape[2:]) for s in skips] == [(32, 32), (16, 16), (8, 8)]

    def test_apply_flow_shifts_image(self):
        src = torch.zeros(1, 3, 64, 64)
        src[:, :, :, 32:] = 1.0
        flow_q = torch.zeros(1, 2, 16, 16)
        flow_q[:, 0] = 4.0  # read 4px to the right -> edge moves left
        out = apply_flow(src, flow_q)
        assert torch.allclose(out[0, 0, 10, 28:31], torch.ones(3), atol=1e-5)


class TestDNetForward:
    def test_output_shapes_and_range(self):
        model = DNet(SMALL)
        out = model(torch.rand(2, 3, 64, 64), torch.rand(2, 70, 9))
        assert out.edited.shape == (2, 3, 64, 64)
        assert out.warped.shape == (2, 3, 64, 64)
        assert out.flow.shape == (2, 2, 16, 16)
        assert 0.0 <= out.edited.min() and out.edited.max() <= 1.0

    def test_window_drives_output(self):
        model = _wake_conditioning(DNet(SMALL)).eval()
        src = torch.rand(1, 3, 64, 64)
        with torch.no_grad():
            a = model(src, torch.zeros(1, 70, 9)).edited
            b = model(src, torch.ones(1, 70, 9) * 3).edited
        assert not torch.equal(a, b)


class TestLoss:
    def test_loss_terms_and_weights(self):
        model = DNet(SMALL)
        fp = FeaturePyramid(seed=0)
        out = model(torch.rand(1, 3, 64, 64), torch.rand(1, 70, 9))
        target = torch.rand(1, 3, 64, 64)
        losses = dnet_loss(out, target, fp, lambda_c=2.0, lambda_s=10.0)
        assert set(losses) == {"l_dw", "l_de", "content", "style"}
        expected = 2.0 * losses["content"] + 10.0 * losses["style"]
        assert torch.allclose(losses["l_de"], expected, atol=1e-6)
        assert float(losses["l_dw"].detach()) >= 0.0

    def test_warp_loss_zero_when_warped_equals_target(self):
        fp = FeaturePyramid(seed=0)
        model = DNet(SMALL)  # fresh warp is the identity
        src = torch.rand(1, 3, 64, 64)
        with torch.no_grad():
            out = model(src, torch.rand(1, 70, 9))
            losses = dnet_loss(out, src, fp)
        assert float(losses["l_dw"]) == 0.0


class TestCoeffWindow:
    def test_center_slice(self):
        coeffs = _coeffs(30)
        win = coeff_window(coeffs, center=15, length=9)
        assert win.shape == (70, 9)
        np.testing.assert_allclose(win[:64, 4], coeffs.expression[15], atol=1e-6)
        np.testing.assert_allclose(win[64:, 0], coeffs.pose[11], atol=1e-6)

    def test_edges_clamped(self):
        coeffs = _coeffs(10)
        start = coeff_window(coeffs, center=0, length=9)
        np.testing.assert_allclose(start[:64, 0], coeffs.expression[0], atol=1e-6)
        np.testing.assert_allclose(start[:64, 3], coeffs.expression[0], atol=1e-6)
        end = coeff_window(coeffs, center=9, length=9)
        np.testing.assert_allclose(end[:64, -1], coeffs.expression[9], atol=1e-6)
        np.testing.assert_allclose(end[:64, 8], coeffs.expression[9], atol=1e-6)


class TestReenact:
    def _clip(self, n=6, size=64):
        rng = np.random.default_rng(3)
        frames = rng.integers(0, 256, (n, size, size, 3), dtype=np.uint8)
        return VideoClip(frames=frames, fps=25.0)

    def test_one_shot_uses_frame_zero(self):
        model = DNet(SMALL)
        clip = self._clip()
        out = reenact_video(model, clip, _coeffs(6), mode="one_shot")
        assert out.meta["mode"] == "one_shot"
        assert out.meta["reference_indices"] == [0] * 6

    def test_video_to_video_uses_own_frames(self):
        model = DNet(SMALL)
        clip = self._clip()
        out = reenact_video(model, clip, _coeffs(6))
        assert out.meta["reference_indices"] == list(range(6))
        assert out.frames.shape == clip.frames.shape

    def test_template_changes_output(self):
        model = _wake_conditioning(DNet(SMALL))
        clip = self._clip()
        coeffs = _coeffs(6)
        plain = reenact_video(model, clip, coeffs)
        templ = reenact_video(model, clip, coeffs, template=builtin_template("neutral"))
        assert not np.array_equal(plain.frames, templ.frames)

    def test_length_mismatch(self):
        model = DNet(SMALL)
        with pytest.raises(LengthMismatch):
            reenact_video(model, self._clip(6), _coeffs(5))

    def test_unknown_mode(self):
        model = DNet(SMALL)
        with pytest.raises(ValueError):
            reenact_video(model, self._clip(6), _coeffs(6), mode="three_shot")
