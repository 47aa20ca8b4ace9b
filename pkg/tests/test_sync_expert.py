import numpy as np
import pytest
import torch

from retalk.errors import BadShape, ClipTooShort, ZeroVector
from retalk.media_io import AudioTrack, MelSpectrogram, compute_mel
from retalk.sync_expert import (MAX_OFFSET, SYNC_EPS, SyncNet, lse_metrics,
                                sync_loss, sync_probability, video_window)


class TestProbability:
    def test_identical_vectors_give_one(self):
        for dtype in (torch.float32, torch.float64):
            v = torch.tensor([[0.3, -0.2, 0.8]], dtype=dtype)
            assert float(sync_probability(v, v)) == 1.0

    def test_orthogonal_vectors_give_eps(self):
        v = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        a = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
        assert float(sync_probability(v, a)) == SYNC_EPS
        # float32 path clamps to the same constant in working precision
        p32 = sync_probability(v.float(), a.float())
        assert torch.equal(p32, torch.full_like(p32, SYNC_EPS))

    def test_opposite_vectors_clamped_to_eps(self):
        v = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        assert float(sync_probability(v, -v)) == SYNC_EPS

    def test_scale_invariant(self):
        v = torch.tensor([[0.5, 0.5, 0.1]])
        a = torch.tensor([[0.2, 0.9, -0.3]])
        assert torch.allclose(sync_probability(v, a), sync_probability(3 * v, 0.1 * a), atol=1e-6)

    def test_batched_and_1d(self):
        v = torch.eye(3)
        p = sync_probability(v, v)
        assert p.shape == (3,)
        assert float(sync_probability(v[0], v[0])) == 1.0

    def test_zero_vectors_rejected(self):
        z = torch.zeros(1, 4)
        with pytest.raises(ZeroVector):
            sync_probability(z, z)

    def test_loss_zero_iff_aligned(self):
        v = torch.tensor([[0.6, 0.8]])
        assert float(sync_loss(v, v)) == 0.0
        a = torch.tensor([[0.8, 0.6]])
        expected = -np.log(float(sync_probability(v, a)))
        assert abs(float(sync_loss(v, a)) - expected) < 1e-6


class TestVideoWindow:
    def test_shape_and_lower_half(self):
        crops = np.zeros((10, 96, 96, 3), np.uint8)
        crops[3, 48:, :, 0] = 255  # mark frame 3's lower half, channel 0
        win = video_window(crops, 3)
        assert win.shape == (15, 48, 96)
        assert win.dtype == np.float32
        assert win[0].max() == 1.0  # first stacked channel is frame 3, ch 0
        assert win[3].max() == 0.0  # frame 4 untouched

    def test_upper_half_excluded(self):
        crops = np.zeros((6, 96, 96, 3), np.uint8)
        crops[:, :48] = 255  # only the upper half lights up
        assert video_window(crops, 0).max() == 0.0

    def test_out_of_range(self):
        crops = np.zeros((6, 96, 96, 3), np.uint8)
        with pytest.raises(BadShape):
            video_window(crops, 2)  # would need frames 2..6
        with pytest.raises(BadShape):
            video_window(crops, -1)


class TestSyncNet:
    def test_embedding_shapes_and_norms(self):
        net = SyncNet(base=8, embed_dim=64).eval()
        with torch.no_grad():
            v = net.embed_video(torch.rand(2, 15, 48, 96))
            a = net.embed_audio(torch.rand(2, 1, 80, 16))
        assert v.shape == (2, 64) and a.shape == (2, 64)
        np.testing.assert_allclose(v.norm(dim=1).numpy(), 1.0, atol=1e-5)
        np.testing.assert_allclose(a.norm(dim=1).numpy(), 1.0, atol=1e-5)

    def test_bad_shapes(self):
        net = SyncNet(base=8)
        with pytest.raises(BadShape):
            net.embed_video(torch.rand(1, 3, 48, 96))
        with pytest.raises(BadShape):
            net.embed_audio(torch.rand(1, 1, 40, 16))


class _RampSync:
    """Hand-built embedder: angle on a circle proportional to window index.

    Video windows are uniform-brightness frames b(t) = t / (T-1); the stub
    inverts that to the window position.  Audio windows are mel columns with
    value = column index; the stub inverts the window-start formula.  The
    embedding distance is then monotone in |video pos - audio pos|, with its
    minimum exactly at offset zero.
    """

    K = 0.05

    def __init__(self, n_frames):
        self.n = n_frames

    def eval(self):
        return self

    def _circle(self, theta):
        e = torch.zeros(len(theta), 8)
        e[:, 0] = torch.cos(self.K * theta)
        e[:, 1] = torch.sin(self.K * theta)
        return e

    def embed_video(self, windows):
        pos = windows.mean(dim=(1, 2, 3)) * (self.n - 1) - 2.0
        return self._circle(pos)

    def embed_audio(self, mels):
        pos = (mels.mean(dim=(1, 2, 3)) - 7.5) / 3.2
        return self._circle(pos)


class _ConstantSync:
    def eval(self):
        return self

    def embed_video(self, windows):
        e = torch.zeros(len(windows), 8)
        e[:, 0] = 1.0
        return e

    embed_audio = embed_video


def _ramp_clip(n_frames):
    b = (np.arange(n_frames) / (n_frames - 1) * 255).round().astype(np.uint8)
    crops = np.repeat(b[:, None, None, None], 96, 1).repeat(96, 2).repeat(3, 3)
    n_mel = int(3.2 * n_frames) + 32
    mel = MelSpectrogram(values=np.tile(np.arange(n_mel, dtype=np.float32), (80, 1)))
    return crops, mel


class TestLseMetrics:
    def test_aligned_ramp_minimizes_at_offset_zero(self):
        crops, mel = _ramp_clip(50)
        report = lse_metrics(crops, mel, _RampSync(50))
        assert report.lse_d >= 0.0
        assert report.lse_d < 0.02  # aligned distance is near the curve's minimum
        assert report.lse_c > 0.0
        assert int(np.argmin(report.offset_curve)) == MAX_OFFSET  # center = offset 0
        assert report.offset_curve.shape == (2 * MAX_OFFSET + 1,)

    def test_shifted_audio_scores_worse(self):
        crops, mel = _ramp_clip(60)
        aligned = lse_metrics(crops, mel, _RampSync(60)).lse_d
        shifted = MelSpectrogram(values=np.roll(mel.values, 32, axis=1))
        off = lse_metrics(crops, shifted, _RampSync(60)).lse_d
        assert off > aligned

    def test_degenerate_embedder_gives_zero_confidence(self):
        crops, mel = _ramp_clip(50)
        report = lse_metrics(crops, mel, _ConstantSync())
        assert report.lse_c == 0.0
        assert report.lse_d == 0.0  # all distances are identically zero

    def test_clip_too_short(self):
        crops, mel = _ramp_clip(30)
        with pytest.raises(ClipTooShort):
            lse_metrics(crops, mel, _ConstantSync())

    def test_window_count(self):
        crops, mel = _ramp_clip(40)
        report = lse_metrics(crops, mel, _ConstantSync())
        # positions 15 .. 40-5-15 inclusive
        assert report.windows == 40 - 5 - 2 * MAX_OFFSET + 1

    def test_runs_with_real_network(self):
        rng = np.random.default_rng(0)
        crops = rng.integers(0, 256, (40, 96, 96, 3), dtype=np.uint8)
        audio = AudioTrack(samples=rng.normal(0, 0.1, 40 * 640).astype(np.float32))
        mel = compute_mel(audio)
        report = lse_metrics(crops, mel, SyncNet(base=8, embed_dim=64).eval())
        assert np.isfinite(report.lse_d) and np.isfinite(report.lse_c)
        assert report.lse_c >= 0.0
