import numpy as np
import pytest
import torch

from retalk.config import DnetSection, EnetSection, LnetSection, SyncSection
from retalk.errors import EmptyDataset
from retalk.lnet import LNet, LNetConfig
from retalk.providers import BicubicUpscale, FeaturePyramid, RandomProjectionIdentity
from retalk.training import (init_dnet_state, init_enet_state, init_lnet_state,
                             init_sync_state, lnet_infer_clip, load_stage,
                             prepare_clip, prepare_dataset,
                             prepare_enhance_batch, save_stage, step_rng,
                             sync_accuracy, train_dnet, train_enet, train_lnet,
                             train_syncnet)

SYNC_T = SyncSection(base_channels=8, lr=1e-3, iterations=4, batch_size=2)
DNET_T = DnetSection(base_channels=8, max_channels=16, latent_dim=32, window=9,
                     lr=1e-3, phase1_iterations=2, phase2_iterations=2)
LNET_T = LnetSection(enc_channels=(8, 16), dec_channels=(16, 8, 8),
                     ffc_blocks_per_stage=1, attention_blocks=1, lr=1e-3,
                     iterations=2, batch_size=1)
ENET_T = EnetSection(up_channels=(8, 8), id_channels=(8, 8, 8, 8, 8, 8),
                     lr=1e-3, iterations=2, jpeg_quality_min=50, jpeg_quality_max=60)

TINY_LNET = LNetConfig(enc_channels=(8, 16), dec_channels=(16, 8, 8),
                       ffc_blocks_per_stage=1, fusion_dim=32, audio_dim=32,
                       attention_blocks=1)


@pytest.fixture(scope="module")
def features():
    return FeaturePyramid(seed=0)


class TestStepRng:
    def test_reproducible(self):
        a = step_rng(7, "lnet", 3).integers(0, 1 << 30, 8)
        b = step_rng(7, "lnet", 3).integers(0, 1 << 30, 8)
        assert np.array_equal(a, b)

    def test_distinct_streams(self):
        base = step_rng(7, "lnet", 3).integers(0, 1 << 30, 8)
        assert not np.array_equal(base, step_rng(7, "lnet", 4).integers(0, 1 << 30, 8))
        assert not np.array_equal(base, step_rng(7, "sync", 3).integers(0, 1 << 30, 8))
        assert not np.array_equal(base, step_rng(8, "lnet", 3).integers(0, 1 << 30, 8))

    def test_order_independent(self):
        late = step_rng(1, "enet", 10).integers(0, 1 << 30, 4)
        step_rng(1, "enet", 0).integers(0, 1 << 30, 4)
        assert np.array_equal(late, step_rng(1, "enet", 10).integers(0, 1 << 30, 4))


class TestPreparation:
    def test_prepared_clip_shapes(self, prepared):
        t = prepared.n_frames
        assert prepared.crops96.shape == (t, 96, 96, 3)
        assert prepared.crops96.dtype == np.uint8
        assert prepared.mel_windows.shape == (t - 4, 80, 16)
        assert prepared.mel_windows.dtype == np.float32
        assert len(prepared.landmarks.points) == t
        assert len(prepared.coeffs) == t

    def test_crop_and_transform_consistent(self, prepared):
        crop = prepared.crop(0, 256)
        assert crop.shape == (256, 256, 3)
        tf = prepared.transform(0, 256)
        tf96 = prepared.transform(0, 96)
        np.testing.assert_allclose(tf96.matrix, tf.matrix * 96 / 256, atol=1e-9)

    def test_empty_dataset(self):
        with pytest.raises(EmptyDataset):
            prepare_dataset([])


class TestSyncTraining:
    def test_steps_and_history(self, prepared):
        state = train_syncnet([prepared], SYNC_T, seed=5)
        assert state["step"] == 4
        assert len(state["history"]) == 4
        assert all(np.isfinite(v) for v in state["history"])

    def test_zero_iterations_noop(self, prepared):
        state = init_sync_state(SYNC_T, seed=5)
        before = {k: v.clone() for k, v in state["model"].state_dict().items()}
        out = train_syncnet([prepared], SYNC_T, seed=5, state=state, iterations=0)
        assert out["step"] == 0 and out["history"] == []
        for k, v in out["model"].state_dict().items():
            assert torch.equal(v, before[k])

    def test_empty_clips(self):
        with pytest.raises(EmptyDataset):
            train_syncnet([], SYNC_T, seed=0)

    def test_accuracy_in_range(self, prepared):
        state = init_sync_state(SYNC_T, seed=5)
        acc = sync_accuracy(state["model"], [prepared], n_pairs=20)
        assert 0.0 <= acc <= 1.0


class TestResume:
    def test_sync_resume_bitwise(self, prepared, tmp_path):
        straight = train_syncnet([prepared], SYNC_T, seed=5, iterations=4)

        half = train_syncnet([prepared], SYNC_T, seed=5, iterations=2)
        path = save_stage(half, "sync", tmp_path / "sync.ckpt", "h")
        resumed = init_sync_state(SYNC_T, seed=5)
        load_stage(resumed, "sync", path)
        assert resumed["step"] == 2
        resumed = train_syncnet([prepared], SYNC_T, seed=5, state=resumed, iterations=4)

        for k, v in straight["model"].state_dict().items():
            r = resumed["model"].state_dict()[k]
            assert (v.float() - r.float()).abs().max() <= 1e-4, k
        assert resumed["history"] == straight["history"]


class TestDnetTraining:
    def test_phase_routing_and_param_freeze(self, prepared, features):
        state = init_dnet_state(DNET_T, seed=3)
        edit_before = {k: v.clone() for k, v in state["model"].editing.state_dict().items()}
        warp_before = {k: v.clone() for k, v in state["model"].warping.state_dict().items()}

        state = train_dnet([prepared], DNET_T, seed=3, features=features,
                           state=state, iterations=2)
        assert state["history"]["phase"] == [1, 1]
        # warm-up touches only mapping+warping
        for k, v in state["model"].editing.state_dict().items():
            assert torch.equal(v, edit_before[k]), k
        assert any(not torch.equal(v, warp_before[k])
                   for k, v in state["model"].warping.state_dict().items())
        assert all(v == 0.0 for v in state["history"]["l_de"])

        state = train_dnet([prepared], DNET_T, seed=3, features=features, state=state)
        assert state["history"]["phase"] == [1, 1, 2, 2]
        assert any(not torch.equal(v, edit_before[k])
                   for k, v in state["model"].editing.state_dict().items())
        assert all(v > 0.0 for v in state["history"]["l_de"][2:])

    def test_empty_clips(self, features):
        with pytest.raises(EmptyDataset):
            train_dnet([], DNET_T, seed=0, features=features)


class TestLnetTraining:
    def test_history_and_steps(self, prepared, features):
        state = train_lnet([prepared], LNET_T, seed=2, features=features)
        assert state["step"] == 2
        assert len(state["history"]["total"]) == 2
        assert state["history"]["sync"] == [0.0, 0.0]  # no sync model attached

    def test_sync_model_frozen_and_logged(self, prepared, features):
        sync_state = init_sync_state(SYNC_T, seed=1)
        sync = sync_state["model"]
        before = {k: v.clone() for k, v in sync.state_dict().items()}
        state = train_lnet([prepared], LNET_T, seed=2, features=features,
                           sync_model=sync)
        assert all(v != 0.0 for v in state["history"]["sync"])
        for k, v in sync.state_dict().items():
            if "num_batches_tracked" in k or "running_" in k:
                continue  # eval mode: not updated anyway
            assert torch.equal(v, before[k]), k
        assert all(not p.requires_grad for p in sync.parameters())

    def test_empty_clips(self, features):
        with pytest.raises(EmptyDataset):
            train_lnet([], LNET_T, seed=0, features=features)


class TestLnetInference:
    def test_covers_whole_clip_with_tail_window(self, prepared):
        model = LNet(TINY_LNET)
        crops = prepared.crops96[:12]
        out = lnet_infer_clip(model, crops, prepared.mel_windows)
        assert out.shape == crops.shape and out.dtype == np.uint8
        # every frame was re-synthesized (untrained net outputs differ)
        assert all(not np.array_equal(out[i], crops[i]) for i in range(12))

    def test_deterministic(self, prepared):
        model = LNet(TINY_LNET)
        a = lnet_infer_clip(model, prepared.crops96[:10], prepared.mel_windows)
        b = lnet_infer_clip(model, prepared.crops96[:10], prepared.mel_windows)
        assert np.array_equal(a, b)

    def test_mel_start_clamped_for_tail(self, prepared):
        model = LNet(TINY_LNET)
        crops = prepared.crops96[:12]
        short_mel = prepared.mel_windows[:8]  # tail start 7 > last mel start 3
        out = lnet_infer_clip(model, crops, short_mel)
        assert out.shape == crops.shape


class TestEnetTraining:
    def test_prepare_enhance_batch_wiring(self, prepared):
        lnet = LNet(TINY_LNET)
        rng = np.random.default_rng(0)
        batch = prepare_enhance_batch(prepared, rng, lnet, BicubicUpscale(scale=4),
                                      quality_range=(90, 90))
        assert batch.source == "lnet-degraded"
        assert batch.i_gt.shape == (1, 3, 384, 384)
        assert batch.id_ref.shape == (1, 3, 384, 384)
        assert batch.o_lr.shape == (1, 3, 96, 96)
        assert not batch.o_lr.requires_grad  # frozen lipsync output
        assert batch.o_hr is None

    def test_two_steps(self, prepared, features):
        lnet = LNet(TINY_LNET)
        state = train_enet([prepared], ENET_T, seed=4, features=features,
                           identity_provider=RandomProjectionIdentity(seed=9),
                           lnet_model=lnet, restoration=BicubicUpscale(scale=4))
        assert state["step"] == 2
        assert len(state["history"]["gen"]) == 2
        assert len(state["history"]["disc"]) == 2
        assert all(not p.requires_grad for p in lnet.parameters())

    def test_empty_clips(self, features):
        with pytest.raises(EmptyDataset):
            train_enet([], ENET_T, seed=0, features=features,
                       identity_provider=RandomProjectionIdentity(),
                       lnet_model=LNet(TINY_LNET), restoration=BicubicUpscale(scale=4))


class TestStagePersistence:
    def test_lnet_save_load(self, prepared, features, tmp_path):
        state = train_lnet([prepared], LNET_T, seed=2, features=features)
        path = save_stage(state, "lnet", tmp_path / "lnet.ckpt", "abc")
        fresh = init_lnet_state(LNET_T, seed=99)
        load_stage(fresh, "lnet", path)
        assert fresh["step"] == 2
        assert fresh["history"]["total"] == state["history"]["total"]
        for k, v in state["model"].state_dict().items():
            assert torch.equal(v, fresh["model"].state_dict()[k]), k
