import logging

import numpy as np
import pytest

from retalk.compositing import (blend, build_pyramid, enhance_teeth, parse_face,
                                paste_back, reconstruct)
from retalk.errors import OutOfRange, ShapeMismatch, TooManyLevels
from retalk.face_geometry import AlignmentTransform
from retalk.providers import GeometryParser, IdentityRestoration, SharpenRestoration
from retalk.toydata import sample_landmarks


def _image(shape=(64, 64, 3), seed=0):
    return np.random.default_rng(seed).integers(0, 256, shape, dtype=np.uint8)


class TestPyramid:
    def test_reconstruct_identity(self):
        img = _image()
        pyr = build_pyramid(img, 4)
        assert np.abs(reconstruct(pyr) - img).max() < 1e-4

    def test_reconstruct_identity_odd_sizes(self):
        img = _image((37, 53, 3), seed=1)
        pyr = build_pyramid(img, 3)
        assert np.abs(reconstruct(pyr) - img).max() < 1e-4

    def test_level_shapes_halve_with_ceil(self):
        pyr = build_pyramid(np.zeros((37, 53)), 2)
        assert [g.shape for g in pyr.gaussian] == [(37, 53), (19, 27), (10, 14)]
        assert len(pyr.laplacian) == 2

    def test_too_many_levels(self):
        with pytest.raises(TooManyLevels):
            build_pyramid(np.zeros((8, 8)), 4)
        with pytest.raises(TooManyLevels):
            build_pyramid(np.zeros((64, 64)), 0)


class TestBlend:
    def test_mask_one_returns_source(self):
        src, tgt = _image(seed=1), _image(seed=2)
        out = blend(src, tgt, np.ones(src.shape[:2]))
        assert np.abs(out.astype(np.int64) - src).max() <= 1  # uint8 rounding

    def test_mask_zero_returns_target(self):
        src, tgt = _image(seed=1), _image(seed=2)
        out = blend(src, tgt, np.zeros(src.shape[:2]))
        assert np.abs(out.astype(np.int64) - tgt).max() <= 1

    def test_float_mask_identities_tight(self):
        src = np.random.default_rng(1).random((64, 64, 3))
        tgt = np.random.default_rng(2).random((64, 64, 3))
        assert np.abs(blend(src, tgt, np.ones((64, 64))) - src).max() < 1e-4
        assert np.abs(blend(src, tgt, np.zeros((64, 64))) - tgt).max() < 1e-4

    def test_mixed_mask_transitions(self):
        src = np.zeros((64, 64, 3))
        tgt = np.full((64, 64, 3), 200.0)
        mask = np.zeros((64, 64))
        mask[:, :32] = 1.0
        out = blend(src, tgt, mask)
        assert out[:, :8].mean() < 30
        assert out[:, -8:].mean() > 170

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            blend(_image(), _image((32, 32, 3)), np.ones((64, 64)))
        with pytest.raises(ShapeMismatch):
            blend(_image(), _image(), np.ones((32, 32)))


class TestParseFace:
    def test_default_parser_canonical(self):
        mask, region = parse_face(np.zeros((128, 128, 3), np.uint8))
        assert mask.shape == (128, 128)
        assert mask[96].max() > 0.9  # strong mask through the lower face
        assert mask[20].max() < 0.05
        x0, y0, x1, y1 = region
        assert y0 > 64

    def test_landmark_driven(self, toy_sample):
        track = sample_landmarks(toy_sample)
        mask, _ = parse_face(toy_sample.clip.frames[0], track.points[0])
        my = track.points[0, 48:68, 1].mean()
        assert mask[int(my)].max() > 0.9

    def test_disagreeing_parser_logged_not_fatal(self, caplog):
        class TopParser:
            provider_id = "top-strip"

            def parse(self, frame, landmarks=None):
                m = np.zeros(frame.shape[:2])
                m[: frame.shape[0] // 8] = 1.0
                return m, (10, 10, 20, 20)

        with caplog.at_level(logging.WARNING, logger="retalk.compositing"):
            mask, region = parse_face(np.zeros((128, 128, 3), np.uint8), parser=TopParser())
        assert any("disagrees" in r.message for r in caplog.records)
        assert mask[0].max() == 1.0  # the custom parser's output is still used

    def test_custom_geometry_parser_not_checked(self, caplog):
        with caplog.at_level(logging.WARNING, logger="retalk.compositing"):
            parse_face(np.zeros((128, 128, 3), np.uint8), parser=GeometryParser())
        assert not caplog.records


class TestTeeth:
    def test_identity_restoration_is_noop(self):
        frame = _image(seed=3)
        out = enhance_teeth(frame, (10, 20, 40, 50), IdentityRestoration())
        assert np.array_equal(out, frame)

    def test_border_untouched_inside_region(self):
        frame = _image(seed=4)
        out = enhance_teeth(frame, (10, 20, 40, 50), SharpenRestoration(amount=3.0))
        # feather is exactly zero on the region's edge rows/cols
        assert np.array_equal(out[20, 10:40], frame[20, 10:40])
        assert np.array_equal(out[20:50, 10], frame[20:50, 10])
        # and the interior actually changed
        assert not np.array_equal(out[30:40, 20:30], frame[30:40, 20:30])

    def test_outside_region_untouched(self):
        frame = _image(seed=5)
        out = enhance_teeth(frame, (10, 20, 40, 50), SharpenRestoration())
        untouched = np.ones(frame.shape[:2], bool)
        untouched[20:50, 10:40] = False
        assert np.array_equal(out[untouched], frame[untouched])

    def test_upscaling_provider_resized_back(self):
        from retalk.providers import BicubicUpscale
        frame = _image(seed=6)
        out = enhance_teeth(frame, (8, 8, 40, 40), BicubicUpscale(scale=4))
        assert out.shape == frame.shape

    def test_region_out_of_range(self):
        frame = _image()
        for region in ((-1, 0, 10, 10), (0, 0, 100, 10), (20, 5, 10, 30), (0, 0, 10, 0)):
            with pytest.raises(OutOfRange):
                enhance_teeth(frame, region, IdentityRestoration())


class TestPasteBack:
    def test_zero_mask_bit_identical(self):
        frame = _image((96, 96, 3), seed=7)
        crop = _image((64, 64, 3), seed=8)
        tf = AlignmentTransform(scale=1.2, rotation=0.1, translation=(5.0, -3.0))
        out = paste_back(frame, crop, tf, np.zeros((64, 64)))
        assert np.array_equal(out, frame)

    def test_far_pixels_preserved(self):
        frame = _image((128, 128, 3), seed=9)
        crop = np.full((32, 32, 3), 255, np.uint8)
        # crop maps to a small box near the center
        tf = AlignmentTransform(scale=1.0, rotation=0.0, translation=(-48.0, -48.0))
        mask = np.ones((32, 32))
        out = paste_back(frame, crop, tf, mask)
        assert np.array_equal(out[:8], frame[:8])  # far corner untouched
        assert out[60:68, 60:68].mean() > frame[60:68, 60:68].mean()  # face area edited

    def test_identity_transform_full_mask(self):
        frame = _image((64, 64, 3), seed=10)
        crop = _image((64, 64, 3), seed=11)
        identity = AlignmentTransform(scale=1.0, rotation=0.0, translation=(0.0, 0.0))
        out = paste_back(frame, crop, identity, np.ones((64, 64)))
        assert np.abs(out.astype(np.int64) - crop).max() <= 1
