import hashlib

import numpy as np
import pytest

from chl.augment import (
    TRANSFORM_IDS,
    AugmentPipeline,
    AugmentStep,
    apply_geometric,
    apply_pipeline,
    blur_kernel_size,
    make_positive_pair,
    random_crop,
    resize_bilinear,
)

OFF = {t: 0.0 for t in TRANSFORM_IDS}


@pytest.fixture
def image():
    return np.random.default_rng(0).uniform(30, 240, (16, 16, 3))


class TestPipeline:
    def test_zero_probability_is_identity(self, image):
        out = apply_pipeline(AugmentPipeline.default(0, OFF), image, np.random.default_rng(1))
        np.testing.assert_array_equal(out, image)

    def test_zero_probability_pair_equals_input(self, image):
        a, b = make_positive_pair(AugmentPipeline.default(0, OFF), image, np.random.default_rng(1))
        np.testing.assert_array_equal(a, image)
        np.testing.assert_array_equal(b, image)

    def test_forced_flip_twice_is_identity(self, image):
        flip = AugmentPipeline([AugmentStep("geometric", 1.0, {"ops": ["hflip"]})])
        rng = np.random.default_rng(2)
        np.testing.assert_array_equal(apply_pipeline(flip, apply_pipeline(flip, image, rng), rng), image)

    def test_seeded_determinism(self, image):
        pipe = AugmentPipeline.default(0, {t: 1.0 for t in TRANSFORM_IDS})
        a = apply_pipeline(pipe, image, np.random.default_rng(5))
        b = apply_pipeline(pipe, image, np.random.default_rng(5))
        assert hashlib.sha256(a.tobytes()).hexdigest() == hashlib.sha256(b.tobytes()).hexdigest()
        c = apply_pipeline(pipe, image, np.random.default_rng(6))
        assert not np.array_equal(a, c)

    def test_output_shape_and_range(self, image):
        pipe = AugmentPipeline.default(0, {t: 1.0 for t in TRANSFORM_IDS})
        rng = np.random.default_rng(7)
        for _ in range(20):
            out = apply_pipeline(pipe, image, rng)
            assert out.shape == image.shape
            assert out.min() >= 0.0 and out.max() <= 255.0

    def test_non_square_skips_quarter_turns(self):
        img = np.random.default_rng(1).uniform(0, 255, (6, 10, 3))
        pipe = AugmentPipeline([AugmentStep("geometric", 1.0, {"ops": ["rot90"]})])
        np.testing.assert_array_equal(apply_pipeline(pipe, img, np.random.default_rng(0)), img)

    def test_crop_larger_than_image_rejected(self):
        with pytest.raises(ValueError, match="crop size exceeds image dimensions"):
            AugmentPipeline([AugmentStep("crop", 0.5, {"scale_max": 1.2})])

    def test_bad_steps_rejected(self):
        with pytest.raises(ValueError):
            AugmentPipeline([AugmentStep("sharpen", 0.5)])
        with pytest.raises(ValueError):
            AugmentPipeline([AugmentStep("blur", 1.5)])
        with pytest.raises(ValueError):
            AugmentPipeline([AugmentStep("geometric", 0.5, {"ops": ["shear"]})])

    def test_without(self):
        pipe = AugmentPipeline.default().without("hed")
        assert [s.transform for s in pipe.steps] == ["crop", "jitter", "blur", "geometric"]
        assert pipe.step("hed") is None


class TestTransforms:
    def test_geometric_ops(self, image):
        np.testing.assert_array_equal(apply_geometric(image, "hflip"), image[:, ::-1])
        np.testing.assert_array_equal(apply_geometric(image, "vflip"), image[::-1])
        r = image
        for _ in range(4):
            r = apply_geometric(r, "rot90")
        np.testing.assert_array_equal(r, image)
        np.testing.assert_array_equal(
            apply_geometric(apply_geometric(image, "rot90"), "rot270"), image
        )

    def test_blur_kernel_sizes(self):
        assert blur_kernel_size(32) == 5
        assert blur_kernel_size(16) == 3
        assert blur_kernel_size(8) == 1
        assert all(blur_kernel_size(s) % 2 == 1 for s in range(1, 200))

    def test_resize_identity_and_constant(self, image):
        np.testing.assert_array_equal(resize_bilinear(image, 16, 16), image)
        const = np.full((5, 7, 3), 42.0)
        np.testing.assert_allclose(resize_bilinear(const, 11, 3), 42.0)

    def test_full_scale_crop_is_identity(self, image):
        out = random_crop(image, np.random.default_rng(0), 1.0, 1.0)
        np.testing.assert_allclose(out, image)
