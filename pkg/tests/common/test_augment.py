import unittest

import torch

from latentforge.augment import (
    ALL_AUGMENTATIONS, Augmentation, AugmentationParams, AugmentationRanges, AugSpec, apply, apply_batch,
    apply_vjp, augclip_estimate, augclip_score, draw_params
)
from latentforge.models import DTYPE
from latentforge.networks import BlobGenerator, HashEmbedScorer, generate
from latentforge.optim import InitSettings, draw_code
from latentforge.utils import RngStream


def blob_image(height=16, width=16, seed=0):
    gen = BlobGenerator(4, 3, height, width, n_blobs=3)
    return generate(gen, draw_code(gen, InitSettings(M=1, k=1), RngStream(seed)))


class TestAugmentationParams(unittest.TestCase):
    def test_identity(self):
        image = blob_image()
        self.assertTrue(torch.allclose(apply(AugmentationParams(), image), image, atol=1e-12))

    def test_integer_translation(self):
        image = blob_image()
        out = apply(AugmentationParams(translate=(2, -1)), image)
        self.assertTrue(torch.allclose(out[2:, :-1], image[:-2, 1:], atol=1e-9))
        self.assertLess(float(out[:2].abs().max()), 1e-9)
        self.assertLess(float(out[:, -1].abs().max()), 1e-9)

    def test_color(self):
        image = blob_image()
        out = apply(AugmentationParams(brightness=(0.1, 0.0, -0.1), contrast=0.5), image)
        mean = image.mean()
        expected = 0.5 * (image - mean) + mean + torch.tensor([0.1, 0.0, -0.1], dtype=DTYPE)
        self.assertTrue(torch.allclose(out, expected))

    def test_cutout(self):
        image = blob_image()
        out = apply(AugmentationParams(cutout=(1, 2, 3, 4)), image)
        self.assertTrue(bool((out[1:4, 2:6] == 0).all()))
        self.assertTrue(torch.allclose(out[5:], image[5:]))

    def test_cutout_whole_image(self):
        image = blob_image()
        out = apply(AugmentationParams(translate=(1, 0), cutout=(0, 0, 16, 16)), image)
        self.assertTrue(bool((out == 0).all()))

    def test_red_offset_on_gray(self):
        image = torch.full((4, 5, 3), 0.5, dtype=DTYPE)
        out = apply(AugmentationParams(brightness=(0.1, 0.0, 0.0), contrast=1.0), image)
        self.assertTrue(torch.allclose(out[..., 0], torch.full((4, 5), 0.6, dtype=DTYPE), atol=1e-15))
        self.assertTrue(torch.equal(out[..., 1:], image[..., 1:]))

    def test_zoom_keeps_center(self):
        image = torch.zeros(9, 9, 3, dtype=DTYPE)
        image[4, 4] = 1.0
        out = apply(AugmentationParams(scale=2.0), image)
        self.assertAlmostEqual(float(out[4, 4, 0]), 1.0)

    def test_gradcheck(self):
        image = blob_image(8, 8).clone().requires_grad_(True)
        params = AugmentationParams((0.05, 0.0, 0.1), 1.2, (1, -1), 1.15, (0, 0, 2, 2))
        self.assertTrue(torch.autograd.gradcheck(lambda i: apply(params, i), (image,)))

    def test_vjp(self):
        image = blob_image(8, 8)
        params = AugmentationParams(translate=(1, 1), scale=0.9)
        cotangent = RngStream(1).normal(8, 8, 3)
        x = image.clone().requires_grad_(True)
        (apply(params, x) * cotangent).sum().backward()
        self.assertTrue(torch.allclose(apply_vjp(params, image, cotangent), x.grad))

    def test_batch_matches_single(self):
        image = blob_image()
        params = draw_params(AugSpec(n_draws=5, stream=RngStream(2)), 16, 16)
        batch = apply_batch(params, image)
        for i, p in enumerate(params):
            self.assertTrue(torch.allclose(batch[i], apply(p, image)))


class TestDrawParams(unittest.TestCase):
    def test_reproducible(self):
        spec = AugSpec(n_draws=8, stream=RngStream(3))
        self.assertEqual(draw_params(spec, 16, 16), draw_params(spec, 16, 16))
        self.assertNotEqual(draw_params(spec, 16, 16), draw_params(spec.fork(1), 16, 16))

    def test_ranges(self):
        ranges = AugmentationRanges()
        for p in draw_params(AugSpec(n_draws=50, stream=RngStream(4)), 16, 16):
            self.assertTrue(all(abs(b) <= ranges.brightness for b in p.brightness))
            self.assertTrue(ranges.contrast[0] <= p.contrast <= ranges.contrast[1])
            self.assertTrue(all(abs(d) <= 2 for d in p.translate))
            self.assertTrue(ranges.resize[0] <= p.scale <= ranges.resize[1])
            top, left, h, w = p.cutout
            self.assertEqual((h, w), (4, 4))
            self.assertTrue(0 <= top <= 12 and 0 <= left <= 12)

    def test_disabling_keeps_other_draws(self):
        spec = AugSpec(n_draws=6, stream=RngStream(5))
        full = draw_params(spec, 16, 16)
        no_color = draw_params(spec.with_enabled(ALL_AUGMENTATIONS - {Augmentation.COLOR}), 16, 16)
        for a, b in zip(full, no_color):
            self.assertEqual(b.contrast, 1.0)
            self.assertEqual(a.translate, b.translate)
            self.assertEqual(a.scale, b.scale)
            self.assertEqual(a.cutout, b.cutout)

    def test_invalid(self):
        with self.assertRaises(ValueError):
            AugSpec(n_draws=0)
        with self.assertRaises(ValueError):
            AugmentationRanges(contrast=(1.5, 0.5))
        with self.assertRaises(ValueError):
            Augmentation.from_string("blur")


class TestAugclip(unittest.TestCase):
    def setUp(self):
        self.scorer = HashEmbedScorer(embed_dim=16)
        self.embedding = self.scorer.embed_text("a cat")
        self.image = blob_image()

    def test_empty_set_is_plain_score(self):
        spec = AugSpec(enabled=frozenset(), stream=RngStream(0))
        self.assertEqual(float(augclip_score(self.scorer, self.embedding, self.image, spec)),
                         self.scorer.score(self.embedding, self.image))

    def test_mean_of_draws(self):
        spec = AugSpec(n_draws=4, stream=RngStream(6))
        params = draw_params(spec, 16, 16)
        expected = sum(self.scorer.score(self.embedding, apply(p, self.image)) for p in params) / 4
        self.assertAlmostEqual(float(augclip_score(self.scorer, self.embedding, self.image, spec)), expected)

    def test_estimate_reproducible(self):
        spec = AugSpec(n_draws=4, stream=RngStream(7))
        s1, g1 = augclip_estimate(self.scorer, "a cat", self.image, spec)
        s2, g2 = augclip_estimate(self.scorer, "a cat", self.image, spec)
        self.assertEqual(s1, s2)
        self.assertTrue(torch.equal(g1, g2))
        self.assertEqual(g1.shape, self.image.shape)

    def test_estimate_gradient(self):
        spec = AugSpec(n_draws=3, stream=RngStream(8))
        image = self.image.clone().requires_grad_(True)
        self.assertTrue(torch.autograd.gradcheck(
            lambda i: augclip_score(self.scorer, self.embedding, i, spec), (image,)))


if __name__ == '__main__':
    unittest.main()
