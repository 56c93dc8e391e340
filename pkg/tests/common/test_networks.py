import unittest

import torch

from latentforge.models import DTYPE, DegenerateFeatureError, DimensionError, LatentCode
from latentforge.networks import (
    BlobGenerator, HashEmbedScorer, PlantedScorer, ScaledScorer, SeparableBlobGenerator, TwoBasinScorer,
    cosine_score, generate, score_gradient_wrt_latent, softclip
)
from latentforge.utils import RngStream


def random_code(gen, seed=0):
    stream = RngStream(seed)
    return LatentCode(stream.fork("z").normal(gen.z_dim).clamp(-2, 2), stream.fork("y").normal(gen.y_dim))


class TestSoftclip(unittest.TestCase):
    def test_zero_is_exact(self):
        self.assertEqual(float(softclip(torch.zeros(1, dtype=DTYPE))), 0.0)

    def test_close_to_clamp(self):
        x = torch.linspace(-1, 2, 61, dtype=DTYPE)
        self.assertLess(float((softclip(x) - x.clamp(0, 1)).abs().max()), 0.01)
        self.assertGreater(float(softclip(torch.tensor([-5.0], dtype=DTYPE))), -0.007)


class TestCosineScore(unittest.TestCase):
    def test_range(self):
        e = torch.tensor([1.0, 0.0], dtype=DTYPE)
        self.assertAlmostEqual(float(cosine_score(e, torch.tensor([2.0, 0.0], dtype=DTYPE))), 1.0)
        self.assertAlmostEqual(float(cosine_score(e, torch.tensor([-1.0, 0.0], dtype=DTYPE))), -1.0)

    def test_zero_norm(self):
        with self.assertRaises(DegenerateFeatureError):
            cosine_score(torch.ones(2, dtype=DTYPE), torch.zeros(2, dtype=DTYPE))


class TestBlobGenerator(unittest.TestCase):
    def setUp(self):
        self.gen = BlobGenerator(4, 3, 8, 8, n_blobs=2)

    def test_shape_and_range(self):
        image = generate(self.gen, random_code(self.gen))
        self.assertEqual(tuple(image.shape), (8, 8, 3))
        self.assertTrue(bool((image >= 0).all()) and bool((image <= 1).all()))

    def test_deterministic(self):
        other = BlobGenerator(4, 3, 8, 8, n_blobs=2)
        code = random_code(self.gen)
        self.assertTrue(torch.equal(generate(self.gen, code), generate(other, code)))

    def test_zero_colors_give_black_image(self):
        code = LatentCode(torch.ones(4, dtype=DTYPE), torch.zeros(3, dtype=DTYPE))
        self.assertEqual(float(self.gen.image(code).abs().max()), 0.0)

    def test_batched(self):
        codes = [random_code(self.gen, seed) for seed in range(3)]
        batch = self.gen(torch.stack([c.z for c in codes]), torch.stack([c.y for c in codes]))
        for i, code in enumerate(codes):
            self.assertTrue(torch.allclose(batch[i], self.gen.image(code)))

    def test_wrong_dims(self):
        with self.assertRaises(DimensionError):
            generate(self.gen, LatentCode(torch.zeros(5, dtype=DTYPE), torch.zeros(3, dtype=DTYPE)))

    def test_gradcheck(self):
        code = random_code(self.gen, 1)
        z = code.z.clone().requires_grad_(True)
        y = code.y.clone().requires_grad_(True)
        self.assertTrue(torch.autograd.gradcheck(lambda z, y: self.gen(z, y), (z, y)))

    def test_vjp_matches_autograd(self):
        code = random_code(self.gen, 2)
        cotangent = RngStream(3).normal(8, 8, 3)
        grad = self.gen.vjp(code, cotangent)
        z = code.z.clone().requires_grad_(True)
        (self.gen(z, code.y) * cotangent).sum().backward()
        self.assertTrue(torch.allclose(grad.z, z.grad))

    def test_unconditional(self):
        gen = BlobGenerator(4, 0, 8, 8, n_blobs=2)
        image = generate(gen, LatentCode(torch.zeros(4, dtype=DTYPE), torch.zeros(0, dtype=DTYPE)))
        self.assertEqual(tuple(image.shape), (8, 8, 3))


class TestSeparableBlobGenerator(unittest.TestCase):
    def test_dims(self):
        gen = SeparableBlobGenerator(8, 8, n_blobs=2)
        self.assertEqual(gen.dims, (6, 6, 8, 8))

    def test_blobs_are_independent(self):
        gen = SeparableBlobGenerator(8, 8, n_blobs=2)
        z = torch.zeros(6, dtype=DTYPE).requires_grad_(True)
        y = torch.tensor([1., 0., 0., 0., 0., 0.], dtype=DTYPE)
        # Blob 1 has zero color, so its position does not matter
        gen(z, y).sum().backward()
        self.assertEqual(z.grad[3:].abs().max().item(), 0.0)


class TestScorers(unittest.TestCase):
    def setUp(self):
        self.gen = BlobGenerator(4, 3, 16, 16, n_blobs=3)
        self.image = generate(self.gen, random_code(self.gen))

    def test_planted_max_at_target(self):
        code = random_code(self.gen, 5)
        scorer = PlantedScorer.from_code(self.gen, code)
        e = scorer.embed_text("anything")
        self.assertEqual(scorer.score(e, self.gen.image(code)), 1.0)
        self.assertLess(scorer.score(e, self.image), 1.0)

    def test_planted_wrong_shape(self):
        scorer = PlantedScorer(torch.zeros(4, 4, 3, dtype=DTYPE))
        with self.assertRaises(DimensionError):
            scorer.score(scorer.embed_text(""), self.image)

    def test_hash_embed_range_and_stability(self):
        scorer = HashEmbedScorer(embed_dim=16, seed=1)
        e = scorer.embed_text("a red ball")
        self.assertTrue(torch.equal(e, HashEmbedScorer(embed_dim=16, seed=1).embed_text("a red ball")))
        self.assertFalse(torch.equal(e, scorer.embed_text("a blue ball")))
        s = scorer.score(e, self.image)
        self.assertTrue(-1.0 <= s <= 1.0)

    def test_hash_embed_black_image(self):
        scorer = HashEmbedScorer(embed_dim=16)
        with self.assertRaises(DegenerateFeatureError):
            scorer.score(scorer.embed_text("x"), torch.zeros(16, 16, 3, dtype=DTYPE))

    def test_hash_embed_gradcheck(self):
        scorer = HashEmbedScorer(embed_dim=16)
        e = scorer.embed_text("x")
        image = self.image.clone().requires_grad_(True)
        self.assertTrue(torch.autograd.gradcheck(lambda i: scorer(e, i), (image,)))

    def test_batched_scores(self):
        scorer = HashEmbedScorer(embed_dim=16)
        e = scorer.embed_text("x")
        batch = torch.stack([self.image, self.image.flip(0)])
        scores = scorer(e, batch)
        self.assertEqual(tuple(scores.shape), (2,))
        self.assertAlmostEqual(float(scores[1]), scorer.score(e, self.image.flip(0)))

    def test_two_basin(self):
        spurious = generate(self.gen, random_code(self.gen, 10))
        semantic = generate(self.gen, random_code(self.gen, 11))
        scorer = TwoBasinScorer(spurious, semantic)
        e = scorer.embed_text("")
        self.assertTrue(scorer.in_semantic_basin(semantic))
        self.assertFalse(scorer.in_semantic_basin(spurious))
        self.assertAlmostEqual(scorer.score(e, spurious), 0.5 + 0.5 * float(scorer.semantic_similarity(spurious)))
        self.assertAlmostEqual(float(scorer.semantic_similarity(semantic)), 1.0)
        image = spurious.clone().requires_grad_(True)
        self.assertTrue(torch.autograd.gradcheck(lambda i: scorer(e, i), (image,)))

    def test_scaled(self):
        scorer = HashEmbedScorer(embed_dim=16)
        scaled = ScaledScorer(scorer, 3.0)
        e = scorer.embed_text("x")
        self.assertAlmostEqual(scaled.score(e, self.image), 3 * scorer.score(e, self.image))
        self.assertTrue(torch.allclose(scaled.image_vjp(e, self.image), 3 * scorer.image_vjp(e, self.image)))

    def test_image_vjp_cotangent(self):
        scorer = HashEmbedScorer(embed_dim=16)
        e = scorer.embed_text("x")
        self.assertTrue(torch.allclose(scorer.image_vjp(e, self.image, 2.0), 2 * scorer.image_vjp(e, self.image)))


class TestScoreGradient(unittest.TestCase):
    def test_chain_rule(self):
        gen = BlobGenerator(4, 3, 16, 16, n_blobs=3)
        scorer = HashEmbedScorer(embed_dim=16)
        code = random_code(gen, 4)
        score, grad = score_gradient_wrt_latent(gen, scorer, "x", code)

        z = code.z.clone().requires_grad_(True)
        y = code.y.clone().requires_grad_(True)
        s = scorer(scorer.embed_text("x"), gen(z, y))
        s.backward()
        self.assertAlmostEqual(score, float(s))
        self.assertTrue(torch.allclose(grad.z, z.grad))
        self.assertTrue(torch.allclose(grad.y, y.grad))


if __name__ == '__main__':
    unittest.main()
