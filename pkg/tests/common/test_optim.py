import unittest

import torch

from latentforge.augment import AugSpec
from latentforge.models import DTYPE, LatentCode, NonFiniteError, YMode
from latentforge.networks import BlobGenerator, HashEmbedScorer, PlantedScorer
from latentforge.optim import (
    AdamState, InitSettings, OptimSettings, adam_step, class_table, draw_code, init_search, optimize_naive,
    optimize_single
)
from latentforge.utils import RngStream

NO_AUG = AugSpec(enabled=frozenset(), n_draws=1, stream=RngStream(0))


class TestAdam(unittest.TestCase):
    def test_first_step_is_signed(self):
        state = AdamState.zeros(3, lr=0.1)
        grad = torch.tensor([2.0, -0.5, 1e-3], dtype=DTYPE)
        state, x = adam_step(state, grad, torch.zeros(3, dtype=DTYPE))
        self.assertEqual(state.step, 1)
        self.assertTrue(torch.allclose(x, torch.tensor([-0.1, 0.1, -0.1], dtype=DTYPE), atol=1e-5))

    def test_minimizes_quadratic(self):
        target = torch.tensor([1.0, -2.0], dtype=DTYPE)
        x = torch.zeros(2, dtype=DTYPE)
        state = AdamState.zeros(2, lr=0.05)
        for _ in range(2000):
            state, x = adam_step(state, 2 * (x - target), x)
        self.assertTrue(torch.allclose(x, target, atol=1e-3))

    def test_weight_decay(self):
        state = AdamState.zeros(1, lr=0.1, weight_decay=1.0)
        _, x = adam_step(state, torch.zeros(1, dtype=DTYPE), torch.ones(1, dtype=DTYPE))
        self.assertLess(float(x[0]), 1.0)

    def test_zero_gradient_is_a_no_op(self):
        state = AdamState.zeros(3, lr=0.1)
        params = torch.tensor([1.0, -2.0, 0.5], dtype=DTYPE)
        new_state, new_params = adam_step(state, torch.zeros(3, dtype=DTYPE), params)
        self.assertTrue(torch.equal(new_params, params))
        self.assertTrue(torch.equal(new_state.m, state.m))
        self.assertTrue(torch.equal(new_state.v, state.v))
        self.assertEqual(new_state.step, 1)

    def test_non_finite(self):
        with self.assertRaises(NonFiniteError):
            adam_step(AdamState.zeros(1), torch.tensor([float("nan")], dtype=DTYPE), torch.zeros(1, dtype=DTYPE))


class TestSettings(unittest.TestCase):
    def test_defaults(self):
        init, opt = InitSettings(), OptimSettings()
        self.assertEqual((init.M, init.k, init.batch), (10000, 5, 10))
        self.assertEqual((opt.lr, opt.iterations), (5e-3, 1000))

    def test_invalid(self):
        with self.assertRaises(ValueError):
            InitSettings(M=3, k=4)
        with self.assertRaises(ValueError):
            OptimSettings(lr=0.0)


class TestSampling(unittest.TestCase):
    def setUp(self):
        self.gen = BlobGenerator(4, 3, 16, 16, n_blobs=3)

    def test_truncated(self):
        for i in range(20):
            code = draw_code(self.gen, InitSettings(), RngStream(0).fork(i))
            self.assertLessEqual(float(code.z.abs().max()), 2.0)

    def test_class_table_rows(self):
        settings = InitSettings(n_classes=5)
        table = class_table(settings, self.gen.y_dim)
        code = draw_code(self.gen, settings, RngStream(1))
        self.assertTrue(any(torch.equal(code.y, row) for row in table))

    def test_gaussian_y(self):
        settings = InitSettings(y_mode=YMode.GAUSSIAN, n_classes=5)
        table = class_table(settings, self.gen.y_dim)
        code = draw_code(self.gen, settings, RngStream(1))
        self.assertFalse(any(torch.equal(code.y, row) for row in table))


class TestInitSearch(unittest.TestCase):
    def setUp(self):
        self.gen = BlobGenerator(4, 3, 16, 16, n_blobs=3)
        self.scorer = HashEmbedScorer(embed_dim=16)
        self.aug = AugSpec(n_draws=2, stream=RngStream(1))

    def test_top_k_sorted(self):
        candidates = init_search(self.gen, self.scorer, "a cat", InitSettings(M=12, k=4, batch=5),
                                 self.aug, RngStream(2))
        self.assertEqual(len(candidates), 4)
        scores = [c.score for c in candidates]
        self.assertEqual(scores, sorted(scores, reverse=True))

    def test_independent_of_batching_and_threads(self):
        a = init_search(self.gen, self.scorer, "a cat", InitSettings(M=12, k=3, batch=1), self.aug, RngStream(2))
        b = init_search(self.gen, self.scorer, "a cat", InitSettings(M=12, k=3, batch=7), self.aug, RngStream(2),
                        threads=3)
        self.assertEqual([(c.index, c.score) for c in a], [(c.index, c.score) for c in b])
        for x, y in zip(a, b):
            self.assertTrue(torch.equal(x.code.z, y.code.z))

    def test_single_candidate(self):
        candidates = init_search(self.gen, self.scorer, "a cat", InitSettings(M=1, k=1), self.aug, RngStream(2))
        self.assertEqual(candidates[0].index, 0)

    def test_planted_target_wins(self):
        stream = RngStream(3)
        settings = InitSettings(M=6, k=1)
        target = draw_code(self.gen, settings, stream.fork(4))
        scorer = PlantedScorer.from_code(self.gen, target)
        best = init_search(self.gen, scorer, "", settings, NO_AUG, stream)[0]
        self.assertEqual(best.index, 4)
        self.assertEqual(best.score, 1.0)


class TestOptimizeSingle(unittest.TestCase):
    def setUp(self):
        self.gen = BlobGenerator(4, 3, 16, 16, n_blobs=3)
        self.init = InitSettings(M=1, k=1)

    def test_trace_length(self):
        code = draw_code(self.gen, self.init, RngStream(0))
        scorer = HashEmbedScorer(embed_dim=16)
        ensemble, trace, image = optimize_single(self.gen, scorer, "x", [code], OptimSettings(iterations=3),
                                                 AugSpec(n_draws=2, stream=RngStream(1)))
        self.assertEqual(len(trace), 4)
        self.assertEqual(trace.column("iteration"), [0, 1, 2, 3])
        self.assertEqual(ensemble.k, 1)
        self.assertEqual(tuple(image.shape), (16, 16, 3))

    def test_zero_iterations(self):
        code = draw_code(self.gen, self.init, RngStream(0))
        scorer = PlantedScorer.from_code(self.gen, code)
        ensemble, trace, _ = optimize_single(self.gen, scorer, "", [code], OptimSettings(iterations=0), NO_AUG)
        self.assertEqual(len(trace), 1)
        self.assertEqual(trace.last.score, 1.0)
        self.assertTrue(torch.equal(ensemble.basis_z[0], code.z))

    def test_planted_improves(self):
        target = draw_code(self.gen, self.init, RngStream(5))
        start = draw_code(self.gen, self.init, RngStream(6))
        scorer = PlantedScorer.from_code(self.gen, target)
        _, trace, _ = optimize_single(self.gen, scorer, "", [start], OptimSettings(lr=0.05, iterations=60), NO_AUG)
        self.assertGreater(trace.last.score, trace.rows[0].score)

    def test_one_step_moves_weights_and_basis(self):
        codes = [draw_code(self.gen, self.init, RngStream(i)) for i in (11, 12)]
        scorer = HashEmbedScorer(embed_dim=16)
        ensemble, _, _ = optimize_single(self.gen, scorer, "x", codes, OptimSettings(iterations=1), NO_AUG)
        self.assertFalse(torch.equal(ensemble.weights, torch.full((2,), 0.5, dtype=DTYPE)))
        for i, code in enumerate(codes):
            self.assertFalse(torch.equal(ensemble.basis_z[i], code.z))
            self.assertFalse(torch.equal(ensemble.basis_y[i], code.y))

    def test_planted_moving_average_rises(self):
        target = draw_code(self.gen, self.init, RngStream(5))
        start = draw_code(self.gen, self.init, RngStream(6))
        scorer = PlantedScorer.from_code(self.gen, target)
        _, trace, _ = optimize_single(self.gen, scorer, "", [start], OptimSettings(iterations=300), NO_AUG)
        scores = trace.column("score")
        averages = [sum(scores[i:i + 50]) / 50 for i in range(len(scores) - 49)]
        self.assertGreater(averages[-1], averages[0])
        half = len(averages) // 2
        self.assertGreater(sum(averages[half:]) / (len(averages) - half), sum(averages[:half]) / half)

    def test_deterministic(self):
        codes = [draw_code(self.gen, self.init, RngStream(i)) for i in range(3)]
        scorer = HashEmbedScorer(embed_dim=16)
        aug = AugSpec(n_draws=2, stream=RngStream(1))
        _, a, image_a = optimize_single(self.gen, scorer, "x", codes, OptimSettings(iterations=4), aug)
        _, b, image_b = optimize_single(self.gen, scorer, "x", codes, OptimSettings(iterations=4), aug)
        self.assertEqual(a.rows, b.rows)
        self.assertTrue(torch.equal(image_a, image_b))

    def test_single_basis_matches_naive(self):
        code = draw_code(self.gen, self.init, RngStream(7))
        scorer = HashEmbedScorer(embed_dim=16)
        aug = AugSpec(n_draws=2, stream=RngStream(8))
        opt = OptimSettings(iterations=5, learn_weights=False)
        _, trace, image = optimize_single(self.gen, scorer, "x", [code], opt, aug)
        _, naive_trace, naive_image = optimize_naive(self.gen, scorer, "x", code, opt, aug)
        for a, b in zip(trace.column("score"), naive_trace.column("score")):
            self.assertAlmostEqual(a, b, places=10)
        self.assertTrue(torch.allclose(image, naive_image))

    def test_split_weights(self):
        codes = [draw_code(self.gen, self.init, RngStream(i)) for i in range(2)]
        scorer = HashEmbedScorer(embed_dim=16)
        ensemble, trace, _ = optimize_single(self.gen, scorer, "x", codes, OptimSettings(iterations=2, split_weights=True),
                                             NO_AUG)
        self.assertIsNotNone(ensemble.weights_y)
        self.assertEqual(len(trace), 3)

    def test_wrong_dims(self):
        scorer = HashEmbedScorer(embed_dim=16)
        bad = LatentCode(torch.zeros(5, dtype=DTYPE), torch.zeros(3, dtype=DTYPE))
        with self.assertRaises(ValueError):
            optimize_single(self.gen, scorer, "x", [bad], OptimSettings(iterations=1), NO_AUG)


if __name__ == '__main__':
    unittest.main()
