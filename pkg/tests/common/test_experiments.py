import unittest

import torch

from latentforge.attack import random_image
from latentforge.augment import AugSpec
from latentforge.compose import PerceptualSettings
from latentforge.experiments import (
    dbgd_oracle_suite, fgsm_robustness_suite, fuse_tradeoff_suite, k_ablation_suite, quadratic_oracle,
    stagnation_benchmark, variance_suite
)
from latentforge.models import DTYPE
from latentforge.networks import BlobGenerator, HashEmbedScorer
from latentforge.optim import InitSettings, OptimSettings
from latentforge.utils import RngStream


class TestQuadraticOracle(unittest.TestCase):
    def test_values(self):
        value = quadratic_oracle(torch.tensor([0.5, 0.0], dtype=DTYPE))
        self.assertEqual(value.s, -0.25)
        self.assertEqual(value.l, 1.25)
        self.assertEqual(value.grad_s.tolist(), [-1.0, 0.0])
        self.assertEqual(value.grad_l.tolist(), [-1.0, -2.0])


class TestSuites(unittest.TestCase):
    def setUp(self):
        self.gen = BlobGenerator(4, 3, 16, 16, n_blobs=6)
        self.aug = AugSpec(n_draws=2, stream=RngStream(0))
        self.opt = OptimSettings(iterations=2)

    def test_dbgd_oracle(self):
        results = dbgd_oracle_suite()
        self.assertEqual(len(results), 5)
        for result in results:
            self.assertTrue(result.passed, result)

    def test_k_ablation_rows(self):
        columns, results = k_ablation_suite(self.gen, 2, 4, [1, 2], self.opt, InitSettings(M=4, k=1, n_classes=10),
                                            self.aug, RngStream(1))
        self.assertEqual(len(columns["seed"]), 2 * 3)
        self.assertEqual(columns["M"][:3], [1, 4, 4])
        self.assertEqual(len(results), 2)

    def test_k_ablation_best_of_m_never_loses(self):
        # Candidate 0 of the search is the single random start, so the top-1 can only score higher
        columns, results = k_ablation_suite(self.gen, 3, 6, [1], OptimSettings(iterations=0),
                                            InitSettings(M=6, k=1, n_classes=10), self.aug, RngStream(5))
        for i in range(0, len(columns["seed"]), 2):
            self.assertGreaterEqual(columns["final_score"][i + 1], columns["final_score"][i])
        for result in results:
            self.assertTrue(result.passed, result)

    def test_fuse_tradeoff_rows(self):
        columns, results = fuse_tradeoff_suite(2, self.opt, PerceptualSettings(levels=2), RngStream(2), 16, 16,
                                               n_blobs=2, threads=2)
        self.assertEqual(columns["method"], ["dbgd", "s_only", "dbgd", "s_only"])
        self.assertEqual(len(results), 2)

    def test_fuse_tradeoff_without_steps(self):
        _, results = fuse_tradeoff_suite(2, OptimSettings(iterations=0), PerceptualSettings(levels=2), RngStream(2),
                                         16, 16, n_blobs=2)
        reduction, gap = results
        self.assertEqual(reduction.value, 0.0)
        self.assertFalse(reduction.passed)
        self.assertEqual(gap.value, 0.0)
        self.assertTrue(gap.passed)

    def test_stagnation_without_steps_never_escapes(self):
        init = InitSettings(M=1, k=1, n_classes=10)
        columns, result = stagnation_benchmark(self.gen, 2, OptimSettings(iterations=0), self.aug, init, RngStream(6))
        self.assertEqual(columns["basin"], ["spurious"] * 4)
        self.assertEqual(result.value, 0)
        self.assertFalse(result.passed)

    def test_stagnation_pool_size_does_not_change_rows(self):
        init = InitSettings(M=1, k=1, n_classes=10)
        aug = AugSpec(n_draws=2, stream=RngStream(1))
        single, _ = stagnation_benchmark(self.gen, 3, OptimSettings(iterations=2), aug, init, RngStream(2))
        pooled, _ = stagnation_benchmark(self.gen, 3, OptimSettings(iterations=2), aug, init, RngStream(2), threads=3)
        self.assertEqual(single, pooled)

    def test_fgsm_rows(self):
        scorer = HashEmbedScorer(embed_dim=16)
        columns, results = fgsm_robustness_suite(self.gen, scorer, "x", 3, 4 / 255, self.aug, RngStream(3))
        self.assertEqual(columns["seed"], [0, 1, 2])
        self.assertTrue(all(gain > 0 for gain in columns["gain_plain"]))

    def test_fgsm_zero_epsilon_fails_both_properties(self):
        scorer = HashEmbedScorer(embed_dim=16)
        columns, results = fgsm_robustness_suite(self.gen, scorer, "x", 3, 0.0, self.aug, RngStream(3))
        self.assertEqual(columns["gain_plain"], [0.0] * 3)
        self.assertEqual([r.passed for r in results], [False, False])

    def test_variance_ratio(self):
        scorer = HashEmbedScorer(embed_dim=16)
        image = random_image(self.gen, RngStream(4))
        result = variance_suite(scorer, "x", image, self.aug, repeats=2000, n_draws=2)
        self.assertTrue(result.passed, result)


if __name__ == '__main__':
    unittest.main()
