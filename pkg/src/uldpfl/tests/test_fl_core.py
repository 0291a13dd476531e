import math
import unittest
from dataclasses import replace

import numpy as np

from ..libraries import fl_core as fl
from ..libraries.dataset import Federation, Shard
from ..libraries.errors import DomainError
from ..libraries.models import SoftmaxRegression
from ._helpers import small_federation

CLIP = 1.0


def random_pairs(rng: np.random.Generator, silos: int, users: int, dim: int) -> fl.PairDeltas:
    raw = rng.normal(0, 2.0, size=(silos, users, dim))
    clipped = np.stack([[fl.weighted_clip(raw[s, u], 1.0, CLIP) for u in range(users)] for s in range(silos)])
    return fl.PairDeltas(raw=raw, clipped=clipped, noise=np.zeros((silos, dim)))


def without_user(federation: Federation, user: int) -> Federation:
    """Neighbouring federation: the user's records removed from every silo."""
    empty = [silo[user].filtered(np.zeros(len(silo[user]), dtype=bool)) for silo in federation.shards]
    return federation.replace_user(user, empty)


def flag_space(federation: Federation) -> int:
    return max(s.index.max() for silo in federation.shards for s in silo if len(s)) + 1


class FLCoreTestCase(unittest.TestCase):
    # Weighting
    ############################################

    def test_optimal_weights(self):
        hist = np.array([[3, 0, 0], [1, 2, 0]])
        weights = fl.optimal_weights(hist)
        self.assertTrue(np.allclose(weights.w, [[0.75, 0, 0], [0.25, 1, 0]]))
        self.assertEqual(weights.active.tolist(), [True, True, False])
        self.assertTrue(weights.satisfies_constraint())

    def test_uniform_weights(self):
        weights = fl.uniform_weights(np.array([[3, 0, 0], [1, 2, 0]]))
        self.assertTrue(np.allclose(weights.w, [[0.5, 0.5, 0], [0.5, 0.5, 0]]))
        self.assertTrue(weights.satisfies_constraint())

    def test_negative_weights_rejected(self):
        with self.assertRaises(DomainError):
            fl.WeightMatrix(np.array([[-0.1]]), np.array([True]))

    def test_weighted_clip(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            delta = rng.normal(0, 3, size=5)
            w = rng.random()
            self.assertLessEqual(np.linalg.norm(fl.weighted_clip(delta, w, CLIP)), w * CLIP + 1e-12)
        small = np.array([0.1, 0.2])
        self.assertTrue(np.array_equal(fl.weighted_clip(small, 1.0, CLIP), small))
        self.assertTrue(np.array_equal(fl.weighted_clip(np.zeros(3), 0.5, CLIP), np.zeros(3)))

    def test_clipping_diagnostics(self):
        weights = fl.optimal_weights(np.array([[1, 2], [1, 0]]))
        deltas = np.full((2, 2, 3), 0.01)
        diag = fl.clipping_diagnostics(deltas, weights, CLIP)
        self.assertAlmostEqual(diag.alpha_bar, weights.w.mean())
        self.assertAlmostEqual(diag.abs_deviation_sum, float(np.abs(weights.w - weights.w.mean()).sum()))

    # Sensitivity
    ############################################

    def test_user_level_sensitivity(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            silos, users, dim = int(rng.integers(1, 5)), int(rng.integers(1, 8)), int(rng.integers(1, 6))
            hist = rng.integers(0, 5, size=(silos, users))
            pairs = random_pairs(rng, silos, users, dim)
            weights = fl.optimal_weights(hist)
            full = fl.pre_noise_aggregate(pairs, weights)

            removed = int(rng.integers(0, users))
            neighbour = hist.copy()
            neighbour[:, removed] = 0
            reduced = fl.pre_noise_aggregate(pairs, fl.optimal_weights(neighbour))
            self.assertLessEqual(np.linalg.norm(full - reduced), CLIP + 1e-9)

    def test_naive_silo_sensitivity(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            silos, dim = int(rng.integers(1, 5)), 4
            deltas = [fl.weighted_clip(rng.normal(0, 2, dim), 1.0, CLIP) for _ in range(silos)]
            changed = [fl.weighted_clip(rng.normal(0, 2, dim), 1.0, CLIP) for _ in range(silos)]
            diff = np.sum(deltas, axis=0) - np.sum(changed, axis=0)
            self.assertLessEqual(np.linalg.norm(diff), 2 * silos * CLIP + 1e-9)

    def test_round_sensitivity_on_neighbouring_federations(self):
        # shards stay below one mini-batch so local training is deterministic
        model, federation = small_federation(silos=3, users=6, records=90)
        config = fl.TrainConfig(sigma=0.0, clip=0.05, eta_l=0.5)
        silos, rng = federation.num_silos, fl.RoundRng(0, 1)
        moved = []
        for user in range(federation.num_users):
            neighbour = without_user(federation, user)
            self.assertEqual(neighbour.histogram()[:, user].tolist(), [0] * silos)

            for make_weights in (fl.optimal_weights, fl.uniform_weights):
                full = fl.round_uldp_avg(model, federation, make_weights(federation.histogram()), config, rng)
                less = fl.round_uldp_avg(model, neighbour, make_weights(neighbour.histogram()), config, rng)
                gap = np.linalg.norm(full.trace.aggregate - less.trace.aggregate)
                self.assertLessEqual(gap, config.clip + 1e-12)
                moved.append(gap)

            full = fl.round_uldp_sgd(model, federation, fl.optimal_weights(federation.histogram()), config, rng)
            less = fl.round_uldp_sgd(model, neighbour, fl.optimal_weights(neighbour.histogram()), config, rng)
            self.assertLessEqual(np.linalg.norm(full.trace.aggregate - less.trace.aggregate), config.clip + 1e-12)

            full = fl.round_uldp_naive(model, federation, config, rng)
            less = fl.round_uldp_naive(model, neighbour, config, rng)
            self.assertLessEqual(np.linalg.norm(full.trace.aggregate - less.trace.aggregate), silos * config.clip + 1e-12)
        self.assertGreater(max(moved), 0.0)

    # Noise
    ############################################

    def test_noise_std(self):
        self.assertEqual(fl.silo_noise_std('default', 5.0, CLIP, 4), 0.0)
        self.assertEqual(fl.silo_noise_std('avg', 0.0, CLIP, 4), 0.0)
        self.assertAlmostEqual(fl.silo_noise_std('avg-w', 5.0, CLIP, 4), 2.5)
        self.assertAlmostEqual(fl.silo_noise_std('naive', 5.0, CLIP, 4), 10.0)
        with self.assertRaises(DomainError):
            fl.silo_noise_std('group', 5.0, CLIP, 4)

    def test_summed_noise_variance(self):
        silos, dim, sigma = 4, 10, 2.0
        for algorithm, expected in (('avg', sigma ** 2), ('naive', (silos * sigma) ** 2)):
            draws = np.stack([
                fl.summed_silo_noise(algorithm, sigma, CLIP, silos, dim, fl.RoundRng(3, r)) for r in range(2000)
            ])
            self.assertLess(abs(draws.var() - expected) / expected, 0.05)

    def test_centralized_noise_matches_summed_variance(self):
        rng = np.random.default_rng(0)
        draws = fl.centralized_noise('avg', 2.0, CLIP, 4, 20000, rng)
        self.assertLess(abs(draws.var() - 4.0) / 4.0, 0.05)

    def test_zero_sigma_has_no_noise(self):
        noise = fl.summed_silo_noise('avg', 0.0, CLIP, 3, 5, fl.RoundRng(0, 0))
        self.assertTrue(np.array_equal(noise, np.zeros(5)))

    # Sub-sampling
    ############################################

    def test_subsampled_round_is_unbiased(self):
        model, federation = small_federation(silos=3, users=6, records=90)
        weights = fl.optimal_weights(federation.histogram())
        config = fl.TrainConfig(sigma=0.0, q_user=0.5)
        full = fl.round_uldp_avg(model, federation, weights, config, fl.RoundRng(0, 1)).params - model.params
        direction = full / np.dot(full, full)

        draws = 400
        projections = []
        for seed in range(draws):
            sub = fl.round_uldp_avg_subsampled(model, federation, weights, config, fl.RoundRng(seed, 1))
            self.assertEqual(sub.trace.sampled.shape, (federation.num_users,))
            projections.append(np.dot(sub.params - model.params, direction))
        mean = float(np.mean(projections))
        stderr = float(np.std(projections, ddof=1)) / math.sqrt(draws)
        self.assertLessEqual(abs(mean - 1.0), 3 * stderr)

    def test_zeroed_weights(self):
        weights = fl.optimal_weights(np.array([[1, 1], [1, 3]]))
        zeroed = weights.zeroed(np.array([True, False]))
        self.assertEqual(zeroed.w[:, 1].tolist(), [0.0, 0.0])
        self.assertEqual(zeroed.active.tolist(), [True, False])

    # Rounds
    ############################################

    def test_round_rng_streams(self):
        rng = fl.RoundRng(5, 2)
        a = rng.silo(0, 'noise').random(3)
        self.assertTrue(np.array_equal(a, fl.RoundRng(5, 2).silo(0, 'noise').random(3)))
        self.assertFalse(np.array_equal(a, rng.silo(1, 'noise').random(3)))
        self.assertFalse(np.array_equal(a, rng.silo(0, 'train').random(3)))
        self.assertFalse(np.array_equal(a, fl.RoundRng(5, 3).silo(0, 'noise').random(3)))
        pair = rng.pair(0, 1, 'train').random(3)
        self.assertTrue(np.array_equal(pair, fl.RoundRng(5, 2).pair(0, 1, 'train').random(3)))
        self.assertFalse(np.array_equal(pair, rng.pair(0, 2, 'train').random(3)))

    def test_local_delta_empty_shard(self):
        model, federation = small_federation()
        empty = federation.shards[0][0].filtered(np.zeros(len(federation.shards[0][0]), dtype=bool))
        result = fl.local_delta(model, empty, 0.1, 2)
        self.assertTrue(result.empty)
        self.assertTrue(np.array_equal(result.delta, np.zeros(model.dim)))

    def test_threaded_rounds_match_serial(self):
        model, federation = small_federation(silos=3, users=5)
        weights = fl.optimal_weights(federation.histogram())
        serial = fl.round_uldp_avg(model, federation, weights, fl.TrainConfig(workers=1), fl.RoundRng(0, 0))
        threaded = fl.round_uldp_avg(model, federation, weights, fl.TrainConfig(workers=3), fl.RoundRng(0, 0))
        self.assertTrue(np.array_equal(serial.params, threaded.params))

    def test_avg_round_update(self):
        model, federation = small_federation(silos=2, users=4)
        weights = fl.optimal_weights(federation.histogram())
        config = fl.TrainConfig(sigma=0.0, eta_g=2.0)
        new = fl.round_uldp_avg(model, federation, weights, config, fl.RoundRng(0, 0))
        expected = config.eta_g / (4 * 2) * new.trace.aggregate
        self.assertTrue(np.allclose(new.params - model.params, expected))
        self.assertTrue(np.array_equal(new.trace.noise, np.zeros(model.dim)))

    def test_custom_aggregator_is_used(self):
        model, federation = small_federation(silos=2, users=3)
        weights = fl.optimal_weights(federation.histogram())
        calls = []

        def aggregator(pairs, w):
            calls.append(pairs.clipped.shape)
            return fl.weighted_aggregate(pairs, w)

        fl.round_uldp_avg(model, federation, weights, fl.TrainConfig(), fl.RoundRng(0, 0), aggregator)
        self.assertEqual(calls, [(2, 3, model.dim)])

    def test_sgd_round_moves_against_gradient(self):
        model, federation = small_federation(silos=2, users=4)
        weights = fl.optimal_weights(federation.histogram())
        new = fl.round_uldp_sgd(model, federation, weights, fl.TrainConfig(sigma=0.0), fl.RoundRng(0, 0))
        self.assertTrue(np.allclose(new.params - model.params, -1.0 / 8 * new.trace.aggregate))

    def test_default_rounds_reduce_loss(self):
        model, federation = small_federation(silos=2, users=4, records=200)
        data = [federation.silo_data(s) for s in range(federation.num_silos)]
        x = np.concatenate([d.x for d in data])
        y = np.concatenate([d.y for d in data])
        config = fl.TrainConfig(eta_l=0.5, epochs=2)
        start, _ = model.architecture.evaluate(model.params, x, y)
        for r in range(5):
            model = fl.round_default(model, federation, config, fl.RoundRng(0, r))
        end, _ = model.architecture.evaluate(model.params, x, y)
        self.assertLess(end, start)

    def test_naive_and_group_rounds_run(self):
        model, federation = small_federation(silos=2, users=4)
        config = fl.TrainConfig(sigma=1.0, gamma=0.5)
        naive = fl.round_uldp_naive(model, federation, config, fl.RoundRng(0, 0))
        self.assertEqual(naive.params.shape, model.params.shape)

        flags = np.zeros(flag_space(federation), dtype=bool)
        group = fl.round_uldp_group(model, federation, flags, config, fl.RoundRng(0, 0))
        self.assertTrue(np.all(np.isfinite(group.params)))

    def test_filter_federation(self):
        _, federation = small_federation(silos=2, users=3)
        flags = np.zeros(flag_space(federation), dtype=bool)
        flags[::2] = True
        filtered = fl.filter_federation(federation, flags)
        for silo in filtered.shards:
            for shard in silo:
                self.assertTrue(np.all(shard.index % 2 == 0))

    def test_local_delta_steps(self):
        model, federation = small_federation(silos=1, users=1, records=20)
        shard = federation.shards[0][0]
        self.assertLess(len(shard), fl.MINI_BATCH)
        arch = model.architecture

        self.assertTrue(np.array_equal(fl.local_delta(model, shard, 0.0, 3).delta, np.zeros(model.dim)))

        _, grad = arch.loss_grad(model.params, shard.x, shard.y)
        self.assertTrue(np.allclose(fl.local_delta(model, shard, 0.3, 1).delta, -0.3 * grad, rtol=0, atol=1e-15))

        first = model.params - 0.3 * grad
        _, second_grad = arch.loss_grad(first, shard.x, shard.y)
        expected = first - 0.3 * second_grad - model.params
        self.assertTrue(np.allclose(fl.local_delta(model, shard, 0.3, 2).delta, expected, rtol=0, atol=1e-14))

    def test_dp_sgd_single_record(self):
        arch = SoftmaxRegression(2, 2)
        model = fl.ModelState(arch.init_params(np.random.default_rng(0)), arch)
        record = Shard(np.array([[3.0, 4.0]]), np.array([0]), np.array([0]))
        # softmax residual at zero params is (-1/2, 1/2); W is (dim x classes) row-major, then b
        grad = np.array([-1.5, 1.5, -2.0, 2.0, -0.5, 0.5])
        self.assertAlmostEqual(np.linalg.norm(grad), math.sqrt(13))

        local = fl.dp_sgd_epochs(model, record, 1.0, 0.0, 0.5, 1.0, 1, np.random.default_rng(0))
        self.assertTrue(np.allclose(local.params, -0.5 * grad / math.sqrt(13), rtol=0, atol=1e-15))

    def test_dp_sgd_full_batch_and_clip_cap(self):
        model, federation = small_federation(silos=1, users=1, records=40)
        data = federation.silo_data(0)
        arch = model.architecture

        unclipped = fl.dp_sgd_epochs(model, data, math.inf, 0.0, 0.3, 1.0, 1, np.random.default_rng(0))
        _, grad = arch.loss_grad(model.params, data.x, data.y)
        self.assertTrue(np.allclose(unclipped.params, model.params - 0.3 * grad, rtol=0, atol=1e-14))

        # every per-record gradient is capped, so the full-lot mean is too
        clip = 1e-3
        capped = fl.dp_sgd_epochs(model, data, clip, 0.0, 1.0, 1.0, 1, np.random.default_rng(0))
        _, per_record = arch.per_example_grads(model.params, data.x, data.y)
        self.assertTrue(np.all(np.linalg.norm(per_record, axis=1) > clip))
        self.assertLessEqual(np.linalg.norm(capped.params - model.params), clip + 1e-15)

    def test_group_round_flags(self):
        model, federation = small_federation(silos=2, users=4, records=120)
        config = fl.TrainConfig(sigma=1.0, gamma=0.5)
        rng = fl.RoundRng(0, 1)

        # every record flagged: same as DP-SGD on the unfiltered silos
        flagged = fl.round_uldp_group(model, federation, np.ones(flag_space(federation), dtype=bool), config, rng)
        deltas = [
            fl.dp_sgd_epochs(model, federation.silo_data(s), config.clip, config.sigma, config.eta_l,
                             config.gamma, config.epochs, rng.silo(s, 'dpsgd')).params - model.params
            for s in range(federation.num_silos)
        ]
        noise = np.sum([np.zeros(model.dim) for _ in deltas], axis=0)
        expected = model.params + config.eta_g * (np.sum(deltas, axis=0) + noise) / len(deltas)
        self.assertTrue(np.array_equal(flagged.params, expected))

        # unflagged records have no influence at all
        flags = np.zeros(flag_space(federation), dtype=bool)
        flags[::3] = True
        scramble = np.random.default_rng(5)
        shards = []
        for silo in federation.shards:
            row = []
            for shard in silo:
                off = ~flags[shard.index]
                x, y = shard.x.copy(), shard.y.copy()
                x[off] = scramble.normal(0, 10, size=(int(off.sum()), x.shape[1]))
                y[off] = 1 - y[off]
                row.append(Shard(x, y, shard.index))
            shards.append(row)
        scrambled = Federation(shards, federation.num_users, federation.num_silos)
        base = fl.round_uldp_group(model, federation, flags, config, rng)
        other = fl.round_uldp_group(model, scrambled, flags, config, rng)
        self.assertTrue(np.array_equal(base.params, other.params))

        # nothing flagged and no noise: the model does not move
        quiet = fl.round_uldp_group(model, federation, np.zeros_like(flags), replace(config, sigma=0.0), rng)
        self.assertTrue(np.array_equal(quiet.params, model.params))

    def test_default_round_is_naive_without_noise_or_clipping(self):
        model, federation = small_federation(silos=3, users=5)
        config = fl.TrainConfig(sigma=0.0, clip=math.inf, eta_l=0.3)
        default = fl.round_default(model, federation, config, fl.RoundRng(0, 1))
        naive = fl.round_uldp_naive(model, federation, config, fl.RoundRng(0, 1))
        self.assertTrue(np.array_equal(default.params, naive.params))

    def test_avg_round_with_one_user_is_local_sgd(self):
        model, federation = small_federation(silos=1, users=1, records=20)
        shard = federation.shards[0][0]
        config = fl.TrainConfig(sigma=0.0, clip=1e6, eta_l=0.3, epochs=2)
        new = fl.round_uldp_avg(model, federation, fl.optimal_weights(federation.histogram()), config, fl.RoundRng(0, 1))

        params = model.params.copy()
        for _ in range(config.epochs):
            _, grad = model.architecture.loss_grad(params, shard.x, shard.y)
            params = params - config.eta_l * grad
        self.assertTrue(np.allclose(new.params, params, rtol=0, atol=1e-12))

    def test_utility_ordering(self):
        model, federation = small_federation(silos=3, users=30, records=600)
        data = [federation.silo_data(s) for s in range(federation.num_silos)]
        x = np.concatenate([d.x for d in data])
        y = np.concatenate([d.y for d in data])
        weights = fl.optimal_weights(federation.histogram())
        config = fl.TrainConfig(sigma=2.0, eta_l=0.5)
        steps = {
            'default': lambda m, r: fl.round_default(m, federation, config, r),
            'avg-w': lambda m, r: fl.round_uldp_avg(m, federation, weights, config, r),
            'naive': lambda m, r: fl.round_uldp_naive(m, federation, config, r),
        }
        losses = {}
        for name, step in steps.items():
            current = model
            for r in range(10):
                current = step(current, fl.RoundRng(0, r))
            losses[name], _ = current.architecture.evaluate(current.params, x, y)
        self.assertLess(losses['default'], losses['avg-w'])
        self.assertLess(losses['avg-w'], losses['naive'])

    def test_train_config_problems(self):
        config = fl.TrainConfig(eta_l=0, clip=-1, sigma=-1, rounds=0, q_user=0)
        self.assertEqual(len(config.problems()), 5)
        with self.assertRaises(DomainError):
            config.validate()
        self.assertTrue(math.isclose(fl.TrainConfig().q_user, 1.0))
