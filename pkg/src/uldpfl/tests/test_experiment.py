import json
import math
import tempfile
import unittest
from dataclasses import replace
from pathlib import Path
from unittest import mock

import numpy as np

from ..libraries import experiment as ex
from ..libraries.allocation import DistributionSpec, allocate
from ..libraries.dataset import DatasetSpec, generate_dataset
from ..libraries.errors import ConfigError, EmptyConvertibleGridError
from ..libraries.fl_core import TrainConfig
from ..libraries.privacy_accounting import (
    budget_uldp_avg_subsampled,
    budget_uldp_group,
    budget_uldp_naive_avg,
)
from ..libraries.secure_protocol import FixedPointSettings


def tiny_config(output_dir: str, **kwargs) -> ex.ExperimentConfig:
    """Used to keep experiment tests fast."""
    base = ex.ExperimentConfig(
        name='tiny',
        algorithm='avg-w',
        num_users=6,
        num_silos=2,
        record_wall_time=False,
        output_dir=output_dir,
        train=TrainConfig(rounds=2, sigma=1.0, eta_l=0.2),
        dataset=DatasetSpec(records=80, dim=3),
    )
    return replace(base, **kwargs)


class ExperimentTestCase(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = self._tmp.name

    def tearDown(self):
        self._tmp.cleanup()

    # Config
    ############################################

    def test_from_dict_nested(self):
        config = ex.ExperimentConfig.from_dict({
            'algorithm': 'avg-sub', 'k': '4',
            'train': {'q_user': 0.5, 'rounds': 3},
            'distribution': {'kind': 'zipf'},
        })
        self.assertEqual(config.k, 4)
        self.assertEqual((config.train.q_user, config.train.rounds), (0.5, 3))
        self.assertEqual(config.distribution.kind, 'zipf')
        self.assertEqual(config.train.clip, TrainConfig().clip)

    def test_config_error_lists_every_problem(self):
        with self.assertRaises(ConfigError) as ctx:
            ex.ExperimentConfig.from_dict({
                'algorithm': 'fedprox',
                'bogus': 1,
                'train': {'eta_l': 0, 'extra': True},
            })
        problems = ctx.exception.problems
        self.assertIn('unknown config key: bogus', problems)
        self.assertIn('unknown config key: train.extra', problems)
        self.assertTrue(any('algorithm' in p for p in problems))
        self.assertTrue(any('eta_l' in p for p in problems))

    def test_secure_mode_needs_weighted_algorithm(self):
        config = tiny_config(self.tmp, algorithm='avg', secure_mode=True)
        self.assertTrue(any('secure_mode' in p for p in config.problems()))
        with self.assertRaises(ConfigError):
            config.validate()

    def test_named_group_sizes(self):
        self.assertEqual(tiny_config(self.tmp, k='median').problems(), [])
        self.assertTrue(tiny_config(self.tmp, k='mean').problems())
        self.assertTrue(tiny_config(self.tmp, k=0).problems())

    # Epsilon wiring
    ############################################

    def test_epsilon_schedules(self):
        config = tiny_config(self.tmp)
        self.assertEqual(ex.epsilon_schedule(config)(3), budget_uldp_naive_avg(1.0, 3, config.delta))

        default = ex.epsilon_schedule(replace(config, algorithm='default'))
        self.assertTrue(math.isinf(default(1)))
        silent = ex.epsilon_schedule(replace(config, train=replace(config.train, sigma=0.0)))
        self.assertTrue(math.isinf(silent(1)))

        sub = ex.epsilon_schedule(replace(config, algorithm='avg-sub', train=replace(config.train, q_user=0.5)))
        self.assertEqual(sub(2), budget_uldp_avg_subsampled(1.0, 0.5, 2, config.delta)[0])

        group = ex.epsilon_schedule(replace(config, algorithm='group'), k_used=4)
        steps = config.train.epochs * int(math.ceil(1 / config.train.gamma))
        self.assertEqual(group(2), budget_uldp_group(1.0, config.train.gamma, 2 * steps, 4, config.delta).epsilon)

    def test_rows_carry_epsilon(self):
        results = ex.run_experiment(tiny_config(self.tmp), write=False)
        self.assertEqual([r.round for r in results.rows], [1, 2])
        for row in results.rows:
            self.assertEqual(row.epsilon, budget_uldp_naive_avg(1.0, row.round, 1e-5))
            self.assertIsNotNone(row.alpha_bar)
            self.assertEqual(row.wall_ms, 0.0)

    def test_default_algorithm_is_not_private(self):
        results = ex.run_experiment(tiny_config(self.tmp, algorithm='default'), write=False)
        self.assertTrue(all(math.isinf(r.epsilon) for r in results.rows))
        self.assertTrue(all(r.alpha_bar is None for r in results.rows))
        exported = json.loads(results.export(str))
        self.assertEqual(exported['runs'][0]['rows'][0]['epsilon'], 'inf')

    # Runs
    ############################################

    def test_metrics_are_reproducible(self):
        first = ex.run_experiment(tiny_config(self.tmp, name='a'))
        second = ex.run_experiment(tiny_config(self.tmp, name='b'))
        a = (Path(self.tmp) / 'a' / 'metrics_seed0.csv').read_bytes()
        b = (Path(self.tmp) / 'b' / 'metrics_seed0.csv').read_bytes()
        self.assertEqual(a, b)
        self.assertTrue(np.array_equal(first.runs[0].final_model.params, second.runs[0].final_model.params))
        self.assertEqual(a.decode().splitlines()[0], ','.join(ex.METRIC_COLUMNS))

    def test_repeats_and_summary(self):
        results = ex.run_experiment(tiny_config(self.tmp, repeats=2, seed=3))
        out = Path(self.tmp) / 'tiny'
        for name in ('metrics_seed3.csv', 'metrics_seed4.csv', 'metrics_summary.csv', 'config.json'):
            self.assertTrue((out / name).is_file(), name)
        summary = results.summary()
        self.assertEqual(len(summary), 2)
        losses = [run.rows[0].test_loss for run in results.runs]
        self.assertAlmostEqual(summary[0]['test_loss_mean'], float(np.mean(losses)))
        self.assertAlmostEqual(summary[0]['test_loss_std'], float(np.std(losses, ddof=1)))
        self.assertEqual(json.loads((out / 'config.json').read_text())['repeats'], 2)
        self.assertIn('Experiment Results', str(results))

    def test_every_algorithm_runs(self):
        for algorithm in ('naive', 'group', 'sgd', 'avg', 'avg-sub'):
            config = tiny_config(self.tmp, algorithm=algorithm, k='max',
                                 train=TrainConfig(rounds=1, sigma=1.0, q_user=0.5, gamma=0.5))
            results = ex.run_experiment(config, write=False)
            row = results.rows[0]
            self.assertTrue(math.isfinite(row.test_loss), algorithm)
            self.assertTrue(row.epsilon > 0, algorithm)

    def test_group_max_on_zipf_federation(self):
        config = tiny_config(self.tmp, algorithm='group', k='max', num_users=5,
                             distribution=DistributionSpec(kind='zipf', alpha_user=2.0),
                             dataset=DatasetSpec(records=1600, dim=3),
                             train=TrainConfig(rounds=1, sigma=1.0, gamma=0.5))
        spec = replace(config.distribution, seed=config.distribution.seed + config.seed)
        allocation = allocate(spec, config.dataset.records, config.num_users, config.num_silos)
        k = ex.resolve_group_size('max', generate_dataset(config.dataset, allocation, config.seed))
        self.assertGreaterEqual(k, 512)

        results = ex.run_experiment(config, write=False)
        row = results.rows[0]
        self.assertTrue(math.isfinite(row.epsilon))
        self.assertGreater(row.epsilon, 0)

    def test_accounting_errors_surface_before_training(self):
        config = tiny_config(self.tmp, algorithm='group', k=4, train=TrainConfig(rounds=2, sigma=1.0, gamma=0.5))
        with mock.patch.object(ex, 'budget_uldp_group', side_effect=EmptyConvertibleGridError(2, 4.0)), \
                mock.patch.object(ex, 'round_uldp_group') as train_round:
            with self.assertRaises(EmptyConvertibleGridError):
                ex.run_experiment(config, write=False)
        train_round.assert_not_called()

    def test_secure_mode_matches_plaintext(self):
        fixed_point = FixedPointSettings(precision=1e-8, n_max=80, key_bits=512)
        plain = ex.run_experiment(tiny_config(self.tmp), write=False)
        secure = ex.run_experiment(tiny_config(self.tmp, secure_mode=True, fixed_point=fixed_point), write=False)
        for p, s in zip(plain.rows, secure.rows):
            self.assertAlmostEqual(p.test_loss, s.test_loss, places=5)
        diff = np.abs(plain.runs[0].final_model.params - secure.runs[0].final_model.params)
        self.assertLess(float(diff.max()), 1e-5)

    def test_manager(self):
        manager = ex.ExperimentManager()
        runner = manager.new_experiment(tiny_config(self.tmp, name='managed'))
        self.assertIs(manager.get_experiment(runner.uid), runner)
        manager.wait_until_complete(runner.uid)
        self.assertEqual(runner.results.stage, 'complete')
        self.assertEqual(runner.calc_percent_complete(), 100)
        self.assertEqual(runner.rounds_done, 2)
        self.assertIsNone(manager.get_experiment('missing'))

    def test_terminated_runner_skips_rounds(self):
        runner = ex.ExperimentRunner(tiny_config(self.tmp))
        runner.running = False
        self.assertIsNone(runner._round(None, None, None, None, None, None))
        self.assertTrue(runner.terminate())
        self.assertEqual(runner.results.stage, 'terminated')

    # Sweeps and comparisons
    ############################################

    def test_group_sweep(self):
        rows = ex.sweep_group_conversion(5.0, 0.01, 1000, 1e-5, [4, 1, 2, 3])
        self.assertEqual([r.k for r in rows], [1, 2, 3, 4])
        self.assertTrue(all(math.isfinite(r.ratio) for r in rows))
        self.assertEqual(rows[0].epsilon_rdp, rows[0].epsilon_normal)
        self.assertTrue(rows[2].lower_bound)

        path = ex.write_group_sweep_csv(Path(self.tmp) / 'sweep.csv', rows)
        lines = path.read_text().splitlines()
        self.assertEqual(lines[0], 'k,epsilon_rdp,epsilon_normal,ratio')
        self.assertEqual(len(lines), 5)

    def test_group_sweep_records_nan_on_small_grid(self):
        rows = ex.sweep_group_conversion(5.0, 0.01, 100, 1e-5, [8], orders=[2.0, 3.0, 4.0])
        self.assertTrue(math.isnan(rows[0].epsilon_rdp))
        self.assertTrue(math.isnan(rows[0].ratio))

    def test_compare_weighting(self):
        comparison = ex.compare_weighting(tiny_config(self.tmp, name='cmp'))
        self.assertEqual(comparison.uniform.algorithm, 'avg')
        self.assertEqual(comparison.optimal.algorithm, 'avg-w')
        self.assertEqual(len(comparison.rows()), 2)
        csv_path = Path(self.tmp) / 'cmp' / 'weighting_comparison.csv'
        self.assertTrue(csv_path.is_file())
        self.assertTrue((Path(self.tmp) / 'cmp-avg' / 'metrics_seed0.csv').is_file())
