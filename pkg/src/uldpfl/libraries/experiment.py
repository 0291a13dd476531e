import os
import csv
import json
import math
import uuid
import logging
import threading
import traceback
from time import time, sleep, perf_counter
from pathlib import Path
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from typing import Any, Callable, Dict, List, Optional, Union

import numpy as np
from tabulate import tabulate

from .allocation import DistributionSpec, allocate, contribution_flags, group_size_choices
from .dataset import DatasetSpec, SyntheticDataset, generate_dataset, training_federation
from .decorators import JobStats, job_tracker, terminator
from .errors import ConfigError, ConvergenceError, EmptyConvertibleGridError, ExperimentTerminationFailure
from .fl_core import (
    ALGORITHMS,
    ModelState,
    RoundRng,
    TrainConfig,
    optimal_weights,
    round_default,
    round_uldp_avg,
    round_uldp_avg_subsampled,
    round_uldp_group,
    round_uldp_naive,
    round_uldp_sgd,
    uniform_weights,
)
from .models import MODEL_KINDS, build_model
from .privacy_accounting import (
    budget_uldp_avg_subsampled,
    budget_uldp_group,
    budget_uldp_naive_avg,
    curve_for,
    NoiseConfig,
    normal_group_epsilon_search,
)
from .secure_protocol import FixedPointSettings, SecureWeighting

log = logging.getLogger('Experiment')

OUTPUT_DIR_ENV = 'ULDPFL_OUTPUT_DIR'
METRIC_COLUMNS = ['round', 'test_loss', 'test_metric', 'epsilon', 'delta', 'alpha_bar', 'wall_ms']
SUMMARY_COLUMNS = [
    'round', 'test_loss_mean', 'test_loss_std', 'test_metric_mean', 'test_metric_std',
    'epsilon', 'delta', 'alpha_bar_mean', 'wall_ms_mean',
]
NAMED_GROUP_SIZES = ('max', 'median')
SECURE_ALGORITHMS = ('avg-w', 'avg-sub')


def default_output_dir() -> str:
    return os.environ.get(OUTPUT_DIR_ENV, './out')


@dataclass
class ExperimentConfig:
    name: str = 'experiment'
    algorithm: str = 'avg-w'
    num_users: int = 100
    num_silos: int = 5
    delta: float = 1e-5
    # group size for the group baseline: an integer, or 'max' / 'median' of the user record counts
    k: Union[int, str] = 8
    flag_policy: str = 'stable'
    model: str = 'logreg'
    hidden: int = 32
    secure_mode: bool = False
    repeats: int = 1
    seed: int = 0
    # off for byte-reproducible metric files
    record_wall_time: bool = True
    output_dir: str = field(default_factory=default_output_dir)
    train: TrainConfig = field(default_factory=TrainConfig)
    distribution: DistributionSpec = field(default_factory=DistributionSpec)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    fixed_point: FixedPointSettings = field(default_factory=FixedPointSettings)

    def __post_init__(self):
        if isinstance(self.k, str) and self.k.isdigit():
            self.k = int(self.k)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExperimentConfig':
        """Build from a JSON object; unknown keys are reported together with every other problem."""
        unknown = []
        config = _dataclass_from_dict(cls, data, unknown, '')
        if unknown:
            raise ConfigError([f'unknown config key: {key}' for key in unknown] + config.problems())
        return config

    @classmethod
    def from_file(cls, path: Path) -> 'ExperimentConfig':
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        return asdict(self)

    def problems(self) -> List[str]:
        found = []
        if self.algorithm not in ALGORITHMS:
            found.append(f'algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}')
        if self.model not in MODEL_KINDS:
            found.append(f'model must be one of {MODEL_KINDS}, got {self.model!r}')
        if self.hidden < 1:
            found.append('hidden must be >= 1')
        if self.num_users < 1 or self.num_silos < 1:
            found.append('num_users and num_silos must be >= 1')
        if not 0 < self.delta < 1:
            found.append('delta must be in (0, 1)')
        if isinstance(self.k, str):
            if self.k not in NAMED_GROUP_SIZES and not self.k.isdigit():
                found.append(f"k must be a positive integer or one of {NAMED_GROUP_SIZES}, got {self.k!r}")
        elif isinstance(self.k, bool) or int(self.k) != self.k or self.k < 1:
            found.append('k must be >= 1')
        if self.flag_policy not in ('stable', 'random'):
            found.append("flag_policy must be 'stable' or 'random'")
        if self.repeats < 1:
            found.append('repeats must be >= 1')
        if self.secure_mode and self.algorithm not in SECURE_ALGORITHMS:
            found.append(f'secure_mode computes n(s,u)/N_u weights and needs algorithm in {SECURE_ALGORITHMS}')
        if self.dataset.records < self.num_users:
            found.append('dataset records must be >= num_users')

        found += self.train.problems()
        found += self.distribution.problems()
        found += self.dataset.problems()
        found += self.fixed_point.problems()
        if self.distribution.per_silo_records is not None:
            if len(self.distribution.per_silo_records) != self.num_silos:
                found.append('per_silo_records needs one entry per silo')
            elif sum(self.distribution.per_silo_records) != self.dataset.records:
                found.append('per_silo_records must sum to dataset records')
        return found

    def validate(self):
        found = self.problems()
        if found:
            raise ConfigError(found)


def _dataclass_from_dict(cls, data: Dict[str, Any], unknown: List[str], prefix: str):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in (data or {}).items():
        if key not in known:
            unknown.append(prefix + key)
            continue
        default = known[key].default_factory() if callable(known[key].default_factory) else None
        if is_dataclass(default) and isinstance(value, dict):
            value = _dataclass_from_dict(type(default), value, unknown, f'{prefix}{key}.')
        kwargs[key] = value
    return cls(**kwargs)


@dataclass
class MetricsRow:
    round: int
    test_loss: float
    test_metric: float
    epsilon: float
    delta: float
    alpha_bar: Optional[float]
    wall_ms: float

    def csv_row(self) -> List[str]:
        return [
            str(self.round), repr(self.test_loss), repr(self.test_metric), repr(self.epsilon),
            repr(self.delta), '' if self.alpha_bar is None else repr(self.alpha_bar), f'{self.wall_ms:.3f}',
        ]


@dataclass(eq=False)
class RunRecord:
    seed: int
    rows: List[MetricsRow] = field(default_factory=list)
    final_model: Optional[ModelState] = None


def epsilon_schedule(config: ExperimentConfig, k_used: Optional[int] = None) -> Callable[[int], float]:
    """Cumulative ULDP epsilon after t rounds of the configured algorithm."""
    train, delta = config.train, config.delta
    if config.algorithm == 'default' or train.sigma == 0:
        return lambda t: math.inf
    if config.algorithm == 'avg-sub':
        return lambda t: budget_uldp_avg_subsampled(train.sigma, train.q_user, t, delta)[0]
    if config.algorithm == 'group':
        steps_per_round = train.epochs * int(math.ceil(1 / train.gamma))
        return lambda t: budget_uldp_group(train.sigma, train.gamma, t * steps_per_round, k_used, delta).epsilon
    # naive, avg, avg-w and sgd share one bound
    return lambda t: budget_uldp_naive_avg(train.sigma, t, delta)


def resolve_group_size(k: Union[int, str], dataset: SyntheticDataset) -> int:
    if isinstance(k, str) and not k.isdigit():
        return group_size_choices(dataset.train_allocation)[k]
    return int(k)


class ExperimentRunner:
    def __init__(self, config: ExperimentConfig):
        config.validate()
        self.config = config
        self.running = False
        self.job_stats = JobStats()
        self.uid = str(uuid.uuid4())
        self.rounds_total = config.train.rounds * config.repeats
        self.rounds_done = 0
        self.results = ExperimentResults(self)
        self.log: logging.Logger = logging.getLogger('Experiment')
        self.log.debug(f'Instantiated with uid: {self.uid}')
        self.log.debug(f'Algorithm: {config.algorithm} | Users: {config.num_users} | Silos: {config.num_silos}')

    @property
    def output_path(self) -> Path:
        return Path(self.config.output_dir) / self.config.name

    def start(self, write: bool = True) -> 'ExperimentResults':
        self.running = True
        self._set_stage('running')
        for rep in range(self.config.repeats):
            if not self.running:
                break
            seed = self.config.seed + rep
            try:
                run = self._run_once(seed)
            except Exception as e:
                self.log.error(f'[{self.uid}] run with seed {seed} failed. details below:\n{traceback.format_exc()}')
                self.results.errors.append({
                    'basic': f'Error in run with seed {seed}: {e}',
                    'traceback': traceback.format_exc(),
                })
                self.running = False
                self._set_stage('failed')
                raise
            self.results.runs.append(run)

        if write and self.results.runs:
            self._set_stage('writing')
            self.results.write(self.output_path)
        self.running = False
        self._set_stage('complete')
        return self.results

    def terminate(self):
        self.running = False
        self._set_stage('terminating')
        for _ in range(20):
            if not len(self.job_stats.running.keys()):
                self._set_stage('terminated')
                return True
            sleep(.5)
        raise ExperimentTerminationFailure(self.job_stats.running)

    def calc_percent_complete(self) -> int:  # 0 - 100
        if not self.running:
            return 100
        return int(100 * self.rounds_done / max(1, self.rounds_total))

    def debug_active_experiment(self):
        """
            Run this after ExperimentManager.new_experiment
            to see the progress of the run
        """
        while self.running:
            os.system('cls' if os.name == 'nt' else 'clear')
            print(f'{self.uid} - {self.config.name} ({self.config.algorithm})')
            print(f'Rounds: {self.rounds_done}/{self.rounds_total} - {self.calc_percent_complete()}%')
            print(self.job_stats)
            sleep(1)

    def _run_once(self, seed: int) -> RunRecord:
        cfg = self.config
        spec = replace(cfg.distribution, seed=cfg.distribution.seed + seed)
        allocation = allocate(spec, cfg.dataset.records, cfg.num_users, cfg.num_silos)
        dataset = generate_dataset(cfg.dataset, allocation, seed)
        federation = training_federation(dataset)
        x_test, y_test = dataset.test_set()

        arch = build_model(cfg.model, cfg.dataset.dim, cfg.dataset.classes, cfg.hidden)
        model = ModelState(arch.init_params(np.random.default_rng(seed)), arch)
        histogram = federation.histogram()

        k_used = None
        flags = None
        if cfg.algorithm == 'group':
            k_used = resolve_group_size(cfg.k, dataset)
            # flags live on dataset positions; only training records compete for the k slots
            flags = np.zeros(allocation.num_records, dtype=bool)
            flags[dataset.train_index] = contribution_flags(dataset.train_allocation, k_used, seed, cfg.flag_policy).flags
            self.log.debug(f'group size k={k_used}, {int(flags.sum())} training records flagged')

        weights = uniform_weights(histogram) if cfg.algorithm == 'avg' else optimal_weights(histogram)
        aggregator = None
        if cfg.secure_mode:
            assert cfg.algorithm in SECURE_ALGORITHMS, cfg.algorithm
            fp = cfg.fixed_point
            aggregator = SecureWeighting(histogram, key_bits=fp.key_bits, precision=fp.precision,
                                         n_max=fp.n_max, count_set=fp.count_set)
            aggregator.setup()

        epsilon_at = epsilon_schedule(cfg, k_used)
        # accounting failures surface before any training
        epsilons = [epsilon_at(t) for t in range(1, cfg.train.rounds + 1)]
        run = RunRecord(seed)
        for t in range(1, cfg.train.rounds + 1):
            start = perf_counter()
            stepped = self._round(model, federation, weights, flags, aggregator, RoundRng(seed, t))
            if stepped is None:
                self.log.info(f'[{self.uid}] stopped after round {t - 1}')
                break
            model = stepped
            wall_ms = (perf_counter() - start) * 1000.0 if cfg.record_wall_time else 0.0

            loss, accuracy = arch.evaluate(model.params, x_test, y_test)
            diagnostics = model.trace.diagnostics if model.trace else None
            run.rows.append(MetricsRow(
                round=t,
                test_loss=loss,
                test_metric=accuracy,
                epsilon=epsilons[t - 1],
                delta=cfg.delta,
                alpha_bar=diagnostics.alpha_bar if diagnostics else None,
                wall_ms=wall_ms,
            ))
            self.rounds_done += 1
            self.log.debug(f'[{self.uid}] seed {seed} round {t}: loss={loss:.4f} acc={accuracy:.4f}')
        run.final_model = model
        return run

    @terminator
    @job_tracker
    def _round(self, model, federation, weights, flags, aggregator, rng: RoundRng) -> ModelState:
        cfg = self.config
        algo, train = cfg.algorithm, cfg.train
        if algo == 'default':
            return round_default(model, federation, train, rng)
        if algo == 'naive':
            return round_uldp_naive(model, federation, train, rng)
        if algo == 'group':
            return round_uldp_group(model, federation, flags, train, rng)
        if algo == 'sgd':
            return round_uldp_sgd(model, federation, weights, train, rng)
        if algo == 'avg-sub':
            return round_uldp_avg_subsampled(model, federation, weights, train, rng, aggregator)
        return round_uldp_avg(model, federation, weights, train, rng, aggregator)

    def _set_stage(self, stage):
        self.log.debug(f'[{self.uid}] Moving to Stage: {stage}')
        self.results.stage = stage
        if not self.running:
            self.results.end_time = time()


class ExperimentResults:
    def __init__(self, runner: ExperimentRunner):
        self.runner = runner
        self.uid = runner.uid
        self.name = runner.config.name
        self.algorithm = runner.config.algorithm
        self.runs: List[RunRecord] = []
        self.errors: List[dict] = []
        self.start_time: float = time()
        self.end_time: Optional[float] = None
        self.stage = 'instantiated'

    @property
    def rows(self) -> List[MetricsRow]:
        """Metrics of the first run."""
        return self.runs[0].rows if self.runs else []

    def summary(self) -> List[dict]:
        """Per-round mean and standard deviation across repeats."""
        if not self.runs:
            return []
        rounds = min(len(run.rows) for run in self.runs)
        out = []
        for i in range(rounds):
            rows = [run.rows[i] for run in self.runs]
            losses = np.array([r.test_loss for r in rows])
            metrics = np.array([r.test_metric for r in rows])
            alphas = [r.alpha_bar for r in rows if r.alpha_bar is not None]
            ddof = 1 if len(rows) > 1 else 0
            out.append({
                'round': rows[0].round,
                'test_loss_mean': float(losses.mean()),
                'test_loss_std': float(losses.std(ddof=ddof)),
                'test_metric_mean': float(metrics.mean()),
                'test_metric_std': float(metrics.std(ddof=ddof)),
                'epsilon': rows[0].epsilon,
                'delta': rows[0].delta,
                'alpha_bar_mean': float(np.mean(alphas)) if alphas else None,
                'wall_ms_mean': float(np.mean([r.wall_ms for r in rows])),
            })
        return out

    def write(self, directory: Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for run in self.runs:
            write_metrics_csv(directory / f'metrics_seed{run.seed}.csv', run.rows)
        with open(directory / 'metrics_summary.csv', 'w', newline='') as f:
            writer = csv.DictWriter(f, fieldnames=SUMMARY_COLUMNS)
            writer.writeheader()
            for row in self.summary():
                writer.writerow(row)
        with open(directory / 'config.json', 'w') as f:
            json.dump(self.runner.config.to_dict(), f, indent=2)
        log.info(f'wrote {len(self.runs)} run(s) to {directory}')
        return directory

    def get_runtime(self):
        if self.runner.running:
            return int(time() - self.start_time)
        return int((self.end_time or time()) - self.start_time)

    def export(self, out_type=dict) -> Union[str, dict]:
        """
            Returns json representation of the experiment
        """
        out = {
            'uid': self.uid,
            'name': self.name,
            'algorithm': self.algorithm,
            'stage': self.stage,
            'running': self.runner.running,
            'percent_complete': self.runner.calc_percent_complete(),
            'run_time': self.get_runtime(),
            'errors': self.errors,
            'runs': [
                {'seed': run.seed, 'rows': [_finite(asdict(row)) for row in run.rows]}
                for run in self.runs
            ],
            'summary': [_finite(row) for row in self.summary()],
        }
        if out_type == str:
            return json.dumps(out, indent=2)
        return out

    def __str__(self):
        data = [
            [row['round'], row['test_loss_mean'], row['test_metric_mean'], row['epsilon'], row['alpha_bar_mean']]
            for row in self.summary()
        ]
        headers = ['Round', 'Test loss', 'Accuracy', 'Epsilon', 'Alpha bar']
        table = tabulate(data, headers=headers, tablefmt='grid')

        buffer = f'Experiment Results - {self.name} ({self.algorithm}) - {self.uid}\n'
        buffer += '---------------------------------------------\n\n'
        buffer += table
        return buffer


def _finite(row: dict) -> dict:
    """JSON has no infinity; non-finite floats export as strings."""
    return {k: (str(v) if isinstance(v, float) and not math.isfinite(v) else v) for k, v in row.items()}


def write_metrics_csv(path: Path, rows: List[MetricsRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow(row.csv_row())
    return path


def run_experiment(config: ExperimentConfig, write: bool = True) -> ExperimentResults:
    return ExperimentRunner(config).start(write)


class ExperimentManager:
    """
    Maintain active and completed experiments in memory for
    future reference
    """
    def __init__(self):
        self.experiments: List[ExperimentRunner] = []

    def new_experiment(self, config: ExperimentConfig) -> ExperimentRunner:
        runner = ExperimentRunner(config)
        self._start(runner)
        self.experiments.append(runner)
        return runner

    def get_experiment(self, uid: str) -> Optional[ExperimentRunner]:
        for runner in self.experiments:
            if runner.uid == uid:
                return runner

    def terminate_experiments(self):
        for runner in self.experiments:
            if runner.running:
                runner.terminate()

    def wait_until_complete(self, uid: str) -> ExperimentRunner:
        runner = self.get_experiment(uid)
        while runner.running:
            sleep(.5)
        return runner

    def _start(self, runner: ExperimentRunner):
        # set before the thread starts so a poll right after launch sees it running
        runner.running = True
        t = threading.Thread(target=self._guarded_start, args=(runner,), daemon=True)
        t.start()
        return t

    @staticmethod
    def _guarded_start(runner: ExperimentRunner):
        try:
            runner.start()
        except Exception:
            # already recorded on runner.results.errors
            pass


# Sweeps and comparisons
############################################

@dataclass
class GroupSweepRow:
    k: int
    epsilon_rdp: float
    epsilon_normal: float
    ratio: float
    k_rdp: int
    lower_bound: bool


def sweep_group_conversion(
        sigma: float,
        q: float,
        steps: int,
        delta: float,
        k_list: List[int],
        orders=None
    ) -> List[GroupSweepRow]:
    """Group epsilon of one DP-SGD mechanism per k, through RDP group privacy and through (eps, delta) group privacy."""
    curve = curve_for(NoiseConfig(sigma=sigma, q=q, steps=steps), orders)
    rows = []
    for k in sorted({int(k) for k in k_list}):
        try:
            rdp = budget_uldp_group(sigma, q, steps, k, delta, orders)
            eps_rdp, k_rdp, lower = rdp.epsilon, rdp.k, rdp.lower_bound
        except EmptyConvertibleGridError as e:
            log.warning(f'k={k}: {e}')
            eps_rdp, k_rdp, lower = math.nan, k, False
        try:
            eps_normal = normal_group_epsilon_search(curve, delta, k).epsilon
        except ConvergenceError as e:
            log.warning(f'k={k}: {e}')
            eps_normal = math.nan
        ratio = eps_rdp / eps_normal if eps_normal and math.isfinite(eps_normal) else math.nan
        rows.append(GroupSweepRow(k, eps_rdp, eps_normal, ratio, k_rdp, lower))
        log.debug(f'k={k}: rdp={eps_rdp:.4g} normal={eps_normal:.4g}')
    return rows


def write_group_sweep_csv(path: Path, rows: List[GroupSweepRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['k', 'epsilon_rdp', 'epsilon_normal', 'ratio'])
        for row in rows:
            writer.writerow([row.k, repr(row.epsilon_rdp), repr(row.epsilon_normal), repr(row.ratio)])
    return path


@dataclass
class WeightingComparison:
    uniform: ExperimentResults
    optimal: ExperimentResults

    def rows(self) -> List[dict]:
        paired = zip(self.uniform.summary(), self.optimal.summary())
        return [{
            'round': u['round'],
            'test_loss_uniform': u['test_loss_mean'],
            'test_loss_optimal': o['test_loss_mean'],
            'test_metric_uniform': u['test_metric_mean'],
            'test_metric_optimal': o['test_metric_mean'],
        } for u, o in paired]

    def write(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        rows = self.rows()
        with open(path, 'w', newline='') as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0]) if rows else ['round'])
            writer.writeheader()
            writer.writerows(rows)
        return path

    def __str__(self):
        data = [list(row.values()) for row in self.rows()]
        headers = ['Round', 'Loss (uniform)', 'Loss (n/N_u)', 'Acc (uniform)', 'Acc (n/N_u)']
        return tabulate(data, headers=headers, tablefmt='grid')


def compare_weighting(config: ExperimentConfig, write: bool = True) -> WeightingComparison:
    """ULDP-AVG with w = 1/|S| against w = n(s,u)/N_u on the same seeds and data."""
    uniform = run_experiment(replace(config, algorithm='avg', secure_mode=False, name=f'{config.name}-avg'), write)
    optimal = run_experiment(replace(config, algorithm='avg-w', name=f'{config.name}-avg-w'), write)
    comparison = WeightingComparison(uniform, optimal)
    if write:
        comparison.write(Path(config.output_dir) / config.name / 'weighting_comparison.csv')
    return comparison
