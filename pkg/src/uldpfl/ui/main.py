import os
import sys
import json
import math
import socket
import logging
import traceback
from dataclasses import asdict
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from ..libraries.logger import configure_logging
from ..libraries.runtime_args import RuntimeArgs, experiment_overrides, parse_args
from ..libraries.errors import ConfigError, PreflightError, UldpError
from ..libraries.grid_parser import parse_int_list, parse_order_grid

log = logging.getLogger('core')

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PREFLIGHT = 3

# determine if the execution is an instance of a flask reload
# happens on file change with reloader enabled
IS_FLASK_RELOAD = os.environ.get("WERKZEUG_RUN_MAIN")


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except ValueError as e:
        print(e, file=sys.stderr)
        return EXIT_CONFIG
    configure_logging(args.loglevel, args.logfile, serving=args.command == 'serve')

    try:
        return COMMANDS[args.command](args) or EXIT_OK
    except PreflightError as e:
        log.error(str(e))
        return EXIT_PREFLIGHT
    except (ConfigError, ValueError) as e:
        log.error(str(e))
        log.debug(traceback.format_exc())
        return EXIT_CONFIG
    except UldpError as e:
        log.error(str(e))
        log.debug(traceback.format_exc())
        return 1


def _emit(record: Dict[str, Any]):
    """One JSON line on stdout; non-finite floats become strings."""
    clean = {k: (str(v) if isinstance(v, float) and not math.isfinite(v) else v) for k, v in record.items()}
    print(json.dumps(clean))


def _output_dir() -> Path:
    from ..libraries.experiment import default_output_dir
    return Path(default_output_dir())


def _grid(options: Dict[str, Any]):
    return parse_order_grid(options['grid']) if options.get('grid') else None


# Subcommands
############################################

def simulate(args: RuntimeArgs) -> int:
    from ..libraries.config_manager import load_experiment_config
    from ..libraries.experiment import run_experiment

    config = load_experiment_config(args.options.get('config'), experiment_overrides(args.options))
    results = run_experiment(config)
    print(results)
    log.info(f'metrics written to {Path(config.output_dir) / config.name}')
    return EXIT_OK


def compare(args: RuntimeArgs) -> int:
    from ..libraries.config_manager import load_experiment_config
    from ..libraries.experiment import compare_weighting

    config = load_experiment_config(args.options.get('config'), experiment_overrides(args.options))
    print(compare_weighting(config))
    return EXIT_OK


def account(args: RuntimeArgs) -> int:
    from ..libraries import privacy_accounting as acc
    from ..libraries.experiment import sweep_group_conversion, write_group_sweep_csv

    opts = args.options
    sigma, q, steps, delta, k = opts['sigma'], opts['q'], opts['steps'], opts['delta'], opts['k']
    grid = _grid(opts)
    mechanism = opts['mechanism']

    if opts.get('k_sweep'):
        rows = sweep_group_conversion(sigma, q, steps, delta, parse_int_list(opts['k_sweep']), grid)
        for row in rows:
            _emit(asdict(row))
        path = write_group_sweep_csv(opts.get('out') or _output_dir() / 'gdp_sweep.csv', rows)
        log.info(f'sweep written to {path}')
        return EXIT_OK

    if mechanism == 'naive-avg':
        epsilon, alpha = acc.budget_uldp_naive_avg_order(sigma, steps, delta, grid)
        _emit({'mechanism': mechanism, 'epsilon': epsilon, 'alpha': alpha, 'delta': delta})
    elif mechanism == 'avg-sub':
        epsilon, alpha = acc.budget_uldp_avg_subsampled(sigma, q, steps, delta, grid)
        _emit({'mechanism': mechanism, 'epsilon': epsilon, 'alpha': alpha, 'delta': delta})
    elif mechanism == 'dp-sgd':
        epsilon, alpha = acc.budget_dp_sgd(sigma, q, steps, delta, grid)
        _emit({'mechanism': mechanism, 'epsilon': epsilon, 'alpha': alpha, 'delta': delta})
    elif mechanism == 'group':
        budget = acc.budget_uldp_group(sigma, q, steps, k, delta, grid)
        _emit({'mechanism': mechanism, **asdict(budget)})
    else:
        if not grid or not opts.get('rho'):
            raise ConfigError(['raw-curve needs --grid and --rho'])
        curve = acc.RdpCurve(grid, [float(r) for r in opts['rho'].split(',')])
        epsilon, alpha = acc.rdp_to_dp(curve, delta)
        _emit({'mechanism': mechanism, 'epsilon': epsilon, 'alpha': alpha, 'delta': delta})
        if k > 1:
            _emit({'mechanism': 'raw-curve-group', **asdict(acc.normal_group_epsilon_search(curve, delta, k))})
    return EXIT_OK


def allocate(args: RuntimeArgs) -> int:
    from ..libraries.allocation import DistributionSpec, allocate as build_allocation
    from ..libraries.dataset import DatasetSpec, generate_dataset, write_allocation_csv

    opts = args.options
    spec = DistributionSpec(
        kind=opts['dist'],
        alpha_user=opts['alpha_user'],
        alpha_silo=opts['alpha_silo'],
        primary_fraction=opts['primary_fraction'],
        seed=opts['seed'],
        min_records_per_pair=opts['min_records'],
    )
    problems = spec.problems()
    if problems:
        raise ConfigError(problems)
    allocation = build_allocation(spec, opts['records'], opts['users'], opts['silos'])

    features = labels = None
    if opts.get('features'):
        data = generate_dataset(DatasetSpec(dim=opts['dim'], classes=opts['classes'], records=opts['records']),
                                allocation, opts['seed'])
        features, labels = data.features, data.labels
    path = write_allocation_csv(opts.get('out') or _output_dir() / 'allocation.csv', allocation, features, labels)
    _emit({'path': str(path), 'records': allocation.num_records, 'users': allocation.num_users,
           'silos': allocation.num_silos})
    return EXIT_OK


def protocol_bench(args: RuntimeArgs) -> int:
    from ..libraries.secure_protocol import BenchScenario, bench_phases

    opts = args.options
    scenario = BenchScenario(
        silos=opts['silos'], users=opts['users'], dim=opts['dim'], rounds=opts['rounds'],
        key_bits=opts['key_bits'], precision=opts['precision'], n_max=opts['n_max'], seed=opts['seed'],
    )
    result = bench_phases(scenario)
    out = Path(opts.get('out') or _output_dir() / 'protocol_bench')
    result.transcript.write_timings_csv(out / 'timings.csv')
    result.transcript.dump_jsonl(out / 'transcript.jsonl')
    with open(out / 'correctness.json', 'w') as f:
        json.dump(result.report(), f, indent=2)
    print(result.transcript)
    _emit({'correct': result.correct, 'max_abs_error': result.max_abs_error, 'tolerance': result.tolerance})
    return EXIT_OK if result.correct else 1


def sweep_gdp(args: RuntimeArgs) -> int:
    from ..libraries.experiment import sweep_group_conversion, write_group_sweep_csv

    opts = args.options
    rows = sweep_group_conversion(opts['sigma'], opts['q'], opts['steps'], opts['delta'],
                                  parse_int_list(opts['k']), _grid(opts))
    for row in rows:
        _emit(asdict(row))
    path = write_group_sweep_csv(opts.get('out') or _output_dir() / 'gdp_sweep.csv', rows)
    log.info(f'sweep written to {path}')
    return EXIT_OK


def serve(args: RuntimeArgs) -> int:
    from .app import start_webserver

    if IS_FLASK_RELOAD:
        log.info('Flask reloaded app.')
    args.port = get_valid_port(args.port)
    log.info(f'API started: http://127.0.0.1:{args.port}/api')
    try:
        start_webserver(args)
        log.info('Exiting...')
    except Exception:
        # showing error in debug only because this is handled gracefully
        log.debug('Failed to start. Traceback below')
        log.debug(traceback.format_exc())
        return 1
    return EXIT_OK


def get_valid_port(port: int):
    """
    Get the first available port starting from the specified port
    """
    while True:
        with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
            if s.connect_ex(('localhost', port)) != 0:
                return port
            port += 1


COMMANDS: Dict[str, Callable[[RuntimeArgs], int]] = {
    'simulate': simulate,
    'compare-weighting': compare,
    'account': account,
    'allocate': allocate,
    'protocol-bench': protocol_bench,
    'sweep-gdp': sweep_gdp,
    'serve': serve,
}


if __name__ == "__main__":
    sys.exit(main())
