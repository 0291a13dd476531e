import argparse
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional

COMMANDS = ('simulate', 'account', 'allocate', 'protocol-bench', 'sweep-gdp', 'compare-weighting', 'serve')
VALID_LOG_LEVELS = ['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL']
ACCOUNT_MECHANISMS = ('naive-avg', 'avg-sub', 'group', 'dp-sgd', 'raw-curve')

# simulate / compare-weighting flag -> ExperimentConfig path
EXPERIMENT_FLAGS = {
    'name': ('name',),
    'algo': ('algorithm',),
    'k': ('k',),
    'users': ('num_users',),
    'silos': ('num_silos',),
    'delta': ('delta',),
    'model': ('model',),
    'hidden': ('hidden',),
    'repeats': ('repeats',),
    'seed': ('seed',),
    'flag_policy': ('flag_policy',),
    'secure': ('secure_mode',),
    'sigma': ('train', 'sigma'),
    'clip': ('train', 'clip'),
    'rounds': ('train', 'rounds'),
    'epochs': ('train', 'epochs'),
    'eta_l': ('train', 'eta_l'),
    'eta_g': ('train', 'eta_g'),
    'q_user': ('train', 'q_user'),
    'gamma': ('train', 'gamma'),
    'workers': ('train', 'workers'),
    'dist': ('distribution', 'kind'),
    'alpha_user': ('distribution', 'alpha_user'),
    'alpha_silo': ('distribution', 'alpha_silo'),
    'primary_fraction': ('distribution', 'primary_fraction'),
    'min_records': ('distribution', 'min_records_per_pair'),
    'records': ('dataset', 'records'),
    'dim': ('dataset', 'dim'),
    'classes': ('dataset', 'classes'),
    'non_iid': ('dataset', 'non_iid'),
    'key_bits': ('fixed_point', 'key_bits'),
    'precision': ('fixed_point', 'precision'),
    'n_max': ('fixed_point', 'n_max'),
}


@dataclass
class RuntimeArgs:
    command: str = 'serve'
    reloader: bool = False
    port: int = 5001
    logfile: bool = False
    loglevel: str = 'INFO'
    # every subcommand flag that was given, by dest name
    options: Dict[str, Any] = field(default_factory=dict)


def _group_flags(parser: argparse.ArgumentParser):
    parser.add_argument('--sigma', type=float, default=5.0, help='Noise multiplier')
    parser.add_argument('--q', type=float, default=1.0, help='Sampling rate (record-level for group/dp-sgd, user-level for avg-sub)')
    parser.add_argument('--steps', type=int, default=1, help='Composition count (rounds, or total local steps)')
    parser.add_argument('--delta', type=float, default=1e-5, help='Target delta')
    parser.add_argument('--grid', default=None, help='RDP order grid override, e.g. "1.1-10.9:0.1, 2-512"')


def _experiment_flags(parser: argparse.ArgumentParser):
    # defaults are None so only explicit flags override the config file
    parser.add_argument('--config', default=None, help='Experiment JSON file or shipped preset name')
    parser.add_argument('--name', default=None)
    parser.add_argument('--algo', default=None, help='default, naive, group, sgd, avg, avg-w or avg-sub')
    parser.add_argument('--k', default=None, help='Group size for --algo group (integer, max or median)')
    parser.add_argument('--sigma', type=float, default=None)
    parser.add_argument('--clip', type=float, default=None)
    parser.add_argument('--rounds', type=int, default=None)
    parser.add_argument('--epochs', type=int, default=None)
    parser.add_argument('--eta-l', dest='eta_l', type=float, default=None)
    parser.add_argument('--eta-g', dest='eta_g', type=float, default=None)
    parser.add_argument('--q-user', dest='q_user', type=float, default=None)
    parser.add_argument('--gamma', type=float, default=None, help='Record sampling rate of the group baseline')
    parser.add_argument('--workers', type=int, default=None, help='Threads used for per-silo work')
    parser.add_argument('--dist', default=None, help='uniform, zipf or fixed-zipf')
    parser.add_argument('--alpha-user', dest='alpha_user', type=float, default=None)
    parser.add_argument('--alpha-silo', dest='alpha_silo', type=float, default=None)
    parser.add_argument('--primary-fraction', dest='primary_fraction', type=float, default=None)
    parser.add_argument('--min-records', dest='min_records', type=int, default=None)
    parser.add_argument('--users', type=int, default=None)
    parser.add_argument('--silos', type=int, default=None)
    parser.add_argument('--records', type=int, default=None)
    parser.add_argument('--dim', type=int, default=None)
    parser.add_argument('--classes', type=int, default=None)
    parser.add_argument('--non-iid', dest='non_iid', action='store_const', const=True, default=None)
    parser.add_argument('--model', default=None, help='logreg or mlp')
    parser.add_argument('--hidden', type=int, default=None)
    parser.add_argument('--delta', type=float, default=None)
    parser.add_argument('--repeats', type=int, default=None)
    parser.add_argument('--seed', type=int, default=None)
    parser.add_argument('--flag-policy', dest='flag_policy', default=None, help='stable or random')
    parser.add_argument('--secure', action='store_const', const=True, default=None,
                        help='Aggregate through the encrypted weighting protocol')
    parser.add_argument('--key-bits', dest='key_bits', type=int, default=None)
    parser.add_argument('--precision', type=float, default=None)
    parser.add_argument('--n-max', dest='n_max', type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='uldpfl', description='User-level DP cross-silo FL simulator')
    parser.add_argument('--logfile', action='store_true', help='Log output to uldpfl.log')
    parser.add_argument('--loglevel', default='INFO', help='Set the log level')
    sub = parser.add_subparsers(dest='command')

    simulate = sub.add_parser('simulate', help='Run a training experiment')
    _experiment_flags(simulate)

    compare = sub.add_parser('compare-weighting', help='ULDP-AVG with uniform vs n/N_u weights')
    _experiment_flags(compare)

    account = sub.add_parser('account', help='Query the privacy accountant')
    account.add_argument('--mechanism', default='naive-avg', choices=ACCOUNT_MECHANISMS)
    _group_flags(account)
    account.add_argument('--k', type=int, default=1, help='Group size')
    account.add_argument('--rho', default=None, help='raw-curve: comma-separated rho values matching --grid')
    account.add_argument('--k-sweep', dest='k_sweep', default=None, help='CSV sweep over k, e.g. "1,2,4-64"')
    account.add_argument('--out', default=None, help='CSV path for --k-sweep')

    alloc = sub.add_parser('allocate', help='Generate a record allocation CSV')
    alloc.add_argument('--dist', default='uniform')
    alloc.add_argument('--records', type=int, default=10000)
    alloc.add_argument('--users', type=int, default=100)
    alloc.add_argument('--silos', type=int, default=5)
    alloc.add_argument('--alpha-user', dest='alpha_user', type=float, default=0.5)
    alloc.add_argument('--alpha-silo', dest='alpha_silo', type=float, default=2.0)
    alloc.add_argument('--primary-fraction', dest='primary_fraction', type=float, default=0.8)
    alloc.add_argument('--min-records', dest='min_records', type=int, default=0)
    alloc.add_argument('--seed', type=int, default=0)
    alloc.add_argument('--features', action='store_true', help='Append synthetic features and labels')
    alloc.add_argument('--dim', type=int, default=10)
    alloc.add_argument('--classes', type=int, default=2)
    alloc.add_argument('--out', default=None, help='CSV path (default: $ULDPFL_OUTPUT_DIR/allocation.csv)')

    bench = sub.add_parser('protocol-bench', help='Time the encrypted weighting protocol')
    bench.add_argument('--silos', type=int, default=3)
    bench.add_argument('--users', type=int, default=10)
    bench.add_argument('--dim', type=int, default=8)
    bench.add_argument('--rounds', type=int, default=1)
    bench.add_argument('--key-bits', dest='key_bits', type=int, default=3072)
    bench.add_argument('--precision', type=float, default=1e-10)
    bench.add_argument('--n-max', dest='n_max', type=int, default=2000)
    bench.add_argument('--seed', type=int, default=0)
    bench.add_argument('--out', default=None, help='Output directory')

    sweep = sub.add_parser('sweep-gdp', help='Group epsilon per k via RDP and via normal DP')
    sweep.add_argument('--sigma', type=float, default=5.0)
    sweep.add_argument('--q', type=float, default=0.01)
    sweep.add_argument('--steps', type=int, default=100000)
    sweep.add_argument('--delta', type=float, default=1e-5)
    sweep.add_argument('--k', default='1,2,4,8,16,32,64', help='Group sizes, e.g. "1,2,4-8"')
    sweep.add_argument('--grid', default=None)
    sweep.add_argument('--out', default=None)

    serve = sub.add_parser('serve', help='Start the JSON API')
    serve.add_argument('--reloader', action='store_true', help='Use flask\'s reloader (helpful for local development)')
    serve.add_argument('--port', type=int, default=5001, help='Port to run the webserver on')
    return parser


def parse_args(argv: Optional[List[str]] = None) -> RuntimeArgs:
    args = build_parser().parse_args(argv)
    args_dict: Dict[str, Any] = vars(args)
    if not args_dict.get('command'):
        args_dict['command'] = 'serve'

    # Dynamically map argparse Namespace to the RuntimeArgs dataclass
    field_names = {f.name for f in fields(RuntimeArgs)}
    filtered_args = {name: args_dict[name] for name in field_names if name in args_dict}
    filtered_args['options'] = {
        name: value for name, value in args_dict.items()
        if name not in field_names and value is not None
    }

    filtered_args['loglevel'] = filtered_args['loglevel'].upper()
    if filtered_args['loglevel'] not in VALID_LOG_LEVELS:
        raise ValueError(f"Invalid log level: {filtered_args['loglevel']}. Must be one of: {VALID_LOG_LEVELS}")

    return RuntimeArgs(**filtered_args)


def experiment_overrides(options: Dict[str, Any]) -> Dict[str, Any]:
    """Nested ExperimentConfig dict holding only the flags that were given."""
    nested: Dict[str, Any] = {}
    for flag, path in EXPERIMENT_FLAGS.items():
        if options.get(flag) is None:
            continue
        target = nested
        for key in path[:-1]:
            target = target.setdefault(key, {})
        target[path[-1]] = options[flag]
    return nested
