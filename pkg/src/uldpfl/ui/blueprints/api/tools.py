from flask import request, jsonify
from dataclasses import asdict
from . import api_bp
from ....libraries import privacy_accounting as acc
from ....libraries.grid_parser import parse_order_grid
from ....libraries.errors import UldpError
import traceback
import math


def _finite(record: dict) -> dict:
    return {k: (str(v) if isinstance(v, float) and not math.isfinite(v) else v) for k, v in record.items()}


@api_bp.route('/api/tools/grid/test')
def test_grid():
    grid = request.args.get('grid')
    if not grid: return jsonify({'valid': False, 'msg': 'Grid cannot be blank', 'count': -1})
    try:
        orders = parse_order_grid(grid)
        length = len(orders)
        return jsonify({'valid': True, 'msg': f"{length} order{'s' if length > 1 else ''}", 'count': length})
    except ValueError:
        return jsonify({'valid': False, 'msg': 'invalid grid', 'error': traceback.format_exc(), 'count': -1})


@api_bp.route('/api/tools/account')
def account():
    """
    epsilon for one mechanism: ?mechanism=naive-avg|avg-sub|group|dp-sgd&sigma=&q=&steps=&k=&delta=
    """
    args = request.args
    try:
        mechanism = args.get('mechanism', 'naive-avg')
        sigma = float(args.get('sigma', 5.0))
        q = float(args.get('q', 1.0))
        steps = int(args.get('steps', 1))
        k = int(args.get('k', 1))
        delta = float(args.get('delta', 1e-5))
        grid = parse_order_grid(args['grid']) if args.get('grid') else None

        if mechanism == 'naive-avg':
            epsilon, alpha = acc.budget_uldp_naive_avg_order(sigma, steps, delta, grid)
        elif mechanism == 'avg-sub':
            epsilon, alpha = acc.budget_uldp_avg_subsampled(sigma, q, steps, delta, grid)
        elif mechanism == 'dp-sgd':
            epsilon, alpha = acc.budget_dp_sgd(sigma, q, steps, delta, grid)
        elif mechanism == 'group':
            return jsonify({'valid': True, 'mechanism': mechanism,
                            **_finite(asdict(acc.budget_uldp_group(sigma, q, steps, k, delta, grid)))})
        else:
            return jsonify({'valid': False, 'msg': f'unknown mechanism {mechanism}'})
        return jsonify({'valid': True, 'mechanism': mechanism,
                        **_finite({'epsilon': epsilon, 'alpha': alpha, 'delta': delta})})
    except (UldpError, ValueError) as e:
        return jsonify({'valid': False, 'msg': str(e)})
