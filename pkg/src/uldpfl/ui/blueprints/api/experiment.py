from . import api_bp
from ....libraries.config_manager import deep_merge, load_experiment_config
from ....libraries.errors import ConfigError
from .. import experiment_manager

from flask import request, jsonify
import traceback

# Experiment API
############################################
@api_bp.route('/api/experiment', methods=['POST'])
@api_bp.route('/api/experiment/threaded', methods=['POST'])
def start_experiment_threaded():
    try:
        config = get_experiment_config()
        runner = experiment_manager.new_experiment(config)

        return jsonify({'status': 'running', 'experiment_id': runner.uid})
    except ConfigError as e:
        return jsonify({'status': 'invalid', 'problems': e.problems}), 400
    except:
        return jsonify({'status': 'error', 'traceback': traceback.format_exc()}), 500


@api_bp.route('/api/experiment/async', methods=['POST'])
def start_experiment_async():
    try:
        config = get_experiment_config()
    except ConfigError as e:
        return jsonify({'status': 'invalid', 'problems': e.problems}), 400
    runner = experiment_manager.new_experiment(config)
    experiment_manager.wait_until_complete(runner.uid)

    return jsonify({'status': runner.results.stage, 'experiment_id': runner.uid})

@api_bp.route('/api/experiment/<experiment_id>', methods=['GET'])
def get_experiment(experiment_id):
    runner = experiment_manager.get_experiment(experiment_id)
    if runner is None:
        return jsonify({'status': 'error', 'msg': f'no experiment {experiment_id}'}), 404
    return jsonify(runner.results.export())

@api_bp.route('/api/experiment/<experiment_id>/summary', methods=['GET'])
def get_experiment_summary(experiment_id):
    runner = experiment_manager.get_experiment(experiment_id)
    if runner is None:
        return jsonify({'status': 'error', 'msg': f'no experiment {experiment_id}'}), 404
    return jsonify({
        'running': runner.running,
        'percent_complete': runner.calc_percent_complete(),
        'stage': runner.results.stage,
        'runtime': runner.results.get_runtime(),
        'rounds': {
            'done': runner.rounds_done,
            'total': runner.rounds_total
        },
        'errors': len(runner.results.errors)
    })

@api_bp.route('/api/experiment/<experiment_id>/terminate', methods=['GET'])
def terminate_experiment(experiment_id):
    runner = experiment_manager.get_experiment(experiment_id)
    if runner is None:
        return jsonify({'success': False}), 404
    runner.terminate()
    return jsonify({'success': True})

def get_experiment_config():
    """
    pulls config from the request body: an optional 'preset' name
    plus ExperimentConfig fields that override it
    """
    data = dict(request.get_json() or {})
    preset = data.pop('preset', None)
    return load_experiment_config(preset, data)
