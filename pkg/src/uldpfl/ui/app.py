from flask import Flask, jsonify
import traceback
import logging
import os

from ..libraries.runtime_args import RuntimeArgs
from ..libraries.errors import ConfigError, PreflightError

app = Flask(
    __name__
)
log = logging.getLogger('core')

## Import and register BPs
################################

from .blueprints.api import api_bp
from .blueprints import experiment_manager

app.register_blueprint(api_bp)


@app.route('/')
def index():
    """
    lists the routes this server answers, the API has no HTML pages
    """
    routes = sorted(
        rule.rule for rule in app.url_map.iter_rules()
        if rule.endpoint != 'static'
    )
    return jsonify({
        'name': 'uldpfl',
        'routes': routes,
        'experiments': [runner.uid for runner in experiment_manager.experiments],
    })

## External hook to kill flask server
################################

exiting = False
@app.route("/shutdown")
def exit_app():
    global exiting
    exiting = True
    log.info('Received external exit request. Stopping experiments and flask.')
    experiment_manager.terminate_experiments()
    return "Done"

@app.teardown_request
def teardown(exception):
    if exiting:
        os._exit(0)

## Generalized error handling
################################
@app.errorhandler(ConfigError)
def config_error(e: ConfigError):
    return jsonify({'status': 'invalid', 'problems': e.problems}), 400

@app.errorhandler(PreflightError)
def preflight_error(e: PreflightError):
    return jsonify({'status': 'preflight', 'msg': str(e)}), 409

@app.errorhandler(404)
def not_found(e):
    return jsonify({'status': 'error', 'msg': 'no such route'}), 404

@app.errorhandler(500)
def internal_error(e):
    return jsonify({'status': 'error', 'traceback': traceback.format_exc()}), 500

## Webserver creation
################################

def start_webserver(args: RuntimeArgs):
    log.info(f'JSON API listening on port {args.port}')
    app.run(
        host='0.0.0.0',
        port=args.port,
        debug=args.reloader,
        use_reloader=args.reloader
    )
