from flask import request, jsonify
from . import api_bp
from ....libraries.config_manager import ConfigManager

# Experiment preset API
############################################
@api_bp.route('/api/config/list', methods=['GET'])
def get_configs():
    return jsonify(ConfigManager().get_configs())

@api_bp.route('/api/config/<name>', methods=['GET'])
def get_config(name):
    try:
        return jsonify(ConfigManager().get_config(name))
    except ValueError as e:
        return jsonify({'status': 'error', 'msg': str(e)}), 404

@api_bp.route('/api/config/<name>', methods=['POST'])
def create_config(name):
    data = request.get_json()
    return jsonify(ConfigManager().create_config(name, data))

@api_bp.route('/api/config/<name>', methods=['PUT'])
def update_config(name):
    data = request.get_json()
    return jsonify(ConfigManager().update_config(name, data))

@api_bp.route('/api/config/<name>', methods=['DELETE'])
def delete_config(name):
    return jsonify(ConfigManager().delete_config(name))

@api_bp.route('/api/config/validate', methods=['POST'])
def validate_config():
    problems = ConfigManager.config_problems(request.get_json())
    return jsonify({'valid': not problems, 'problems': problems})
