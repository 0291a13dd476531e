from ...libraries.experiment import ExperimentManager
import logging
# defining here so blueprints can access the same
# manager instance
experiment_manager = ExperimentManager()

log = logging.getLogger('Blueprints')
