from .libraries.experiment import (
    ExperimentRunner,
    ExperimentConfig,
    ExperimentManager,
    run_experiment,
)

from .libraries.config_manager import ConfigManager

from .libraries import privacy_accounting, allocation, fl_core, secure_protocol
