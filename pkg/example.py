from src.uldpfl import ExperimentManager, ExperimentConfig
from src.uldpfl.libraries.fl_core import TrainConfig
from src.uldpfl.libraries.allocation import DistributionSpec

em = ExperimentManager()

cfg = ExperimentConfig(
    name='example',
    algorithm='avg-w',
    num_users=50,
    num_silos=5,
    train=TrainConfig(rounds=20, sigma=5.0, eta_g=10.0),
    distribution=DistributionSpec(kind='zipf'),
)

try:
    runner = em.new_experiment(cfg)

    runner.debug_active_experiment()
except KeyboardInterrupt:
    runner.terminate()

print(runner.results)
