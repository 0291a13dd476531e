from .test_accounting import AccountingTestCase
from .test_allocation import AllocationTestCase
from .test_api import ApiTestCase
from .test_cli import CliTestCase
from .test_crypto import CryptoTestCase
from .test_env import EnvTestCase
from .test_experiment import ExperimentTestCase
from .test_fl_core import FLCoreTestCase
from .test_models import ModelTestCase
from .test_protocol import ProtocolTestCase
